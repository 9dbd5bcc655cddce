"""Typed configuration loaded from TOML.

A config file has up to six sections::

    [data]
    [model]
    [train]
    [prior]
    [emission]
    [predict]

Each maps onto a frozen dataclass below.  Missing keys take the defaults,
unknown sections or keys raise :class:`mjplab.errors.ConfigError`.
"""

import dataclasses
import logging
import multiprocessing
import os

from typing import (
    Any,
    Dict,
    List,
    Optional,
    Type,
    TypeVar,
)

try:
    import tomllib  # type: ignore
except ImportError:  # pragma: no cover
    import tomli as tomllib  # type: ignore

import mjplab.readwrite
from mjplab.errors import ConfigError

_LOGGER = logging.getLogger(__name__)

THREADS_ENV = 'MJP_LAB_THREADS'

T = TypeVar('T')


def thread_count() -> int:
    """Worker pool size: ``MJP_LAB_THREADS`` if set, else the CPU count."""
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            n = int(value)
        except ValueError:
            raise ConfigError('%s must be an integer, got %r' % (THREADS_ENV, value))
        if n < 1:
            raise ConfigError('%s must be positive, got %d' % (THREADS_ENV, n))
        return n
    return multiprocessing.cpu_count()


def _positive(section: str, **values: float) -> None:
    for key, value in values.items():
        if not value > 0:
            raise ConfigError('[%s] %s must be positive, got %r' % (section, key, value))


def _choice(section: str, key: str, value: str, choices: List[str]) -> None:
    if value not in choices:
        raise ConfigError('[%s] %s must be one of %r, got %r' % (section, key, choices, value))


@dataclasses.dataclass(frozen=True)
class DataConfig:
    drop_last: bool = False
    """Drop the last observation's time delta instead of measuring it to the horizon."""
    normalize_values: bool = False
    max_series: int = 0
    """Use only the first ``max_series`` records; 0 means all."""
    csv_time_col: str = 't'
    csv_delimiter: str = ','

    def __post_init__(self):
        if self.max_series < 0:
            raise ConfigError('[data] max_series must be nonnegative')
        if len(self.csv_delimiter) != 1:
            raise ConfigError('[data] csv_delimiter must be one character, got %r'
                              % self.csv_delimiter)
        if not self.csv_time_col:
            raise ConfigError('[data] csv_time_col must not be empty')


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    k: int = 2
    hidden: int = 64
    ode_hidden: List[int] = dataclasses.field(default_factory=lambda: [64, 64])
    psi_hidden: List[int] = dataclasses.field(default_factory=lambda: [64, 64])
    lambda_hidden: List[int] = dataclasses.field(default_factory=lambda: [64])
    layer_norm: bool = True
    dropout: float = 0.0
    mercer: bool = False
    mercer_frequencies: int = 10
    mercer_harmonics: int = 10
    posterior: str = 'full'
    """One of ``full``, ``masked`` and ``birth_death``."""
    mask: List[List[int]] = dataclasses.field(default_factory=list)
    mean_field: bool = False
    encoder_substeps: int = 1

    def __post_init__(self):
        _positive('model', k=self.k, hidden=self.hidden, encoder_substeps=self.encoder_substeps)
        _choice('model', 'posterior', self.posterior, ['full', 'masked', 'birth_death'])
        if not 0 <= self.dropout < 1:
            raise ConfigError('[model] dropout must lie in [0, 1), got %r' % self.dropout)
        if self.mercer:
            _positive('model', mercer_frequencies=self.mercer_frequencies,
                      mercer_harmonics=self.mercer_harmonics)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    anneal_factor: float = 0.8
    anneal_period: int = 50
    """Epochs between learning-rate decays."""
    batch_size: int = 32
    epochs: int = 10
    quadrature_points: int = 200
    horizon: float = 1.1
    temperature: float = 1.0
    hard: bool = True
    clip_norm: float = 1.0
    beta_kl: float = 0.0
    substeps: int = 1
    """RK4 steps per union-grid interval in the posterior solve."""
    cov_freeze_steps: int = 300
    seq_anneal_steps: int = 300
    seq_anneal_growth: int = 500
    seq_anneal_initial: int = 10
    seed: int = 0

    def __post_init__(self):
        _positive('train', lr=self.lr, anneal_factor=self.anneal_factor,
                  anneal_period=self.anneal_period,
                  batch_size=self.batch_size, quadrature_points=self.quadrature_points,
                  horizon=self.horizon, temperature=self.temperature, clip_norm=self.clip_norm,
                  substeps=self.substeps, seq_anneal_initial=self.seq_anneal_initial)
        if self.epochs < 0:
            raise ConfigError('[train] epochs must be nonnegative')
        if self.beta_kl < 0:
            raise ConfigError('[train] beta_kl must be nonnegative')
        for key in ('cov_freeze_steps', 'seq_anneal_steps', 'seq_anneal_growth'):
            if getattr(self, key) < 0:
                raise ConfigError('[train] %s must be nonnegative' % key)


@dataclasses.dataclass(frozen=True)
class PriorConfig:
    mode: str = 'implicit'
    """``implicit`` (generator network) or ``explicit`` (trainable rates)."""
    structure: str = 'full'
    """``full``, ``dfr`` or ``lv``."""
    noise_dim: int = 64
    sigma: float = 0.1
    hidden: List[int] = dataclasses.field(default_factory=lambda: [64])
    lr: float = 5e-4
    separate_optimizer: bool = True
    samples: int = 1
    """Prior draws averaged per KL step."""
    init_scale: float = 1.0
    """Typical initial rate; DFR and LV structure parameters start around it."""

    def __post_init__(self):
        _choice('prior', 'mode', self.mode, ['implicit', 'explicit'])
        _choice('prior', 'structure', self.structure, ['full', 'dfr', 'lv'])
        _positive('prior', noise_dim=self.noise_dim, sigma=self.sigma, lr=self.lr,
                  samples=self.samples, init_scale=self.init_scale)


@dataclasses.dataclass(frozen=True)
class EmissionConfig:
    kind: str = 'gaussian'
    """``gaussian`` or ``categorical``."""
    covariance: str = 'diagonal'
    """``diagonal``, ``full`` (Cholesky) or ``fixed``."""
    state_as_mean: bool = False
    hidden: List[int] = dataclasses.field(default_factory=lambda: [64])
    min_variance: float = 1e-6
    fixed_variance: float = 1.0

    def __post_init__(self):
        _choice('emission', 'kind', self.kind, ['gaussian', 'categorical'])
        _choice('emission', 'covariance', self.covariance, ['diagonal', 'full', 'fixed'])
        _positive('emission', min_variance=self.min_variance, fixed_variance=self.fixed_variance)


@dataclasses.dataclass(frozen=True)
class PredictConfig:
    mode: str = 'master'
    """``master`` (solve the prior master equation) or ``gillespie``."""
    samples: int = 100
    prior_samples: int = 100
    rtol: float = 1e-3
    atol: float = 1e-3

    def __post_init__(self):
        _choice('predict', 'mode', self.mode, ['master', 'gillespie'])
        _positive('predict', samples=self.samples, prior_samples=self.prior_samples, rtol=self.rtol,
                  atol=self.atol)


_SECTIONS = {
    'data': DataConfig,
    'model': ModelConfig,
    'train': TrainConfig,
    'prior': PriorConfig,
    'emission': EmissionConfig,
    'predict': PredictConfig,
}


def _coerce(section: str, key: str, default: Any, value: Any) -> Any:
    where = '[%s] %s' % (section, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError('%s must be a boolean, got %r' % (where, value))
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError('%s must be an integer, got %r' % (where, value))
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError('%s must be a number, got %r' % (where, value))
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError('%s must be a string, got %r' % (where, value))
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError('%s must be a list, got %r' % (where, value))
        return value
    return value


def _default_of(field: dataclasses.Field) -> Any:
    if field.default is not dataclasses.MISSING:
        return field.default
    assert field.default_factory is not dataclasses.MISSING
    return field.default_factory()  # type: ignore


def _build(cls: Type[T], section: str, raw: Dict[str, Any]) -> T:
    if not isinstance(raw, dict):
        raise ConfigError('[%s] must be a table' % section)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError('unknown key %r in section [%s]' % (key, section))
        kwargs[key] = _coerce(section, key, _default_of(fields[key]), value)
    return cls(**kwargs)  # type: ignore


@dataclasses.dataclass(frozen=True)
class Config:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    prior: PriorConfig = dataclasses.field(default_factory=PriorConfig)
    emission: EmissionConfig = dataclasses.field(default_factory=EmissionConfig)
    predict: PredictConfig = dataclasses.field(default_factory=PredictConfig)

    def __post_init__(self):
        if self.model.mean_field and self.prior.structure != 'lv':
            raise ConfigError('[model] mean_field requires [prior] structure = "lv"')
        if self.prior.structure == 'dfr' and self.model.k != 6:
            raise ConfigError('[prior] structure "dfr" needs [model] k = 6, got %d' % self.model.k)
        if (self.model.posterior == 'masked' and not self.model.mask
                and self.prior.structure == 'full'):
            raise ConfigError('[model] posterior "masked" needs a mask or a structured prior')

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'Config':
        if not isinstance(raw, dict):
            raise ConfigError('config must be a table, got %r' % type(raw).__name__)
        for section in raw:
            if section not in _SECTIONS:
                raise ConfigError('unknown section [%s]' % section)
        sections = {
            name: _build(klass, name, raw.get(name, {})) for name, klass in _SECTIONS.items()
        }
        return cls(**sections)  # type: ignore

    def replace(self, section: str, **changes: Any) -> 'Config':
        """Copy with some keys of one section changed."""
        updated = dataclasses.replace(getattr(self, section), **changes)
        return dataclasses.replace(self, **{section: updated})


def loads(text: str) -> Config:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError('invalid TOML: %s' % err)
    return Config.from_dict(raw)


def load(path: Optional[str]) -> Config:
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return Config()
    with mjplab.readwrite.open(path, 'rb') as fin:
        text = fin.read().decode(mjplab.readwrite.ENCODING)
    config = loads(text)
    _LOGGER.info('loaded config from %r', path)
    return config
