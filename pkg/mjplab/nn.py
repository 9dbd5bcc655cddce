"""Neural building blocks of the variational model.

Everything is written against :mod:`mjplab.autodiff`, so the same code
computes values outside a :class:`mjplab.autodiff.Graph` and records a
differentiable tape inside one.  Batches are laid out as ``(B, ...)``.
"""

import dataclasses
import logging
import math

from typing import (
    Any,
    Callable,
    Dict,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

import mjplab.autodiff as ad
import mjplab.core
import mjplab.odesolve
import mjplab.simulate
from mjplab.autodiff import Tensor
from mjplab.core import (
    RateLayout,
    TimeSeries,
)
from mjplab.errors import (
    ConfigError,
    DegenerateTemperature,
    DimensionMismatch,
    EmptySeries,
    NonPositiveVariance,
    OutOfWindow,
)
from mjplab.numerics import Rng

_LOGGER = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
INIT_STD = 0.1
"""Standard deviation of N(0, 0.01) weight initialization."""

_ACTIVATIONS: Dict[str, Callable[[Tensor], Tensor]] = {
    'tanh': ad.tanh,
    'relu': ad.relu,
}


def softplus_inverse(y: Any) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 20, y, np.log(np.expm1(np.maximum(y, 1e-12))))


class Module:
    """Walks attributes in definition order to enumerate parameters."""

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        found: List[Tuple[str, Tensor]] = []
        for name, value in vars(self).items():
            found.extend(_collect(name, value))
        return found

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in arrays:
                raise KeyError('missing parameter %r' % name)
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionMismatch(
                    'parameter %r has shape %r, expected %r' % (name, value.shape, p.shape))
            p.data = value.copy()


def _collect(name: str, value: Any) -> List[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        return [(name, value)] if value.requires_grad else []
    if isinstance(value, Module):
        return [('%s.%s' % (name, n), p) for n, p in value.named_parameters()]
    if isinstance(value, (list, tuple)):
        found = []
        for i, item in enumerate(value):
            found.extend(_collect('%s.%d' % (name, i), item))
        return found
    return []


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: Rng, init: str = 'normal') -> None:
        if init == 'kaiming':
            std = math.sqrt(2.0 / n_in)
        else:
            std = INIT_STD
        self.weight = ad.parameter(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = ad.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Mlp(Module):
    """Dense stack; hidden layers get optional layer norm, then activation, then dropout."""

    def __init__(
        self,
        sizes: Sequence[int],
        rng: Rng,
        activation: str = 'tanh',
        layer_norm: bool = False,
        dropout: float = 0.0,
        init: str = 'normal',
    ) -> None:
        assert len(sizes) >= 2, 'an MLP needs input and output sizes: %r' % (sizes, )
        self.sizes = list(sizes)
        self.activation = activation
        self.dropout = dropout
        self.layers = [Linear(a, b, rng, init) for a, b in zip(sizes[:-1], sizes[1:])]
        self.norms: List[Tuple[Tensor, Tensor]] = []
        if layer_norm:
            self.norms = [(ad.parameter(np.ones(n)), ad.parameter(np.zeros(n)))
                          for n in sizes[1:-1]]

    def __call__(self, x: Any, rng: Optional[Rng] = None, train: bool = False) -> Tensor:
        return self.hidden_from(self.layers[0](ad.as_tensor(x)), rng, train)

    def hidden_from(self, z: Tensor, rng: Optional[Rng] = None, train: bool = False) -> Tensor:
        """Continue the forward pass from the output of the first linear layer."""
        act = _ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers[1:]):
            if self.norms:
                gain, bias = self.norms[i]
                z = ad.layer_norm(z, gain, bias)
            z = ad.dropout(act(z), self.dropout, rng, train)
            z = layer(z)
        return z


class GruCell(Module):
    """Gated recurrent unit; gates are ordered update, reset, candidate."""

    def __init__(self, n_in: int, hidden: int, rng: Rng) -> None:
        self.hidden = hidden
        self.w = ad.parameter(rng.normal(0.0, INIT_STD, size=(n_in, 3 * hidden)))
        self.u = ad.parameter(rng.normal(0.0, INIT_STD, size=(hidden, 3 * hidden)))
        self.b = ad.parameter(np.zeros(3 * hidden))

    def __call__(self, x: Any, h: Tensor) -> Tensor:
        n = self.hidden
        gx = ad.matmul(ad.as_tensor(x), self.w) + self.b
        gh = ad.matmul(h, self.u)
        update = ad.sigmoid(gx[:, :n] + gh[:, :n])
        reset = ad.sigmoid(gx[:, n:2 * n] + gh[:, n:2 * n])
        candidate = ad.tanh(gx[:, 2 * n:] + reset * gh[:, 2 * n:])
        return candidate + update * (h - candidate)


@dataclasses.dataclass
class ObservationBatch:
    """Series of one batch aligned on the union of their observation times.

    ``mask[b, m]`` tells whether series ``b`` is observed at ``times[m]``.
    ``deltas`` hold the gap to the next observation of the same series, the
    last one measured to the horizon (or zero with ``drop_last``).
    """
    times: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    deltas: np.ndarray
    positions: List[np.ndarray]
    horizon: float

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_series(cls, series: Sequence[TimeSeries], horizon: float,
                    drop_last: bool = False) -> 'ObservationBatch':
        if not series:
            raise EmptySeries('empty batch')
        dim = series[0].dim
        for s in series:
            if len(s) == 0:
                raise EmptySeries('series without observations')
            if s.dim != dim:
                raise DimensionMismatch(
                    'series of dimension %d in a batch of dimension %d' % (s.dim, dim))
            if s.times[0] < 0 or s.times[-1] >= horizon:
                raise OutOfWindow('observation times must lie in [0, %r), got [%r, %r]' % (
                    horizon, s.times[0], s.times[-1]))

        times = np.unique(np.concatenate([s.times for s in series]))
        mask = np.zeros((len(series), len(times)), dtype=bool)
        values = np.zeros((len(series), len(times), dim))
        deltas = np.zeros((len(series), len(times)))
        positions = []
        for b, s in enumerate(series):
            idx = np.searchsorted(times, s.times)
            mask[b, idx] = True
            values[b, idx] = s.values
            gaps = np.diff(np.append(s.times, horizon))
            if drop_last:
                gaps[-1] = 0.0
            deltas[b, idx] = gaps
            positions.append(idx)
        return cls(times, mask, values, deltas, positions, float(horizon))


class OdeRnnEncoder(Module):
    """Runs backwards from the horizon, evolving a hidden state between observations."""

    def __init__(
        self,
        n_in: int,
        hidden: int,
        ode_hidden: Sequence[int],
        rng: Rng,
        substeps: int = 1,
    ) -> None:
        self.hidden = hidden
        self.substeps = substeps
        self.ode = Mlp([hidden] + list(ode_hidden) + [hidden], rng, activation='tanh')
        self.gru = GruCell(n_in + 1, hidden, rng)

    def evolve(self, h: Tensor, t_from: float, t_to: float) -> Tensor:
        if t_from == t_to:
            return h
        path = mjplab.odesolve.rk4_path(lambda t, y: self.ode(y), h, [t_from, t_to], self.substeps)
        return path[-1]

    def __call__(self, batch: ObservationBatch) -> Tensor:
        h = ad.constant(np.zeros((batch.size, self.hidden)))
        current = batch.horizon
        for m in range(len(batch.times) - 1, -1, -1):
            t = float(batch.times[m])
            h = self.evolve(h, current, t)
            inputs = np.concatenate([batch.values[:, m, :], batch.deltas[:, m:m + 1]], axis=1)
            h = ad.where(batch.mask[:, m:m + 1], self.gru(inputs, h), h)
            current = t
        return self.evolve(h, current, 0.0)


def odernn_encode(
    enc: OdeRnnEncoder,
    series: Any,
    horizon: float,
    drop_last: bool = False,
) -> Tensor:
    """``h_T`` for a batch; ``series`` is an :class:`ObservationBatch` or a list of series."""
    if not isinstance(series, ObservationBatch):
        if isinstance(series, TimeSeries):
            series = [series]
        series = ObservationBatch.from_series(series, horizon, drop_last)
    return enc(series)


class MercerEmbedding(Module):
    """Fourier features ``sqrt|c| * cos/sin(2 pi j t / omega_k)``.

    ``omega_k`` are log-spaced over ``[0.1, 10]``; coefficients start at 1.
    """

    def __init__(self, frequencies: int = 10, harmonics: int = 10) -> None:
        self.omega = np.logspace(-1.0, 1.0, frequencies)
        self.harmonics = harmonics
        self.coef = ad.parameter(np.ones((frequencies, 2 * harmonics)))

    @property
    def dim(self) -> int:
        return self.coef.size

    def __call__(self, t: float) -> Tensor:
        j = np.arange(1, self.harmonics + 1)
        angles = 2.0 * np.pi * np.outer(1.0 / self.omega, j) * t
        basis = np.empty(self.coef.shape)
        basis[:, 0::2] = np.cos(angles)
        basis[:, 1::2] = np.sin(angles)
        scale = ad.sqrt(ad.abs(self.coef) + PROB_FLOOR)
        return ad.reshape(scale * basis, (1, self.dim))


class PosteriorHeads(Module):
    """``Psi``: (h, time features) to positive rates; ``Lambda``: h to the initial distribution."""

    def __init__(
        self,
        hidden: int,
        layout: RateLayout,
        rng: Rng,
        psi_hidden: Sequence[int] = (64, 64),
        lambda_hidden: Sequence[int] = (64, ),
        layer_norm: bool = False,
        dropout: float = 0.0,
        embedding: Optional[MercerEmbedding] = None,
    ) -> None:
        self.hidden = hidden
        self.layout = layout
        self.embedding = embedding
        time_dim = embedding.dim if embedding is not None else 1
        self.psi = Mlp([hidden + time_dim] + list(psi_hidden) + [layout.n_rates], rng,
                       activation='tanh', layer_norm=layer_norm, dropout=dropout)
        self.lam = Mlp([hidden] + list(lambda_hidden) + [layout.k], rng,
                       activation='relu', layer_norm=layer_norm, dropout=dropout, init='kaiming')

    def time_features(self, t: float) -> Tensor:
        if self.embedding is not None:
            return self.embedding(t)
        return ad.constant(np.array([[t]]))

    def bind(self, h: Tensor, rng: Optional[Rng] = None, train: bool = False) -> 'PosteriorRates':
        return PosteriorRates(self, h, rng, train)

    def initial(self, h: Tensor, rng: Optional[Rng] = None, train: bool = False) -> Tensor:
        return ad.softmax(self.lam(h, rng, train), axis=-1)


class PosteriorRates:
    """Rates ``g(t)`` of one batch with the hidden-state projection done once.

    Values are cached per time so that RK4 stages shared between steps are
    evaluated once.
    """

    def __init__(self, heads: PosteriorHeads, h: Tensor, rng: Optional[Rng], train: bool) -> None:
        self.heads = heads
        self.rng = rng
        self.train = train
        first = heads.psi.layers[0]
        n = heads.hidden
        self._from_h = ad.matmul(h, first.weight[:n]) + first.bias
        self._w_time = first.weight[n:]
        self._cache: Dict[float, Tensor] = {}

    def __call__(self, t: float) -> Tensor:
        key = float(t)
        try:
            return self._cache[key]
        except KeyError:
            pass
        z = self._from_h + ad.matmul(self.heads.time_features(key), self._w_time)
        rates = ad.softplus(self.heads.psi.hidden_from(z, self.rng, self.train))
        self._cache[key] = rates
        return rates


def posterior_rates(h: Tensor, t: float, heads: PosteriorHeads) -> Tensor:
    return heads.bind(h)(t)


def initial_distribution(h: Tensor, heads: PosteriorHeads) -> Tensor:
    return heads.initial(h)


def master_flow(q: Tensor, rates: Tensor, layout: RateLayout) -> Tensor:
    """``dq/dt`` for a batch of distributions under per-transition rates."""
    flux = ad.take(q, layout.src, axis=-1) * rates
    return ad.matmul(flux, layout.incidence)


#
# Prior structures: how the generator's positive outputs become rates.
#
class FullStructure:
    name = 'full'

    def __init__(self, k: int, time_scale: float = 1.0, init_scale: float = 1.0) -> None:
        self.k = k
        self.time_scale = time_scale
        self.layout = mjplab.core.full_layout(k)
        self.names = ['f_%d_%d' % (i, j) for i, j in zip(self.layout.src, self.layout.dst)]
        self.init = np.full(len(self.names), init_scale)

    @property
    def n_params(self) -> int:
        return len(self.names)

    def rates(self, params: Tensor) -> Tensor:
        return params

    def to_original(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(params) / self.time_scale


class DfrStructure:
    """Rates of the flashing ratchet from ``(v, r, b)``.

    ON rates are multiplied by the time-normalization scale, so ``v`` is the
    same in both time units while ``r`` and ``b`` scale like rates.
    """
    name = 'dfr'
    k = 2 * mjplab.simulate.DFR_POSITIONS

    def __init__(self, time_scale: float = 1.0, init_scale: float = 1.0) -> None:
        self.time_scale = time_scale
        support = mjplab.simulate.dfr_generator(1.0, 1.0, 1.0) > 0
        self.layout = mjplab.core.masked_layout(support)
        self.names = ['v', 'r', 'b']
        self.init = np.array([init_scale, init_scale * time_scale, init_scale * time_scale])

        src, dst = self.layout.src, self.layout.dst
        same_flag = (src % 2) == (dst % 2)
        self.on = (same_flag & (src % 2 == 0)).astype(np.float64)
        self.off = (same_flag & (src % 2 == 1)).astype(np.float64)
        self.switch = (~same_flag).astype(np.float64)
        self.exponent = np.where(self.on > 0, -((dst // 2) - (src // 2)) / 2.0, 0.0)

    @property
    def n_params(self) -> int:
        return 3

    def rates(self, params: Tensor) -> Tensor:
        v, r, b = params[:, 0:1], params[:, 1:2], params[:, 2:3]
        on = ad.exp(v * self.exponent) * (self.time_scale * self.on)
        return on + r * self.switch + b * self.off

    def to_original(self, params: np.ndarray) -> np.ndarray:
        out = np.array(params, dtype=np.float64)
        out[..., 1:] /= self.time_scale
        return out


class LvStructure:
    """Lotka-Volterra parameters ``(alpha, beta, delta, gamma)``.

    Rates depend on the joint state.
    """
    name = 'lv'

    def __init__(self, cap: int, time_scale: float = 1.0, init_scale: float = 1.0) -> None:
        self.cap = cap
        self.k = cap
        self.time_scale = time_scale
        self.layout = mjplab.core.birth_death_layout(cap)
        self.names = ['alpha', 'beta', 'delta', 'gamma']
        self.init = np.full(4, init_scale)

    @property
    def n_params(self) -> int:
        return 4

    def rates(self, params: Tensor) -> Tensor:
        return params

    def to_original(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(params) / self.time_scale


def make_structure(name: str, k: int, time_scale: float, init_scale: float = 1.0) -> Any:
    if name == 'full':
        return FullStructure(k, time_scale, init_scale)
    if name == 'dfr':
        return DfrStructure(time_scale, init_scale)
    if name == 'lv':
        return LvStructure(k, time_scale, init_scale)
    raise ConfigError('unknown prior structure %r' % name)


class PriorGenerator(Module):
    """Implicit prior ``f = structure(softplus(Phi(eps)))`` with ``eps ~ N(0, sigma^2 I)``.

    In explicit mode the positive parameters are a trainable vector and no
    noise is drawn.
    """

    def __init__(
        self,
        structure: Any,
        rng: Rng,
        mode: str = 'implicit',
        noise_dim: int = 64,
        sigma: float = 0.1,
        hidden: Sequence[int] = (64, ),
    ) -> None:
        self.structure = structure
        self.mode = mode
        self.noise_dim = noise_dim
        self.sigma = sigma
        bias = softplus_inverse(structure.init)
        if mode == 'implicit':
            self.net = Mlp([noise_dim] + list(hidden) + [structure.n_params], rng,
                           activation='relu', init='kaiming')
            self.net.layers[-1].bias.data = bias.copy()
        elif mode == 'explicit':
            self.raw = ad.parameter(bias.copy())
        else:
            raise ConfigError('unknown prior mode %r' % mode)

    def sample_params(self, rng: Optional[Rng], n: int = 1) -> Tensor:
        """``(n, P)`` positive structure parameters."""
        if self.mode == 'explicit':
            return ad.reshape(ad.softplus(self.raw), (1, self.structure.n_params))
        assert rng is not None, 'the implicit prior needs an rng'
        eps = rng.normal(0.0, self.sigma, size=(n, self.noise_dim))
        return ad.softplus(self.net(eps))

    def sample_rates(self, rng: Optional[Rng], n: int = 1) -> Tensor:
        return self.structure.rates(self.sample_params(rng, n))


def prior_sample_rates(g: PriorGenerator, rng: Rng) -> Tensor:
    """One draw of the prior rates, in the structure's layout order."""
    return g.sample_rates(rng, 1)[0]


def gumbel_softmax(probs: Any, temperature: float, rng: Rng, hard: bool = False) -> Tensor:
    """Relaxed categorical sample; ``hard`` gives a straight-through one-hot."""
    if not temperature > 0:
        raise DegenerateTemperature('temperature must be positive, got %r' % temperature)
    probs = ad.as_tensor(probs)
    logits = ad.log(ad.clamp_min(probs, PROB_FLOOR))
    noise = rng.gumbel(size=probs.shape)
    soft = ad.softmax((logits + noise) * (1.0 / temperature), axis=-1)
    if not hard:
        return soft
    onehot = np.zeros(soft.shape)
    np.put_along_axis(onehot, np.argmax(soft.data, axis=-1)[..., None], 1.0, axis=-1)
    return ad.straight_through(onehot, soft)


#
# Emission models.
#
CATEGORICAL = 'categorical'
GAUSSIAN = 'gaussian'

_LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_density(x: Any, mean: Tensor, var: Tensor) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    if np.any(ad.as_tensor(var).data <= 0):
        raise NonPositiveVariance('variances must be positive')
    diff = ad.as_tensor(x) - mean
    terms = ad.log(var) + ad.square(diff) / var + _LOG_2PI
    return ad.sum(terms, axis=-1) * -0.5


def cholesky_log_density(x: Any, mean: Tensor, chol: Tensor) -> Tensor:
    """Gaussian log-density with covariance ``L L^T`` for a lower-triangular ``chol``."""
    diag = ad.stack([chol[..., d, d] for d in range(chol.shape[-1])], axis=-1)
    if np.any(diag.data <= 0):
        raise NonPositiveVariance('Cholesky diagonal must be positive')
    diff = ad.as_tensor(x) - mean
    solved: List[Tensor] = []
    for d in range(chol.shape[-1]):
        acc = diff[..., d]
        for j in range(d):
            acc = acc - chol[..., d, j] * solved[j]
        solved.append(acc / chol[..., d, d])
    y = ad.stack(solved, axis=-1)
    dim = chol.shape[-1]
    logdet = ad.sum(ad.log(diag), axis=-1) * 2.0
    return (ad.sum(ad.square(y), axis=-1) + logdet + dim * _LOG_2PI) * -0.5


class Emission(Module):
    """``p(x | z)`` for one-hot (or relaxed) latent states ``z``.

    ``kind`` is categorical (the observation is the state itself) or
    Gaussian.  A Gaussian either maps ``z`` through MLPs or, with ``levels``,
    uses ``z @ levels`` as its mean; ``levels`` must give each observed
    dimension from a single mean-field factor.
    """

    def __init__(
        self,
        kind: str,
        state_dim: int,
        obs_dim: int,
        rng: Rng,
        covariance: str = 'diagonal',
        hidden: Sequence[int] = (64, ),
        levels: Optional[np.ndarray] = None,
        min_variance: float = 1e-6,
        fixed_variance: float = 1.0,
        factor_sizes: Optional[Sequence[int]] = None,
    ) -> None:
        self.kind = kind
        self.state_dim = state_dim
        self.obs_dim = obs_dim
        self.covariance = covariance
        self.min_variance = min_variance
        self.fixed_variance = fixed_variance
        self.levels = levels
        self.factor_sizes = list(factor_sizes) if factor_sizes else [state_dim]
        self.frozen = False

        if kind == CATEGORICAL:
            if obs_dim != state_dim:
                raise DimensionMismatch(
                    'categorical emission needs %d classes, data has %d' % (state_dim, obs_dim))
            return
        if kind != GAUSSIAN:
            raise ConfigError('unknown emission kind %r' % kind)

        if levels is not None:
            if levels.shape != (state_dim, obs_dim):
                raise DimensionMismatch(
                    'levels must have shape %r, got %r' % ((state_dim, obs_dim), levels.shape))
            if covariance == 'full':
                raise ConfigError(
                    'state-as-mean emission supports diagonal or fixed covariance only')
            if covariance == 'diagonal':
                self.raw_var = ad.parameter(softplus_inverse(np.full(obs_dim, fixed_variance)))
            return

        self.mean_net = Mlp([state_dim] + list(hidden) + [obs_dim], rng, activation='tanh')
        if covariance == 'diagonal':
            self.var_net = Mlp([state_dim] + list(hidden) + [obs_dim], rng, activation='tanh')
        elif covariance == 'full':
            if obs_dim > 8:
                raise ConfigError('full covariance supports up to 8 dimensions, got %d' % obs_dim)
            n_lower = obs_dim * (obs_dim - 1) // 2
            self.chol_net = Mlp(
                [state_dim] + list(hidden) + [obs_dim + n_lower], rng, activation='tanh')
            self._chol_basis = self._make_chol_basis(obs_dim)

    @staticmethod
    def _make_chol_basis(dim: int) -> np.ndarray:
        rows, cols = np.tril_indices(dim, -1)
        entries = [(d, d) for d in range(dim)] + list(zip(rows, cols))
        basis = np.zeros((len(entries), dim * dim))
        for i, (r, c) in enumerate(entries):
            basis[i, r * dim + c] = 1.0
        return basis

    def _mean(self, z: Tensor) -> Tensor:
        if self.levels is not None:
            return ad.matmul(z, self.levels)
        return self.mean_net(z)

    def _variance(self, z: Tensor) -> Tensor:
        if self.frozen or self.covariance == 'fixed':
            return ad.constant(np.full((1, self.obs_dim), self.fixed_variance))
        if self.levels is not None:
            return ad.reshape(ad.softplus(self.raw_var) + self.min_variance, (1, self.obs_dim))
        return ad.softplus(self.var_net(z)) + self.min_variance

    def _cholesky(self, z: Tensor) -> Tensor:
        dim = self.obs_dim
        raw = self.chol_net(z)
        diag = ad.sqrt(ad.softplus(raw[:, :dim]) + self.min_variance)
        entries = ad.concat([diag, raw[:, dim:]], axis=-1)
        return ad.reshape(ad.matmul(entries, self._chol_basis), (z.shape[0], dim, dim))

    def log_prob(self, z: Any, x: Any) -> Tensor:
        """``log p(x | z)`` per batch row."""
        z = ad.as_tensor(z)
        if self.kind == CATEGORICAL:
            return ad.sum(ad.as_tensor(x) * ad.log(ad.clamp_min(z, PROB_FLOOR)), axis=-1)
        mean = self._mean(z)
        if self.covariance == 'full' and not self.frozen:
            return cholesky_log_density(x, mean, self._cholesky(z))
        return gaussian_log_density(x, mean, self._variance(z))

    def expected_log_prob(self, marginals: Sequence[Tensor], x: Any) -> Tensor:
        """``E_q[log p(x | z)]`` under the product of the factor marginals."""
        if self.kind == CATEGORICAL:
            assert len(marginals) == 1, 'categorical emission has a single factor'
            return self.log_prob(marginals[0], x)

        if self.levels is not None:
            zbar = ad.concat(list(marginals), axis=-1) if len(marginals) > 1 else marginals[0]
            mean = ad.matmul(zbar, self.levels)
            second = ad.matmul(zbar, self.levels ** 2)
            spread = ad.clamp_min(second - ad.square(mean), 0.0)
            var = self._variance(zbar)
            diff = ad.as_tensor(x) - mean
            terms = ad.log(var) + (ad.square(diff) + spread) / var + _LOG_2PI
            return ad.sum(terms, axis=-1) * -0.5

        assert len(marginals) == 1, 'MLP emission has a single factor'
        q = marginals[0]
        states = ad.constant(np.eye(self.state_dim))
        x = ad.as_tensor(x)
        rows = ad.reshape(x, (x.shape[0], 1, self.obs_dim))
        means = ad.reshape(self._mean(states), (1, self.state_dim, self.obs_dim))
        if self.covariance == 'full' and not self.frozen:
            chol = self._cholesky(states)
            per_state = ad.stack(
                [cholesky_log_density(x, means[:, k, :], chol[k:k + 1])
                 for k in range(self.state_dim)],
                axis=-1)
        else:
            var = self._variance(states)
            var = ad.reshape(var, (1, var.shape[0], self.obs_dim))
            per_state = gaussian_log_density(rows, means, var)
        return ad.sum(q * per_state, axis=-1)

    def decode(self, marginals: Sequence[Any]) -> Tensor:
        """Expected observation under the factor marginals."""
        marginals = [ad.as_tensor(m) for m in marginals]
        if self.kind == CATEGORICAL:
            return marginals[0]
        if self.levels is not None:
            zbar = ad.concat(marginals, axis=-1) if len(marginals) > 1 else marginals[0]
            return ad.matmul(zbar, self.levels)
        means = self._mean(ad.constant(np.eye(self.state_dim)))
        return ad.matmul(marginals[0], means)

    def decode_states(self, z: Any) -> np.ndarray:
        """Emission means of one-hot (or concatenated one-hot) states."""
        return self._mean(ad.as_tensor(z)).data if self.kind == GAUSSIAN else np.asarray(z)


def emission_log_prob(em: Emission, z: Any, x: Any) -> Tensor:
    return em.log_prob(z, x)


def emission_decode(em: Emission, q: Any) -> Tensor:
    if isinstance(q, (list, tuple)):
        return em.decode(q)
    return em.decode([q])


def lv_levels_matrix(cap: int) -> np.ndarray:
    """Block matrix mapping (prey one-hot, predator one-hot) onto the two levels."""
    levels = np.zeros((2 * cap, 2))
    levels[:cap, 0] = np.arange(cap)
    levels[cap:, 1] = np.arange(cap)
    return levels
