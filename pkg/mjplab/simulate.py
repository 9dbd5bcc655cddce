"""Exact trajectory sampling and the ground-truth dataset generators.

Every generator is deterministic given its seed: series ``i`` draws from
``Rng(seed, i)`` so that the worker pool and the serial path produce the
same data.

Composite DFR states are indexed ``2 * position + flag`` with flag 0 for ON
and 1 for OFF.  LV states are indexed ``prey * cap + predator``.
"""

import dataclasses
import enum
import logging
import multiprocessing

from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

import mjplab.analysis
import mjplab.config
import mjplab.core
import mjplab.errors
import mjplab.numerics
from mjplab.core import (
    RateMatrix,
    TimeSeries,
    Trajectory,
)
from mjplab.numerics import Rng

_LOGGER = logging.getLogger(__name__)

DFR = 'dfr'
LV = 'lv'
FOLDING = 'folding'
HYBRID = 'hybrid'
PROCESSES = (DFR, LV, FOLDING, HYBRID)

DFR_WINDOW = (0.0, 2.5)
DFR_POSITIONS = 3

LV_WINDOW = (0.0, 1500.0)
LV_ESCAPE_RATE = 1e-6
LV_INIT_RANGE = (5, 20)

SHARED_GRID_STREAM = 1 << 62
"""Rng stream reserved for the grid shared by a whole dataset."""

StateRateProvider = Callable[[int], Sequence[Tuple[int, float]]]
"""Maps a state index to its ``(target, rate)`` pairs."""


class GridKind(enum.Enum):
    REGULAR = 'regular'
    SHARED_IRREGULAR = 'shared'
    PER_SERIES_IRREGULAR = 'irregular'


def parse_grid(name: str) -> GridKind:
    try:
        return GridKind(name)
    except ValueError:
        raise ValueError(
            'unknown grid %r, expected one of %r' % (name, [g.value for g in GridKind]))


class MatrixRates:
    """:data:`StateRateProvider` view of a :class:`RateMatrix`."""

    def __init__(self, f: RateMatrix) -> None:
        self._targets = []
        for row in f.entries:
            row = row.copy()
            row[row < 0] = 0.0
            targets = np.flatnonzero(row > 0)
            self._targets.append([(int(t), float(row[t])) for t in targets])

    def __call__(self, state: int) -> List[Tuple[int, float]]:
        return self._targets[state]


def gillespie_sample(rates: Any, z0: int, t0: float, t_end: float, rng: Rng) -> Trajectory:
    """Sample one path exactly on ``[t0, t_end]``.

    :param rates: A :class:`RateMatrix` or a :data:`StateRateProvider`.
    """
    assert t0 < t_end, 'empty window [%r, %r]' % (t0, t_end)
    if isinstance(rates, RateMatrix):
        rates = MatrixRates(rates)

    t = float(t0)
    z = int(z0)
    jumps: List[float] = []
    states = [z]
    while True:
        targets = [(s, r) for s, r in rates(z) if r > 0]
        total = sum(r for _, r in targets)
        if total <= 0:
            break
        t += rng.exponential(total)
        if t > t_end:
            break
        probs = np.array([r for _, r in targets]) / total
        z = targets[rng.categorical(probs)][0]
        jumps.append(t)
        states.append(z)
    return Trajectory(t0=float(t0), t_end=float(t_end),
                      jump_times=np.array(jumps), states=np.array(states))


def make_grid(kind: GridKind, n: int, window: Tuple[float, float], rng: Rng) -> np.ndarray:
    """Observation times inside ``window``.

    Regular grids are equidistant and include both endpoints.  Irregular grids
    are ``n`` sorted uniform draws; for :attr:`GridKind.SHARED_IRREGULAR` the
    caller draws once and reuses the result for every series.
    """
    if n < 2:
        raise ValueError('need at least 2 observations, got %d' % n)
    t0, t_end = window
    if kind is GridKind.REGULAR:
        return np.linspace(t0, t_end, n)
    times = np.sort(rng.uniform(t0, t_end, size=n))
    assert np.all(np.diff(times) > 0), 'duplicate observation times'
    return times


def observe(traj: Trajectory, times: Any) -> np.ndarray:
    """States at ``times`` (right-continuous)."""
    states = mjplab.core.evaluate(traj, np.asarray(times, dtype=np.float64))
    return np.asarray(states, dtype=np.int64)


def corrupt_gaussian(values: Any, sigma: float, rng: Rng) -> np.ndarray:
    """Add i.i.d. ``N(0, sigma^2)`` noise to every coordinate."""
    values = np.asarray(values, dtype=np.float64)
    if sigma == 0:
        return values.copy()
    return values + rng.normal(0.0, sigma, size=values.shape)


def corrupt_discrete(values: Any, p: float, rng: Rng) -> np.ndarray:
    """Add two-sided geometric (discrete Laplace) integer noise."""
    values = np.asarray(values, dtype=np.float64)
    plus = rng.generator.geometric(p, size=values.shape) - 1
    minus = rng.generator.geometric(p, size=values.shape) - 1
    return values + plus - minus


def one_hot(states: Any, k: int) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    return np.eye(k)[states]


#
# Discrete flashing ratchet.
#
def dfr_state(position: int, on: bool) -> int:
    return 2 * position + (0 if on else 1)


def dfr_generator(v: float, r: float, b: float, time_scale: float = 1.0) -> np.ndarray:
    """The 6x6 flashing-ratchet generator as a dense array.

    ON rates between positions ``i -> j`` are ``exp(-v * (j - i) / 2)``, OFF
    rates are ``b`` and the potential switches with rate ``r``.  Only the ON
    rates are multiplied by ``time_scale``.
    """
    m = np.zeros((2 * DFR_POSITIONS, 2 * DFR_POSITIONS))
    for i in range(DFR_POSITIONS):
        for j in range(DFR_POSITIONS):
            if i == j:
                continue
            m[dfr_state(i, True), dfr_state(j, True)] = time_scale * np.exp(-v * (j - i) / 2.0)
            m[dfr_state(i, False), dfr_state(j, False)] = b
        m[dfr_state(i, True), dfr_state(i, False)] = r
        m[dfr_state(i, False), dfr_state(i, True)] = r
    m[np.diag_indices_from(m)] = -m.sum(axis=1)
    return m


def dfr_process(
    v: float = 1.0,
    r: float = 1.0,
    b: float = 1.0,
) -> Tuple[RateMatrix, mjplab.core.StateDistribution]:
    """Generator and stationary initial distribution of the ratchet."""
    if not np.isfinite(v):
        raise ValueError('v must be finite')
    if r < 0 or b < 0:
        raise mjplab.errors.NegativeRate('r and b must be nonnegative, got %r, %r' % (r, b))
    f = RateMatrix(dfr_generator(v, r, b))
    return f, mjplab.analysis.stationary_distribution(f)


#
# Lotka-Volterra.
#
@dataclasses.dataclass(frozen=True)
class LvParams:
    alpha: float = 5e-4
    beta: float = 1e-4
    delta: float = 1e-4
    gamma: float = 5e-4
    cap: int = 60

    def __post_init__(self):
        values = np.array([self.alpha, self.beta, self.delta, self.gamma])
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError('LV parameters must be finite and nonnegative: %r' % values.tolist())
        if self.cap < 2:
            raise ValueError('cap must be at least 2, got %d' % self.cap)

    def as_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


def lv_state(prey: int, predator: int, cap: int) -> int:
    return prey * cap + predator


def lv_levels(state: Any, cap: int) -> Tuple[Any, Any]:
    return np.divmod(state, cap)


def lv_transition_rates(p: LvParams, prey: Any, predator: Any) -> Tuple[Any, Any, Any, Any]:
    """Rates of ``(+prey, -prey, +predator, -predator)`` at the given levels.

    Works elementwise on arrays.  Escapes from extinction get
    :data:`LV_ESCAPE_RATE` added; transitions leaving ``[0, cap - 1]`` are 0.
    """
    x = np.asarray(prey, dtype=np.float64)
    y = np.asarray(predator, dtype=np.float64)
    top = p.cap - 1
    prey_birth = np.where(x >= top, 0.0, p.alpha * x + np.where(x == 0, LV_ESCAPE_RATE, 0.0))
    prey_death = np.where(x <= 0, 0.0, p.beta * x * y)
    pred_birth = np.where(y >= top, 0.0, p.delta * x * y + np.where(y == 0, LV_ESCAPE_RATE, 0.0))
    pred_death = np.where(y <= 0, 0.0, p.gamma * y)
    return prey_birth, prey_death, pred_birth, pred_death


class LvRates:
    """:data:`StateRateProvider` over the truncated grid ``{0..cap-1}^2``."""

    def __init__(self, p: LvParams) -> None:
        self.params = p

    def __call__(self, state: int) -> List[Tuple[int, float]]:
        cap = self.params.cap
        x, y = divmod(int(state), cap)
        up_x, down_x, up_y, down_y = (float(r) for r in lv_transition_rates(self.params, x, y))
        moves = [
            (lv_state(x + 1, y, cap), up_x),
            (lv_state(x - 1, y, cap), down_x),
            (lv_state(x, y + 1, cap), up_y),
            (lv_state(x, y - 1, cap), down_y),
        ]
        return [(s, r) for s, r in moves if r > 0]


def lv_rate_provider(p: LvParams) -> LvRates:
    return LvRates(p)


#
# Brownian toy folding model.
#
FOLDING_DIM = 5
FOLDING_RADIUS = 3.0


def folding_potential(x: Any) -> Any:
    r = np.linalg.norm(np.asarray(x, dtype=np.float64), axis=-1)
    s = r - FOLDING_RADIUS
    return np.where(r < FOLDING_RADIUS, -2.5 * s ** 2, 0.5 * s ** 3 - s ** 2)


def folding_gradient(x: Any) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    s = r - FOLDING_RADIUS
    du = np.where(r < FOLDING_RADIUS, -5.0 * s, 1.5 * s ** 2 - 2.0 * s)
    safe = np.where(r > 0, r, 1.0)
    return np.where(r > 0, du * x / safe, 0.0)


def folding_path(
    x0: Any,
    steps: int,
    dt: float,
    rng: Optional[Rng],
    diffusion: float = np.sqrt(2.0),
) -> np.ndarray:
    """Euler-Maruyama for ``dx = -grad U dt + sqrt(2) dW``; returns ``steps + 1`` states."""
    if not dt > 0:
        raise ValueError('dt must be positive, got %r' % dt)
    x = np.array(x0, dtype=np.float64)
    path = [x]
    for _ in range(steps):
        x = x - folding_gradient(x) * dt
        if rng is not None and diffusion:
            x = x + diffusion * np.sqrt(dt) * rng.normal(size=x.shape)
        path.append(x)
    return np.stack(path)


#
# Two-mode hybrid system.
#
HYBRID_RATES = (0.2, 0.2)
HYBRID_ALPHA = (1.5, 1.5)
HYBRID_BETA = (-1.0, 1.0)
HYBRID_DIFFUSION = 0.5
HYBRID_GAP = 0.35
HYBRID_NOISE = 0.1
HYBRID_LENGTH = 67
HYBRID_DT = 1e-3


def hybrid_generator() -> RateMatrix:
    return mjplab.core.rate_matrix_from_rates(HYBRID_RATES, 2)


def switching_ou_path(
    traj: Trajectory,
    times: np.ndarray,
    y0: float,
    rng: Optional[Rng],
    dt: float = HYBRID_DT,
    diffusion: float = HYBRID_DIFFUSION,
) -> np.ndarray:
    """Integrate ``dy = alpha_z (beta_z - y) dt + diffusion dW`` and sample at ``times``."""
    y = float(y0)
    t = traj.t0
    out = np.empty(len(times))
    for i, target in enumerate(times):
        while t < target:
            h = min(dt, target - t)
            z = mjplab.core.evaluate(traj, t)
            y += HYBRID_ALPHA[z] * (HYBRID_BETA[z] - y) * h
            if rng is not None and diffusion:
                y += diffusion * np.sqrt(h) * rng.normal()
            t += h
        out[i] = y
    return out


#
# Per-series workers.  Each takes the dataset seed and the series index and
# returns one TimeSeries per requested grid, all cut from the same path.
#
def _grids_for(kind: GridKind, obs: int, windows: Sequence[Tuple[float, float]], rng: Rng,
               shared: Optional[List[np.ndarray]]) -> List[np.ndarray]:
    if shared is not None:
        return shared
    return [make_grid(kind, obs, w, rng) for w in windows]


def _dfr_series(
    seed: int,
    index: int,
    kind: GridKind,
    obs: int,
    windows: List[Tuple[float, float]],
    shared: Optional[List[np.ndarray]],
    params: Dict[str, float],
) -> List[TimeSeries]:
    rng = Rng(seed, index)
    f, p0 = dfr_process(**params)
    grids = _grids_for(kind, obs, windows, rng, shared)
    z0 = rng.categorical(p0.probs)
    traj = gillespie_sample(f, z0, windows[0][0], windows[-1][1], rng)
    result = []
    for times in grids:
        states = observe(traj, times)
        result.append(TimeSeries(times, one_hot(states, f.k), states))
    return result


def _lv_series(
    seed: int,
    index: int,
    kind: GridKind,
    obs: int,
    windows: List[Tuple[float, float]],
    shared: Optional[List[np.ndarray]],
    params: Dict[str, float],
    noise: float,
) -> List[TimeSeries]:
    rng = Rng(seed, index)
    p = LvParams(**params)
    grids = _grids_for(kind, obs, windows, rng, shared)
    low, high = LV_INIT_RANGE
    x0, y0 = (int(v) for v in rng.integers(low, high + 1, size=2))
    traj = gillespie_sample(
        lv_rate_provider(p), lv_state(x0, y0, p.cap), windows[0][0], windows[-1][1], rng)
    result = []
    for times in grids:
        states = observe(traj, times)
        levels = np.stack(lv_levels(states, p.cap), axis=-1)
        result.append(TimeSeries(times, corrupt_gaussian(levels, noise, rng), states))
    return result


def _folding_series(
    seed: int,
    index: int,
    steps: List[int],
    dt: float,
    burnin: int,
) -> List[TimeSeries]:
    rng = Rng(seed, index)
    x0 = rng.normal(-1.0, 2.0, size=FOLDING_DIM)
    path = folding_path(x0, burnin + sum(steps) - 1, dt, rng)[burnin:]
    result = []
    start = 0
    for n in steps:
        times = (start + np.arange(n)) * dt
        result.append(TimeSeries(times, path[start:start + n]))
        start += n
    return result


def run_parallel(worker: Callable, work: Iterable[Tuple], threads: Optional[int]) -> List[Any]:
    work = list(work)
    if threads is None:
        threads = mjplab.config.thread_count()
    if threads == 1 or len(work) <= 1:
        return [worker(*args) for args in work]
    with multiprocessing.Pool(min(threads, len(work))) as pool:
        return pool.starmap(worker, work)


def _tag(series: List[TimeSeries], process: str, params: Dict[str, Any], seed: int,
         split: Optional[str] = None) -> List[TimeSeries]:
    for i, s in enumerate(series):
        s.meta.update({'process': process, 'params': dict(params), 'seed': seed, 'index': i})
        if split is not None:
            s.meta['split'] = split
    return series


def _windows(window: Tuple[float, float], predict: bool) -> List[Tuple[float, float]]:
    t0, t_end = window
    if not predict:
        return [(t0, t_end)]
    return [(t0, t_end), (t_end, 2 * t_end - t0)]


def _shared(
    kind: GridKind,
    obs: int,
    windows: List[Tuple[float, float]],
    seed: int,
) -> Optional[List[np.ndarray]]:
    if kind is not GridKind.SHARED_IRREGULAR:
        return None
    rng = Rng(seed, SHARED_GRID_STREAM)
    return [make_grid(kind, obs, w, rng) for w in windows]


def _collect(per_series: List[List[TimeSeries]], process: str, params: Dict[str, Any], seed: int,
             predict: bool) -> Any:
    if not predict:
        return _tag([s[0] for s in per_series], process, params, seed)
    observed = _tag([s[0] for s in per_series], process, params, seed, 'observed')
    future = _tag([s[1] for s in per_series], process, params, seed, 'future')
    return observed, future


def dfr_dataset(
    n: int,
    obs: int,
    grid: GridKind = GridKind.PER_SERIES_IRREGULAR,
    seed: int = 0,
    v: float = 1.0,
    r: float = 1.0,
    b: float = 1.0,
    window: Tuple[float, float] = DFR_WINDOW,
    threads: Optional[int] = None,
    predict: bool = False,
) -> Any:
    """Noiseless one-hot observations of the flashing ratchet.

    Initial states are drawn from the stationary distribution.
    """
    params = {'v': v, 'r': r, 'b': b}
    windows = _windows(window, predict)
    shared = _shared(grid, obs, windows, seed)
    work = ((seed, i, grid, obs, windows, shared, params) for i in range(n))
    per_series = run_parallel(_dfr_series, work, threads)
    _LOGGER.info('simulated %d DFR series with %d observations', n, obs)
    return _collect(per_series, DFR, params, seed, predict)


def lv_dataset(
    params: LvParams,
    n: int,
    obs: int,
    grid: GridKind = GridKind.PER_SERIES_IRREGULAR,
    seed: int = 0,
    window: Tuple[float, float] = LV_WINDOW,
    noise: float = 1.0,
    threads: Optional[int] = None,
    predict: bool = False,
) -> Any:
    """Noisy population levels of Lotka-Volterra paths started uniformly in ``[5, 20]^2``."""
    raw = params.as_dict()
    windows = _windows(window, predict)
    shared = _shared(grid, obs, windows, seed)
    work = ((seed, i, grid, obs, windows, shared, raw, noise) for i in range(n))
    per_series = run_parallel(_lv_series, work, threads)
    _LOGGER.info('simulated %d LV series with %d observations', n, obs)
    return _collect(per_series, LV, raw, seed, predict)


LV_SINGLE_START = (19, 7)
LV_SINGLE_OBS = 16
LV_SINGLE_FUTURE = ((1600.0, 3000.0), 15)
LV_SINGLE_NOISE_P = 0.5


def lv_single_trajectory(
    params: Optional[LvParams] = None,
    seed: int = 0,
) -> Tuple[TimeSeries, TimeSeries]:
    """One short LV series plus its noiseless continuation.

    Observed at 16 equidistant times on ``[0, 1500]`` with two-sided discrete
    noise; the continuation is observed at 15 equidistant times on
    ``[1600, 3000]``.
    """
    if params is None:
        params = LvParams()
    rng = Rng(seed, 0)
    (f0, f1), n_future = LV_SINGLE_FUTURE
    start = lv_state(LV_SINGLE_START[0], LV_SINGLE_START[1], params.cap)
    traj = gillespie_sample(lv_rate_provider(params), start, LV_WINDOW[0], f1, rng)

    times = np.linspace(LV_WINDOW[0], LV_WINDOW[1], LV_SINGLE_OBS)
    states = observe(traj, times)
    levels = np.stack(lv_levels(states, params.cap), axis=-1)
    observed = TimeSeries(times, corrupt_discrete(levels, LV_SINGLE_NOISE_P, rng), states)

    future_times = np.linspace(f0, f1, n_future)
    future_states = observe(traj, future_times)
    future_values = np.stack(lv_levels(future_states, params.cap), axis=-1)
    future = TimeSeries(future_times, future_values, future_states)

    raw = params.as_dict()
    _tag([observed], LV, raw, seed, 'observed')
    _tag([future], LV, raw, seed, 'future')
    return observed, future


def brownian_folding_dataset(
    n_series: int,
    steps: int = 100,
    dt: float = 0.1,
    burnin: int = 1000,
    seed: int = 0,
    threads: Optional[int] = None,
    predict: bool = False,
) -> Any:
    """5-dimensional Brownian dynamics in the bistable radial potential.

    Starts are drawn from ``N(-1, 4 I)``; the first ``burnin`` steps are
    discarded and every retained step is observed.
    """
    if not dt > 0:
        raise ValueError('dt must be positive, got %r' % dt)
    lengths = [steps, steps] if predict else [steps]
    work = ((seed, i, lengths, dt, burnin) for i in range(n_series))
    per_series = run_parallel(_folding_series, work, threads)
    params = {'steps': steps, 'dt': dt, 'burnin': burnin}
    _LOGGER.info('simulated %d folding series with %d steps', n_series, steps)
    return _collect(per_series, FOLDING, params, seed, predict)


def hybrid_switching_dataset(seed: int = 0, length: int = HYBRID_LENGTH) -> TimeSeries:
    """One series of the switching Ornstein-Uhlenbeck system.

    Observation gaps are exponential with mean 0.35 and observations carry
    ``N(0, 0.1^2)`` noise.
    """
    rng = Rng(seed, 0)
    times = np.cumsum(rng.exponential(1.0 / HYBRID_GAP, size=length))
    z0 = int(rng.integers(0, 2))
    traj = gillespie_sample(hybrid_generator(), z0, 0.0, float(times[-1]), rng)
    clean = switching_ou_path(traj, times, HYBRID_BETA[z0], rng)
    values = corrupt_gaussian(clean, HYBRID_NOISE, rng)
    series = TimeSeries(times, values, observe(traj, times))
    params = {'rates': list(HYBRID_RATES), 'alpha': list(HYBRID_ALPHA), 'beta': list(HYBRID_BETA),
              'diffusion': HYBRID_DIFFUSION, 'dt': HYBRID_DT}
    _tag([series], HYBRID, params, seed)
    return series


def split_dataset(
    series: Sequence[TimeSeries],
    fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Tuple[List[TimeSeries], List[TimeSeries], List[TimeSeries]]:
    """Shuffle and cut into train, validation and test parts."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError('fractions must be nonnegative and sum to 1: %r' % (fractions, ))
    order = Rng(seed, 0).permutation(len(series))
    n_train = int(round(fractions[0] * len(series)))
    n_valid = int(round(fractions[1] * len(series)))
    cuts = [order[:n_train], order[n_train:n_train + n_valid], order[n_train + n_valid:]]
    parts = []
    for name, indices in zip(('train', 'validation', 'test'), cuts):
        part = [series[i] for i in sorted(indices)]
        for s in part:
            s.meta['part'] = name
        parts.append(part)
    return parts[0], parts[1], parts[2]


def generate(
    process: str,
    n: int = 500,
    obs: int = 50,
    grid: GridKind = GridKind.PER_SERIES_IRREGULAR,
    seed: int = 0,
    threads: Optional[int] = None,
    predict: bool = False,
) -> Any:
    """Dataset of one of the :data:`PROCESSES` with default ground truth.

    Returns a list of series, or ``(observed, future)`` when ``predict`` is set.
    """
    if process == DFR:
        return dfr_dataset(n, obs, grid, seed, threads=threads, predict=predict)
    if process == LV:
        return lv_dataset(LvParams(), n, obs, grid, seed, threads=threads, predict=predict)
    if process == FOLDING:
        return brownian_folding_dataset(n, steps=obs, seed=seed, threads=threads, predict=predict)
    if process == HYBRID:
        if predict:
            raise ValueError('the hybrid system has no prediction split')
        return [hybrid_switching_dataset(seed)]
    raise ValueError('unknown process %r, expected one of %r' % (process, PROCESSES))


def ground_truth(process: str) -> Dict[str, Any]:
    """Parameters of the default ground truth, as written to ``.meta.json``."""
    if process == DFR:
        f, p0 = dfr_process()
        return {'process': DFR, 'params': {'v': 1.0, 'r': 1.0, 'b': 1.0}, 'k': f.k,
                'rates': mjplab.core.rates_of(f).tolist(), 'stationary': p0.probs.tolist()}
    if process == LV:
        return {'process': LV, 'params': LvParams().as_dict()}
    if process == FOLDING:
        return {'process': FOLDING,
                'params': {'dim': FOLDING_DIM, 'dt': 0.1, 'radius': FOLDING_RADIUS}}
    if process == HYBRID:
        return {'process': HYBRID, 'k': 2, 'rates': list(HYBRID_RATES),
                'params': {'alpha': list(HYBRID_ALPHA), 'beta': list(HYBRID_BETA)}}
    raise ValueError('unknown process %r' % process)
