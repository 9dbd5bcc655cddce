"""Rate matrices, state distributions, trajectories and time series.

Conventions used throughout mjplab:

- States are indexed ``0 .. K-1``.
- Distributions are row vectors and evolve as ``p'(t) = p(t) @ F(t)``.
- The ``(K-1) * K`` off-diagonal rates of a generator are packed in
  row-major order with the diagonal skipped, i.e. for ``K = 3`` the order is
  ``(0,1), (0,2), (1,0), (1,2), (2,0), (2,1)``.  Checkpoints and rate files
  use the same order.
"""

import dataclasses
import logging

from typing import (
    Any,
    Callable,
    Dict,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from mjplab.errors import (
    DimensionMismatch,
    EmptySeries,
    InvalidDistribution,
    NegativeRate,
    OutOfWindow,
)

_LOGGER = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-10
DISTRIBUTION_TOL = 1e-8


def offdiag_indices(k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the off-diagonal entries in packing order."""
    rows, cols = np.nonzero(~np.eye(k, dtype=bool))
    return rows, cols


class RateMatrix:
    """Generator of a homogeneous Markov jump process.

    Off-diagonal entries are transition rates (1/time), each row sums to zero.
    Instances are validated on construction and never mutated afterwards.
    """

    def __init__(self, entries: Any) -> None:
        m = np.array(entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch('rate matrix must be square, got shape %r' % (m.shape, ))
        if not np.all(np.isfinite(m)):
            raise ValueError('rate matrix contains non-finite entries')
        off = m[~np.eye(m.shape[0], dtype=bool)]
        if np.any(off < 0):
            raise NegativeRate('negative off-diagonal rate %r' % off.min())
        scale = max(1.0, np.abs(m).max())
        if np.any(np.abs(m.sum(axis=1)) > ROW_SUM_TOL * scale):
            raise ValueError('rows must sum to zero: %r' % m.sum(axis=1).tolist())
        m.setflags(write=False)
        self._entries = m

    @property
    def k(self) -> int:
        return self._entries.shape[0]

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    def exit_rates(self) -> np.ndarray:
        return -np.diag(self._entries)

    def scaled(self, factor: float) -> 'RateMatrix':
        """Return the generator with every rate multiplied by ``factor``."""
        return RateMatrix(self._entries * factor)

    def __repr__(self):
        return 'RateMatrix(%r)' % self._entries.tolist()

    def __eq__(self, other):
        return isinstance(other, RateMatrix) and np.array_equal(self._entries, other._entries)


def rate_matrix_from_rates(off_diagonal: Sequence[float], k: int) -> RateMatrix:
    """Build a generator from its packed off-diagonal rates.

    >>> rate_matrix_from_rates([1.0, 3.0], 2).entries.tolist()
    [[-1.0, 1.0], [3.0, -3.0]]
    """
    rates = np.asarray(off_diagonal, dtype=np.float64)
    if rates.ndim != 1 or rates.size != (k - 1) * k:
        raise DimensionMismatch(
            'expected %d off-diagonal rates for K=%d, got %d' % ((k - 1) * k, k, rates.size)
        )
    if not np.all(np.isfinite(rates)):
        raise ValueError('rates must be finite')
    if np.any(rates < 0):
        raise NegativeRate('rates must be nonnegative, got %r' % rates.min())

    m = np.zeros((k, k))
    rows, cols = offdiag_indices(k)
    m[rows, cols] = rates
    m[np.diag_indices(k)] = -m.sum(axis=1)
    return RateMatrix(m)


def rates_of(f: RateMatrix) -> np.ndarray:
    """Inverse of :func:`rate_matrix_from_rates`."""
    rows, cols = offdiag_indices(f.k)
    return f.entries[rows, cols].copy()


RateProvider = Union[RateMatrix, Callable[[float], Any]]
"""A homogeneous generator, or a callable mapping time to a generator."""


def generator_at(f: RateProvider, t: float) -> np.ndarray:
    if isinstance(f, RateMatrix):
        return f.entries
    value = f(t)
    if isinstance(value, RateMatrix):
        return value.entries
    return np.asarray(value, dtype=np.float64)


def master_rhs(p: Any, f: RateProvider, t: float = 0.0) -> np.ndarray:
    """Right-hand side of the master equation, ``p @ F(t)``.

    Works on a single distribution of shape ``(K, )`` or a batch ``(B, K)``.
    """
    p = np.asarray(p, dtype=np.float64)
    m = generator_at(f, t)
    if p.shape[-1] != m.shape[0]:
        raise DimensionMismatch(
            'distribution has %d states, generator %d' % (p.shape[-1], m.shape[0]))
    return p @ m


@dataclasses.dataclass(frozen=True)
class StateDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise InvalidDistribution('expected a nonempty vector, got shape %r' % (p.shape, ))
        if np.any(p < 0) or np.any(p > 1):
            raise InvalidDistribution('entries must lie in [0, 1]: %r' % p.tolist())
        if abs(p.sum() - 1.0) > DISTRIBUTION_TOL:
            raise InvalidDistribution('entries sum to %r' % p.sum())
        object.__setattr__(self, 'probs', p)

    @property
    def k(self) -> int:
        return self.probs.size

    @classmethod
    def from_array(cls, p: Any) -> 'StateDistribution':
        """Clamp tiny negative round-off to zero and renormalize."""
        p = np.clip(np.asarray(p, dtype=np.float64), 0.0, None)
        return cls(p / p.sum())

    @classmethod
    def point_mass(cls, k: int, state: int) -> 'StateDistribution':
        p = np.zeros(k)
        p[state] = 1.0
        return cls(p)


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """A right-continuous, piecewise-constant path on ``[t0, t_end]``."""
    t0: float
    t_end: float
    jump_times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        jumps = np.asarray(self.jump_times, dtype=np.float64)
        states = np.asarray(self.states, dtype=np.int64)
        assert self.t0 < self.t_end, 'empty window [%r, %r]' % (self.t0, self.t_end)
        assert len(states) == len(jumps) + 1, 'need one more state than jumps'
        if len(jumps):
            assert np.all(np.diff(jumps) > 0), 'jump times must be strictly increasing'
            assert jumps[0] > self.t0 and jumps[-1] <= self.t_end, 'jump outside window'
            assert np.all(states[1:] != states[:-1]), 'self-jumps are not allowed'
        object.__setattr__(self, 'jump_times', jumps)
        object.__setattr__(self, 'states', states)

    @property
    def num_jumps(self) -> int:
        return len(self.jump_times)

    def holding_times(self) -> np.ndarray:
        """Durations spent in each visited state, censored at the window end."""
        edges = np.concatenate([[self.t0], self.jump_times, [self.t_end]])
        return np.diff(edges)


def evaluate(traj: Trajectory, t: Any) -> Any:
    """State occupied at time(s) ``t``; at a jump time the new state is returned."""
    times = np.asarray(t, dtype=np.float64)
    if np.any(times < traj.t0) or np.any(times > traj.t_end):
        raise OutOfWindow('t=%r outside [%r, %r]' % (t, traj.t0, traj.t_end))
    index = np.searchsorted(traj.jump_times, times, side='right')
    result = traj.states[index]
    if np.ndim(result) == 0:
        return int(result)
    return result


@dataclasses.dataclass
class TimeSeries:
    """Observation times and observed vectors of one realisation."""
    times: np.ndarray
    values: np.ndarray
    true_states: Optional[np.ndarray] = None
    meta: Dict[str, Any] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.values = values
        if len(self.times) == 0:
            raise EmptySeries('time series has no observations')
        if len(self.times) != len(self.values):
            raise DimensionMismatch('%d times but %d values' % (len(self.times), len(self.values)))
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.values))):
            raise ValueError('time series contains non-finite entries')
        if np.any(np.diff(self.times) <= 0):
            raise ValueError('observation times must be strictly increasing')
        if self.true_states is not None:
            self.true_states = np.asarray(self.true_states, dtype=np.int64)
            if len(self.true_states) != len(self.times):
                raise DimensionMismatch('true_states length differs from times')

    def __len__(self):
        return len(self.times)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def head(self, n: int) -> 'TimeSeries':
        """The first ``n`` observations."""
        states = None if self.true_states is None else self.true_states[:n]
        return TimeSeries(self.times[:n], self.values[:n], states, dict(self.meta))


class RateLayout:
    """Which transitions a (posterior or prior) rate vector parameterizes.

    ``src[i] -> dst[i]`` is the transition carried by rate ``i``.  The
    ``incidence`` matrix turns per-transition probability fluxes into the
    master-equation derivative: ``dp = (p[src] * rates) @ incidence``.
    """

    def __init__(self, k: int, src: np.ndarray, dst: np.ndarray, name: str = 'custom') -> None:
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        assert src.shape == dst.shape, 'src/dst mismatch'
        assert np.all(src != dst), 'self-transitions are not rates'
        self.k = k
        self.src = src
        self.dst = dst
        self.name = name
        self.incidence = np.zeros((len(src), k))
        self.incidence[np.arange(len(src)), dst] += 1.0
        self.incidence[np.arange(len(src)), src] -= 1.0

    def __len__(self):
        return len(self.src)

    @property
    def n_rates(self) -> int:
        return len(self.src)

    def to_matrix(self, rates: Any) -> RateMatrix:
        rates = np.asarray(rates, dtype=np.float64)
        if rates.shape != (len(self), ):
            raise DimensionMismatch('expected %d rates, got shape %r' % (len(self), rates.shape))
        m = np.zeros((self.k, self.k))
        np.add.at(m, (self.src, self.dst), rates)
        m[np.diag_indices(self.k)] = 0.0
        m[np.diag_indices(self.k)] = -m.sum(axis=1)
        return RateMatrix(m)

    def to_full(self, rates: Any) -> np.ndarray:
        """Scatter into the packed ``(K-1) * K`` order, zeros elsewhere."""
        return rates_of(self.to_matrix(rates))


def full_layout(k: int) -> RateLayout:
    rows, cols = offdiag_indices(k)
    return RateLayout(k, rows, cols, name='full')


def masked_layout(mask: Any) -> RateLayout:
    """Only the transitions where ``mask[i, j]`` is true."""
    mask = np.asarray(mask, dtype=bool).copy()
    np.fill_diagonal(mask, False)
    rows, cols = np.nonzero(mask)
    return RateLayout(mask.shape[0], rows, cols, name='masked')


def birth_death_layout(k: int) -> RateLayout:
    """Transitions to the neighbouring states only: ``z -> z+1`` then ``z -> z-1``."""
    up = np.arange(k - 1)
    down = np.arange(1, k)
    src = np.concatenate([up, down])
    dst = np.concatenate([up + 1, down - 1])
    return RateLayout(k, src, dst, name='birth_death')
