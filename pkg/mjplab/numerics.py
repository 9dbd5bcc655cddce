"""Dense linear algebra, spectra, quadrature and random numbers.

Everything here works on 64-bit numpy arrays.  Matrices are plain
``numpy.ndarray`` objects of shape ``(rows, cols)``; eigenvalues come back
as Python ``complex`` values.

Solving a linear system::

    >>> x = lu_solve(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
    >>> x.tolist()
    [1.0, 2.0]

"""

import dataclasses
import logging
import math

from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
    Union,
)

import numpy as np
import scipy.linalg  # type: ignore

from mjplab.errors import (
    InvalidDistribution,
    NoConvergence,
    SingularMatrix,
)

_LOGGER = logging.getLogger(__name__)

PIVOT_THRESHOLD = 1e-12
"""Smallest pivot magnitude accepted by :func:`lu_solve`."""

PADE_ORDER = 6
SCALING_NORM = 0.5
"""Scale the argument of the matrix exponential until its 1-norm is below this."""

_MASK64 = (1 << 64) - 1

ArrayLike = Union[np.ndarray, Sequence[float], Sequence[Sequence[float]]]


def _as_matrix(a: ArrayLike) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError('expected a matrix, got shape %r' % (m.shape, ))
    if not np.all(np.isfinite(m)):
        raise ValueError('matrix contains non-finite entries')
    return m


def _as_square(a: ArrayLike) -> np.ndarray:
    m = _as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise ValueError('expected a square matrix, got shape %r' % (m.shape, ))
    return m


def lu_solve(a: ArrayLike, b: ArrayLike) -> np.ndarray:
    """Solve ``a @ x = b`` by LU factorization with partial pivoting.

    :param a: A square, nonsingular matrix.
    :param b: A vector or a matrix with as many rows as ``a``.
    :raises SingularMatrix: if a pivot is smaller than :data:`PIVOT_THRESHOLD`.
    """
    a = _as_square(a)
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != a.shape[0]:
        raise ValueError('b has %d rows, expected %d' % (b.shape[0], a.shape[0]))

    lu, piv = scipy.linalg.lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if pivots.size and pivots.min() <= PIVOT_THRESHOLD:
        raise SingularMatrix('pivot %.3g below threshold %.1g' % (pivots.min(), PIVOT_THRESHOLD))
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def _hqr(h: np.ndarray, max_sweeps: int) -> List[complex]:
    """Eigenvalues of an upper Hessenberg matrix by Francis double-shift QR.

    Works in place on ``h``.  Deflates one or two eigenvalues at a time from
    the bottom of the active block.
    """
    n = h.shape[0]
    a = h
    roots: List[complex] = [0j] * n

    anorm = 0.0
    for i in range(n):
        for j in range(max(i - 1, 0), n):
            anorm += abs(a[i, j])

    nn = n - 1
    t = 0.0
    sweeps = 0
    while nn >= 0:
        its = 0
        while True:
            #
            # Look for a single small subdiagonal element.
            #
            l = nn
            while l >= 1:
                s = abs(a[l - 1, l - 1]) + abs(a[l, l])
                if s == 0.0:
                    s = anorm
                if abs(a[l, l - 1]) + s == s:
                    a[l, l - 1] = 0.0
                    break
                l -= 1

            x = a[nn, nn]
            if l == nn:
                roots[nn] = complex(x + t, 0.0)
                nn -= 1
                break

            y = a[nn - 1, nn - 1]
            w = a[nn, nn - 1] * a[nn - 1, nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    roots[nn - 1] = roots[nn] = complex(x + z, 0.0)
                    if z:
                        roots[nn] = complex(x - w / z, 0.0)
                else:
                    roots[nn - 1] = complex(x + p, -z)
                    roots[nn] = complex(x + p, z)
                nn -= 2
                break

            sweeps += 1
            if sweeps > max_sweeps:
                raise NoConvergence('no convergence after %d QR sweeps' % max_sweeps)

            if its in (10, 20):
                #
                # Exceptional shift.
                #
                t += x
                for i in range(nn + 1):
                    a[i, i] -= x
                s = abs(a[nn, nn - 1]) + abs(a[nn - 1, nn - 2])
                x = y = 0.75 * s
                w = -0.4375 * s * s
            its += 1

            #
            # Form the shift and look for two consecutive small subdiagonal
            # elements.
            #
            m = nn - 2
            while m >= l:
                z = a[m, m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1, m] + a[m, m + 1]
                q = a[m + 1, m + 1] - z - r - s
                r = a[m + 2, m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m, m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1, m - 1]) + abs(z) + abs(a[m + 1, m + 1]))
                if u + v == v:
                    break
                m -= 1

            for i in range(m, nn - 1):
                a[i + 2, i] = 0.0
                if i != m:
                    a[i + 2, i - 1] = 0.0

            #
            # Double QR step on rows l..nn and columns m..nn.
            #
            for k in range(m, nn):
                if k != m:
                    p = a[k, k - 1]
                    q = a[k + 1, k - 1]
                    r = 0.0
                    if k + 1 != nn:
                        r = a[k + 2, k - 1]
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k, k - 1] = -a[k, k - 1]
                else:
                    a[k, k - 1] = -s * x
                p += s
                x = p / s
                y = q / s
                z = r / s
                q /= p
                r /= p
                for j in range(k, nn + 1):
                    p = a[k, j] + q * a[k + 1, j]
                    if k + 1 != nn:
                        p += r * a[k + 2, j]
                        a[k + 2, j] -= p * z
                    a[k + 1, j] -= p * y
                    a[k, j] -= p * x
                mmin = nn if nn < k + 3 else k + 3
                for i in range(l, mmin + 1):
                    p = x * a[i, k] + y * a[i, k + 1]
                    if k + 1 != nn:
                        p += z * a[i, k + 2]
                        a[i, k + 2] -= p * r
                    a[i, k + 1] -= p * q
                    a[i, k] -= p

    _LOGGER.debug('hqr converged after %d sweeps (n=%d)', sweeps, n)
    return roots


def eigenvalues(a: ArrayLike) -> List[complex]:
    """All eigenvalues of a real, possibly unsymmetric, square matrix.

    Balances the matrix, reduces it to upper Hessenberg form and runs shifted
    QR iterations on the result.  Eigenvalues are returned with multiplicity,
    in no particular order.

    :raises NoConvergence: after ``30 * K`` QR sweeps without deflation.
    """
    m = _as_square(a)
    k = m.shape[0]
    if k > 128:
        raise ValueError('eigenvalues() supports dimensions up to 128, got %d' % k)
    if k == 0:
        return []
    if k == 1:
        return [complex(m[0, 0], 0.0)]

    balanced, unused_transform = scipy.linalg.matrix_balance(m, permute=True, scale=True)
    hess = scipy.linalg.hessenberg(balanced)
    return _hqr(np.array(hess, dtype=np.float64, order='C'), max_sweeps=30 * k)


def _pade_coefficients(order: int) -> List[float]:
    coef = [1.0]
    for j in range(1, order + 1):
        coef.append(coef[-1] * (order - j + 1) / (j * (2 * order - j + 1)))
    return coef


def matrix_exponential(a: ArrayLike) -> np.ndarray:
    """Compute ``exp(a)`` by scaling and squaring with a (6,6) Padé approximant."""
    m = _as_square(a)
    k = m.shape[0]
    eye = np.eye(k)
    if not m.any():
        return eye

    norm = np.abs(m).sum(axis=0).max()
    squarings = 0
    if norm > SCALING_NORM:
        squarings = int(math.ceil(math.log2(norm / SCALING_NORM)))
    scaled = m / (2.0 ** squarings)

    coef = _pade_coefficients(PADE_ORDER)
    numer = coef[0] * eye
    denom = coef[0] * eye
    power = eye
    for j in range(1, PADE_ORDER + 1):
        power = power @ scaled
        numer = numer + coef[j] * power
        denom = denom + ((-1) ** j) * coef[j] * power

    result = lu_solve(denom, numer)
    for _ in range(squarings):
        result = result @ result
    return result


@dataclasses.dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a quadrature rule on ``[a, b]``."""
    nodes: np.ndarray
    weights: np.ndarray
    a: float
    b: float

    def __post_init__(self):
        assert len(self.nodes) == len(self.weights), 'nodes/weights length mismatch'
        assert np.all(np.diff(self.nodes) > 0), 'nodes must be strictly increasing'
        assert np.all(self.weights > 0), 'weights must be positive'

    def __len__(self):
        return len(self.nodes)

    def integrate(self, values: np.ndarray) -> Any:
        """Apply the rule to function values sampled at the nodes (first axis)."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_legendre(n: int, a: float, b: float) -> QuadratureRule:
    """Gauss-Legendre rule with ``n`` points mapped onto ``[a, b]``."""
    if n < 1:
        raise ValueError('n must be at least 1, got %d' % n)
    if not a < b:
        raise ValueError('expected a < b, got %r, %r' % (a, b))

    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    nodes = half * x + 0.5 * (a + b)
    weights = half * w
    return QuadratureRule(nodes=nodes, weights=weights, a=float(a), b=float(b))


class Rng:
    """A reproducible random stream identified by ``(seed, stream)``.

    Backed by the counter-based Philox generator: the pair is packed into the
    128-bit Philox key, so distinct streams never overlap and the same pair
    always yields the same sequence.  One Rng per task; never share.
    """

    def __init__(self, seed: int, stream: int = 0) -> None:
        self.seed = int(seed)
        self.stream = int(stream)
        key = (self.seed & _MASK64) | ((self.stream & _MASK64) << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return 'Rng(seed=%d, stream=%d)' % (self.seed, self.stream)

    def spawn(self, stream: int) -> 'Rng':
        """Return a fresh generator on another stream of the same seed."""
        return Rng(self.seed, stream)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> Any:
        return self.generator.uniform(low, high, size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size: Any = None) -> Any:
        if std < 0:
            raise InvalidDistribution('std must be nonnegative, got %r' % std)
        return self.generator.normal(mean, std, size)

    def exponential(self, rate: float, size: Any = None) -> Any:
        if not rate > 0:
            raise InvalidDistribution('rate must be positive, got %r' % rate)
        return self.generator.exponential(1.0 / rate, size)

    def gumbel(self, size: Any = None) -> Any:
        return self.generator.gumbel(0.0, 1.0, size)

    def integers(self, low: int, high: int, size: Any = None) -> Any:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def categorical(self, probs: ArrayLike) -> int:
        """Draw an index with the given probabilities."""
        p = check_probabilities(probs)
        cumulative = np.cumsum(p)
        u = self.generator.uniform(0.0, cumulative[-1])
        index = int(np.searchsorted(cumulative, u, side='right'))
        #
        # Round-off can push u onto the last edge; never return a
        # zero-probability tail index.
        #
        nonzero = np.flatnonzero(p > 0)
        return min(index, int(nonzero[-1]))

    def get_state(self) -> Dict[str, Any]:
        return self.generator.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.generator.bit_generator.state = state


def check_probabilities(probs: ArrayLike, atol: float = 1e-9) -> np.ndarray:
    """Validate a probability vector.

    :raises InvalidDistribution: on negative, non-finite entries or a bad sum.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InvalidDistribution('expected a nonempty vector, got shape %r' % (p.shape, ))
    if not np.all(np.isfinite(p)):
        raise InvalidDistribution('probabilities must be finite')
    if np.any(p < 0):
        raise InvalidDistribution('probabilities must be nonnegative: %r' % p.tolist())
    total = p.sum()
    if abs(total - 1.0) > atol:
        raise InvalidDistribution('probabilities sum to %r, expected 1' % total)
    return p


def rng_new(seed: int, stream: int = 0, state: Optional[Dict[str, Any]] = None) -> Rng:
    rng = Rng(seed, stream)
    if state is not None:
        rng.set_state(state)
    return rng
