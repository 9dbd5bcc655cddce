"""Long- and short-time characteristics of a rate matrix.

All routines take a :class:`mjplab.core.RateMatrix` and require the chain to
be irreducible (every state reachable from every other one).

    >>> from mjplab.core import rate_matrix_from_rates
    >>> f = rate_matrix_from_rates([1.0, 3.0], 2)
    >>> stationary_distribution(f).probs.tolist()
    [0.75, 0.25]
"""

import logging

from typing import (
    Any,
    Dict,
    List,
)

import numpy as np
import scipy.sparse  # type: ignore
import scipy.sparse.csgraph  # type: ignore

import mjplab.core
import mjplab.numerics
from mjplab.errors import (
    DegenerateSpectrum,
    NotIrreducible,
)

_LOGGER = logging.getLogger(__name__)

EDGE_THRESHOLD = 1e-12
"""Rates at or below this do not count as edges of the transition graph."""

ZERO_EIGENVALUE_TOL = 1e-8
"""Eigenvalues of the normalized generator this close to 0 are stationary modes."""


def is_irreducible(f: mjplab.core.RateMatrix) -> bool:
    """True if the transition graph is strongly connected.

    Runs one breadth-first sweep from state 0 on the graph and one on its
    transpose; both must reach every state.
    """
    if f.k == 1:
        return True
    adjacency = f.entries > EDGE_THRESHOLD
    np.fill_diagonal(adjacency, False)
    graph = scipy.sparse.csr_matrix(adjacency.astype(np.float64))
    forward = scipy.sparse.csgraph.breadth_first_order(
        graph, 0, directed=True, return_predecessors=False)
    backward = scipy.sparse.csgraph.breadth_first_order(graph.T.tocsr(), 0, directed=True,
                                                        return_predecessors=False)
    return len(forward) == f.k and len(backward) == f.k


def _require_irreducible(f: mjplab.core.RateMatrix) -> None:
    if not is_irreducible(f):
        raise NotIrreducible('the chain with %d states is not irreducible' % f.k)


def stationary_distribution(f: mjplab.core.RateMatrix) -> mjplab.core.StateDistribution:
    """Solve ``p @ F = 0`` subject to ``sum(p) = 1``.

    The last equation of the transposed system is replaced by the
    normalization constraint.
    """
    _require_irreducible(f)
    k = f.k
    a = f.entries.T.copy()
    a[-1, :] = 1.0
    b = np.zeros(k)
    b[-1] = 1.0
    p = mjplab.numerics.lu_solve(a, b)

    assert np.all(p >= -1e-12 * max(1.0, np.abs(p).max())), 'negative stationary mass %r' % p.min()
    p = np.clip(p, 0.0, None)
    p = p / p.sum()
    residual = np.abs(p @ f.entries).max()
    scale = max(1.0, np.abs(f.entries).max())
    if residual > 1e-10 * scale:
        _LOGGER.warning('stationary distribution residual %.3g', residual)
    return mjplab.core.StateDistribution(p)


def relaxation_timescales(f: mjplab.core.RateMatrix) -> np.ndarray:
    """Time scales ``1 / |Re lambda|`` of the non-stationary modes, ascending.

    The last entry is the relaxation time of the chain.

    :raises DegenerateSpectrum: unless exactly one eigenvalue is (close to) zero.
    """
    _require_irreducible(f)
    if f.k == 1:
        return np.zeros(0)

    scale = float(f.exit_rates().max())
    assert scale > 0, 'irreducible chain without exits'
    lambdas = np.array(mjplab.numerics.eigenvalues(f.entries / scale))

    is_zero = np.abs(lambdas) <= ZERO_EIGENVALUE_TOL
    if is_zero.sum() > 1:
        raise DegenerateSpectrum('%d eigenvalues are zero' % is_zero.sum())
    if is_zero.sum() == 0:
        raise DegenerateSpectrum('no eigenvalue within %g of zero, smallest is %r'
                                 % (ZERO_EIGENVALUE_TOL, lambdas[np.argmin(np.abs(lambdas))]))

    rest = lambdas[~is_zero] * scale
    oscillatory = np.abs(rest.imag) > np.abs(rest.real)
    if np.any(oscillatory):
        _LOGGER.warning('oscillatory modes: %r', rest[oscillatory].tolist())
    return np.sort(1.0 / np.abs(rest.real))


def mean_first_passage_times(f: mjplab.core.RateMatrix) -> np.ndarray:
    """Matrix of expected hitting times ``tau[i, j]`` from ``i`` to ``j``.

    For every target ``j`` solves ``1 + sum_k F[i, k] tau[k, j] = 0`` over
    ``i != j`` with ``tau[j, j] = 0``.
    """
    _require_irreducible(f)
    k = f.k
    tau = np.zeros((k, k))
    if k == 1:
        return tau
    for j in range(k):
        keep = np.arange(k) != j
        a = f.entries[np.ix_(keep, keep)]
        column = mjplab.numerics.lu_solve(a, -np.ones(k - 1))
        tau[keep, j] = column

        residual = np.abs(1.0 + a @ column).max()
        if residual > 1e-9 * max(1.0, np.abs(column).max()):
            _LOGGER.warning('MFPT residual %.3g for target %d', residual, j)
    return tau


def summarize(f: mjplab.core.RateMatrix) -> Dict[str, Any]:
    """Everything ``mjplab.cli analyze`` reports about one generator."""
    return {
        'k': f.k,
        'rate_matrix': f.entries.tolist(),
        'stationary': stationary_distribution(f).probs.tolist(),
        'timescales': relaxation_timescales(f).tolist(),
        'mfpt': mean_first_passage_times(f).tolist(),
    }


def mean_and_std(samples: Any) -> List[Dict[str, float]]:
    """Per-column mean and standard deviation of a ``(n, m)`` sample array."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    mean = samples.mean(axis=0)
    std = samples.std(axis=0, ddof=1) if samples.shape[0] > 1 else np.zeros_like(mean)
    return [{'mean': float(m), 'std': float(s)} for m, s in zip(mean, std)]
