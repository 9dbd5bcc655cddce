"""ODE integration: fixed-step RK4, adaptive Dormand-Prince and the master equation.

:func:`rk4_path` only uses ``+`` and ``*`` on the state, so it runs unchanged on
numpy arrays and on :class:`mjplab.autodiff.Tensor` values; under an active
graph every arithmetic step is recorded and the discrete solution is
differentiable.  :func:`dopri5` is numpy-only and meant for evaluation and
prediction paths.
"""

import dataclasses
import logging
import math

from typing import (
    Any,
    Callable,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

import mjplab.core
from mjplab.autodiff import Tensor
from mjplab.errors import (
    InvalidDistribution,
    NonFiniteState,
    StepUnderflow,
)

_LOGGER = logging.getLogger(__name__)

RK4 = 'rk4'
DOPRI5 = 'dopri5'

Rhs = Callable[[float, Any], Any]
PostStep = Callable[[Any], Any]

#
# Dormand-Prince 5(4) tableau.
#
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])

#
# Coefficients of the 4th order continuous extension, in powers of the
# step fraction s: column j multiplies s ** (j + 1).
#
_DENSE = np.array([
    [1.0, -183 / 64, 37 / 12, -145 / 128],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 1500 / 371, -1000 / 159, 1000 / 371],
    [0.0, -125 / 32, 125 / 12, -375 / 64],
    [0.0, 9477 / 3392, -729 / 106, 25515 / 6784],
    [0.0, -11 / 7, 11 / 3, -55 / 28],
    [0.0, 3 / 2, -4.0, 5 / 2],
])

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 10.0
_BETA = 0.04
_ALPHA = 0.2 - 0.75 * _BETA


@dataclasses.dataclass(frozen=True)
class SolveOptions:
    method: str = DOPRI5
    rtol: float = 1e-3
    atol: float = 1e-3
    substeps: int = 4
    renormalize: bool = True

    def __post_init__(self):
        if self.method not in (RK4, DOPRI5):
            raise ValueError('unknown method %r' % self.method)
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError('tolerances must be positive')
        if self.substeps < 1:
            raise ValueError('substeps must be at least 1')


def _values(y: Any) -> np.ndarray:
    if isinstance(y, Tensor):
        return y.data
    return np.asarray(y)


def _check_finite(y: Any, t: float) -> None:
    if not np.all(np.isfinite(_values(y))):
        raise NonFiniteState('state became non-finite at t=%r' % t)


def rk4_step(rhs: Rhs, t: float, y: Any, h: float) -> Any:
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + k1 * (0.5 * h))
    k3 = rhs(t + 0.5 * h, y + k2 * (0.5 * h))
    k4 = rhs(t + h, y + k3 * h)
    return y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def rk4_path(
    rhs: Rhs,
    y0: Any,
    grid: Sequence[float],
    substeps: int = 4,
    post_step: Optional[PostStep] = None,
) -> List[Any]:
    """Classical RK4 along ``grid``, ``substeps`` equal steps per interval.

    The grid may be increasing or decreasing.  Returns the state at every grid
    point, the first being ``y0`` itself.

    :param post_step: Optional projection applied after every step.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 1:
        raise ValueError('grid must not be empty')
    steps = np.diff(grid)
    if steps.size and not (np.all(steps > 0) or np.all(steps < 0)):
        raise ValueError('grid must be strictly monotone')
    if substeps < 1:
        raise ValueError('substeps must be at least 1')

    y = y0
    out = [y]
    for i in range(len(grid) - 1):
        t = float(grid[i])
        h = (float(grid[i + 1]) - t) / substeps
        for j in range(substeps):
            y = rk4_step(rhs, t + j * h, y, h)
            if post_step is not None:
                y = post_step(y)
            _check_finite(y, t + (j + 1) * h)
        out.append(y)
    return out


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def _initial_step(rhs: Rhs, t0: float, y0: np.ndarray, f0: np.ndarray, span: float,
                  rtol: float, atol: float) -> float:
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, abs(span))
    y1 = y0 + math.copysign(h0, span) * f0
    f1 = np.asarray(rhs(t0 + math.copysign(h0, span), y1))
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1.0 / 5.0)
    return min(100 * h0, h1, abs(span))


def _control(err_norm: float, err_prev: float) -> Tuple[bool, float]:
    """PI controller: whether to accept the step and the factor for the next step size."""
    if err_norm > 1.0:
        return False, max(_MIN_FACTOR, _SAFETY * err_norm ** -_ALPHA)
    if err_norm == 0:
        return True, _MAX_FACTOR
    factor = _SAFETY * err_norm ** -_ALPHA * err_prev ** _BETA
    return True, min(_MAX_FACTOR, max(_MIN_FACTOR, factor))


def dopri5(
    rhs: Rhs,
    y0: Any,
    t0: float,
    t1: float,
    rtol: float = 1e-3,
    atol: float = 1e-3,
    output_times: Optional[Sequence[float]] = None,
    post_step: Optional[PostStep] = None,
) -> np.ndarray:
    """Adaptive Dormand-Prince 5(4) integration with PI step control.

    :param output_times: Sorted times inside ``[t0, t1]`` (in the direction of
      integration) at which the solution is reported via 4th order dense
      output.  Defaults to ``[t1]``.
    :returns: Array of shape ``(len(output_times), ) + y0.shape``.
    :raises StepUnderflow: if the step shrinks below ``1e-14 * |t1 - t0|``.
    """
    y = np.array(y0, dtype=np.float64)
    span = float(t1) - float(t0)
    if output_times is None:
        output_times = [t1]
    outs = np.asarray(output_times, dtype=np.float64)
    direction = 1.0 if span >= 0 else -1.0
    if outs.size:
        rel = (outs - t0) * direction
        if np.any(rel < -1e-12) or np.any(rel > abs(span) + 1e-12):
            raise ValueError('output times must lie inside [%r, %r]' % (t0, t1))
        if np.any(np.diff(rel) < 0):
            raise ValueError('output times must be sorted in the integration direction')

    result = np.empty((outs.size, ) + y.shape)
    next_out = 0
    while next_out < outs.size and (outs[next_out] - t0) * direction <= 0:
        result[next_out] = y
        next_out += 1
    if span == 0 or next_out == outs.size:
        result[next_out:] = y
        return result

    t = float(t0)
    t_tol = 1e-12 * max(1.0, abs(t0), abs(t1))
    f = np.asarray(rhs(t, y), dtype=np.float64)
    h = _initial_step(rhs, t, y, f, span, rtol, atol)
    min_step = 1e-14 * abs(span)
    err_prev = 1e-4
    accepted = rejected = 0

    while next_out < outs.size:
        remaining = (t1 - t) * direction
        if remaining <= t_tol:
            result[next_out:] = y
            break
        h = min(h, remaining)
        if h < min_step:
            raise StepUnderflow('step %.3g below %.3g at t=%r' % (h, min_step, t))
        hs = h * direction

        k = [f]
        for i in range(1, 7):
            yi = y + hs * sum(a * kj for a, kj in zip(_A[i], k))
            k.append(np.asarray(rhs(t + _C[i] * hs, yi), dtype=np.float64))
        y_new = y + hs * sum(b * kj for b, kj in zip(_B, k))
        err = hs * sum(e * kj for e, kj in zip(_E, k))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = _rms(err / scale)

        if not np.isfinite(err_norm):
            raise StepUnderflow('non-finite error estimate at t=%r' % t)

        accept, factor = _control(err_norm, err_prev)
        assert not accept or err_norm <= 1.0, 'accepted a step with error %r' % err_norm
        h = h * factor
        if accept:
            accepted += 1
            t_new = t + hs
            stages = np.stack(k)
            while next_out < outs.size and (outs[next_out] - t_new) * direction <= t_tol:
                s = (outs[next_out] - t) / hs
                powers = np.array([s, s ** 2, s ** 3, s ** 4])
                weights = _DENSE @ powers
                value = y + hs * np.tensordot(weights, stages, axes=(0, 0))
                if post_step is not None:
                    value = post_step(value)
                result[next_out] = value
                next_out += 1

            if post_step is not None:
                y_new = post_step(y_new)
            if not np.all(np.isfinite(y_new)):
                raise NonFiniteState('state became non-finite at t=%r' % t_new)
            t, y = t_new, y_new
            f = np.asarray(rhs(t, y), dtype=np.float64)
            err_prev = max(err_norm, 1e-4)
        else:
            rejected += 1

    if rejected > accepted:
        _LOGGER.warning('dopri5 rejected %d of %d steps', rejected, accepted + rejected)
    _LOGGER.debug('dopri5: %d accepted, %d rejected steps', accepted, rejected)
    return result


def renormalize(p: Any) -> Any:
    """Clamp negative probabilities to zero and rescale rows to sum to one.

    Works on numpy arrays and on autodiff tensors.
    """
    if isinstance(p, Tensor):
        import mjplab.autodiff as ad
        clamped = ad.relu(p)
        return clamped / ad.sum(clamped, axis=-1, keepdims=True)

    clamped = np.clip(p, 0.0, None)
    deficit = np.abs(p - clamped).max() if p.size else 0.0
    if deficit > 1e-6:
        _LOGGER.warning('clamped negative probability of magnitude %.3g', deficit)
    return clamped / clamped.sum(axis=-1, keepdims=True)


def _master_function(rates: Any) -> Rhs:
    if hasattr(rates, 'flow'):
        return lambda t, p: rates.flow(p, t)

    def rhs(t, p):
        return mjplab.core.master_rhs(p, rates, t)
    return rhs


def solve_master(
    rates: Any,
    p0: Any,
    output_times: Sequence[float],
    opts: Optional[SolveOptions] = None,
    t0: float = 0.0,
) -> np.ndarray:
    """Integrate the master equation ``p' = p @ F(t)`` from ``t0``.

    :param rates: A :class:`mjplab.core.RateMatrix`, a callable mapping time
      to a generator, or an object with a ``flow(p, t)`` method returning the
      derivative directly (used for large structured generators).
    :param p0: Initial distribution.
    :param output_times: Sorted times at or after ``t0``.
    :returns: Array of shape ``(len(output_times), K)``; every row is a
      probability distribution.
    """
    if opts is None:
        opts = SolveOptions()
    if isinstance(p0, mjplab.core.StateDistribution):
        p = p0.probs.copy()
    else:
        p = np.asarray(p0, dtype=np.float64)
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-8:
            raise InvalidDistribution('initial distribution is not on the simplex')

    times = np.asarray(output_times, dtype=np.float64)
    rhs = _master_function(rates)
    post = renormalize if opts.renormalize else None

    if times.size == 0:
        return np.empty((0, p.size))

    if opts.method == DOPRI5:
        return dopri5(rhs, p, t0, float(times.max()), opts.rtol, opts.atol, times, post)

    grid = np.concatenate([[t0], times]) if times[0] > t0 else times
    path = rk4_path(rhs, p, grid, opts.substeps, post)
    if times[0] > t0:
        path = path[1:]
    return np.stack(path)
