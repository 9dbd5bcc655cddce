"""Forecasting with a trained model, and the error metrics we report.

The posterior at the last observation is pushed forward under the prior,
either by solving the prior master equation or by averaging simulated
prior paths.  Times and values are in original units throughout.
"""

import logging

from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
)

import numpy as np

import mjplab.odesolve
import mjplab.simulate
import mjplab.vi
from mjplab.config import thread_count
from mjplab.core import TimeSeries
from mjplab.errors import (
    OutOfWindow,
    ShapeMismatch,
)
from mjplab.numerics import Rng

_LOGGER = logging.getLogger(__name__)

MASTER = 'master'
GILLESPIE = 'gillespie'

PRIOR_STREAM = 1 << 57
PATH_STREAM = 1 << 56


class LvFlow:
    """Master-equation derivative on the truncated grid ``{0..cap-1}^2``.

    States are flattened as ``prey * cap + predator``; the four transition
    kinds are applied with array shifts instead of a dense generator.
    """

    def __init__(self, params: mjplab.simulate.LvParams) -> None:
        cap = params.cap
        x, y = np.meshgrid(np.arange(cap), np.arange(cap), indexing='ij')
        self.cap = cap
        rates = mjplab.simulate.lv_transition_rates(params, x, y)
        self.up_x, self.down_x, self.up_y, self.down_y = rates
        self.exit = self.up_x + self.down_x + self.up_y + self.down_y

    def flow(self, p: Any, t: float) -> np.ndarray:
        grid = np.asarray(p).reshape(self.cap, self.cap)
        out = -grid * self.exit
        out[1:, :] += (grid * self.up_x)[:-1, :]
        out[:-1, :] += (grid * self.down_x)[1:, :]
        out[:, 1:] += (grid * self.up_y)[:, :-1]
        out[:, :-1] += (grid * self.down_y)[:, 1:]
        return out.reshape(-1)


def _joint(marginals: Sequence[np.ndarray]) -> np.ndarray:
    if len(marginals) == 1:
        return np.asarray(marginals[0])
    return np.outer(marginals[0], marginals[1]).reshape(-1)


def _factorize(model: mjplab.vi.Model, probs: np.ndarray) -> List[np.ndarray]:
    """Split joint distributions ``(n, K)`` into per-factor marginals."""
    if not model.mean_field:
        return [probs]
    cap = model.config.model.k
    grid = probs.reshape(-1, cap, cap)
    return [grid.sum(axis=2), grid.sum(axis=1)]


def prior_process(model: mjplab.vi.Model, n_samples: int, rng: Rng) -> Any:
    """The mean prior process in original time units.

    A :class:`mjplab.core.RateMatrix` for unstructured priors, LV parameters
    for mean-field models.
    """
    if model.mean_field:
        alpha, beta, delta, gamma = mjplab.vi.prior_mean_rates(model, n_samples, rng)
        return mjplab.simulate.LvParams(alpha, beta, delta, gamma, cap=model.config.model.k)
    return mjplab.vi.prior_rate_matrix(model, n_samples, rng)


def _decode(model: mjplab.vi.Model, probs: np.ndarray) -> np.ndarray:
    decoded = model.emission.decode(_factorize(model, probs)).data
    return model.time_map.to_original_values(decoded)


def _simulate_paths(process: Any, probs: np.ndarray, t0: float, times: np.ndarray, seed: int,
                    stream: int, n: int) -> np.ndarray:
    """Latent states of ``n`` prior paths started from ``probs``, shape ``(n, len(times))``."""
    rng = Rng(seed, stream)
    if isinstance(process, mjplab.simulate.LvParams):
        rates: Any = mjplab.simulate.lv_rate_provider(process)
    else:
        rates = process
    t_end = float(times[-1]) if times.size else t0
    out = np.empty((n, len(times)), dtype=np.int64)
    for i in range(n):
        z0 = rng.categorical(probs)
        traj = mjplab.simulate.gillespie_sample(rates, z0, t0, max(t_end, t0), rng)
        out[i] = mjplab.simulate.observe(traj, times)
    return out


def _one_hot_states(model: mjplab.vi.Model, states: np.ndarray) -> np.ndarray:
    if not model.mean_field:
        return mjplab.simulate.one_hot(states, model.config.model.k)
    cap = model.config.model.k
    prey, predator = mjplab.simulate.lv_levels(states, cap)
    return np.concatenate(
        [mjplab.simulate.one_hot(prey, cap), mjplab.simulate.one_hot(predator, cap)], axis=-1)


def predict(
    model: mjplab.vi.Model,
    series: TimeSeries,
    future_times: Any,
    mode: str = MASTER,
    n_samples: Optional[int] = None,
    seed: int = 0,
    threads: Optional[int] = None,
) -> np.ndarray:
    """Expected observations at ``future_times`` given the observed ``series``.

    :returns: Array of shape ``(len(future_times), D)``.
    :raises OutOfWindow: if a future time precedes the last observation.
    """
    cfg = model.config.predict
    future = np.asarray(future_times, dtype=np.float64)
    t0 = float(series.times[-1])
    if future.size and future.min() < t0:
        raise OutOfWindow('future times must not precede the last observation at %r' % t0)
    if n_samples is None:
        n_samples = cfg.samples

    rec = mjplab.vi.reconstruct(model, [series], batch_size=1)[0]
    probs = _joint([m[-1] for m in rec.marginals])
    probs = np.clip(probs, 0.0, None)
    probs = probs / probs.sum()
    if future.size == 0:
        return np.empty((0, series.dim))

    process = prior_process(model, cfg.prior_samples, Rng(seed, PRIOR_STREAM))
    if mode == MASTER:
        if np.all(future == t0):
            solved = np.tile(probs, (len(future), 1))
        else:
            rates = LvFlow(process) if model.mean_field else process
            opts = mjplab.odesolve.SolveOptions(rtol=cfg.rtol, atol=cfg.atol)
            solved = mjplab.odesolve.solve_master(rates, probs, future, opts, t0=t0)
        return _decode(model, solved)

    if mode != GILLESPIE:
        raise ValueError('unknown prediction mode %r' % mode)

    if threads is None:
        threads = thread_count()
    per_worker = int(np.ceil(n_samples / threads))
    work = []
    remaining = n_samples
    for w in range(threads):
        count = min(per_worker, remaining)
        if count <= 0:
            break
        work.append((process, probs, t0, future, seed, PATH_STREAM + w, count))
        remaining -= count
    states = np.concatenate(mjplab.simulate.run_parallel(_simulate_paths, work, threads))

    decoded = model.emission.decode_states(_one_hot_states(model, states.reshape(-1)))
    decoded = decoded.reshape(states.shape + (-1, )).mean(axis=0)
    _LOGGER.debug('averaged %d prior paths', states.shape[0])
    return model.time_map.to_original_values(decoded)


def predict_dataset(
    model: mjplab.vi.Model,
    observed: Sequence[TimeSeries],
    future_times: Sequence[Any],
    mode: str = MASTER,
    n_samples: Optional[int] = None,
    seed: int = 0,
    threads: Optional[int] = None,
) -> List[np.ndarray]:
    result = []
    for i, (s, times) in enumerate(zip(observed, future_times)):
        result.append(predict(model, s, times, mode, n_samples, seed, threads))
        _LOGGER.debug('predicted series %d of %d', i + 1, len(observed))
    return result


#
# Metrics.  Errors are summed over the observed dimensions inside the root.
#
def _rows(values: Any) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values


def _check_pairs(truth: Sequence[Any], predictions: Sequence[Any]) -> List[np.ndarray]:
    if len(truth) != len(predictions):
        raise ShapeMismatch('%d series but %d predictions' % (len(truth), len(predictions)))
    errors = []
    for i, (x, p) in enumerate(zip(truth, predictions)):
        x, p = _rows(x), _rows(p)
        if x.shape != p.shape:
            raise ShapeMismatch(
                'series %d: truth has shape %r, prediction %r' % (i, x.shape, p.shape))
        errors.append(np.sum((p - x) ** 2, axis=-1))
    return errors


def rmse(truth: Sequence[Any], predictions: Sequence[Any]) -> float:
    """Root of the squared error summed over dimensions, averaged over series and steps."""
    errors = _check_pairs(truth, predictions)
    total = sum(float(e.sum()) for e in errors)
    count = sum(e.size for e in errors)
    if count == 0:
        raise ShapeMismatch('no observations to compare')
    return float(np.sqrt(total / count))


def rmse_at_step(truth: Sequence[Any], predictions: Sequence[Any], j: int) -> float:
    """RMSE of the ``j``-th (1-based) step, over the series that have one."""
    if j < 1:
        raise ValueError('steps are counted from 1, got %d' % j)
    errors = [e[j - 1] for e in _check_pairs(truth, predictions) if len(e) >= j]
    if not errors:
        raise ShapeMismatch('no series has %d steps' % j)
    return float(np.sqrt(np.mean(errors)))


def rmse_first_m(truth: Sequence[Any], predictions: Sequence[Any], m: int) -> float:
    """Mean of the step-wise RMSE over the first ``m`` steps."""
    return float(np.mean([rmse_at_step(truth, predictions, j) for j in range(1, m + 1)]))


def _flat(items: Any) -> np.ndarray:
    if isinstance(items, list):
        return np.concatenate([np.atleast_1d(np.asarray(x)) for x in items])
    return np.asarray(items)


def accuracy(labels: Any, states: Any) -> float:
    labels, states = _flat(labels), _flat(states)
    if labels.shape != states.shape:
        raise ShapeMismatch('labels have shape %r, states %r' % (labels.shape, states.shape))
    if labels.size == 0:
        raise ShapeMismatch('no labels to compare')
    return float(np.mean(labels == states))


REPORTED_STEPS = (1, 5, 10)


def error_report(truth: Sequence[Any], predictions: Sequence[Any]) -> Dict[str, Any]:
    """RMSE overall and at the reported steps that exist."""
    longest = max(len(np.atleast_1d(t)) for t in truth)
    return {
        'rmse': rmse(truth, predictions),
        'rmse_at': {
            str(j): rmse_at_step(truth, predictions, j) for j in REPORTED_STEPS if j <= longest
        },
    }


def evaluate(
    model: mjplab.vi.Model,
    series: Sequence[TimeSeries],
    future: Optional[Sequence[TimeSeries]] = None,
    mode: str = MASTER,
    seed: int = 0,
    threads: Optional[int] = None,
) -> Dict[str, Any]:
    """Metrics of a trained model on ``series``.

    Reconstruction errors compare decoded posteriors with the observations;
    with ``future`` series the forecasts are scored as well.
    """
    recs = mjplab.vi.reconstruct(model, series)
    report: Dict[str, Any] = error_report([s.values for s in series], [r.decoded for r in recs])
    report.update(mjplab.vi.evaluation_terms(model, series))

    if all(s.true_states is not None for s in series):
        report['accuracy'] = accuracy(
            [s.true_states for s in series],
            [mjplab.vi.most_likely_states(model, r) for r in recs],
        )

    if future is not None:
        predictions = predict_dataset(
            model, series, [f.times for f in future], mode, seed=seed, threads=threads)
        report['prediction'] = error_report([f.values for f in future], predictions)
        report['prediction']['rmse_first_10'] = rmse_first_m(
            [f.values for f in future], predictions, min(10, min(len(f) for f in future)))
    return report
