"""Variational inference for Markov jump processes.

The model holds an ODE-RNN encoder, posterior heads (one per mean-field
factor), an implicit prior generator and an emission model.  Training
alternates two updates per batch:

1. reconstruction with the prior frozen (encoder, heads and emission move);
2. the KL divergence between posterior and prior with everything but the
   prior frozen.

All times seen by the networks are mapped into ``[0, 1]`` by a
:class:`TimeMap` that is stored with every checkpoint.
"""

import dataclasses
import logging

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

import mjplab.analysis
import mjplab.autodiff as ad
import mjplab.core
import mjplab.nn
import mjplab.numerics
import mjplab.odesolve
import mjplab.readwrite
import mjplab.simulate
from mjplab.autodiff import (
    AdamState,
    Tensor,
)
from mjplab.config import Config
from mjplab.core import TimeSeries
from mjplab.errors import (
    ConfigError,
    EmptySeries,
    NonFiniteLoss,
    NotIrreducible,
)
from mjplab.nn import ObservationBatch
from mjplab.numerics import (
    QuadratureRule,
    Rng,
)

_LOGGER = logging.getLogger(__name__)

INIT_STREAM = 1 << 60
EVAL_STREAM = 1 << 59
SUMMARY_STREAM = 1 << 58

RATE_FLOOR = 1e-12
KL_TOL = 1e-8


@dataclasses.dataclass
class TimeMap:
    """Affine maps of times into ``[0, 1]`` and, optionally, values into ``[0, 1]``."""
    offset: float = 0.0
    scale: float = 1.0
    value_low: Optional[List[float]] = None
    value_span: Optional[List[float]] = None

    @classmethod
    def fit(cls, series: Sequence[TimeSeries], normalize_values: bool = False) -> 'TimeMap':
        low = min(float(s.times[0]) for s in series)
        high = max(float(s.times[-1]) for s in series)
        offset = min(0.0, low)
        scale = high - offset
        if not scale > 0:
            scale = 1.0
        value_low = value_span = None
        if normalize_values:
            stacked = np.concatenate([s.values for s in series])
            lo, hi = stacked.min(axis=0), stacked.max(axis=0)
            value_low = lo.tolist()
            value_span = np.where(hi > lo, hi - lo, 1.0).tolist()
        return cls(offset, scale, value_low, value_span)

    def to_model_times(self, t: Any) -> Any:
        return (np.asarray(t, dtype=np.float64) - self.offset) / self.scale

    def to_original_times(self, t: Any) -> Any:
        return self.offset + self.scale * np.asarray(t, dtype=np.float64)

    def to_model_values(self, v: Any) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.value_low is None:
            return v
        return (v - np.asarray(self.value_low)) / np.asarray(self.value_span)

    def to_original_values(self, v: Any) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.value_low is None:
            return v
        return np.asarray(self.value_low) + v * np.asarray(self.value_span)

    def apply(self, series: TimeSeries) -> TimeSeries:
        return TimeSeries(
            self.to_model_times(series.times),
            self.to_model_values(series.values),
            series.true_states,
            series.meta,
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'TimeMap':
        return cls(**raw)


@dataclasses.dataclass(frozen=True)
class MeanFieldFactor:
    """How the prior rates of one birth-death factor depend on the other factor.

    Transition ``i`` leaves level ``level[i]`` at rate
    ``param[param_index[i]] * level[i] * (other level if coupled[i] else 1) + escape[i]``.
    """
    name: str
    param_index: np.ndarray
    level: np.ndarray
    coupled: np.ndarray
    escape: np.ndarray


def lv_factors(cap: int, escape_rate: float) -> List[MeanFieldFactor]:
    """Prey and predator factors of the Lotka-Volterra prior."""
    layout = mjplab.core.birth_death_layout(cap)
    births = layout.dst > layout.src
    level = layout.src.astype(np.float64)
    escape = np.where(births & (layout.src == 0), escape_rate, 0.0)
    prey = MeanFieldFactor('prey', np.where(births, 0, 1), level, ~births, escape)
    predator = MeanFieldFactor('predator', np.where(births, 2, 3), level, births.copy(), escape)
    return [prey, predator]


class Model(mjplab.nn.Module):
    """All trainable parts of the variational model.

    Parameter names are dotted attribute paths (``encoder.gru.w``,
    ``heads.0.psi.layers.1.bias``, ``prior.net.layers.0.weight``...), stable
    across processes so checkpoints can be reloaded.
    """

    def __init__(
        self,
        config: Config,
        obs_dim: int,
        time_map: TimeMap,
        seed: Optional[int] = None,
    ) -> None:
        m, p, e = config.model, config.prior, config.emission
        if p.structure == 'lv' and not m.mean_field:
            raise ConfigError('[prior] structure "lv" needs [model] mean_field = true')
        if m.mean_field and not (e.kind == 'gaussian' and e.state_as_mean):
            raise ConfigError('mean-field models need a Gaussian state-as-mean emission')
        if e.state_as_mean and config.data.normalize_values:
            raise ConfigError('state-as-mean emission is incompatible with [data] normalize_values')

        self.config = config
        self.obs_dim = obs_dim
        self.time_map = time_map
        self.seed = config.train.seed if seed is None else seed
        rng = Rng(self.seed, INIT_STREAM)

        self.structure = mjplab.nn.make_structure(p.structure, m.k, time_map.scale, p.init_scale)
        self.mean_field = m.mean_field
        if m.mean_field:
            self.factors = lv_factors(m.k, mjplab.simulate.LV_ESCAPE_RATE * time_map.scale)
            layouts = [mjplab.core.birth_death_layout(m.k) for _ in self.factors]
        else:
            self.factors = []
            layouts = [self._posterior_layout()]
            self.post_to_prior = _transition_map(layouts[0], self.structure.layout)

        self.encoder = mjplab.nn.OdeRnnEncoder(
            obs_dim, m.hidden, m.ode_hidden, rng, m.encoder_substeps)
        self.heads = []
        for layout in layouts:
            embedding = None
            if m.mercer:
                embedding = mjplab.nn.MercerEmbedding(m.mercer_frequencies, m.mercer_harmonics)
            self.heads.append(mjplab.nn.PosteriorHeads(
                m.hidden, layout, rng, m.psi_hidden, m.lambda_hidden, m.layer_norm, m.dropout,
                embedding))
        self.prior = mjplab.nn.PriorGenerator(
            self.structure, rng, p.mode, p.noise_dim, p.sigma, p.hidden)
        self.emission = self._make_emission(rng, [layout.k for layout in layouts])

    def _posterior_layout(self) -> mjplab.core.RateLayout:
        m = self.config.model
        if m.posterior == 'birth_death':
            return mjplab.core.birth_death_layout(m.k)
        if m.posterior == 'masked':
            if m.mask:
                return mjplab.core.masked_layout(np.asarray(m.mask) > 0)
            return self.structure.layout
        return mjplab.core.full_layout(m.k)

    def _make_emission(self, rng: Rng, factor_sizes: List[int]) -> mjplab.nn.Emission:
        e = self.config.emission
        state_dim = sum(factor_sizes)
        if e.kind == mjplab.nn.CATEGORICAL:
            return mjplab.nn.Emission(mjplab.nn.CATEGORICAL, state_dim, self.obs_dim, rng)
        levels = None
        if e.state_as_mean:
            if len(factor_sizes) == 2:
                levels = mjplab.nn.lv_levels_matrix(factor_sizes[0])
            else:
                levels = np.repeat(
                    np.arange(state_dim, dtype=np.float64)[:, None], self.obs_dim, axis=1)
        return mjplab.nn.Emission(
            mjplab.nn.GAUSSIAN, state_dim, self.obs_dim, rng,
            covariance=e.covariance,
            hidden=e.hidden,
            levels=levels,
            min_variance=e.min_variance,
            fixed_variance=e.fixed_variance,
            factor_sizes=factor_sizes,
        )

    def posterior_parameters(self) -> List[Tensor]:
        return [p for name, p in self.named_parameters() if not name.startswith('prior.')]

    def prior_parameters(self) -> List[Tensor]:
        return self.prior.parameters()


def _transition_map(posterior: mjplab.core.RateLayout, prior: mjplab.core.RateLayout) -> np.ndarray:
    index = {(int(s), int(d)): i for i, (s, d) in enumerate(zip(prior.src, prior.dst))}
    mapping = []
    for s, d in zip(posterior.src, posterior.dst):
        try:
            mapping.append(index[(int(s), int(d))])
        except KeyError:
            raise ConfigError(
                'posterior transition %d->%d has no prior rate; restrict the posterior' % (s, d))
    return np.asarray(mapping, dtype=np.int64)


@dataclasses.dataclass
class UnionGrid:
    """Observation times, quadrature nodes and ``{0, T}`` merged into one grid."""
    times: np.ndarray
    obs_index: np.ndarray
    quad_index: np.ndarray
    rule: QuadratureRule

    @classmethod
    def build(cls, obs_times: Any, horizon: float, n_quad: int) -> 'UnionGrid':
        rule = mjplab.numerics.gauss_legendre(n_quad, 0.0, horizon)
        obs_times = np.asarray(obs_times, dtype=np.float64)
        times = np.unique(np.concatenate([[0.0, horizon], obs_times, rule.nodes]))
        return cls(
            times=times,
            obs_index=np.searchsorted(times, obs_times),
            quad_index=np.searchsorted(times, rule.nodes),
            rule=rule,
        )


@dataclasses.dataclass
class PosteriorPath:
    """Posterior marginals of every factor at every union-grid time."""
    batch: ObservationBatch
    grid: UnionGrid
    marginals: List[List[Tensor]]
    rates: List[mjplab.nn.PosteriorRates]

    def at(self, index: int) -> List[Tensor]:
        return [m[index] for m in self.marginals]


def posterior_solve(model: Model, batch: ObservationBatch, rng: Optional[Rng] = None,
                    train: bool = False) -> PosteriorPath:
    """Encode the batch and solve each factor's posterior master equation with RK4."""
    cfg = model.config.train
    grid = UnionGrid.build(batch.times, batch.horizon, cfg.quadrature_points)
    h = model.encoder(batch)
    marginals = []
    rates = []
    for heads in model.heads:
        bound = heads.bind(h, rng, train)
        q0 = heads.initial(h, rng, train)

        def flow(t, q, bound=bound, layout=heads.layout):
            return mjplab.nn.master_flow(q, bound(t), layout)

        path = mjplab.odesolve.rk4_path(
            flow, q0, grid.times, cfg.substeps, mjplab.odesolve.renormalize)
        marginals.append(path)
        rates.append(bound)
    return PosteriorPath(batch, grid, marginals, rates)


def kl_rate_term(g: Any, f: Any) -> np.ndarray:
    """``f - g + g log(g / f)`` per transition, both rates floored at 1e-12."""
    g = np.maximum(np.asarray(g, dtype=np.float64), RATE_FLOOR)
    f = np.maximum(np.asarray(f, dtype=np.float64), RATE_FLOOR)
    return f - g + g * np.log(g / f)


@dataclasses.dataclass
class KlStats:
    """Quadrature-weighted posterior statistics the KL is linear in.

    ``occupation`` has one column per prior transition (``mean-field``: one
    per factor transition), ``flux`` and ``flux_log`` one per posterior
    transition.  For mean-field factors ``occupation_pairs`` and ``pairs``
    hold the occupation and the flux against the other factor's marginal.
    """
    occupation: List[Tensor]
    occupation_pairs: List[Optional[Tensor]]
    flux: List[Tensor]
    flux_log: List[Tensor]
    pairs: List[Optional[Tensor]]

    def detach(self) -> 'KlStats':
        def cut(items):
            return [None if x is None else ad.detach(x) for x in items]
        return KlStats(cut(self.occupation), cut(self.occupation_pairs), cut(self.flux),
                       cut(self.flux_log), cut(self.pairs))


def kl_statistics(model: Model, path: PosteriorPath) -> KlStats:
    grid = path.grid
    node_times = grid.times[grid.quad_index]
    weights = grid.rule.weights.reshape(1, -1, 1)

    stacked = [ad.stack([m[i] for i in grid.quad_index], axis=1) for m in path.marginals]
    stats = KlStats([], [], [], [], [])
    for f, heads in enumerate(model.heads):
        q = stacked[f]
        g = ad.stack([path.rates[f](t) for t in node_times], axis=1)
        post_occ = ad.take(q, heads.layout.src, axis=-1)
        flux = post_occ * g
        stats.flux.append(ad.sum(flux * weights, axis=1))
        stats.flux_log.append(ad.sum(flux * ad.log(ad.clamp_min(g, RATE_FLOOR)) * weights, axis=1))

        if not model.mean_field:
            occ = ad.take(q, model.structure.layout.src, axis=-1)
            stats.occupation.append(ad.sum(occ * weights, axis=1))
            stats.occupation_pairs.append(None)
            stats.pairs.append(None)
            continue

        other = stacked[1 - f]
        stats.occupation.append(ad.sum(post_occ * weights, axis=1))
        stats.occupation_pairs.append(ad.matmul(ad.swapaxes(post_occ * weights, 1, 2), other))
        stats.pairs.append(ad.matmul(ad.swapaxes(flux * weights, 1, 2), other))
    return stats


def _single_kl(stats: KlStats, rates: Tensor, post_to_prior: np.ndarray) -> Tensor:
    """``(B, S)`` KL of a single posterior against ``S`` prior draws."""
    occ, flux, flux_log = stats.occupation[0], stats.flux[0], stats.flux_log[0]
    linear = ad.matmul(occ, rates.T)
    log_rates = ad.take(ad.log(ad.clamp_min(rates, RATE_FLOOR)), post_to_prior, axis=-1)
    cross = ad.matmul(flux, log_rates.T)
    own = ad.sum(flux_log - flux, axis=-1, keepdims=True)
    return linear + own - cross


def mean_field_kl(factors: Sequence[MeanFieldFactor], stats: KlStats, params: Tensor) -> Tensor:
    """``(B, S)`` KL of the factorized posterior against the coupled prior.

    Prior rates that depend on the other factor enter through their expected
    value (linear term) and their expected logarithm (cross term), both under
    the other factor's marginal.  Both terms use the floored rate
    ``max(f, floor)``; the result is the KL against the floored prior and is
    nonnegative.
    """
    total = None
    for f, factor in enumerate(factors):
        floor = float(factor.escape.max()) or RATE_FLOOR
        per = ad.take(params, factor.param_index, axis=-1)
        slope = per * factor.level
        n_draws = slope.shape[0]
        occ, occ_pairs = stats.occupation[f], stats.occupation_pairs[f]
        flux, flux_log, pairs = stats.flux[f], stats.flux_log[f], stats.pairs[f]

        uncoupled = (~factor.coupled).astype(np.float64)
        plain = ad.clamp_min(slope + factor.escape, floor)
        linear_plain = ad.matmul(occ * uncoupled, plain.T)
        cross_plain = ad.matmul(flux * uncoupled, ad.log(plain).T)

        n_other = pairs.shape[-1]
        n_rates = len(factor.level)
        others = np.arange(n_other, dtype=np.float64)
        joint = ad.clamp_min(ad.reshape(slope, (n_draws, n_rates, 1)) * others
                             + factor.escape.reshape(-1, 1), floor)
        joint = ad.reshape(joint, (n_draws, n_rates * n_other))
        coupled = factor.coupled.astype(np.float64).reshape(-1, 1)
        masked_occ = ad.reshape(occ_pairs * coupled, (occ_pairs.shape[0], n_rates * n_other))
        masked_pairs = ad.reshape(pairs * coupled, (pairs.shape[0], n_rates * n_other))
        linear_coupled = ad.matmul(masked_occ, joint.T)
        cross_coupled = ad.matmul(masked_pairs, ad.log(joint).T)

        own = ad.sum(flux_log - flux, axis=-1, keepdims=True)
        term = linear_plain + linear_coupled + own - cross_plain - cross_coupled
        total = term if total is None else total + term
    return total


def kl_divergence(model: Model, stats: KlStats, params: Tensor) -> Tensor:
    """Per-series KL, averaged over the prior draws in ``params``."""
    if model.mean_field:
        per_draw = mean_field_kl(model.factors, stats, params)
    else:
        per_draw = _single_kl(stats, model.structure.rates(params), model.post_to_prior)
    return ad.mean(per_draw, axis=-1)


def reconstruction(model: Model, path: PosteriorPath, rng: Optional[Rng] = None,
                   sample: bool = True) -> Tensor:
    """Per-series log-likelihood summed over the observations.

    With ``sample`` the latent state is a Gumbel-softmax draw from the
    posterior marginal; otherwise (and always for categorical emissions) the
    expectation under the marginal is used.
    """
    cfg = model.config.train
    batch = path.batch
    em = model.emission
    total: Any = ad.constant(np.zeros(batch.size))
    for m, index in enumerate(path.grid.obs_index):
        marginals = path.at(index)
        x = batch.values[:, m, :]
        if sample and em.kind != mjplab.nn.CATEGORICAL:
            assert rng is not None, 'sampling needs an rng'
            draws = [mjplab.nn.gumbel_softmax(q, cfg.temperature, rng, cfg.hard) for q in marginals]
            z = ad.concat(draws, axis=-1) if len(draws) > 1 else draws[0]
            log_prob = em.log_prob(z, x)
        else:
            log_prob = em.expected_log_prob(marginals, x)
        total = total + ad.where(batch.mask[:, m], log_prob, 0.0)
    return total


def elbo(
    model: Model,
    batch: ObservationBatch,
    rng: Rng,
    train: bool = True,
) -> Tuple[Tensor, Tensor]:
    """Batch means of the reconstruction term and of the KL term."""
    path = posterior_solve(model, batch, rng, train)
    recon = ad.mean(reconstruction(model, path, rng, sample=train))
    params = model.prior.sample_params(rng, model.config.prior.samples)
    kl = ad.mean(kl_divergence(model, kl_statistics(model, path), params))
    return recon, kl


#
# Training.
#
@dataclasses.dataclass
class TrainState:
    posterior_opt: AdamState
    prior_opt: AdamState
    epoch: int = 0
    step: int = 0
    history: List[Dict[str, float]] = dataclasses.field(default_factory=list)

    @classmethod
    def create(cls, model: Model) -> 'TrainState':
        cfg = model.config
        return cls(
            posterior_opt=AdamState.create(model.posterior_parameters(), cfg.train.lr),
            prior_opt=AdamState.create(model.prior_parameters(), cfg.prior.lr),
        )


def annealed_length(step: int, full: int, initial: int, hold: int, growth: int) -> int:
    """Observations per series after ``step`` batches of sequence-length annealing."""
    if step < hold:
        return min(full, initial)
    if growth == 0:
        return full
    frac = (step - hold) / growth
    return min(full, initial + int(frac * max(0, full - initial)))


def learning_rate(epoch: int, lr: float, factor: float, period: int) -> float:
    return lr * factor ** (epoch // period)


def _check_loss(value: float, what: str, state: TrainState) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(
            '%s became %r at epoch %d, step %d' % (what, value, state.epoch, state.step))


def train_step(
    model: Model,
    chunk: Sequence[TimeSeries],
    state: TrainState,
    rng: Rng,
) -> Tuple[float, float]:
    """One two-step update on a batch of (time-normalized) series."""
    cfg = model.config
    full = max(len(s) for s in chunk)
    length = annealed_length(state.step, full, cfg.train.seq_anneal_initial,
                             cfg.train.seq_anneal_steps, cfg.train.seq_anneal_growth)
    if length < full:
        chunk = [s.head(length) for s in chunk]
    model.emission.frozen = state.step < cfg.train.cov_freeze_steps
    batch = ObservationBatch.from_series(chunk, cfg.train.horizon, cfg.data.drop_last)

    posterior_params = model.posterior_parameters()
    with ad.Graph() as graph:
        path = posterior_solve(model, batch, rng, train=True)
        recon = ad.mean(reconstruction(model, path, rng, sample=True))
        stats = kl_statistics(model, path)
        loss = recon * -1.0
        if cfg.train.beta_kl > 0:
            params = model.prior.sample_params(rng, cfg.prior.samples)
            loss = loss + ad.mean(kl_divergence(model, stats, params)) * cfg.train.beta_kl
    _check_loss(loss.item(), 'reconstruction loss', state)
    grads, norm = ad.clip_global_norm(
        ad.backward(graph, loss, posterior_params), cfg.train.clip_norm)
    ad.adam_step(posterior_params, grads, state.posterior_opt)

    prior_params = model.prior_parameters()
    frozen = stats.detach()
    with ad.Graph() as graph:
        params = model.prior.sample_params(rng, cfg.prior.samples)
        kl = ad.mean(kl_divergence(model, frozen, params))
    _check_loss(kl.item(), 'KL', state)
    assert kl.item() > -KL_TOL, 'negative KL %r' % kl.item()
    prior_grads, _ = ad.clip_global_norm(ad.backward(graph, kl, prior_params), cfg.train.clip_norm)
    ad.adam_step(prior_params, prior_grads, state.prior_opt)

    for name, p in model.named_parameters():
        assert np.all(np.isfinite(p.data)), \
            'parameter %r is not finite after step %d' % (name, state.step)

    _LOGGER.debug('step %d: %d obs/series, recon %.5g, kl %.5g, grad norm %.3g, frozen cov %r',
                  state.step, length, recon.item(), kl.item(), norm, model.emission.frozen)
    state.step += 1
    return recon.item(), kl.item()


def train(
    model: Model,
    series: Sequence[TimeSeries],
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[TrainState], None]] = None,
) -> TrainState:
    """Run the remaining epochs of the configured schedule.

    ``series`` are in original units; ``state`` resumes an interrupted run.
    Each epoch draws its shuffling and noise from ``Rng(seed, epoch)``, so a
    resumed run repeats exactly what an uninterrupted one would do.
    """
    cfg = model.config
    if not series:
        raise EmptySeries('nothing to train on')
    if cfg.data.max_series:
        series = series[:cfg.data.max_series]
    normalized = [model.time_map.apply(s) for s in series]
    if state is None:
        state = TrainState.create(model)

    for epoch in range(state.epoch, cfg.train.epochs):
        lr = learning_rate(epoch, cfg.train.lr, cfg.train.anneal_factor, cfg.train.anneal_period)
        state.posterior_opt.lr = lr
        state.prior_opt.lr = cfg.prior.lr if cfg.prior.separate_optimizer else lr

        rng = Rng(cfg.train.seed, epoch)
        order = rng.permutation(len(normalized))
        recon_total = kl_total = 0.0
        batches = 0
        for start in range(0, len(order), cfg.train.batch_size):
            chunk = [normalized[i] for i in order[start:start + cfg.train.batch_size]]
            recon, kl = train_step(model, chunk, state, rng)
            recon_total += recon
            kl_total += kl
            batches += 1

        state.epoch = epoch + 1
        row = {'epoch': state.epoch, 'recon': recon_total / batches,
               'kl': kl_total / batches, 'lr': lr}
        state.history.append(row)
        _LOGGER.info('epoch %d/%d: recon %.5g, kl %.5g, lr %.3g',
                     state.epoch, cfg.train.epochs, row['recon'], row['kl'], lr)
        if on_epoch is not None:
            on_epoch(state)
    return state


#
# Inference on trained models.
#
@dataclasses.dataclass
class Reconstruction:
    """Posterior summaries of one series at its observation times, in original units."""
    series: TimeSeries
    decoded: np.ndarray
    marginals: List[np.ndarray]


def reconstruct(
    model: Model,
    series: Sequence[TimeSeries],
    batch_size: int = 0,
) -> List[Reconstruction]:
    """Posterior marginals and decoded observations at each observation time."""
    cfg = model.config
    size = batch_size or cfg.train.batch_size
    result = []
    for start in range(0, len(series), size):
        chunk = series[start:start + size]
        batch = ObservationBatch.from_series(
            [model.time_map.apply(s) for s in chunk], cfg.train.horizon, cfg.data.drop_last)
        path = posterior_solve(model, batch)
        per_obs = [path.at(i) for i in path.grid.obs_index]
        decoded = np.stack([model.emission.decode(m).data for m in per_obs], axis=1)
        for b, s in enumerate(chunk):
            idx = batch.positions[b]
            result.append(Reconstruction(
                series=s,
                decoded=model.time_map.to_original_values(decoded[b, idx]),
                marginals=[np.stack([per_obs[i][f].data[b] for i in idx])
                           for f in range(len(model.heads))],
            ))
    return result


def most_likely_states(model: Model, rec: Reconstruction) -> np.ndarray:
    """Argmax of the marginals, combined into joint states for mean-field models."""
    best = [np.argmax(m, axis=-1) for m in rec.marginals]
    if len(best) == 1:
        return best[0]
    return mjplab.simulate.lv_state(best[0], best[1], model.config.model.k)


def evaluation_terms(
    model: Model,
    series: Sequence[TimeSeries],
    batch_size: int = 0,
) -> Dict[str, float]:
    """Negative reconstruction log-likelihood and KL per series.

    The likelihood uses the marginal expectation, without dropout.
    """
    cfg = model.config
    size = batch_size or cfg.train.batch_size
    rng = Rng(cfg.train.seed, EVAL_STREAM)
    nll = kl = 0.0
    for start in range(0, len(series), size):
        chunk = [model.time_map.apply(s) for s in series[start:start + size]]
        batch = ObservationBatch.from_series(chunk, cfg.train.horizon, cfg.data.drop_last)
        path = posterior_solve(model, batch)
        nll -= float(np.sum(reconstruction(model, path, sample=False).data))
        params = model.prior.sample_params(rng, cfg.prior.samples)
        kl += float(np.sum(kl_divergence(model, kl_statistics(model, path), params).data))
    return {'nll': nll / len(series), 'kl': kl / len(series)}


def prior_mean_rates(model: Model, n: int, rng: Rng) -> np.ndarray:
    """Mean prior parameters over ``n`` draws, in original time units."""
    params = model.prior.sample_params(rng, n).data
    return model.structure.to_original(params.mean(axis=0))


def prior_rate_matrix(model: Model, n: int, rng: Rng) -> mjplab.core.RateMatrix:
    """The generator of the mean prior draw, in original time units."""
    assert not model.mean_field, 'mean-field priors have no single rate matrix'
    params = model.prior.sample_params(rng, n)
    rates = model.structure.rates(params).data.mean(axis=0) / model.time_map.scale
    return model.structure.layout.to_matrix(rates)


def prior_summary(model: Model, n: int = 1000, seed: int = 0) -> Dict[str, Any]:
    """Mean and std of the prior parameters over ``n`` draws.

    Also holds the analysis of the mean generator.
    """
    rng = Rng(seed, SUMMARY_STREAM)
    params = model.prior.sample_params(rng, n).data
    original = model.structure.to_original(params)
    stats = mjplab.analysis.mean_and_std(original)
    report: Dict[str, Any] = {
        'structure': model.structure.name,
        'samples': int(params.shape[0]),
        'parameters': {name: s for name, s in zip(model.structure.names, stats)},
    }
    if model.mean_field:
        return report

    rates = model.structure.rates(ad.constant(params)).data.mean(axis=0) / model.time_map.scale
    f = model.structure.layout.to_matrix(rates)
    try:
        report.update(mjplab.analysis.summarize(f))
    except NotIrreducible as err:
        _LOGGER.warning('mean prior generator is reducible: %s', err)
        report['rate_matrix'] = f.entries.tolist()
    return report


#
# Checkpoints.
#
def save_model(path: str, model: Model, state: Optional[TrainState] = None) -> None:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    manifest: Dict[str, Any] = {
        'config': model.config.to_dict(),
        'obs_dim': model.obs_dim,
        'time_map': model.time_map.to_dict(),
        'init_seed': model.seed,
    }
    if state is not None:
        manifest.update({
            'epoch': state.epoch,
            'step': state.step,
            'history': state.history,
            'rng_state': {'seed': model.config.train.seed, 'epoch': state.epoch},
            'optimizer': {
                'posterior': {'lr': state.posterior_opt.lr, 'step': state.posterior_opt.step},
                'prior': {'lr': state.prior_opt.lr, 'step': state.prior_opt.step},
            },
        })
        for group, opt, names in (
            ('posterior', state.posterior_opt, _names(model, posterior=True)),
            ('prior', state.prior_opt, _names(model, posterior=False)),
        ):
            for name, m, v in zip(names, opt.m, opt.v):
                arrays.append(('optimizer.%s.m.%s' % (group, name), m))
                arrays.append(('optimizer.%s.v.%s' % (group, name), v))
    mjplab.readwrite.save_checkpoint(path, manifest, arrays)


def _names(model: Model, posterior: bool) -> List[str]:
    return [n for n, _ in model.named_parameters() if n.startswith('prior.') != posterior]


def load_model(path: str) -> Tuple[Model, Optional[TrainState]]:
    """Rebuild a model (and its training state, when saved) from a checkpoint."""
    manifest, arrays = mjplab.readwrite.load_checkpoint(path)
    config = Config.from_dict(manifest['config'])
    model = Model(config, int(manifest['obs_dim']), TimeMap.from_dict(manifest['time_map']),
                  seed=manifest.get('init_seed'))
    model.load_arrays(arrays)
    if 'epoch' not in manifest:
        return model, None

    state = TrainState.create(model)
    for group, opt in (('posterior', state.posterior_opt), ('prior', state.prior_opt)):
        saved = manifest['optimizer'][group]
        opt.lr = saved['lr']
        opt.step = saved['step']
        names = _names(model, posterior=group == 'posterior')
        opt.m = [arrays['optimizer.%s.m.%s' % (group, n)] for n in names]
        opt.v = [arrays['optimizer.%s.v.%s' % (group, n)] for n in names]
    state.epoch = int(manifest['epoch'])
    state.step = int(manifest['step'])
    state.history = list(manifest.get('history', []))
    return model, state
