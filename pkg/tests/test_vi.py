import os
import tempfile

import numpy as np
import pytest

import mjplab.autodiff as ad
import mjplab.config
import mjplab.core
import mjplab.readwrite
import mjplab.simulate
import mjplab.vi
from mjplab.core import TimeSeries
from mjplab.errors import (
    ConfigError,
    EmptySeries,
    NonFiniteLoss,
)
from mjplab.nn import ObservationBatch
from mjplab.numerics import Rng


def gaussian_series(n=4, length=4, dim=1, seed=0):
    rng = np.random.default_rng(seed)
    return [
        TimeSeries(np.sort(rng.uniform(0.0, 5.0, length)), rng.normal(size=(length, dim)),
                   meta={'index': i})
        for i in range(n)
    ]


def one_hot_series(k, n=4, length=4, seed=0):
    rng = np.random.default_rng(seed)
    result = []
    for i in range(n):
        states = rng.integers(0, k, length)
        result.append(TimeSeries(np.sort(rng.uniform(0.0, 5.0, length)), np.eye(k)[states], states))
    return result


def level_series(cap, n=4, length=4, seed=0):
    rng = np.random.default_rng(seed)
    return [
        TimeSeries(np.sort(rng.uniform(0.0, 5.0, length)),
                   rng.integers(0, cap, (length, 2)).astype(float))
        for _ in range(n)
    ]


def make_model(config, series):
    time_map = mjplab.vi.TimeMap.fit(series, config.data.normalize_values)
    return mjplab.vi.Model(config, series[0].dim, time_map)


def solved_path(model, series):
    normalized = [model.time_map.apply(s) for s in series]
    batch = ObservationBatch.from_series(normalized, model.config.train.horizon)
    return batch, mjplab.vi.posterior_solve(model, batch)


def test_time_map_fit():
    series = [TimeSeries([1.0, 3.0], [[0.0], [4.0]]), TimeSeries([2.0, 8.0], [[2.0], [2.0]])]
    tm = mjplab.vi.TimeMap.fit(series, normalize_values=True)
    assert tm.offset == 0.0
    assert tm.scale == 8.0
    assert tm.value_low == [0.0]
    assert tm.value_span == [4.0]

    mapped = tm.apply(series[1])
    assert np.allclose(mapped.times, [0.25, 1.0])
    assert np.allclose(mapped.values, [[0.5], [0.5]])
    assert np.allclose(tm.to_original_times(mapped.times), series[1].times)
    assert np.allclose(tm.to_original_values(mapped.values), series[1].values)


def test_time_map_negative_times_and_dict():
    series = [TimeSeries([-2.0, 2.0], [1.0, 1.0])]
    tm = mjplab.vi.TimeMap.fit(series)
    assert tm.offset == -2.0
    assert tm.scale == 4.0
    assert np.allclose(tm.to_model_times([-2.0, 0.0]), [0.0, 0.5])
    assert tm.value_low is None
    assert mjplab.vi.TimeMap.from_dict(tm.to_dict()) == tm


def test_time_map_constant_values():
    series = [TimeSeries([0.0, 1.0], [[3.0, 1.0], [3.0, 2.0]])]
    tm = mjplab.vi.TimeMap.fit(series, normalize_values=True)
    assert tm.value_span == [1.0, 1.0]
    assert np.allclose(tm.to_model_values(series[0].values), [[0.0, 0.0], [0.0, 1.0]])


def test_lv_factors():
    prey, predator = mjplab.vi.lv_factors(4, 1e-3)
    layout = mjplab.core.birth_death_layout(4)
    births = layout.dst > layout.src

    assert list(prey.param_index[births]) == [0, 0, 0]
    assert list(prey.param_index[~births]) == [1, 1, 1]
    assert list(predator.param_index[births]) == [2, 2, 2]
    assert list(predator.param_index[~births]) == [3, 3, 3]
    assert np.array_equal(prey.coupled, ~births)
    assert np.array_equal(predator.coupled, births)
    assert np.array_equal(prey.level, layout.src)
    assert prey.escape.sum() == 1e-3
    assert prey.escape[np.flatnonzero(births & (layout.src == 0))[0]] == 1e-3


@pytest.mark.parametrize(('sections'), [
    {'prior': {'structure': 'lv'}, 'model': {'k': 3}},
    {'prior': {'structure': 'lv'}, 'model': {'k': 3, 'mean_field': True}},
    {'emission': {'state_as_mean': True}, 'data': {'normalize_values': True}},
    {'prior': {'structure': 'dfr'}, 'model': {'k': 6, 'posterior': 'full'}},
])
def test_model_rejects_incompatible_config(tiny_config, sections):
    config = tiny_config(**sections)
    with pytest.raises(ConfigError):
        mjplab.vi.Model(config, 2, mjplab.vi.TimeMap())


def test_model_layouts(tiny_config):
    config = tiny_config(model={'k': 3, 'posterior': 'birth_death'})
    model = mjplab.vi.Model(config, 1, mjplab.vi.TimeMap())
    assert model.heads[0].layout.n_rates == 4
    assert model.structure.layout.n_rates == 6
    assert len(model.post_to_prior) == 4

    dfr = mjplab.vi.Model(
        tiny_config(model={'k': 6, 'posterior': 'masked'}, prior={'structure': 'dfr'},
                    emission={'kind': 'categorical'}),
        6, mjplab.vi.TimeMap())
    assert np.array_equal(dfr.post_to_prior, np.arange(dfr.structure.layout.n_rates))

    names = [name for name, _ in model.named_parameters()]
    assert len(model.prior_parameters()) + len(model.posterior_parameters()) == len(names)
    assert all(not n.startswith('prior.') for n, p in model.named_parameters()
               if any(p is q for q in model.posterior_parameters()))


def test_union_grid():
    grid = mjplab.vi.UnionGrid.build([0.1, 0.5, 0.9], 1.1, 4)
    assert grid.times[0] == 0.0
    assert grid.times[-1] == 1.1
    assert np.all(np.diff(grid.times) > 0)
    assert len(grid.times) == 2 + 3 + 4
    assert np.allclose(grid.times[grid.obs_index], [0.1, 0.5, 0.9])
    assert np.allclose(grid.times[grid.quad_index], grid.rule.nodes)


def test_union_grid_shared_points():
    grid = mjplab.vi.UnionGrid.build([0.0, 0.3], 1.0, 2)
    assert len(grid.times) == 5
    assert grid.obs_index[0] == 0


def test_posterior_marginals_are_distributions(tiny_config):
    series = gaussian_series()
    model = make_model(tiny_config(model={'k': 3}), series)
    batch, path = solved_path(model, series)

    assert len(path.marginals) == 1
    assert len(path.marginals[0]) == len(path.grid.times)
    for q in path.marginals[0]:
        assert q.shape == (batch.size, 3)
        assert np.all(q.data >= 0)
        assert np.allclose(q.data.sum(axis=-1), 1.0)


def brute_force_kl(model, path, prior_rates):
    grid = path.grid
    prior, posterior = model.structure.layout, model.heads[0].layout
    index = {(s, d): i for i, (s, d) in enumerate(zip(posterior.src, posterior.dst))}
    total = np.zeros(path.batch.size)
    for n, idx in enumerate(grid.quad_index):
        q = path.marginals[0][idx].data
        g = path.rates[0](grid.times[idx]).data
        for r, (s, d) in enumerate(zip(prior.src, prior.dst)):
            g_r = g[:, index[(s, d)]] if (s, d) in index else np.zeros(len(q))
            total += grid.rule.weights[n] * q[:, s] * mjplab.vi.kl_rate_term(g_r, prior_rates[r])
    return total


@pytest.mark.parametrize(('posterior'), ['full', 'birth_death'])
def test_kl_matches_quadrature_sum(tiny_config, posterior):
    series = gaussian_series()
    config = tiny_config(model={'k': 3, 'posterior': posterior}, prior={'mode': 'explicit'})
    model = make_model(config, series)
    _, path = solved_path(model, series)
    prior_rates = np.array([0.7, 1.3, 0.2, 2.0, 0.9, 0.4])

    stats = mjplab.vi.kl_statistics(model, path)
    kl = mjplab.vi.kl_divergence(model, stats, ad.constant(prior_rates[None, :]))
    expected = brute_force_kl(model, path, prior_rates)
    assert np.allclose(kl.data, expected, rtol=1e-8, atol=1e-10)
    assert np.all(kl.data >= 0)


def test_kl_averages_prior_draws(tiny_config):
    series = gaussian_series()
    model = make_model(tiny_config(), series)
    _, path = solved_path(model, series)
    stats = mjplab.vi.kl_statistics(model, path)
    draws = np.array([[0.5, 1.5], [2.0, 0.1]])

    both = mjplab.vi.kl_divergence(model, stats, ad.constant(draws)).data
    each = [mjplab.vi.kl_divergence(model, stats, ad.constant(d[None, :])).data for d in draws]
    assert np.allclose(both, (each[0] + each[1]) / 2)


def brute_force_mean_field_kl(model, path, params):
    grid = path.grid
    total = np.zeros(path.batch.size)
    for f, factor in enumerate(model.factors):
        layout = model.heads[f].layout
        floor = float(factor.escape.max()) or mjplab.vi.RATE_FLOOR
        for n, idx in enumerate(grid.quad_index):
            q = path.marginals[f][idx].data
            other = path.marginals[1 - f][idx].data
            g = path.rates[f](grid.times[idx]).data
            for i, s in enumerate(layout.src):
                for y in range(other.shape[-1]):
                    scale = y if factor.coupled[i] else 1
                    base = params[factor.param_index[i]] * factor.level[i]
                    rate = max(base * scale + factor.escape[i], floor)
                    term = rate - g[:, i] + g[:, i] * np.log(g[:, i]) - g[:, i] * np.log(rate)
                    total += grid.rule.weights[n] * q[:, s] * other[:, y] * term
    return total


def mean_field_config(tiny_config, **extra):
    sections = {
        'model': {'k': 3, 'mean_field': True},
        'prior': {'structure': 'lv', 'mode': 'explicit'},
        'emission': {'state_as_mean': True},
    }
    for name, values in extra.items():
        sections[name] = dict(sections.get(name, {}), **values)
    return tiny_config(**sections)


def test_mean_field_kl_matches_quadrature_sum(tiny_config):
    series = level_series(3)
    model = make_model(mean_field_config(tiny_config), series)
    assert len(model.heads) == 2
    _, path = solved_path(model, series)
    params = np.array([0.7, 0.3, 0.4, 1.1])

    stats = mjplab.vi.kl_statistics(model, path)
    kl = mjplab.vi.kl_divergence(model, stats, ad.constant(params[None, :]))
    expected = brute_force_mean_field_kl(model, path, params)
    assert np.allclose(kl.data, expected, rtol=1e-7, atol=1e-9)


def mean_field_stats(cap, own, other, g, weights):
    """KL statistics of one factor from marginals own and other at the quadrature nodes."""
    src = mjplab.core.birth_death_layout(cap).src
    occ = own[:, :, src] * weights[None, :, None]
    flux = occ * g
    log_g = np.log(np.maximum(g, mjplab.vi.RATE_FLOOR))
    return (
        occ.sum(axis=1),
        np.einsum('bni,bny->biy', occ, other),
        flux.sum(axis=1),
        (flux * log_g).sum(axis=1),
        np.einsum('bni,bny->biy', flux, other),
    )


def random_mean_field_kl(cap, escape_rate, params, g_scale, seed, other_marginal=None,
                         g_value=None):
    rng = np.random.default_rng(seed)
    nodes = 5
    weights = rng.uniform(0.1, 1.0, nodes)
    factors = mjplab.vi.lv_factors(cap, escape_rate)
    marginals = [rng.dirichlet(np.ones(cap), size=(1, nodes)) for _ in factors]
    if other_marginal is not None:
        marginals = [np.broadcast_to(np.asarray(other_marginal, dtype=np.float64), (1, nodes, cap))
                     for _ in factors]
    columns = [[], [], [], [], []]
    for f, factor in enumerate(factors):
        g = g_scale * rng.uniform(0.0, 2.0, (1, nodes, len(factor.level)))
        if g_value is not None:
            g = np.full_like(g, g_value)
        for column, value in zip(columns, mean_field_stats(cap, marginals[f], marginals[1 - f],
                                                           g, weights)):
            column.append(ad.constant(value))
    stats = mjplab.vi.KlStats(*columns)
    return mjplab.vi.mean_field_kl(factors, stats, ad.constant(np.atleast_2d(params))).data


@pytest.mark.parametrize(('cap', 'escape_rate', 'params', 'g_scale'), [
    (2, 3e-3, [1e-9, 1e-9, 1e-9, 1e-9], 3e-3),
    (3, 1e-3, [0.7, 0.3, 0.4, 1.1], 1.0),
    (4, 1e-2, [5.0, 1e-6, 2.0, 1e-6], 0.1),
    (3, 0.0, [1e-4, 2.0, 1e-4, 2.0], 10.0),
])
def test_mean_field_kl_is_nonnegative(cap, escape_rate, params, g_scale):
    for seed in range(20):
        kl = random_mean_field_kl(cap, escape_rate, params, g_scale, seed)
        assert np.all(kl >= -mjplab.vi.KL_TOL), (seed, kl)


def test_mean_field_kl_floor_on_nearly_empty_level():
    kl = random_mean_field_kl(2, 3e-3, [1e-9] * 4, 1.0, 0, other_marginal=[0.99, 0.01],
                              g_value=3e-3)
    assert np.all(kl >= -mjplab.vi.KL_TOL)


@pytest.mark.parametrize(('g', 'f', 'expected'), [
    (1.0, 1.0, 0.0),
    (2.0, 1.0, 2 * np.log(2) - 1),
    (0.0, 3.0, 3.0),
])
def test_kl_rate_term(g, f, expected):
    assert np.isclose(mjplab.vi.kl_rate_term(g, f), expected, atol=1e-9)


def test_reconstruction_gradient(tiny_config):
    series = gaussian_series(n=2)
    model = make_model(tiny_config(), series)
    normalized = [model.time_map.apply(s) for s in series]
    batch = ObservationBatch.from_series(normalized, model.config.train.horizon)

    def fn():
        path = mjplab.vi.posterior_solve(model, batch)
        return ad.mean(mjplab.vi.reconstruction(model, path, sample=False))

    err = ad.gradient_check(fn, model.posterior_parameters(), max_coords=40, rng=Rng(1))
    assert err < 1e-4


def test_kl_gradient_posterior_side(tiny_config):
    series = gaussian_series(n=2)
    model = make_model(tiny_config(prior={'mode': 'explicit'}), series)
    normalized = [model.time_map.apply(s) for s in series]
    batch = ObservationBatch.from_series(normalized, model.config.train.horizon)

    def fn():
        path = mjplab.vi.posterior_solve(model, batch)
        params = model.prior.sample_params(None)
        return ad.mean(mjplab.vi.kl_divergence(model, mjplab.vi.kl_statistics(model, path), params))

    err = ad.gradient_check(fn, model.posterior_parameters(), max_coords=40, rng=Rng(2))
    assert err < 1e-4


def test_kl_gradient_prior_side(tiny_config):
    series = gaussian_series(n=2)
    model = make_model(tiny_config(), series)
    _, path = solved_path(model, series)
    frozen = mjplab.vi.kl_statistics(model, path).detach()

    def fn():
        params = model.prior.sample_params(Rng(0, 5), 3)
        return ad.mean(mjplab.vi.kl_divergence(model, frozen, params))

    err = ad.gradient_check(fn, model.prior_parameters(), max_coords=40, rng=Rng(3))
    assert err < 1e-4


@pytest.mark.parametrize(('step', 'expected'), [
    (0, 10),
    (299, 10),
    (300, 10),
    (550, 55),
    (800, 100),
    (5000, 100),
])
def test_annealed_length(step, expected):
    assert mjplab.vi.annealed_length(step, 100, 10, 300, 500) == expected


def test_annealed_length_short_series():
    assert mjplab.vi.annealed_length(0, 4, 10, 300, 500) == 4
    assert mjplab.vi.annealed_length(300, 40, 10, 300, 0) == 40


def test_learning_rate():
    assert mjplab.vi.learning_rate(0, 1e-3, 0.8, 50) == 1e-3
    assert mjplab.vi.learning_rate(49, 1e-3, 0.8, 50) == 1e-3
    assert np.isclose(mjplab.vi.learning_rate(100, 1e-3, 0.8, 50), 0.64e-3)


def test_check_loss(tiny_config):
    model = mjplab.vi.Model(tiny_config(), 1, mjplab.vi.TimeMap())
    state = mjplab.vi.TrainState.create(model)
    mjplab.vi._check_loss(1.0, 'loss', state)
    with pytest.raises(NonFiniteLoss):
        mjplab.vi._check_loss(float('nan'), 'loss', state)


def test_train_empty(tiny_config):
    model = mjplab.vi.Model(tiny_config(), 1, mjplab.vi.TimeMap())
    with pytest.raises(EmptySeries):
        mjplab.vi.train(model, [])


@pytest.mark.parametrize(('sections', 'make_series'), [
    ({}, gaussian_series),
    ({'model': {'k': 3, 'posterior': 'birth_death'}, 'train': {'beta_kl': 1.0}}, gaussian_series),
    ({'emission': {'covariance': 'full'}}, lambda: gaussian_series(dim=2)),
    ({'model': {'k': 6, 'posterior': 'masked'}, 'prior': {'structure': 'dfr'},
      'emission': {'kind': 'categorical'}}, lambda: one_hot_series(6)),
    ({'model': {'mercer': True, 'mercer_frequencies': 2, 'mercer_harmonics': 2, 'dropout': 0.1}},
     gaussian_series),
])
def test_train_runs(tiny_config, sections, make_series):
    series = make_series()
    sections = dict(sections, train=dict({'epochs': 2}, **sections.get('train', {})))
    model = make_model(tiny_config(**sections), series)
    epochs = []
    state = mjplab.vi.train(model, series, on_epoch=lambda s: epochs.append(s.epoch))

    assert epochs == [1, 2]
    assert state.epoch == 2
    assert state.step == 4
    assert [row['epoch'] for row in state.history] == [1, 2]
    assert all(np.isfinite(row['recon']) for row in state.history)
    assert all(row['kl'] >= -mjplab.vi.KL_TOL for row in state.history)


def test_train_mean_field(tiny_config):
    series = level_series(3)
    model = make_model(mean_field_config(tiny_config, prior={'mode': 'implicit'}), series)
    state = mjplab.vi.train(model, series)
    assert state.epoch == 1
    assert np.isfinite(state.history[0]['kl'])


def test_train_changes_parameters(tiny_config):
    series = gaussian_series()
    model = make_model(tiny_config(), series)
    before = {name: p.data.copy() for name, p in model.named_parameters()}
    mjplab.vi.train(model, series)
    changed = [name for name, p in model.named_parameters()
               if not np.array_equal(before[name], p.data)]
    assert any(name.startswith('prior.') for name in changed)
    assert any(name.startswith('encoder.') for name in changed)


def test_max_series(tiny_config):
    series = gaussian_series(n=6)
    model = make_model(tiny_config(data={'max_series': 2}), series)
    state = mjplab.vi.train(model, series)
    assert state.step == 1


def test_save_and_load(tiny_config):
    series = gaussian_series()
    model = make_model(tiny_config(), series)
    state = mjplab.vi.train(model, series)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'model.json')
        mjplab.vi.save_model(path, model, state)
        loaded, loaded_state = mjplab.vi.load_model(path)

        mjplab.vi.save_model(path, model)
        bare, bare_state = mjplab.vi.load_model(path)

    assert loaded.config == model.config
    assert loaded.time_map == model.time_map
    for (name, p), (other, q) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name == other
        assert np.array_equal(p.data, q.data)

    assert loaded_state.epoch == state.epoch
    assert loaded_state.step == state.step
    assert loaded_state.history == state.history
    assert loaded_state.posterior_opt.step == state.posterior_opt.step
    for m, n in zip(state.prior_opt.v, loaded_state.prior_opt.v):
        assert np.array_equal(m, n)

    assert bare_state is None
    assert np.array_equal(bare.encoder.gru.w.data, model.encoder.gru.w.data)


def test_resume_matches_uninterrupted_run(tiny_config):
    series = gaussian_series(n=3)
    config = tiny_config(train={'epochs': 2})
    straight = make_model(config, series)
    mjplab.vi.train(straight, series)

    first = make_model(config.replace('train', epochs=1), series)
    state = mjplab.vi.train(first, series)
    with tempfile.TemporaryDirectory() as tmpdir:
        path = os.path.join(tmpdir, 'model.json')
        mjplab.vi.save_model(path, first, state)
        resumed, state = mjplab.vi.load_model(path)
    resumed.config = resumed.config.replace('train', epochs=2)
    state = mjplab.vi.train(resumed, series, state)

    assert state.epoch == 2
    assert len(state.history) == 2
    for (name, p), (_, q) in zip(straight.named_parameters(), resumed.named_parameters()):
        np.testing.assert_allclose(q.data, p.data, rtol=1e-10, atol=1e-12, err_msg=name)


def read_bytes(path):
    with open(path, 'rb') as fin:
        return fin.read()


def test_repeated_runs_write_identical_checkpoints(tiny_config):
    series = gaussian_series(n=3)
    config = tiny_config(train={'epochs': 2})
    with tempfile.TemporaryDirectory() as tmpdir:
        paths = []
        for run in ('a', 'b'):
            model = make_model(config, series)
            state = mjplab.vi.train(model, series)
            path = os.path.join(tmpdir, '%s.json' % run)
            mjplab.vi.save_model(path, model, state)
            paths.append(path)
        first, second = paths
        assert read_bytes(first) == read_bytes(second)
        blobs = [mjplab.readwrite.blob_path(p) for p in paths]
        assert read_bytes(blobs[0]) == read_bytes(blobs[1])


def test_reconstruct(tiny_config):
    series = gaussian_series(n=3, length=5)
    series[1] = series[1].head(3)
    model = make_model(tiny_config(model={'k': 3}), series)
    recs = mjplab.vi.reconstruct(model, series)

    assert len(recs) == 3
    assert recs[1].decoded.shape == (3, 1)
    assert recs[0].marginals[0].shape == (5, 3)
    assert np.allclose(recs[2].marginals[0].sum(axis=-1), 1.0)
    states = mjplab.vi.most_likely_states(model, recs[0])
    assert states.shape == (5, )
    assert states.max() < 3


def test_reconstruct_is_batch_independent(tiny_config):
    series = gaussian_series(n=3)
    model = make_model(tiny_config(model={'encoder_substeps': 50}, train={'substeps': 50}), series)
    one = mjplab.vi.reconstruct(model, series, batch_size=1)
    together = mjplab.vi.reconstruct(model, series, batch_size=3)
    for a, b in zip(one, together):
        assert np.allclose(a.decoded, b.decoded, atol=1e-6)


def test_reconstruct_mean_field_states(tiny_config):
    series = level_series(3)
    model = make_model(mean_field_config(tiny_config), series)
    rec = mjplab.vi.reconstruct(model, series[:1])[0]
    assert len(rec.marginals) == 2
    assert rec.decoded.shape == (4, 2)
    states = mjplab.vi.most_likely_states(model, rec)
    assert states.max() < 9


def test_evaluation_terms(tiny_config):
    series = gaussian_series()
    model = make_model(tiny_config(), series)
    terms = mjplab.vi.evaluation_terms(model, series)
    assert set(terms) == {'nll', 'kl'}
    assert np.isfinite(terms['nll'])
    assert terms['kl'] >= 0


def test_prior_summary_explicit(tiny_config):
    series = [TimeSeries([0.0, 1.0, 4.0], [0.0, 1.0, 0.0])]
    model = make_model(tiny_config(prior={'mode': 'explicit'}), series)
    report = mjplab.vi.prior_summary(model, n=10)

    assert report['structure'] == 'full'
    assert report['samples'] == 1
    assert np.isclose(report['parameters']['f_0_1']['mean'], 0.25)
    assert report['parameters']['f_1_0']['std'] == 0.0
    assert np.allclose(report['rate_matrix'], [[-0.25, 0.25], [0.25, -0.25]])
    assert np.allclose(report['stationary'], [0.5, 0.5])


def test_prior_summary_dfr(tiny_config):
    series = one_hot_series(6)
    config = tiny_config(model={'k': 6, 'posterior': 'masked'}, prior={'structure': 'dfr'},
                         emission={'kind': 'categorical'})
    report = mjplab.vi.prior_summary(make_model(config, series), n=50)
    assert list(report['parameters']) == ['v', 'r', 'b']
    assert report['samples'] == 50
    assert np.isclose(sum(report['stationary']), 1.0)


def test_prior_mean_rates_mean_field(tiny_config):
    series = level_series(3)
    model = make_model(mean_field_config(tiny_config), series)
    rates = mjplab.vi.prior_mean_rates(model, 5, Rng(0))
    assert rates.shape == (4, )
    assert np.allclose(rates, 1.0 / model.time_map.scale)
    assert mjplab.vi.prior_summary(model)['structure'] == 'lv'


@pytest.mark.slow
def test_elbo_gradient_all_coordinates(tiny_config):
    series = gaussian_series(n=3, length=6)
    config = tiny_config(model={'k': 3, 'posterior': 'birth_death'}, prior={'mode': 'explicit'})
    model = make_model(config, series)
    normalized = [model.time_map.apply(s) for s in series]
    batch = ObservationBatch.from_series(normalized, model.config.train.horizon)

    def fn():
        path = mjplab.vi.posterior_solve(model, batch)
        recon = ad.mean(mjplab.vi.reconstruction(model, path, sample=False))
        kl = ad.mean(mjplab.vi.kl_divergence(model, mjplab.vi.kl_statistics(model, path),
                                             model.prior.sample_params(None)))
        return ad.sub(kl, recon)

    params = model.posterior_parameters() + model.prior_parameters()
    assert ad.gradient_check(fn, params, max_coords=100000) < 1e-4


def recovery_config(sections):
    raw = {
        'model': {'hidden': 32, 'ode_hidden': [32], 'psi_hidden': [32], 'lambda_hidden': [32]},
        'train': {'epochs': 20, 'batch_size': 32, 'quadrature_points': 100},
        'prior': {'noise_dim': 16, 'hidden': [32]},
        'emission': {'hidden': [32]},
    }
    for name, values in sections.items():
        raw.setdefault(name, {}).update(values)
    return mjplab.config.Config.from_dict(raw)


@pytest.mark.slow
def test_dfr_parameter_recovery():
    series = mjplab.simulate.generate(mjplab.simulate.DFR, 500, 50, seed=0, threads=1)
    config = recovery_config({
        'model': {'k': 6, 'posterior': 'masked'},
        'prior': {'structure': 'dfr'},
        'emission': {'kind': 'categorical'},
    })
    model = make_model(config, series)
    state = mjplab.vi.train(model, series)
    assert all(row['kl'] >= -mjplab.vi.KL_TOL for row in state.history)

    summary = mjplab.vi.prior_summary(model, n=1000)
    for name in ('v', 'r', 'b'):
        assert 0.7 <= summary['parameters'][name]['mean'] <= 1.5, (name, summary['parameters'])


@pytest.mark.slow
def test_lv_parameter_recovery():
    truth = mjplab.simulate.LvParams()
    series = mjplab.simulate.generate(mjplab.simulate.LV, 300, 50, seed=0, threads=1)
    config = recovery_config({
        'model': {'k': truth.cap, 'mean_field': True},
        'prior': {'structure': 'lv'},
        'emission': {'state_as_mean': True, 'covariance': 'fixed', 'fixed_variance': 1.0},
    })
    model = make_model(config, series)
    state = mjplab.vi.train(model, series)
    assert all(row['kl'] >= -mjplab.vi.KL_TOL for row in state.history)

    summary = mjplab.vi.prior_summary(model, n=1000)
    expected = {
        'alpha': truth.alpha,
        'beta': truth.beta,
        'delta': truth.delta,
        'gamma': truth.gamma,
    }
    for name, value in expected.items():
        mean = summary['parameters'][name]['mean']
        assert value / 2.5 <= mean <= value * 2.5, (name, summary['parameters'])
