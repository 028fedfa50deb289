import numpy as np
import pytest

from buckbench.converter import DEFAULT_PARAMS, ConverterParams, Duty, State, equilibrium
from buckbench.nn import TrainConfig, forward
from buckbench.pi_controller import tune_pi
from buckbench.sysid import (SAMPLE_PERIOD_PRESETS, CollectionError,
                             ExcitationConfig, IdentifierBundle, NormStats,
                             RawDataset, collect, fit_identifier, load_bundle,
                             load_dataset, predict_next, preprocess,
                             rollout_drift, save_bundle, save_dataset)

PI = tune_pi(DEFAULT_PARAMS)

HOLD = ExcitationConfig(v_ref_range=(12.0, 12.0), r_load_range=(6.0, 6.0),
                        dwell_range=(1.0, 1.0), seed=0)


@pytest.fixture(scope="module")
def rich_dataset():
    exc = ExcitationConfig(dwell_range=(2e-3, 8e-3), seed=7)
    return collect(DEFAULT_PARAMS, PI, exc, n_samples=2500, sample_period=20e-6)


@pytest.fixture(scope="module")
def fitted(rich_dataset):
    pairs, stats = preprocess(rich_dataset)
    cfg = TrainConfig(learning_rate=0.1, epochs=300, batch_size=32, seed=1)
    return fit_identifier(pairs, stats, hidden=7, train_cfg=cfg)


# --- collection ------------------------------------------------------------

def test_collect_shape_and_metadata():
    ds = collect(DEFAULT_PARAMS, PI, HOLD, n_samples=200, sample_period=20e-6)
    assert len(ds) == 200
    assert ds.sample_period == 20e-6
    assert ds.seed == 0
    assert ds.resets == ()


def test_collect_equilibrium_hold_settles():
    ds = collect(DEFAULT_PARAMS, PI, HOLD, n_samples=400, sample_period=20e-6)
    tail = slice(300, None)
    assert np.all(np.abs(ds.i_l[tail] - 2.0) < 0.02)
    assert np.all(np.abs(ds.v_c[tail] - 12.0) < 0.05)
    assert np.all(np.abs(ds.d[tail] - 0.25) < 0.005)


def test_collect_deterministic():
    exc = ExcitationConfig(seed=3)
    a = collect(DEFAULT_PARAMS, PI, exc, n_samples=300, sample_period=20e-6)
    b = collect(DEFAULT_PARAMS, PI, exc, n_samples=300, sample_period=20e-6)
    assert np.array_equal(a.i_l, b.i_l)
    assert np.array_equal(a.v_c, b.v_c)
    assert np.array_equal(a.d, b.d)


def test_collect_excitation_actually_moves(rich_dataset):
    # jumps every few ms must leave a visible spread in the log
    assert rich_dataset.v_c.std() > 1.0
    assert rich_dataset.d.std() > 0.01


def test_collect_rejects_bad_sample_period():
    with pytest.raises(ValueError):
        collect(DEFAULT_PARAMS, PI, HOLD, n_samples=10, sample_period=3e-5,
                control_period=2e-5)


def test_collect_rejects_vref_above_source():
    exc = ExcitationConfig(v_ref_range=(6.0, 50.0))
    with pytest.raises(ValueError):
        collect(DEFAULT_PARAMS, PI, exc, n_samples=10, sample_period=20e-6)


def test_collect_divergence_reports_context():
    # nanohenry inductor: dynamics far above the integrator's fixed step
    with pytest.warns(UserWarning):
        bad = ConverterParams(48.0, 6.0, 1e-9, 1e-12, 75e3)
    with pytest.raises(CollectionError) as err:
        with np.errstate(all="ignore"):
            collect(bad, PI, HOLD, n_samples=100, sample_period=20e-6)
    assert err.value.sample_index >= 0
    assert err.value.v_ref == 12.0
    assert err.value.r_load == 6.0


# --- dataset type ----------------------------------------------------------

def test_dataset_validation():
    with pytest.raises(ValueError):
        RawDataset(20e-6, np.zeros(1), np.zeros(1), np.zeros(1))
    with pytest.raises(ValueError):
        RawDataset(20e-6, np.zeros(3), np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        RawDataset(0.0, np.zeros(3), np.zeros(3), np.zeros(3))
    with pytest.raises(ValueError):
        RawDataset(20e-6, np.zeros(3), np.zeros(3), np.zeros(3), resets=(5,))
    with pytest.raises(ValueError):
        RawDataset(20e-6, np.zeros(3), np.zeros(3), np.zeros(3), resets=(2, 1))


def test_dataset_csv_round_trip(tmp_path, rich_dataset):
    path = tmp_path / "data.csv"
    save_dataset(rich_dataset, path)
    back = load_dataset(path)
    assert back.sample_period == rich_dataset.sample_period
    assert back.seed == rich_dataset.seed
    assert np.array_equal(back.i_l, rich_dataset.i_l)
    assert np.array_equal(back.v_c, rich_dataset.v_c)
    assert np.array_equal(back.d, rich_dataset.d)


def test_dataset_csv_keeps_resets(tmp_path):
    ds = RawDataset(1e-3, np.arange(6.0), np.arange(6.0), np.full(6, 0.3),
                    resets=(2, 4), seed=9)
    path = tmp_path / "r.csv"
    save_dataset(ds, path)
    assert load_dataset(path).resets == (2, 4)


def test_concat_marks_seam():
    a = RawDataset(1e-3, np.arange(4.0), np.arange(4.0), np.full(4, 0.2))
    b = RawDataset(1e-3, np.arange(3.0), np.arange(3.0), np.full(3, 0.4))
    joined = RawDataset.concat(a, b)
    assert len(joined) == 7
    assert joined.resets == (4,)
    pairs, _ = preprocess(joined)
    assert len(pairs) == (4 - 1) + (3 - 1)
    # no pair mixes a's duty with b's state
    for p in pairs:
        assert not (p.input[2] == 0.2 and p.target[0] == 0.0)


def test_presets():
    assert SAMPLE_PERIOD_PRESETS == {"paper": 1e-3, "recommended": 20e-6}


# --- preprocessing ---------------------------------------------------------

def test_preprocess_single_pair():
    ds = RawDataset(1e-3, np.array([2.0, 2.1]), np.array([12.0, 12.3]),
                    np.array([0.25, 0.26]))
    pairs, _ = preprocess(ds)
    assert len(pairs) == 1
    np.testing.assert_array_equal(pairs[0].input, [2.0, 12.0, 0.25])
    np.testing.assert_array_equal(pairs[0].target, [2.1, 12.3])


def test_preprocess_pair_count(rich_dataset):
    pairs, _ = preprocess(rich_dataset)
    assert len(pairs) == len(rich_dataset) - 1


def test_preprocess_constant_dataset_hits_scale_floor():
    ds = RawDataset(1e-3, np.full(10, 2.0), np.full(10, 12.0), np.full(10, 0.25))
    _, stats = preprocess(ds)
    assert np.all(stats.in_scale == 1e-9)
    assert np.all(stats.out_scale == 1e-9)


def test_norm_stats_round_trip(rich_dataset):
    _, stats = preprocess(rich_dataset)
    x = np.array([1.7, 11.2, 0.31])
    back = stats.denorm_in(stats.norm_in(x))
    np.testing.assert_allclose(back, x, rtol=1e-12)
    np.testing.assert_allclose(stats.norm_in(stats.in_mean), 0.0, atol=1e-15)
    np.testing.assert_allclose(stats.norm_out(stats.out_mean), 0.0, atol=1e-15)
    again = NormStats.from_dict(stats.to_dict())
    assert np.array_equal(again.in_mean, stats.in_mean)
    assert np.array_equal(again.out_scale, stats.out_scale)


def test_norm_stats_rejects_bad_scale():
    with pytest.raises(ValueError):
        NormStats(np.zeros(3), np.array([1.0, 0.0, 1.0]), np.zeros(2), np.ones(2))


# --- identification --------------------------------------------------------

def test_identifier_shape_and_quality(fitted, rich_dataset):
    net, stats, report = fitted
    assert net.in_dim == 3 and net.out_dim == 2
    assert net.parameter_count() == 44
    assert report.n_train + report.n_val == len(rich_dataset) - 1
    assert report.n_val == round(0.2 * (len(rich_dataset) - 1))
    _, y = np.array([p.input for p in preprocess(rich_dataset)[0]]), \
        np.array([p.target for p in preprocess(rich_dataset)[0]])
    target_std = y.std(axis=0)
    # this fixture dwells only 2-8 ms, so it is transient-heavy and harder
    # than default excitation; the tight 2% figure belongs to the latter
    assert np.all(report.val_rmse < 0.08 * target_std)
    assert report.beats_persistence
    assert np.all(report.val_rmse < report.persistence_rmse)


def test_identifier_deterministic(rich_dataset):
    pairs, stats = preprocess(rich_dataset)
    cfg = TrainConfig(learning_rate=0.05, epochs=30, batch_size=64, seed=5)
    net_a, _, rep_a = fit_identifier(pairs, stats, train_cfg=cfg)
    net_b, _, rep_b = fit_identifier(pairs, stats, train_cfg=cfg)
    for la, lb in zip(net_a.layers, net_b.layers):
        assert np.array_equal(la.weights, lb.weights)
    assert np.array_equal(rep_a.val_rmse, rep_b.val_rmse)


def test_predict_next_equilibrium(fitted):
    net, stats, _ = fitted
    eq = equilibrium(DEFAULT_PARAMS, Duty(0.25))
    nxt = predict_next(net, stats, eq, Duty(0.25))
    assert abs(nxt.i_l - eq.i_l) < 0.05
    assert abs(nxt.v_c - eq.v_c) < 0.3


def test_predict_next_is_composition(fitted):
    net, stats, _ = fitted
    s = State(1.3, 9.7)
    got = predict_next(net, stats, s, Duty(0.4))
    manual = stats.denorm_out(forward(net, stats.norm_in(
        np.array([1.3, 9.7, 0.4]))))
    assert got.i_l == manual[0] and got.v_c == manual[1]


def test_rollout_drift_reports(fitted):
    net, stats, _ = fitted
    eq = equilibrium(DEFAULT_PARAMS, Duty(0.25))
    drift = rollout_drift(net, stats, DEFAULT_PARAMS, eq, [0.25] * 50, 20e-6)
    assert drift.shape == (50,)
    assert np.isfinite(drift).all()
    assert drift[0] < 0.5  # one step from equilibrium stays close


# --- bundle ----------------------------------------------------------------

def test_bundle_round_trip(tmp_path, fitted):
    net, stats, _ = fitted
    bundle = IdentifierBundle(net, stats, 20e-6)
    path = tmp_path / "ident.json"
    save_bundle(bundle, path)
    back = load_bundle(path)
    assert back.sample_period == 20e-6
    for la, lb in zip(bundle.network.layers, back.network.layers):
        assert np.array_equal(la.weights, lb.weights)
        assert np.array_equal(la.biases, lb.biases)
    assert np.array_equal(back.stats.in_mean, stats.in_mean)
    s = State(1.0, 8.0)
    a = predict_next(bundle.network, bundle.stats, s, Duty(0.3))
    b = predict_next(back.network, back.stats, s, Duty(0.3))
    assert a.i_l == b.i_l and a.v_c == b.v_c
