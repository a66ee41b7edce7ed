import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualunc.data import LabeledImageSet
from dualunc.model import DualUncertaintyModel, ModelConfig
from dualunc.numerics import make_rng
from dualunc.uncertainty import (
    UncertaintyReport,
    changed_groups,
    decompose,
    draw_noise,
    mc_outputs,
    pass_moments,
    predictive_mean,
    predictive_moments,
    predictive_variance,
    read_report,
    referral_curve,
    write_report,
)

SMALL = ModelConfig(image_size=(12, 12), conv_channels=(3, 4), hidden=16,
                    encoder_channels=(2, 3), encoder_hidden=8, latent_dim=3)


def active_model(fusion="latent", seed=0):
    """Small model with non-trivial encoder heads, so both signals vary."""
    cfg = ModelConfig(**{**SMALL.to_dict(), "fusion": fusion})
    model = DualUncertaintyModel(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        if name.startswith(("prior.mu", "prior.logvar")):
            p.data = (rng.standard_normal(p.shape) * 0.5).astype(np.float32)
    w = model.params["cls.out.w"].data
    w *= 4
    if fusion == "latent":
        w[cfg.hidden:] = rng.standard_normal(w[cfg.hidden:].shape)
    return model


@pytest.fixture(scope="module")
def evalset():
    rng = np.random.default_rng(1)
    return LabeledImageSet(rng.uniform(0, 1, (30, 12, 12)).astype(np.float32),
                           rng.integers(0, 10, 30))


def report_from(truth, pred, lu=None, eu=None):
    truth = np.asarray(truth)
    n = len(truth)
    mean = np.eye(10)[np.asarray(pred)]
    lu = np.zeros(n) if lu is None else np.asarray(lu, float)
    eu = np.zeros(n) if eu is None else np.asarray(eu, float)
    return UncertaintyReport(np.arange(n), truth, mean, mean,
                             np.repeat(lu[:, None], 10, 1), np.repeat(eu[:, None], 10, 1))


# ------------------------------------------------------------- moments
def test_two_pass_variance_example():
    mean, var = pass_moments(np.array([[[0.2]], [[0.8]]]))
    assert mean[0, 0] == pytest.approx(0.5)
    assert var[0, 0] == pytest.approx(0.09, abs=1e-12)


def test_identical_passes_have_exactly_zero_variance():
    f = np.tile(np.array([[0.1, 0.7, 0.2]]), (20, 4, 1)) + np.float32(1e-3)
    assert np.all(pass_moments(f)[1] == 0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4), st.integers(1, 5)),
              elements=st.floats(0, 1)))
def test_variance_matches_brute_force(f):
    mean, var = pass_moments(f)
    np.testing.assert_allclose(mean, f.mean(axis=0), atol=1e-12)
    assert np.max(np.abs(var - f.var(axis=0))) <= 1e-6
    assert np.all(var >= 0)


def test_single_pass_equals_output(evalset):
    model = active_model()
    x = evalset.images[:4]
    for mode in ("LU", "EU"):
        noise = draw_noise(model, mode, 1, 4, make_rng(2))
        single = mc_outputs(model, x, mode, noise)[0]
        mean, var = predictive_moments(model, x, mode, 1, make_rng(2))
        np.testing.assert_array_equal(mean, single)
        assert np.all(var == 0)


def test_lu_with_collapsed_prior_is_deterministic(evalset):
    model = active_model()
    model.params["prior.logvar.w"].data[:] = 0
    model.params["prior.logvar.b"].data[:] = -1e4  # clamped to the floor
    x = evalset.images[:3]
    out = mc_outputs(model, x, "LU", draw_noise(model, "LU", 6, 3, make_rng(0)))
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-6)
    assert np.max(predictive_variance(model, x, "LU", 6, make_rng(0))) < 1e-10


def test_mc_mean_converges(evalset):
    model = active_model()
    x = evalset.images[:1]
    for mode in ("LU", "EU"):
        a = predictive_mean(model, x, mode, 500, make_rng(1))
        b = predictive_mean(model, x, mode, 1000, make_rng(2))
        assert np.max(np.abs(a - b)) <= 0.02


def test_predictive_mean_rows_are_distributions(evalset):
    mean = predictive_mean(active_model(), evalset.images, "EU", 5, make_rng(0))
    np.testing.assert_allclose(mean.sum(axis=1), 1.0, atol=1e-5)


@pytest.mark.parametrize("mode, T", [("XU", 3), ("LU", 0)])
def test_mode_and_pass_validation(evalset, mode, T):
    with pytest.raises(ValueError):
        predictive_variance(active_model(), evalset.images[:2], mode, T, make_rng(0))


# ---------------------------------------------------------------- decompose
def test_mode_isolation(evalset):
    model = active_model()
    base = decompose(model, evalset, T=8, latent_seed=1, dropout_seed=2)
    other_dropout = decompose(model, evalset, T=8, latent_seed=1, dropout_seed=99)
    other_latent = decompose(model, evalset, T=8, latent_seed=77, dropout_seed=2)
    np.testing.assert_array_equal(base.lu_variance, other_dropout.lu_variance)
    np.testing.assert_array_equal(base.predictive_mean, other_dropout.predictive_mean)
    np.testing.assert_array_equal(base.eu_variance, other_latent.eu_variance)
    assert not np.array_equal(base.eu_variance, other_dropout.eu_variance)
    assert not np.array_equal(base.lu_variance, other_latent.lu_variance)


def test_report_independent_of_batching(evalset):
    model = active_model()
    a = decompose(model, evalset, T=5, seed=3, batch_size=7)
    b = decompose(model, evalset, T=5, seed=3, batch_size=30)
    np.testing.assert_allclose(a.lu_variance, b.lu_variance, rtol=1e-5, atol=1e-12)
    np.testing.assert_allclose(a.eu_variance, b.eu_variance, rtol=1e-5, atol=1e-12)


def test_report_invariants(evalset):
    rep = decompose(active_model(), evalset, T=6)
    assert rep.lu_variance.shape == rep.eu_variance.shape == (30, 10)
    np.testing.assert_allclose(rep.predictive_mean.sum(axis=1), 1, atol=1e-5)
    assert np.all(rep.lu_variance >= 0) and np.all(rep.eu_variance >= 0)
    np.testing.assert_allclose(rep.lu, rep.lu_variance.mean(axis=1))
    assert rep.lu.max() > 0 and rep.eu.max() > 0


def test_constant_fusion_has_zero_labels_uncertainty(evalset):
    rep = decompose(active_model(fusion="constant"), evalset, T=10)
    assert np.all(rep.lu_variance == 0.0)
    assert rep.eu.max() > 0


def test_no_fusion_model_decomposes(evalset):
    rep = decompose(active_model(fusion="none"), evalset, T=4)
    assert np.all(rep.lu == 0.0)


def test_decompose_rejects_empty(evalset):
    with pytest.raises(ValueError, match="empty"):
        decompose(active_model(), evalset.subset(np.array([], dtype=int)), T=2)


def test_group_stats():
    rep = report_from([2, 5, 0, 1], [2, 5, 0, 1], lu=[0.4, 0.2, 0.0, 0.0])
    stats = rep.group_stats(changed_groups([2, 5]))
    assert stats[("LU", "changed")] == {"n": 2, "mean": pytest.approx(0.3),
                                        "variance": pytest.approx(0.01)}
    assert stats[("LU", "unchanged")]["mean"] == 0.0
    assert changed_groups([5, 2], 4) == {"unchanged": [0, 1, 3], "changed": [2, 5]}


# ----------------------------------------------------------------- referral
def test_referral_all_correct():
    rep = report_from([1, 2, 3, 4], [1, 2, 3, 4], lu=[0.3, 0.1, 0.2, 0.4])
    assert [a for _, a in referral_curve(rep, rep.truth, "LU")] == [1.0] * 6


def test_referral_ties_give_overall_accuracy():
    truth = np.arange(10) % 10
    pred = truth.copy()
    pred[[1, 4, 8]] = 0  # 7 of 10 correct
    rep = report_from(truth, pred)
    for _, acc in referral_curve(rep, truth, "EU"):
        assert acc == pytest.approx(0.7)


def test_referral_drops_most_uncertain_first():
    truth = np.zeros(10, int)
    pred = np.zeros(10, int)
    pred[:5] = 1  # wrong, and the most uncertain
    rep = report_from(truth, pred, lu=np.r_[np.full(5, 0.9), np.full(5, 0.1)])
    curve = dict(referral_curve(rep, truth, "LU"))
    assert curve[1.0] == 0.5
    assert curve[0.5] == 1.0
    assert curve[0.8] == pytest.approx(5 / 8)


def test_referral_random_signal_on_random_labels():
    rng = np.random.default_rng(0)
    n = 5000
    rep = report_from(rng.integers(0, 10, n), rng.integers(0, 10, n), lu=rng.random(n))
    for _, acc in referral_curve(rep, rep.truth, "LU"):
        assert abs(acc - 0.1) <= 0.05


def test_referral_length_mismatch():
    rep = report_from([1, 2], [1, 2])
    with pytest.raises(ValueError, match="truth"):
        referral_curve(rep, [1, 2, 3], "LU")


def test_signal_name_validated():
    with pytest.raises(ValueError):
        report_from([1], [1]).signal("AU")


# ------------------------------------------------------------ serialization
def test_report_roundtrip(tmp_path, evalset):
    rep = decompose(active_model(), evalset, T=4)
    groups = changed_groups([2, 5])
    write_report(rep, tmp_path / "r.tsv", groups)
    cols, summary = read_report(tmp_path / "r.tsv")
    np.testing.assert_array_equal(cols["id"], rep.ids)
    np.testing.assert_array_equal(cols["pred"], rep.predicted_class)
    np.testing.assert_array_equal(cols["lu"], rep.lu)
    np.testing.assert_array_equal(cols["eu_3"], rep.eu_variance[:, 3])
    assert {(r["signal"], r["group"]) for r in summary} == {
        ("LU", "unchanged"), ("LU", "changed"), ("EU", "unchanged"), ("EU", "changed")}


def test_read_report_rejects_other_files(tmp_path):
    (tmp_path / "x.tsv").write_text("id\tlu\n1\t0\n")
    with pytest.raises(ValueError, match="not an uncertainty report"):
        read_report(tmp_path / "x.tsv")
