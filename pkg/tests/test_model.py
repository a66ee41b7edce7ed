import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dualunc.data import LabeledImageSet, MultiExpertDataset
from dualunc.model import (
    ArchitectureMismatchError,
    DiagonalGaussian,
    DualUncertaintyModel,
    ModelConfig,
    NonFiniteLossError,
    kl_diag_gaussians,
    load_checkpoint,
    loss_gradchecks,
    nll_from_probs,
    sample_latent,
    save_checkpoint,
    train,
)
from dualunc.numerics import Adam, Tensor, make_rng, ops, parameter
from dualunc.numerics.gradcheck import run_checks

SMALL = ModelConfig(image_size=(12, 12), conv_channels=(3, 4), hidden=16,
                    encoder_channels=(2, 3), encoder_hidden=8, latent_dim=3)


def gaussian(mu, log_var):
    return DiagonalGaussian(Tensor(np.atleast_2d(mu).astype(np.float64)),
                            Tensor(np.atleast_2d(log_var).astype(np.float64)))


def quadrature_kl(mu_p, lv_p, mu_q, lv_q):
    """Sum over dims of the numerically integrated 1-d KL integrand."""
    total = 0.0
    for a, b, c, d in zip(mu_p, lv_p, mu_q, lv_q):
        p = stats.norm(a, math.exp(b / 2))
        q = stats.norm(c, math.exp(d / 2))
        lo, hi = p.ppf(1e-12), p.isf(1e-12)
        val, _ = integrate.quad(lambda t: p.pdf(t) * (p.logpdf(t) - q.logpdf(t)), lo, hi,
                                limit=200, epsabs=1e-12)
        total += val
    return total


@pytest.fixture
def images():
    return np.random.default_rng(0).uniform(0, 1, (5, 12, 12)).astype(np.float32)


# ------------------------------------------------------------------ encoders
def test_prior_encoder_at_init_is_standard_normal(images):
    g = DualUncertaintyModel(SMALL).encode_prior(images)
    assert g.mu.shape == (5, 3)
    np.testing.assert_array_equal(g.mu.data, 0)
    np.testing.assert_array_equal(g.log_var.data, 0)


def test_encoders_are_deterministic(images):
    model = DualUncertaintyModel(SMALL, seed=2)
    for name in ("prior.mu.w", "post.mu.w", "prior.logvar.w", "post.logvar.w"):
        model.params[name].data += 0.1
    a, b = model.encode_prior(images), model.encode_prior(images)
    np.testing.assert_array_equal(a.mu.data, b.mu.data)
    assert a.is_finite()


def test_posterior_depends_on_label(images):
    model = DualUncertaintyModel(SMALL, seed=2)
    model.params["post.mu.w"].data[:] = np.random.default_rng(1).standard_normal((8, 3))
    y0 = ops.one_hot(np.zeros(5, int), 10)
    y1 = ops.one_hot(np.full(5, 7), 10)
    g0, g1 = model.encode_posterior(images, y0), model.encode_posterior(images, y1)
    assert g0.mu.shape == (5, 3)
    assert not np.allclose(g0.mu.data, g1.mu.data)


def test_encoder_shape_errors(images):
    model = DualUncertaintyModel(SMALL)
    with pytest.raises(ValueError, match=r"\(B, 12, 12\)"):
        model.encode_prior(np.zeros((2, 28, 28)))
    with pytest.raises(ValueError, match="one-hot"):
        model.encode_posterior(images, np.zeros((5, 4)))


def test_image_size_must_fit_trunk():
    with pytest.raises(ValueError, match="does not fit"):
        ModelConfig(image_size=(14, 14))


# ------------------------------------------------------------ latent samples
def test_sample_latent_moments():
    g = gaussian(np.zeros((10_000, 1)), np.zeros((10_000, 1)))
    z = sample_latent(g, make_rng(0)).data
    assert abs(z.mean()) < 0.05
    assert abs(z.var() - 1.0) < 0.05


def test_sample_latent_degenerate_variance():
    g = gaussian(np.full((4, 2), 1.5), np.full((4, 2), -1e6))
    np.testing.assert_allclose(sample_latent(g, make_rng(0)).data, 1.5, atol=1e-6)


def test_sample_latent_same_rng_same_draw():
    g = gaussian(np.zeros((3, 2)), np.ones((3, 2)))
    a = sample_latent(g, make_rng(5)).data
    b = sample_latent(g, make_rng(5)).data
    np.testing.assert_array_equal(a, b)


def test_reparameterized_gradient_wrt_mu():
    mu = parameter(np.zeros((10_000, 2)), dtype=np.float64)
    lv = parameter(np.zeros((10_000, 2)), dtype=np.float64)
    z = sample_latent(DiagonalGaussian(mu, lv), make_rng(1))
    ops.sum(z).backward()
    # mean over samples of dz/dmu
    assert abs(mu.grad.mean() - 1.0) < 0.05
    # and d E[z^2]/d log_var = exp(log_var) = 1 at 0, through the reparameterization
    mu.grad = lv.grad = None
    z = sample_latent(DiagonalGaussian(mu, lv), make_rng(1))
    ops.mean(ops.sum(z * z, axis=1)).backward()
    assert abs(lv.grad.sum(axis=0).mean() - 1.0) < 0.05


# ------------------------------------------------------------------------ KL
def test_kl_identity():
    g = gaussian([0.3, -1.0], [0.2, -0.5])
    assert kl_diag_gaussians(g, g).item() == 0.0


def test_kl_unit_shift_against_quadrature():
    closed = kl_diag_gaussians(gaussian([0.0], [0.0]), gaussian([1.0], [0.0])).item()
    assert closed == pytest.approx(0.5, abs=1e-12)
    assert quadrature_kl([0.0], [0.0], [1.0], [0.0]) == pytest.approx(0.5, abs=1e-6)


def test_kl_variance_ratio_against_quadrature():
    closed = kl_diag_gaussians(gaussian([0.0], [1.0]), gaussian([0.0], [0.0])).item()
    assert closed == pytest.approx((math.e - 2) / 2, abs=1e-12)
    assert quadrature_kl([0.0], [1.0], [0.0], [0.0]) == pytest.approx(closed, abs=1e-6)


def test_kl_matches_quadrature_on_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(10):
        mp, mq = rng.normal(0, 1, 3), rng.normal(0, 1, 3)
        lp, lq = rng.uniform(-1.5, 1.5, 3), rng.uniform(-1.5, 1.5, 3)
        closed = kl_diag_gaussians(gaussian(mp, lp), gaussian(mq, lq)).item()
        assert abs(closed - quadrature_kl(mp, lp, mq, lq)) <= 1e-4


def test_kl_averages_over_batch():
    p = gaussian([[0.0], [0.0]], [[0.0], [0.0]])
    q = gaussian([[1.0], [0.0]], [[0.0], [0.0]])
    assert kl_diag_gaussians(p, q).item() == pytest.approx(0.25)


def test_kl_dim_mismatch():
    with pytest.raises(ValueError, match="shapes"):
        kl_diag_gaussians(gaussian([0.0], [0.0]), gaussian([0.0, 1.0], [0.0, 0.0]))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(-5, 5)] * 4), min_size=1, max_size=6))
def test_kl_nonnegative(rows):
    a = np.array(rows)
    kl = kl_diag_gaussians(gaussian(a[:, 0], a[:, 1]), gaussian(a[:, 2], a[:, 3])).item()
    assert kl >= -1e-12
    if np.allclose(a[:, :2], a[:, 2:]):
        assert kl <= 1e-7


# ---------------------------------------------------------------------- loss
def test_nll_perfect_and_uniform():
    labels = np.array([0, 3, 9])
    perfect = Tensor(ops.one_hot(labels, 10, dtype=np.float64))
    assert nll_from_probs(perfect, labels).item() == pytest.approx(0.0, abs=1e-12)
    uniform = Tensor(np.full((3, 10), 0.1))
    assert nll_from_probs(uniform, labels).item() == pytest.approx(math.log(10), abs=1e-12)
    # clamp keeps a zero probability finite
    assert nll_from_probs(Tensor(np.zeros((1, 10))), [0]).item() == pytest.approx(
        -math.log(1e-12))


def test_untrained_model_is_near_uniform(images):
    model = DualUncertaintyModel(SMALL, seed=0)
    z = model.encode_prior(images).mu
    probs = model.classify(images, z).data
    assert probs.shape == (5, 10)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    assert np.abs(probs - 0.1).max() <= 0.2


def test_classify_rejects_wrong_latent_dim(images):
    model = DualUncertaintyModel(SMALL)
    with pytest.raises(ValueError, match="latent batch"):
        model.classify(images, Tensor(np.zeros((5, 2))))


@pytest.mark.parametrize("direction", ["prior_posterior", "posterior_prior"])
def test_loss_breakdown_sums(images, direction):
    cfg = ModelConfig(**{**SMALL.to_dict(), "kl_direction": direction, "beta": 0.7})
    model = DualUncertaintyModel(cfg, seed=1)
    model.params["post.mu.w"].data += 0.2
    lb = model.training_loss(images, [0, 1, 2, 5, 5], make_rng(0))
    assert lb.total.item() == pytest.approx(
        lb.nll.item() + lb.weight_penalty.item() + 0.7 * lb.kl.item(), abs=1e-6)
    assert lb.kl.item() > 0


def test_weight_penalty_brute_force(images):
    model = DualUncertaintyModel(SMALL, seed=3)
    lb = model.training_loss(images, [0, 1, 2, 3, 4], make_rng(0))
    sq = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for n, p in model.params.items()
             if n.startswith("cls.") and n.endswith(".w"))
    assert lb.weight_penalty.item() == pytest.approx((1 - 0.5) / (2 * 5) * sq, rel=1e-5)


def test_beta_zero_ignores_kl(images):
    cfg = ModelConfig(**{**SMALL.to_dict(), "beta": 0.0})
    model = DualUncertaintyModel(cfg, seed=1)
    model.params["post.mu.w"].data += 0.5
    lb = model.training_loss(images, [0, 1, 2, 5, 5], make_rng(0))
    assert lb.kl.item() > 0
    assert lb.total.item() == pytest.approx(lb.nll.item() + lb.weight_penalty.item(), abs=1e-6)
    lb.total.backward()
    assert not np.any(model.params["prior.mu.w"].grad)


def test_loss_rejects_out_of_range_labels(images):
    with pytest.raises(ValueError, match="labels must lie"):
        DualUncertaintyModel(SMALL).training_loss(images, [0, 1, 2, 3, 10], make_rng(0))


@pytest.mark.parametrize("name", sorted(loss_gradchecks()))
def test_loss_gradient_every_parameter(name):
    (result,) = run_checks({name: loss_gradchecks()[name]}, seed=3)
    assert result.max_rel_error <= 1e-3, result


# ----------------------------------------------------------------- training
def tiny_dataset(n, seed, size=12):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, n)
    images = rng.uniform(0, 0.2, (n, size, size)).astype(np.float32)
    for i, c in enumerate(labels):  # one bright pixel block per class
        images[i, c % 3 * 4 : c % 3 * 4 + 3, c // 3 * 3 : c // 3 * 3 + 3] += 0.8
    return LabeledImageSet(images, labels)


def test_one_epoch_reduces_loss_in_most_seeds():
    wins = 0
    seeds = range(5)
    for s in seeds:
        ds = MultiExpertDataset.single(tiny_dataset(100, s))
        model = DualUncertaintyModel(SMALL, seed=s)
        log = train(model, ds, Adam(model.parameters(), lr=3e-3), 1, make_rng(s), batch_size=10)
        wins += np.mean(log.step_losses[-3:]) < log.step_losses[0]
    assert wins >= 0.8 * len(seeds)


def test_training_log_records_epochs():
    ds = MultiExpertDataset.single(tiny_dataset(40, 0))
    model = DualUncertaintyModel(SMALL, seed=0)
    seen = []
    log = train(model, ds, Adam(model.parameters()), 2, make_rng(0), batch_size=16,
                eval_set=ds.base, callback=seen.append)
    assert [e.epoch for e in log.epochs] == [0, 1] == [e.epoch for e in seen]
    assert len(log.step_losses) == 6
    assert 0 <= log.final_accuracy <= 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_names_step():
    ds = MultiExpertDataset.single(tiny_dataset(20, 0))
    model = DualUncertaintyModel(SMALL, seed=0)
    model.params["cls.out.w"].data[:] = np.inf
    with pytest.raises(NonFiniteLossError, match="step 0"):
        train(model, ds, Adam(model.parameters()), 1, make_rng(0), batch_size=8)


def test_train_rejects_mismatched_images():
    ds = MultiExpertDataset.single(tiny_dataset(4, 0, size=28))
    model = DualUncertaintyModel(SMALL)
    with pytest.raises(ValueError, match="do not match"):
        train(model, ds, Adam(model.parameters()), 1, make_rng(0))


# --------------------------------------------------------------- checkpoint
def test_checkpoint_roundtrip_bit_identical(tmp_path, images):
    model = DualUncertaintyModel(SMALL, seed=4)
    model.params["prior.mu.w"].data += 0.3
    save_checkpoint(model, tmp_path / "m.ducp")
    back = load_checkpoint(tmp_path / "m.ducp", expect=SMALL)
    a = model.classify(images, model.encode_prior(images).mu, "off").data
    b = back.classify(images, back.encode_prior(images).mu, "off").data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_architecture_mismatch(tmp_path):
    save_checkpoint(DualUncertaintyModel(SMALL), tmp_path / "m.ducp")
    other = ModelConfig(**{**SMALL.to_dict(), "hidden": 32})
    with pytest.raises(ArchitectureMismatchError, match="hidden"):
        load_checkpoint(tmp_path / "m.ducp", expect=other)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"PK\x03\x04" + bytes(20))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x")


def test_model_config_validation():
    with pytest.raises(ValueError, match="kl_direction"):
        ModelConfig(kl_direction="forward")
    with pytest.raises(ValueError, match="dropout"):
        ModelConfig(dropout=1.0)
    with pytest.raises(ValueError, match="beta"):
        ModelConfig(beta=-1)
