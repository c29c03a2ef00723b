import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dilam.core import backward
from dilam.errors import ChecksumMismatchError, DataError, DimensionError
from dilam.stats import ActivationStats, Welford, alignment_loss, collect_clear_stats, layer_losses, load_stats, \
    save_stats
from helpers import norm_only_model


def test_welford_closed_form():
    w = Welford((2,))
    for v in [1.0, 2.0, 3.0, 4.0]:
        w.update([v, -v])
    np.testing.assert_allclose(w.mean, [2.5, -2.5])
    np.testing.assert_allclose(w.variance, [1.25, 1.25])


def test_welford_single_sample_has_zero_variance():
    w = Welford((3, 2))
    w.update(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(w.variance, np.zeros((3, 2)))


def test_welford_empty_raises():
    with pytest.raises(DataError):
        Welford((1,)).variance


def test_welford_shape_mismatch():
    with pytest.raises(DimensionError):
        Welford((2,)).update_batch(np.zeros((4, 3)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 300), chunk=st.integers(1, 50),
       scale=st.floats(1e-3, 1e3), shift=st.floats(-1e3, 1e3))
def test_welford_matches_two_pass(seed, n, chunk, scale, shift):
    x = np.random.default_rng(seed).normal(shift, scale, (n, 3))
    w = Welford((3,))
    for i in range(0, n, chunk):
        w.update_batch(x[i:i + chunk])
    mean = x.sum(axis=0) / n
    var = ((x - mean) ** 2).sum(axis=0) / n
    tol = 1e-6 * max(1.0, abs(shift), scale**2)
    assert np.abs(w.mean - mean).max() <= tol
    assert np.abs(w.variance - var).max() <= tol


def test_welford_merge_equals_sequential():
    x = np.random.default_rng(1).normal(size=(101, 4))
    a, b, whole = Welford((4,)), Welford((4,)), Welford((4,))
    a.update_batch(x[:37])
    b.update_batch(x[37:])
    a.merge(b)
    whole.update_batch(x)
    np.testing.assert_allclose(a.mean, whole.mean, atol=1e-12)
    np.testing.assert_allclose(a.variance, whole.variance, atol=1e-12)


def test_collect_covers_every_norm(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    assert stats.layer_names() == [n.name for n in tiny_model.norm_layers()]
    assert stats.count == 40
    for mu, var in stats.layers.values():
        assert mu.shape == var.shape
        assert var.min() >= 0


@pytest.mark.parametrize("bs", [1, 7, 40])
def test_collect_batch_size_invariant(tiny_model, tiny_images, bs):
    ref = collect_clear_stats(tiny_model, tiny_images, batch_size=64)
    got = collect_clear_stats(tiny_model, tiny_images, batch_size=bs)
    for name in ref.layers:
        for a, b in zip(ref.layers[name], got.layers[name]):
            assert np.abs(a - b).max() < 1e-5


def test_collect_errors(tiny_model, tiny_images):
    with pytest.raises(DataError):
        collect_clear_stats(tiny_model, tiny_images[:0])
    with pytest.raises(DimensionError):
        collect_clear_stats(tiny_model, np.zeros((2, 3, 9, 9), np.float32))


def _stats_of_batch(model, batch):
    taps = {}
    model.forward(batch, taps)
    layers = {k: (t.data.mean(axis=0), t.data.var(axis=0)) for k, t in taps.items()}
    return ActivationStats(layers, len(batch), model.backbone_checksum())


def test_loss_zero_when_statistics_match(tiny_model, tiny_images):
    batch = tiny_images[:16]
    stats = _stats_of_batch(tiny_model, batch)
    assert alignment_loss(tiny_model, batch, stats).item() == pytest.approx(0.0, abs=1e-6)
    assert alignment_loss(tiny_model, batch, stats, scope="all-layers").item() == pytest.approx(0.0, abs=1e-6)


def test_loss_nonnegative_and_positive_off_distribution(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    shifted = np.clip(tiny_images[:16] * 0.3 + 0.6, 0, 1)
    assert alignment_loss(tiny_model, shifted, stats).item() > alignment_loss(tiny_model, tiny_images[:16], stats).item()
    assert alignment_loss(tiny_model, tiny_images[:16], stats).item() >= 0


def test_doubled_batch_gives_identical_loss(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    batch = tiny_images[:8]
    doubled = np.concatenate([batch, batch])
    a = alignment_loss(tiny_model, batch, stats).item()
    b = alignment_loss(tiny_model, doubled, stats).item()
    assert b == pytest.approx(a, rel=1e-5)


def test_loss_errors(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    with pytest.raises(DataError, match="at least 2"):
        alignment_loss(tiny_model, tiny_images[:1], stats)
    partial = ActivationStats({k: v for k, v in list(stats.layers.items())[:1]}, 40, stats.checksum)
    with pytest.raises(DataError, match="layer set mismatch"):
        alignment_loss(tiny_model, tiny_images[:4], partial)
    other = ActivationStats(stats.layers, 40, "0" * 64)
    with pytest.raises(ChecksumMismatchError):
        alignment_loss(tiny_model, tiny_images[:4], other)


def test_layer_losses_sum_to_total(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    terms = layer_losses(tiny_model, tiny_images[:8], stats, "all-layers")
    total = alignment_loss(tiny_model, tiny_images[:8], stats, "all-layers").item()
    assert sum(t.item() for t in terms.values()) == pytest.approx(total, rel=1e-6)


def test_after_cut_excludes_block1(tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    names = set(layer_losses(tiny_model, tiny_images[:4], stats))
    assert names == {"block2.norm1", "block2.norm2"}


@pytest.mark.parametrize("seed", range(5))
def test_terminal_norm_gradient_closed_form(seed):
    rng = np.random.default_rng(seed)
    model = norm_only_model(channels=3, hw=4)
    norm = model.layers[0]
    norm.running_mean[:] = rng.normal(0, 1, 3)
    norm.running_var[:] = rng.uniform(0.5, 2, 3)
    norm.gamma.tensor.data[:] = rng.uniform(0.5, 1.5, 3)
    norm.beta.tensor.data[:] = rng.normal(0, 0.5, 3)
    x = rng.normal(0, 1.5, (16, 3, 4, 4)).astype(np.float32)
    target = ActivationStats({"norm": (rng.normal(0, 1, (3, 4, 4)).astype(np.float32),
                                       rng.uniform(0.1, 3, (3, 4, 4)).astype(np.float32))}, 1,
                             model.backbone_checksum())
    model.set_trainable(None)
    backward(alignment_loss(model, x, target))

    # oracle: y = g*z + b with frozen z, so mean_y = g*mz + b and var_y = g^2 * vz
    z = (x.astype(np.float64) - norm.running_mean[None, :, None, None]) / np.sqrt(
        norm.running_var[None, :, None, None].astype(np.float64) + norm.eps)
    mz, vz = z.mean(axis=0), z.var(axis=0)
    g = norm.gamma.data.astype(np.float64)[:, None, None]
    b = norm.beta.data.astype(np.float64)[:, None, None]
    s_mean = np.sign(g * mz + b - target.layers["norm"][0])
    s_var = np.sign(g * g * vz - target.layers["norm"][1])
    e = mz.size
    d_beta = s_mean.sum(axis=(1, 2)) / e
    d_gamma = (s_mean * mz + s_var * 2 * g * vz).sum(axis=(1, 2)) / e
    # norm-wise: an exactly cancelling channel sum is 0 analytically but ~1e-9 in float32
    assert np.linalg.norm(norm.beta.grad - d_beta) / np.linalg.norm(d_beta) < 1e-3
    assert np.linalg.norm(norm.gamma.grad - d_gamma) / np.linalg.norm(d_gamma) < 1e-3


def test_stats_round_trip(tmp_path, tiny_model, tiny_images):
    stats = collect_clear_stats(tiny_model, tiny_images)
    save_stats(stats, tmp_path / "s.bin")
    back = load_stats(tmp_path / "s.bin")
    assert back.count == stats.count and back.checksum == stats.checksum
    for name in stats.layers:
        for a, b in zip(stats.layers[name], back.layers[name]):
            assert np.array_equal(a, b)
