import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from m2d2 import diffcore as dc
from m2d2.errors import ConfigError, ContractError
from m2d2.fusionnet import NetworkConfig, init_parameters
from m2d2.m2d2prior import (
    IMG_KINDS,
    TS_KINDS,
    ContextBatch,
    ImgTransform,
    M2d2Config,
    TsTransform,
    context_kernel,
    context_log_likelihood,
    mahalanobis_sq,
    sample_context_batch,
    transform_image,
    transform_timeseries,
    uncertainty_regularizer,
)
from m2d2.variational import LogNormalVariational, sample_lognormal

RNG = np.random.default_rng


# ---------------------------------------------------------------- config


def test_default_constants():
    cfg = M2d2Config()
    assert (cfg.tau_f, cfg.f_scale, cfg.cov_scale, cfg.beta) == (1.0, 10.0, 0.1, 5.0)
    assert cfg.context_batch_size == 64
    assert cfg.ts_transforms == TS_KINDS and cfg.img_transforms == IMG_KINDS


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError, match="beta"):
        M2d2Config(beta=0.0)
    with pytest.raises(ConfigError, match="tau_f"):
        M2d2Config(tau_f=-1.0)
    with pytest.raises(ConfigError, match="ts_transforms"):
        M2d2Config(ts_transforms=("time_warp",))
    with pytest.raises(ConfigError, match="drop_fraction"):
        TsTransform("drop_start", drop_fraction=1.0)
    with pytest.raises(ConfigError, match="noise_sigma"):
        TsTransform("gaussian_noise", noise_sigma=0.0)
    with pytest.raises(ConfigError, match="blur_kernel"):
        ImgTransform("gaussian_blur", blur_kernel=4)


# ---------------------------------------------------------------- time-series transforms


def test_invert_reverses_time():
    x = np.array([1.0, 2.0, 3.0, 4.0])[:, None]
    out = transform_timeseries(x, TsTransform("invert"), RNG(0))
    np.testing.assert_array_equal(out[:, 0], [4.0, 3.0, 2.0, 1.0])
    np.testing.assert_array_equal(transform_timeseries(out, TsTransform("invert"), RNG(0)), x)


def test_drop_start_half():
    out = transform_timeseries(np.ones((4, 1)), TsTransform("drop_start", drop_fraction=0.5), RNG(0))
    np.testing.assert_array_equal(out[:, 0], [0.0, 0.0, 1.0, 1.0])


def test_gaussian_noise_statistics():
    x = np.zeros((20_000, 2))
    out = transform_timeseries(x, TsTransform("gaussian_noise", noise_sigma=0.5), RNG(1))
    assert abs(out.std() - 0.5) < 0.01 and abs(out.mean()) < 0.01


def test_degenerate_sequence_rejected():
    with pytest.raises(ContractError):
        transform_timeseries(np.ones((1, 3)), TsTransform("invert"), RNG(0))


@settings(max_examples=40, deadline=None)
@given(kind=st.sampled_from(TS_KINDS), t=st.integers(2, 12), d=st.integers(1, 4), seed=st.integers(0, 999))
def test_timeseries_transform_preserves_shape(kind, t, d, seed):
    x = RNG(seed).normal(size=(t, d))
    out = transform_timeseries(x, TsTransform(kind), RNG(seed))
    assert out.shape == x.shape and np.all(np.isfinite(out))


# ---------------------------------------------------------------- image transforms


def test_image_examples():
    x = np.full((1, 8, 8), 0.3)
    np.testing.assert_allclose(transform_image(x, ImgTransform("invert"), RNG(0)), 0.7)
    np.testing.assert_allclose(transform_image(x, ImgTransform("gaussian_blur"), RNG(0)), 0.3, atol=1e-15)
    y = RNG(2).uniform(size=(2, 8, 8))
    np.testing.assert_array_equal(
        transform_image(y, ImgTransform("solarize", solarize_threshold=0.0), RNG(0)),
        transform_image(y, ImgTransform("invert"), RNG(0)),
    )


def test_flips():
    x = RNG(3).uniform(size=(1, 4, 6))
    np.testing.assert_array_equal(transform_image(x, ImgTransform("hflip"), RNG(0)), x[:, :, ::-1])
    np.testing.assert_array_equal(transform_image(x, ImgTransform("vflip"), RNG(0)), x[:, ::-1, :])


def test_crop_is_resized_window_of_input():
    x = np.arange(64, dtype=float).reshape(1, 8, 8) / 64.0
    out = transform_image(x, ImgTransform("random_crop", crop_ratio=0.5), RNG(4))
    assert out.shape == x.shape
    # 4x4 window blown up by nearest neighbour: each source pixel repeats in a 2x2 block
    np.testing.assert_array_equal(out[:, ::2, ::2], out[:, 1::2, 1::2])
    assert set(np.unique(out)) <= set(np.unique(x))


def test_blur_matches_explicit_kernel():
    x = RNG(5).uniform(size=(1, 6, 6))
    out = transform_image(x, ImgTransform("gaussian_blur", blur_kernel=3, blur_sigma=1.0), RNG(0))
    k1 = np.exp(-0.5 * np.array([-1.0, 0.0, 1.0]) ** 2)
    k = np.outer(k1, k1) / np.outer(k1, k1).sum()
    padded = np.pad(x[0], 1, mode="edge")
    ref = np.array([[np.sum(padded[i : i + 3, j : j + 3] * k) for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(out[0], ref, atol=1e-14)


def test_out_of_range_pixels_rejected():
    with pytest.raises(ContractError):
        transform_image(np.full((1, 8, 8), 1.2), ImgTransform("invert"), RNG(0))


@settings(max_examples=60, deadline=None)
@given(kind=st.sampled_from(IMG_KINDS), side=st.integers(4, 12), c=st.integers(1, 3), seed=st.integers(0, 999))
def test_image_transform_preserves_shape_and_range(kind, side, c, seed):
    x = RNG(seed).uniform(size=(c, side, side))
    out = transform_image(x, ImgTransform(kind), RNG(seed))
    assert out.shape == x.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


# ---------------------------------------------------------------- context batches


def _train_arrays(n=5):
    rng = RNG(6)
    return rng.normal(size=(n, 6, 2)), rng.uniform(size=(n, 1, 8, 8))


def test_context_batch_shapes_and_determinism():
    ehr, cxr = _train_arrays()
    cfg = M2d2Config(context_batch_size=1)
    batch = sample_context_batch(ehr, cxr, cfg, RNG(0))
    assert batch.x_ehr.shape == (1, 6, 2) and batch.x_cxr.shape == (1, 1, 8, 8) and batch.M == 1
    a = sample_context_batch(ehr, cxr, M2d2Config(), RNG(7))
    b = sample_context_batch(ehr, cxr, M2d2Config(), RNG(7))
    np.testing.assert_array_equal(a.x_ehr, b.x_ehr)
    np.testing.assert_array_equal(a.x_cxr, b.x_cxr)
    assert a.ts_kinds == b.ts_kinds and a.img_kinds == b.img_kinds


def test_context_transform_frequencies():
    ehr, cxr = _train_arrays(3)
    batch = sample_context_batch(ehr, cxr, M2d2Config(), RNG(8), size=10_000)
    counts = Counter(batch.ts_kinds)
    for kind in TS_KINDS:
        assert abs(counts[kind] / 10_000 - 1 / 3) < 0.02
    img_counts = Counter(batch.img_kinds)
    assert set(img_counts) == set(IMG_KINDS)


def test_context_batch_rejects_empty_train():
    with pytest.raises(ContractError):
        sample_context_batch(np.zeros((0, 6, 2)), np.zeros((0, 1, 8, 8)), M2d2Config(), RNG(0))


def test_context_batch_requires_paired_rows():
    with pytest.raises(ValueError):
        ContextBatch(np.zeros((2, 4, 1)), np.zeros((3, 1, 8, 8)))


# ---------------------------------------------------------------- kernel and Mahalanobis


def test_context_kernel_examples():
    cfg = M2d2Config(beta=0.5, cov_scale=1.0)
    np.testing.assert_allclose(context_kernel(np.eye(2), 2.0, cfg).data, 2.5 * np.eye(2))
    np.testing.assert_allclose(context_kernel(np.zeros((3, 4)), 1.0, cfg).data, 0.5 * np.eye(3))
    h = RNG(9).normal(size=(5, 3))
    k = context_kernel(h, 0.7, M2d2Config()).data
    assert np.max(np.abs(k - k.T)) <= 1e-12
    assert context_kernel(h, np.array([0.1, 0.2]), M2d2Config()).shape == (2, 5, 5)


def test_context_kernel_always_factorises():
    rng = RNG(10)
    for _ in range(1000):
        m, p = rng.integers(1, 7), rng.integers(1, 7)
        h = rng.normal(scale=rng.uniform(0.1, 10.0), size=(m, p))
        cfg = M2d2Config(beta=float(10 ** rng.uniform(-3, 1)), cov_scale=float(10 ** rng.uniform(-4, 0)))
        dc.cholesky(context_kernel(h, float(10 ** rng.uniform(-3, 2)), cfg))


def test_mahalanobis_examples():
    d = np.array([1.0, 2.0])
    assert mahalanobis_sq(d, np.eye(2)).item() == 5.0
    assert mahalanobis_sq(d, np.diag([1.0, 4.0])).item() == pytest.approx(2.0, abs=1e-15)
    assert mahalanobis_sq(np.zeros(2), np.eye(2)).item() == 0.0


def test_mahalanobis_identity_is_squared_norm():
    rng = RNG(11)
    for _ in range(50):
        d = rng.normal(size=rng.integers(1, 9))
        assert abs(mahalanobis_sq(d, np.eye(d.size)).item() - float(d @ d)) <= 1e-12 * max(1.0, float(d @ d))


def _explicit_inverse(k):
    if k.shape == (2, 2):
        a, b, c, d = k[0, 0], k[0, 1], k[1, 0], k[1, 1]
        return np.array([[d, -b], [-c, a]]) / (a * d - b * c)
    # 3x3 adjugate / determinant
    cof = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            minor = np.delete(np.delete(k, i, 0), j, 1)
            cof[i, j] = (-1) ** (i + j) * (minor[0, 0] * minor[1, 1] - minor[0, 1] * minor[1, 0])
    det = float(np.sum(k[0] * cof[0]))
    return cof.T / det


def test_mahalanobis_matches_explicit_inverse():
    rng = RNG(12)
    for i in range(100):
        n = 2 + i % 2
        b = rng.normal(size=(n, n))
        k = b @ b.T + 0.5 * np.eye(n)
        d = rng.normal(size=n)
        assert mahalanobis_sq(d, k).item() == pytest.approx(float(d @ _explicit_inverse(k) @ d), rel=1e-9, abs=1e-12)


# ---------------------------------------------------------------- context log-likelihood


SCALAR = dict(beta=1.0, tau_f=1.0, f_scale=1.0, cov_scale=1.0)


def test_zero_mean_keeps_only_logdet_and_constant():
    h = RNG(13).normal(size=(3, 2))
    s = np.full((2, 2), 0.5)
    cfg = M2d2Config()
    value = context_log_likelihood(h, np.zeros((2, 2)), s, cfg).item()
    k = context_kernel(h, 0.5, cfg).data
    expected = 2 * (-0.5 * np.linalg.slogdet(k)[1] - 1.5 * math.log(2 * math.pi / cfg.tau_f))
    assert value == pytest.approx(expected, rel=1e-12)


def test_scalar_gaussian_log_density_by_hand():
    value = context_log_likelihood(np.array([[1.0]]), np.array([[2.0]]), np.array([[1.0]]), M2d2Config(**SCALAR)).item()
    assert value == pytest.approx(-1.0 - 0.5 * math.log(2.0) - 0.5 * math.log(2 * math.pi), abs=1e-14)
    only = M2d2Config(mahalanobis_only=True, **SCALAR)
    assert context_log_likelihood(np.array([[1.0]]), np.array([[2.0]]), np.array([[1.0]]), only).item() == pytest.approx(-1.0, abs=1e-14)


def test_logdet_and_constant_switches():
    h, m, s = np.array([[1.0]]), np.array([[2.0]]), np.array([[1.0]])
    no_const = M2d2Config(include_constant=False, **SCALAR)
    no_logdet = M2d2Config(include_logdet=False, **SCALAR)
    assert context_log_likelihood(h, m, s, no_const).item() == pytest.approx(-1.0 - 0.5 * math.log(2.0), abs=1e-14)
    assert context_log_likelihood(h, m, s, no_logdet).item() == pytest.approx(-1.0 - 0.5 * math.log(2 * math.pi), abs=1e-14)


def test_per_label_variance_is_column_mean():
    rng = RNG(14)
    h, m = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    s = rng.uniform(0.1, 2.0, size=(3, 2))
    cfg = M2d2Config()
    total = context_log_likelihood(h, m, s, cfg).item()
    parts = 0.0
    for k in range(2):
        K = context_kernel(h, s[:, k].mean(), cfg).data
        delta = cfg.f_scale * h @ m[:, k]
        parts += (-0.5 * cfg.tau_f * delta @ np.linalg.solve(K, delta) - 0.5 * np.linalg.slogdet(K)[1]
                  - 2.0 * math.log(2 * math.pi / cfg.tau_f))
    assert total == pytest.approx(parts, rel=1e-10)


@pytest.mark.parametrize("mahalanobis_only", [False, True])
def test_regularizer_gradients_match_finite_differences(mahalanobis_only):
    net = NetworkConfig(ts_input_dim=2, ts_hidden_dim=2, ts_layers=1, img_side=8, conv_channels=(2,), num_labels=2)
    cfg = M2d2Config(mahalanobis_only=mahalanobis_only, beta=1.0, f_scale=1.0, cov_scale=0.5)
    rng = RNG(15)
    ehr, cxr = rng.normal(size=(4, 5, 2)), rng.uniform(size=(4, 1, 8, 8))
    context = sample_context_batch(ehr, cxr, cfg, rng, size=2)
    params = init_parameters(net, rng)
    m0 = rng.normal(size=(4, 2))
    loc0 = rng.normal(scale=0.3, size=(4, 2))
    eps = rng.standard_normal((4, 2))
    base = dict(params.theta_h, __m=m0, __loc=loc0)

    def value(arrays):
        theta = {k: v for k, v in arrays.items() if not k.startswith("__")}
        s, _ = sample_lognormal(LogNormalVariational(arrays["__loc"], 0.1), None, eps)
        return uncertainty_regularizer(context, theta, arrays["__m"], s, cfg, net)

    leaves = {k: dc.Tensor(v, requires_grad=True) for k, v in base.items()}
    names = list(leaves)
    grads = dc.backward(value(leaves), wrt=[leaves[k] for k in names])
    for name, g in zip(names, grads):
        def f(v, name=name):
            local = dict(base)
            local[name] = v
            return value(local).item()

        fd = dc.finite_diff_gradient(f, base[name], h=1e-6)
        assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4, name
