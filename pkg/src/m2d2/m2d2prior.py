"""Context-set construction and the context log-likelihood regulariser.

Context rows are training rows pushed off-distribution by one randomly
chosen modality-specific transformation per modality. The regulariser scores
the zero function on those rows under the Gaussian that the stochastic
linear head induces over function values:

    Σ_k log N(0; f_scale · H m_k, τ_f⁻¹ K_k),   K_k = cov_scale · s_k · H Hᵀ + β I
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, ShapeError
from .fusionnet import features

TS_KINDS = ("drop_start", "gaussian_noise", "invert")
IMG_KINDS = ("random_crop", "hflip", "vflip", "gaussian_blur", "solarize", "invert", "color_jitter")


@dataclass(frozen=True)
class TsTransform:
    kind: str
    drop_fraction: float = 0.25
    noise_sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in TS_KINDS:
            raise ConfigError("m2d2.ts_transforms", f"unknown kind {self.kind!r}; expected one of {TS_KINDS}")
        if not 0.0 < self.drop_fraction < 1.0:
            raise ConfigError("m2d2.drop_fraction", "must lie in (0, 1)")
        if not self.noise_sigma > 0:
            raise ConfigError("m2d2.noise_sigma", "must be > 0")


@dataclass(frozen=True)
class ImgTransform:
    kind: str
    crop_ratio: float = 0.75
    blur_kernel: int = 3
    blur_sigma: float = 1.0
    solarize_threshold: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2

    def __post_init__(self):
        if self.kind not in IMG_KINDS:
            raise ConfigError("m2d2.img_transforms", f"unknown kind {self.kind!r}; expected one of {IMG_KINDS}")
        if not 0.0 < self.crop_ratio <= 1.0:
            raise ConfigError("m2d2.crop_ratio", "must lie in (0, 1]")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ConfigError("m2d2.blur_kernel", "must be a positive odd integer")
        if not self.blur_sigma > 0:
            raise ConfigError("m2d2.blur_sigma", "must be > 0")
        if not 0.0 <= self.solarize_threshold <= 1.0:
            raise ConfigError("m2d2.solarize_threshold", "must lie in [0, 1]")
        if not (0.0 <= self.jitter_brightness < 1.0 and 0.0 <= self.jitter_contrast < 1.0):
            raise ConfigError("m2d2.jitter_brightness", "jitter ranges must lie in [0, 1)")


@dataclass(frozen=True)
class M2d2Config:
    tau_f: float = 1.0
    beta: float = 5.0
    f_scale: float = 10.0
    cov_scale: float = 0.1
    context_batch_size: int = 64
    include_logdet: bool = True
    include_constant: bool = True
    mahalanobis_only: bool = False
    ts_transforms: tuple = TS_KINDS
    img_transforms: tuple = IMG_KINDS
    drop_fraction: float = 0.25
    noise_sigma: float = 0.5
    crop_ratio: float = 0.75
    blur_kernel: int = 3
    blur_sigma: float = 1.0
    solarize_threshold: float = 0.5
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "ts_transforms", tuple(self.ts_transforms))
        object.__setattr__(self, "img_transforms", tuple(self.img_transforms))
        for name in ("tau_f", "beta", "cov_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"m2d2.{name}", "must be > 0")
        if self.f_scale < 0:
            raise ConfigError("m2d2.f_scale", "must be >= 0")
        if self.context_batch_size < 1:
            raise ConfigError("m2d2.context_batch_size", "must be >= 1")
        if not self.ts_transforms or not self.img_transforms:
            raise ConfigError("m2d2.ts_transforms", "each modality needs at least one transformation")
        # builds every transform once so bad kinds/params fail at parse time
        self.ts_suite()
        self.img_suite()

    def ts_suite(self):
        return [
            TsTransform(k, drop_fraction=self.drop_fraction, noise_sigma=self.noise_sigma)
            for k in self.ts_transforms
        ]

    def img_suite(self):
        return [
            ImgTransform(
                k,
                crop_ratio=self.crop_ratio,
                blur_kernel=self.blur_kernel,
                blur_sigma=self.blur_sigma,
                solarize_threshold=self.solarize_threshold,
                jitter_brightness=self.jitter_brightness,
                jitter_contrast=self.jitter_contrast,
            )
            for k in self.img_transforms
        ]


@dataclass
class ContextBatch:
    x_ehr: np.ndarray
    x_cxr: np.ndarray
    ts_kinds: list = field(default_factory=list)
    img_kinds: list = field(default_factory=list)

    def __post_init__(self):
        if self.x_ehr.shape[0] < 1 or self.x_ehr.shape[0] != self.x_cxr.shape[0]:
            raise ShapeError(f"context modalities must pair up: {self.x_ehr.shape} vs {self.x_cxr.shape}")

    @property
    def M(self):
        return self.x_ehr.shape[0]


# ---------------------------------------------------------------- transforms


def transform_timeseries(x, t, rng):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"degenerate sequence: need T >= 2, got shape {x.shape}")
    if t.kind == "drop_start":
        out = x.copy()
        out[: int(math.floor(t.drop_fraction * x.shape[0]))] = 0.0
        return out
    if t.kind == "gaussian_noise":
        return x + rng.normal(0.0, t.noise_sigma, size=x.shape)
    return x[::-1].copy()


def _gaussian_kernel(size, sigma):
    r = np.arange(size) - size // 2
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def _blur(x, size, sigma):
    kernel = _gaussian_kernel(size, sigma)
    pad = size // 2
    padded = np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, (size, size), axis=(1, 2))
    return np.einsum("chwij,ij->chw", win, kernel)


def transform_image(x, t, rng):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"image must be [C, H, W], got {x.shape}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ContractError(f"pixels must lie in [0, 1], got range [{x.min():.3g}, {x.max():.3g}]")
    _, h, w = x.shape
    kind = t.kind
    if kind == "random_crop":
        ch, cw = max(1, int(round(t.crop_ratio * h))), max(1, int(round(t.crop_ratio * w)))
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        crop = x[:, top : top + ch, left : left + cw]
        rows = (np.arange(h) * ch) // h
        cols = (np.arange(w) * cw) // w
        return crop[:, rows][:, :, cols]
    if kind == "hflip":
        return x[:, :, ::-1].copy()
    if kind == "vflip":
        return x[:, ::-1, :].copy()
    if kind == "gaussian_blur":
        return np.clip(_blur(x, t.blur_kernel, t.blur_sigma), 0.0, 1.0)
    if kind == "solarize":
        return np.where(x >= t.solarize_threshold, 1.0 - x, x)
    if kind == "invert":
        return 1.0 - x
    brightness = rng.uniform(1.0 - t.jitter_brightness, 1.0 + t.jitter_brightness)
    contrast = rng.uniform(1.0 - t.jitter_contrast, 1.0 + t.jitter_contrast)
    y = x * brightness
    mid = y.mean()
    return np.clip((y - mid) * contrast + mid, 0.0, 1.0)


def sample_context_batch(x_ehr, x_cxr, config, rng, size=None):
    """Draw M training rows uniformly (with replacement) and transform each modality once."""
    n = x_ehr.shape[0]
    if n < 1:
        raise ContractError("training set is empty")
    size = config.context_batch_size if size is None else size
    ts_suite, img_suite = config.ts_suite(), config.img_suite()
    rows = rng.integers(0, n, size=size)
    ts_pick = rng.integers(0, len(ts_suite), size=size)
    img_pick = rng.integers(0, len(img_suite), size=size)
    ehr = np.empty((size,) + x_ehr.shape[1:])
    cxr = np.empty((size,) + x_cxr.shape[1:])
    for j in range(size):
        ehr[j] = transform_timeseries(x_ehr[rows[j]], ts_suite[ts_pick[j]], rng)
        cxr[j] = transform_image(x_cxr[rows[j]], img_suite[img_pick[j]], rng)
    return ContextBatch(
        ehr,
        cxr,
        [ts_suite[i].kind for i in ts_pick],
        [img_suite[i].kind for i in img_pick],
    )


# ---------------------------------------------------------------- regulariser


def context_kernel(H, s_k, config):
    """(cov_scale · s_k) H Hᵀ + β I; ``s_k`` scalar -> [M, M], vector [Q] -> [Q, M, M]."""
    H = dc.as_tensor(H)
    s_k = dc.as_tensor(s_k)
    gram = dc.matmul(H, dc.swap_last(H))
    if s_k.ndim == 1:
        s_k = dc.reshape(s_k, (s_k.shape[0], 1, 1))
    return config.cov_scale * s_k * gram + config.beta * np.eye(H.shape[0])


def mahalanobis_sq(delta, K):
    """Δᵀ K⁻¹ Δ over the trailing axis, via Cholesky solves."""
    delta = dc.as_tensor(delta)
    return dc.sum_(delta * dc.solve_spd(K, delta), axis=-1)


def context_log_likelihood(H, m, s, config):
    """Σ_k log N(0; f_scale H m_k, τ_f⁻¹ K_k) from context features H [M, P].

    ``m`` and ``s`` are [P, Q]; the per-label variance s_k is the column mean of s.
    """
    H, m, s = dc.as_tensor(H), dc.as_tensor(m), dc.as_tensor(s)
    n_ctx = H.shape[0]
    s_k = dc.mean(s, axis=0)
    K = context_kernel(H, s_k, config)
    delta = dc.swap_last(config.f_scale * dc.matmul(H, m))  # [Q, M]
    total = -0.5 * config.tau_f * dc.sum_(mahalanobis_sq(delta, K))
    if config.include_logdet and not config.mahalanobis_only:
        total = total - 0.5 * dc.sum_(dc.logdet_spd(K))
    if config.include_constant and not config.mahalanobis_only:
        total = total - m.shape[1] * 0.5 * n_ctx * math.log(2.0 * math.pi / config.tau_f)
    return total


def uncertainty_regularizer(context, theta_h, m, s, config, net_config):
    H = features(context.x_ehr, context.x_cxr, theta_h, net_config)
    return context_log_likelihood(H, m, s, config)
