"""Synthetic paired time-series + image dataset with planted multi-label signal.

Each row draws a latent z ~ N(0, I_Q) and sets y_k = 1[z_k > c_k]. The two
modalities see independently noised copies of z, so they share label
information without duplicating it:

* time series: per-label sinusoids whose signed amplitude tracks z_k - c_k,
  mixed into the channels, plus white noise;
* image: per-label oriented gratings whose contrast rises with z_k - c_k,
  plus pixel noise, clipped to [0, 1].

The ``shifted`` split draws fresh rows and then attenuates the time series
and rotates the image by 90 degrees. Neither transform belongs to the
context-set suite.
"""

import os
from dataclasses import asdict, dataclass
from statistics import NormalDist

import numpy as np

from .errors import ConfigError, FormatError
from .tensorfile import read_tensor, write_tensor

SPLITS = ("train", "val", "test", "shifted")
FIELDS = ("x_ehr", "x_cxr", "y")
STRUCTURE_SEED = 20240607
MANIFEST = "manifest.txt"


@dataclass(frozen=True)
class SynthSpec:
    n_train: int = 2048
    n_val: int = 256
    n_test: int = 512
    n_shifted: int = 512
    T: int = 32
    d: int = 4
    img_side: int = 16
    Q: int = 4
    label_signal_strength: float = 1.0
    seed: int = 0
    prevalence: tuple = None
    view_noise: float = 0.5
    ts_noise: float = 0.5
    img_noise: float = 0.08
    shift_amplitude: float = 0.4
    shift_quarter_turns: int = 1

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test", "n_shifted", "T", "d"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"data.{name}", "must be >= 1")
        if self.Q < 2:
            raise ConfigError("data.Q", "must be >= 2")
        if self.img_side < 8:
            raise ConfigError("data.img_side", "must be >= 8")
        if self.label_signal_strength < 0:
            raise ConfigError("data.label_signal_strength", "must be >= 0")
        if self.prevalence is not None:
            prev = tuple(float(p) for p in self.prevalence)
            if len(prev) != self.Q or not all(0.0 < p < 1.0 for p in prev):
                raise ConfigError("data.prevalence", f"needs {self.Q} values in (0, 1)")
            object.__setattr__(self, "prevalence", prev)

    def thresholds(self):
        if self.prevalence is None:
            return np.zeros(self.Q)
        return np.array([NormalDist().inv_cdf(1.0 - p) for p in self.prevalence])


def skewed_spec(**overrides):
    """Low-prevalence preset (0.05 to 0.45 across labels) for AUPRC edge cases."""
    q = overrides.get("Q", SynthSpec.Q)
    overrides.setdefault("prevalence", tuple(np.linspace(0.05, 0.45, q).round(3)))
    return SynthSpec(**overrides)


@dataclass
class Split:
    x_ehr: np.ndarray
    x_cxr: np.ndarray
    y: np.ndarray

    @property
    def n(self):
        return self.y.shape[0]


def _structure(spec):
    rng = np.random.default_rng(STRUCTURE_SEED)
    q = spec.Q
    freqs = 1.0 + np.arange(q) * 1.5 + rng.uniform(0.0, 0.5, q)
    phases = rng.uniform(0.0, 2.0 * np.pi, q)
    mix = rng.normal(0.0, 1.0, (q, spec.d))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    ts_weight = np.where(np.arange(q) % 2 == 0, 1.0, 0.5)
    img_weight = np.where(np.arange(q) % 2 == 0, 0.5, 1.0)
    # orientations inside [0, 90): a quarter turn never lands on a label's grating,
    # and the quarter-offset keeps rotated gratings distinct from flipped ones
    angles = (np.arange(q) + 0.25) * (0.5 * np.pi / q)
    grating_freq = 3.0 + rng.uniform(0.0, 1.0, q)
    return freqs, phases, mix, ts_weight, img_weight, angles, grating_freq


def _draw(spec, n, rng):
    freqs, phases, mix, ts_w, img_w, angles, gfreq = _structure(spec)
    c = spec.thresholds()
    z = rng.standard_normal((n, spec.Q))
    y = (z > c).astype(np.float64)
    u_ts = z + spec.view_noise * rng.standard_normal(z.shape) - c
    u_img = z + spec.view_noise * rng.standard_normal(z.shape) - c
    a = spec.label_signal_strength

    t = np.arange(spec.T) / spec.T
    waves = np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])  # Q, T
    amp = a * ts_w * u_ts  # n, Q
    x_ehr = np.einsum("nq,qt,qd->ntd", amp, waves, mix)
    x_ehr += spec.ts_noise * rng.standard_normal(x_ehr.shape)

    side = spec.img_side
    yy, xx = np.mgrid[0:side, 0:side] / side
    proj = np.cos(angles)[:, None, None] * xx + np.sin(angles)[:, None, None] * yy
    gratings = 0.5 * np.cos(2.0 * np.pi * gfreq[:, None, None] * proj)  # Q, S, S
    contrast = 0.4 / (1.0 + np.exp(-2.0 * a * img_w * u_img)) / np.sqrt(spec.Q)
    img = 0.5 + np.einsum("nq,qhw->nhw", contrast, gratings)
    img += spec.img_noise * rng.standard_normal(img.shape)
    x_cxr = np.clip(img, 0.0, 1.0)[:, None]
    return Split(x_ehr, x_cxr, y)


def apply_shift(split, spec):
    """Held-out shift: time-series amplitude rescale and image rotation."""
    x_cxr = np.rot90(split.x_cxr, k=spec.shift_quarter_turns, axes=(2, 3)).copy()
    return Split(split.x_ehr * spec.shift_amplitude, x_cxr, split.y.copy())


def generate(spec):
    """Dict of train/val/test/shifted splits; rows come from one draw partitioned by index."""
    rng = np.random.default_rng(spec.seed)
    sizes = [spec.n_train, spec.n_val, spec.n_test, spec.n_shifted]
    pool = _draw(spec, sum(sizes), rng)
    out, start = {}, 0
    for name, size in zip(SPLITS, sizes):
        rows = slice(start, start + size)
        out[name] = Split(pool.x_ehr[rows].copy(), pool.x_cxr[rows].copy(), pool.y[rows].copy())
        start += size
    out["shifted"] = apply_shift(out["shifted"], spec)
    return out


def projection_distance(dataset, dim=16, seed=0):
    """Distance of each split's mean embedding from the train mean embedding.

    Inputs are z-scored per coordinate with train statistics, then mapped
    through a fixed Gaussian random projection to ``dim`` dimensions.
    """
    train = dataset["train"]

    def flat(split):
        return np.concatenate([split.x_ehr.reshape(split.n, -1), split.x_cxr.reshape(split.n, -1)], axis=1)

    base = flat(train)
    mu, sd = base.mean(axis=0), base.std(axis=0) + 1e-8
    proj = np.random.default_rng(seed).standard_normal((base.shape[1], dim)) / np.sqrt(base.shape[1])
    centre = ((base - mu) / sd @ proj).mean(axis=0)
    out = {}
    for name, split in dataset.items():
        if name != "train":
            emb = ((flat(split) - mu) / sd @ proj).mean(axis=0)
            out[name] = float(np.linalg.norm(emb - centre))
    return out


def save_dataset(dataset, out_dir):
    """Write every split as TensorFile triplets plus a tab-separated manifest."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for name, split in dataset.items():
        os.makedirs(os.path.join(out_dir, name), exist_ok=True)
        for fld in FIELDS:
            rel = f"{name}/{fld}.tnsr"
            write_tensor(os.path.join(out_dir, rel), getattr(split, fld))
            lines.append(f"{name}\t{fld}\t{rel}")
    with open(os.path.join(out_dir, MANIFEST), "w") as fh:
        fh.write("# split\tfield\tpath\n" + "\n".join(lines) + "\n")


def load_dataset(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FormatError("manifest", f"no {MANIFEST} in {data_dir}")
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError("manifest", f"bad line {line!r}")
            split, fld, rel = parts
            entries.setdefault(split, {})[fld] = read_tensor(os.path.join(data_dir, rel))
    out = {}
    for split, fields in entries.items():
        missing = set(FIELDS) - set(fields)
        if missing:
            raise FormatError("manifest", f"split {split} lacks {sorted(missing)}")
        out[split] = Split(**{f: fields[f] for f in FIELDS})
    return out


def spec_dict(spec):
    d = asdict(spec)
    if d["prevalence"] is not None:
        d["prevalence"] = list(d["prevalence"])
    return d
