"""Toy-scale multimodal fusion network f(x; θ) = h(x; θ_h) · θ_L.

A stacked gated recurrent (LSTM) encoder reads the time series, a small
conv -> tanh -> max-pool stack reads the image, the two feature vectors are
concatenated (time series first) and a bias-free linear head produces one
logit per label.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError, ShapeError

HEAD = "head.weight"


@dataclass(frozen=True)
class NetworkConfig:
    ts_input_dim: int = 4
    ts_hidden_dim: int = 8
    ts_layers: int = 2
    img_side: int = 16
    img_channels: int = 1
    conv_channels: tuple = (4, 8)
    num_labels: int = 4
    kernel_size: int = 3
    forget_bias: float = 1.0
    feature_dim: int = None

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        for name in ("ts_input_dim", "ts_hidden_dim", "ts_layers", "img_channels", "num_labels", "kernel_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"network.{name}", "must be >= 1")
        if not self.conv_channels or min(self.conv_channels) < 1:
            raise ConfigError("network.conv_channels", "needs at least one block, all counts >= 1")
        if self.img_side < 8:
            raise ConfigError("network.img_side", "must be >= 8")
        side = self.img_side
        for i in range(len(self.conv_channels)):
            if side < self.kernel_size:
                raise ConfigError("network.conv_channels", f"block {i} input {side}px is smaller than the kernel")
            side = _block_out(side, self.kernel_size)
        expected = self.ts_hidden_dim + self.conv_channels[-1]
        if self.feature_dim is None:
            object.__setattr__(self, "feature_dim", expected)
        elif self.feature_dim != expected:
            raise ConfigError("network.feature_dim", f"must equal ts_hidden_dim + conv output width = {expected}")

    @property
    def img_feature_dim(self):
        return self.conv_channels[-1]

    def parameter_shapes(self):
        """Ordered {name: shape} for θ_h followed by the head θ_L."""
        shapes = {}
        width = self.ts_input_dim
        for layer in range(self.ts_layers):
            shapes[f"ts.{layer}.weight"] = (width + self.ts_hidden_dim, 4 * self.ts_hidden_dim)
            shapes[f"ts.{layer}.bias"] = (4 * self.ts_hidden_dim,)
            width = self.ts_hidden_dim
        chans = self.img_channels
        for block, out in enumerate(self.conv_channels):
            shapes[f"img.{block}.weight"] = (out, chans, self.kernel_size, self.kernel_size)
            shapes[f"img.{block}.bias"] = (out,)
            chans = out
        shapes[HEAD] = (self.feature_dim, self.num_labels)
        return shapes


def _block_out(side, kernel):
    side = side - kernel + 1
    return side // 2 if side >= 2 else side


@dataclass
class ParameterSet:
    """θ = {θ_h, θ_L}; values may be numpy arrays or graph tensors."""

    theta_h: dict = field(default_factory=dict)
    theta_L: object = None

    def as_dict(self):
        out = dict(self.theta_h)
        out[HEAD] = self.theta_L
        return out

    @classmethod
    def from_dict(cls, tensors):
        tensors = dict(tensors)
        head = tensors.pop(HEAD)
        return cls(theta_h=tensors, theta_L=head)


def init_parameters(config, rng):
    """Fan-in scaled uniform weights, zero biases, forget-gate bias set to ``forget_bias``."""
    theta = {}
    hidden = config.ts_hidden_dim
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            value = np.zeros(shape)
            if name.startswith("ts."):
                value[hidden : 2 * hidden] = config.forget_bias
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        theta[name] = value
    return ParameterSet.from_dict(theta)


def check_parameters(config, params):
    """Raise ShapeError unless every tensor matches ``config``."""
    expected = config.parameter_shapes()
    got = {k: tuple(np.shape(dc.as_tensor(v).data)) for k, v in params.as_dict().items()}
    if set(got) != set(expected):
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise ShapeError(f"parameter names differ from config: missing={missing} extra={extra}")
    for name, shape in expected.items():
        if got[name] != tuple(shape):
            raise ShapeError(f"parameter {name}: shape {got[name]} but config needs {tuple(shape)}")


def encode_timeseries(x_ehr, theta_h, config):
    """Final hidden state of the stacked LSTM; input [T, d] or [B, T, d]."""
    x = dc.as_tensor(x_ehr).data
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != config.ts_input_dim:
        raise ShapeError(f"time series must be [B, T, {config.ts_input_dim}], got {x.shape}")
    if x.shape[1] == 0:
        raise ContractError("empty sequence: T must be >= 1")
    batch, steps = x.shape[0], x.shape[1]
    hidden = config.ts_hidden_dim
    seq = [x[:, t, :] for t in range(steps)]
    h = None
    for layer in range(config.ts_layers):
        weight = dc.as_tensor(theta_h[f"ts.{layer}.weight"])
        bias = dc.as_tensor(theta_h[f"ts.{layer}.bias"])
        width = weight.shape[0] - hidden
        w_in, w_hh = weight[:width], weight[width:]
        h = dc.Tensor(np.zeros((batch, hidden)))
        c = dc.Tensor(np.zeros((batch, hidden)))
        outputs = []
        for x_t in seq:
            z = dc.matmul(x_t, w_in) + dc.matmul(h, w_hh) + bias
            i = dc.sigmoid(z[:, :hidden])
            f = dc.sigmoid(z[:, hidden : 2 * hidden])
            g = dc.tanh(z[:, 2 * hidden : 3 * hidden])
            o = dc.sigmoid(z[:, 3 * hidden :])
            c = f * c + i * g
            h = o * dc.tanh(c)
            outputs.append(h)
        seq = outputs
    return h[0] if single else h


def encode_image(x_cxr, theta_h, config):
    """Conv blocks then global average pool; input [C, H, W] or [B, C, H, W]."""
    x = dc.as_tensor(x_cxr)
    single = x.ndim == 3
    if single:
        x = dc.reshape(x, (1,) + x.shape)
    expected = (config.img_channels, config.img_side, config.img_side)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError(f"image must be [B, {', '.join(map(str, expected))}], got {x.shape}")
    for block in range(len(config.conv_channels)):
        weight = dc.as_tensor(theta_h[f"img.{block}.weight"])
        bias = dc.as_tensor(theta_h[f"img.{block}.bias"])
        x = dc.tanh(dc.conv2d(x, weight) + dc.reshape(bias, (1, -1, 1, 1)))
        if x.shape[2] >= 2 and x.shape[3] >= 2:
            x = dc.maxpool2x2(x)
    feats = dc.mean(x, axis=(2, 3))
    return feats[0] if single else feats


def features(x_ehr, x_cxr, theta_h, config):
    """h(x; θ_h): [time-series features | image features]."""
    ts = encode_timeseries(x_ehr, theta_h, config)
    img = encode_image(x_cxr, theta_h, config)
    if ts.ndim != img.ndim:
        raise ShapeError(f"modalities disagree on batching: {ts.shape} vs {img.shape}")
    return dc.concat([ts, img], axis=-1)


def logits(x_ehr, x_cxr, params, config):
    return dc.matmul(features(x_ehr, x_cxr, params.theta_h, config), dc.as_tensor(params.theta_L))


def probabilities(x_ehr, x_cxr, params, config):
    return dc.sigmoid(logits(x_ehr, x_cxr, params, config))
