"""Small trainable convolutional regressor, built and trained from scratch.

Three task heads share the same two stride-2 convolution blocks: a dense head
for direct contact estimation (x, y, z, Fn, Fs1, Fs2), a transposed-
convolution upscaler plus two convolutions for force-map images, and a dense
head for posture (yaw plus roll as a sin/cos pair). Forward, backward, and
the Adam update are plain numpy in float64, deterministic under fixed seeds.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np

from tactwin import binio


class TrainingError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Conv2d:
    """Strided convolution with zero padding.

    Layers feeding a BatchNorm use use_bias=False: the normalization removes
    any constant offset, which would otherwise leave a gradient-free
    parameter.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, pad=0, rng=None, use_bias=True):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.use_bias = use_bias
        fan_in = c_in * kernel * kernel
        rng = rng or np.random.default_rng(0)
        self.weight = _he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in)
        self.bias = np.zeros(c_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def spec(self) -> str:
        return (f"conv {self.c_in} {self.c_out} {self.kernel} {self.stride} {self.pad}"
                f" {int(self.use_bias)}")

    def params(self):
        if not self.use_bias:
            return [(self.weight, self.grad_weight)]
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ self.weight.reshape(self.c_out, -1).T
        if self.use_bias:
            out = out + self.bias
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, self.c_out).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        (n, c, h, w), cols = self._cache
        k, s, p = self.kernel, self.stride, self.pad
        _, _, ho, wo = dout.shape
        dmat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, self.c_out)
        self.grad_weight += (dmat.T @ cols).reshape(self.weight.shape)
        if self.use_bias:
            self.grad_bias += dmat.sum(axis=0)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                patch = np.tensordot(dout, self.weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += patch.transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w]


class ConvTranspose2d:
    """Transposed convolution with per-axis kernel and stride, no padding."""

    def __init__(self, c_in, c_out, kernel: tuple[int, int], stride: tuple[int, int], rng=None,
                 use_bias=True):
        self.c_in, self.c_out = c_in, c_out
        self.kernel, self.stride = kernel, stride
        self.use_bias = use_bias
        fan_in = c_in * kernel[0] * kernel[1]
        rng = rng or np.random.default_rng(0)
        self.weight = _he_uniform(rng, (c_in, c_out, kernel[0], kernel[1]), fan_in)
        self.bias = np.zeros(c_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def spec(self) -> str:
        kh, kw = self.kernel
        sh, sw = self.stride
        return f"convt {self.c_in} {self.c_out} {kh} {kw} {sh} {sw} {int(self.use_bias)}"

    def params(self):
        if not self.use_bias:
            return [(self.weight, self.grad_weight)]
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def out_size(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        return (h - 1) * sh + kh, (w - 1) * sw + kw

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ho, wo = self.out_size(h, w)
        out = np.zeros((n, self.c_out, ho, wo))
        for i in range(kh):
            for j in range(kw):
                patch = np.tensordot(x, self.weight[:, :, i, j], axes=([1], [0]))
                out[:, :, i : i + sh * h : sh, j : j + sw * w : sw] += patch.transpose(0, 3, 1, 2)
        if self.use_bias:
            out += self.bias[None, :, None, None]
        self._cache = x
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._cache
        n, c, h, w = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                block = dout[:, :, i : i + sh * h : sh, j : j + sw * w : sw]
                self.grad_weight[:, :, i, j] += np.tensordot(x, block, axes=([0, 2, 3], [0, 2, 3]))
                dx += np.tensordot(block, self.weight[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
        if self.use_bias:
            self.grad_bias += dout.sum(axis=(0, 2, 3))
        return dx


class BatchNorm2d:
    """Per-channel batch normalization with running statistics.

    Training mode normalizes with batch statistics and updates the running
    averages; evaluation mode uses the running averages, so a trained model's
    outputs are deterministic and batch-size independent.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = np.ones(channels)
        self.beta = np.zeros(channels)
        self.grad_gamma = np.zeros(channels)
        self.grad_beta = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.training = True
        self._cache = None

    def spec(self) -> str:
        return f"bnorm {self.channels}"

    def params(self):
        return [(self.gamma, self.grad_gamma), (self.beta, self.grad_beta)]

    def buffers(self):
        return [self.running_mean, self.running_var]

    def forward(self, x):
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if self.training:
            self._cache = (xhat, inv, x.shape)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, dout):
        xhat, inv, shape = self._cache
        n, c, h, w = shape
        m = n * h * w
        self.grad_gamma += (dout * xhat).sum(axis=(0, 2, 3))
        self.grad_beta += dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma[None, :, None, None]
        sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return inv[None, :, None, None] * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m)


class LeakyReLU:
    def __init__(self, alpha=0.1):
        self.alpha = alpha
        self._mask = None

    def spec(self) -> str:
        return f"lrelu {self.alpha}"

    def params(self):
        return []

    def forward(self, x):
        self._mask = x >= 0
        return np.where(self._mask, x, self.alpha * x)

    def backward(self, dout):
        return np.where(self._mask, dout, self.alpha * dout)


class Flatten:
    def __init__(self):
        self._shape = None

    def spec(self) -> str:
        return "flatten"

    def params(self):
        return []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class SpatialSummary:
    """Per-channel spatial softmax expectation in a radial-product basis.

    Per channel, the layer computes the soft-argmax of the feature map as an
    image-centered, aspect-corrected offset (du, dv) with radius r, and emits

        [du, dv, r, r^2, r^3, r^4, du*r, du*r^2, du*r^3,
         dv*r, dv*r^2, dv*r^3, mean activation]

    The softmax normalization makes the position readout amplitude-invariant
    (it interpolates across unseen contact locations), and for a camera on the
    sensor axis the surface coordinates are linear in exactly this basis
    (x = g(r) du, y = g(r) dv, z = h(r) with smooth radial g, h), so a single
    affine readout recovers them.
    """

    FEATURES_PER_CHANNEL = 13

    def __init__(self, aspect: float = 0.75):
        # aspect = image height / width, so dv is isotropic with du.
        self.aspect = aspect
        self._cache = None

    def spec(self) -> str:
        return f"spatial_summary {self.aspect!r}"

    def params(self):
        return []

    def forward(self, x):
        n, c, h, w = x.shape
        flat = x.reshape(n, c, h * w)
        z = flat - flat.max(axis=2, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=2, keepdims=True)
        gy, gx = np.mgrid[0:h, 0:w]
        gx = (gx.ravel() + 0.5) / w
        gy = (gy.ravel() + 0.5) / h
        ex = s @ gx
        ey = s @ gy
        du = ex - 0.5
        dv = (ey - 0.5) * self.aspect
        # The 0.0025 floor keeps the radius smooth at the image center,
        # where a fresh model's uniform softmax would otherwise sit on the
        # sqrt kink; the affine readout absorbs the small basis distortion.
        r = np.sqrt(du * du + dv * dv + 0.0025)
        mean = flat.mean(axis=2)
        self._cache = (x.shape, s, gx, gy, ex, ey, du, dv, r)
        return np.concatenate(
            [du, dv, r, r**2, r**3, r**4,
             du * r, du * r**2, du * r**3,
             dv * r, dv * r**2, dv * r**3, mean],
            axis=1,
        )

    def backward(self, dout):
        (n, c, h, w), s, gx, gy, ex, ey, du, dv, r = self._cache
        g = [dout[:, k * c : (k + 1) * c] for k in range(13)]
        # dL/dr collects the radial chain from every r-bearing feature.
        dr = (
            g[2] + 2 * r * g[3] + 3 * r**2 * g[4] + 4 * r**3 * g[5]
            + du * (g[6] + 2 * r * g[7] + 3 * r**2 * g[8])
            + dv * (g[9] + 2 * r * g[10] + 3 * r**2 * g[11])
        )
        ddu = g[0] + r * g[6] + r**2 * g[7] + r**3 * g[8] + dr * du / r
        ddv = g[1] + r * g[9] + r**2 * g[10] + r**3 * g[11] + dr * dv / r
        dex = ddu
        dey = ddv * self.aspect
        dmean = g[12]
        # d ex / d z = s * (gx - ex) per channel (softmax Jacobian applied to gx).
        dz = s * (
            dex[:, :, None] * (gx[None, None, :] - ex[:, :, None])
            + dey[:, :, None] * (gy[None, None, :] - ey[:, :, None])
        )
        dz += dmean[:, :, None] / (h * w)
        return dz.reshape(n, c, h, w)


class Dense:
    def __init__(self, n_in, n_out, rng=None):
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        self.weight = _he_uniform(rng, (n_in, n_out), n_in)
        self.bias = np.zeros(n_out)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache = None

    def spec(self) -> str:
        return f"dense {self.n_in} {self.n_out}"

    def params(self):
        return [(self.weight, self.grad_weight), (self.bias, self.grad_bias)]

    def forward(self, x):
        self._cache = x
        return x @ self.weight + self.bias

    def backward(self, dout):
        x = self._cache
        self.grad_weight += x.T @ dout
        self.grad_bias += dout.sum(axis=0)
        return dout @ self.weight.T


@dataclass
class Regressor:
    """Layer stack with a task head and a fixed input contract.

    input_gain (scalar or per-channel) pre-scales the raw input stack;
    out_scale maps the trained head's dimensionless output back to physical
    units. Both are recorded in the descriptor so a saved model is
    self-contained.
    """

    layers: list
    head: str  # direct | map | posture
    input_shape: tuple[int, int, int]  # (C, H, W)
    input_gain: float | np.ndarray = 1.0
    map_grid: tuple[int, int] | None = None  # (Wf, Hf) for the map head
    out_scale: np.ndarray | None = None

    def descriptor(self) -> str:
        c, h, w = self.input_shape
        gains = np.atleast_1d(np.asarray(self.input_gain, dtype=float))
        gain_txt = " ".join(repr(float(g)) for g in gains)
        parts = [f"input {c} {h} {w} gain {gain_txt}", f"head {self.head}"]
        if self.out_scale is not None:
            parts.append("outscale " + " ".join(repr(float(s)) for s in self.out_scale))
        if self.map_grid is not None:
            parts.append(f"grid {self.map_grid[0]} {self.map_grid[1]}")
        parts.extend(layer.spec() for layer in self.layers)
        return "; ".join(parts)

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grads(self):
        for p, g in self.params():
            g[...] = 0.0

    def _gain(self) -> np.ndarray | float:
        if np.ndim(self.input_gain) == 0:
            return self.input_gain
        return np.asarray(self.input_gain, dtype=float)[None, :, None, None]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"expected input {self.input_shape}, got {x.shape[1:]}")
        out = x * self._gain()
        for layer in self.layers:
            out = layer.forward(out)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout * self._gain()

    def parameter_count(self) -> int:
        return sum(p.size for p, _ in self.params())

    def buffers(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            if hasattr(layer, "buffers"):
                out.extend(layer.buffers())
        return out

    def set_training(self, training: bool) -> None:
        for layer in self.layers:
            if hasattr(layer, "training"):
                layer.training = training

    def state(self) -> list[np.ndarray]:
        return [p.copy() for p, _ in self.params()] + [b.copy() for b in self.buffers()]

    def load_state(self, state: list[np.ndarray]) -> None:
        tensors = [p for p, _ in self.params()] + self.buffers()
        for tensor, saved in zip(tensors, state):
            tensor[...] = saved


def _conv_backbone(c_in: int, rng, widths=(16, 32)):
    return [
        Conv2d(c_in, widths[0], kernel=3, stride=2, pad=1, rng=rng, use_bias=False),
        BatchNorm2d(widths[0]),
        LeakyReLU(),
        Conv2d(widths[0], widths[1], kernel=3, stride=2, pad=1, rng=rng, use_bias=False),
        BatchNorm2d(widths[1]),
        LeakyReLU(),
    ]


def build_direct_model(
    input_shape=(6, 48, 64), seed: int = 0, widths=(16, 32), input_gain: float = 1.0,
    summary_channels: int = 16,
) -> Regressor:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
    c, h, w = input_shape
    layers = _conv_backbone(c, rng, widths)
    feat = SpatialSummary.FEATURES_PER_CHANNEL * summary_channels
    layers += [
        Conv2d(widths[1], summary_channels, kernel=1, stride=1, pad=0, rng=rng),
        SpatialSummary(aspect=h / w),
        Dense(feat, 6, rng=rng),
    ]
    return Regressor(layers=layers, head="direct", input_shape=input_shape, input_gain=input_gain)


def build_posture_model(
    input_shape=(3, 48, 64), seed: int = 0, widths=(16, 32), input_gain: float = 1.0,
    summary_channels: int = 16,
) -> Regressor:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(103,)))
    c, h, w = input_shape
    layers = _conv_backbone(c, rng, widths)
    feat = SpatialSummary.FEATURES_PER_CHANNEL * summary_channels
    layers += [
        Conv2d(widths[1], summary_channels, kernel=1, stride=1, pad=0, rng=rng),
        SpatialSummary(aspect=h / w),
        Dense(feat, 3, rng=rng),  # yaw, sin(roll), cos(roll)
    ]
    return Regressor(layers=layers, head="posture", input_shape=input_shape, input_gain=input_gain)


def build_map_model(
    input_shape=(6, 48, 64),
    grid=(64, 64),
    seed: int = 0,
    widths=(16, 32),
    input_gain: float = 1.0,
) -> Regressor:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(102,)))
    c, h, w = input_shape
    hin, win = h // 4, w // 4
    wf, hf = grid
    # Upscaler sized to land exactly on the force grid: k = out - (in-1)*s.
    sh = max(1, hf // hin)
    sw = max(1, wf // win)
    kh = hf - (hin - 1) * sh
    kw = wf - (win - 1) * sw
    if kh < 1 or kw < 1:
        raise ValueError(f"grid {grid} unreachable from feature map {hin}x{win}")
    layers = _conv_backbone(c, rng, widths)
    layers += [
        ConvTranspose2d(widths[1], 16, kernel=(kh, kw), stride=(sh, sw), rng=rng, use_bias=False),
        BatchNorm2d(16),
        LeakyReLU(),
        Conv2d(16, 16, kernel=3, stride=1, pad=1, rng=rng, use_bias=False),
        BatchNorm2d(16),
        LeakyReLU(),
        Conv2d(16, 3, kernel=3, stride=1, pad=1, rng=rng),
    ]
    return Regressor(
        layers=layers, head="map", input_shape=input_shape, input_gain=input_gain, map_grid=grid
    )


def build_linear_probe(n_in: int, n_out: int, seed: int = 0) -> Regressor:
    """Single dense layer; its analytic gradients are exact for MSE."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(104,)))
    return Regressor(
        layers=[Flatten(), Dense(n_in, n_out, rng=rng)],
        head="direct",
        input_shape=(n_in, 1, 1),
    )


def _descale(model: Regressor, out: np.ndarray) -> np.ndarray:
    if model.out_scale is None:
        return out
    return out * model.out_scale


def forward_direct(model: Regressor, stack: np.ndarray) -> np.ndarray:
    """(x, y, z) in mm and (Fn, Fs1, Fs2) in N for one input stack (C, H, W)."""
    if model.head != "direct":
        raise ValueError(f"model head is {model.head!r}, not direct")
    return _descale(model, model.forward(stack[None, ...])[0])


def forward_map(model: Regressor, stack: np.ndarray) -> np.ndarray:
    """Force image (Hf, Wf, 3) in N for one input stack."""
    if model.head != "map":
        raise ValueError(f"model head is {model.head!r}, not map")
    out = model.forward(stack[None, ...])[0]  # (3, Hf, Wf)
    if model.out_scale is not None:
        out = out * model.out_scale[0]
    return out.transpose(1, 2, 0)


def forward_posture(model: Regressor, stack: np.ndarray) -> tuple[float, float]:
    """(yaw degrees in [-90, 90], roll degrees in [0, 360))."""
    if model.head != "posture":
        raise ValueError(f"model head is {model.head!r}, not posture")
    yaw, s, c = _descale(model, model.forward(stack[None, ...])[0])
    roll = float(np.rad2deg(np.arctan2(s, c)) % 360.0)
    return float(np.clip(yaw, -90.0, 90.0)), roll


def posture_target(yaw_deg: float, roll_deg: float) -> np.ndarray:
    r = np.deg2rad(roll_deg)
    return np.array([yaw_deg, np.sin(r), np.cos(r)])


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    loss = float(np.mean(diff**2))
    grad = 2.0 * diff / diff.size
    return loss, grad


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, model: Regressor, cfg: TrainConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p, _ in model.params()]
        self.v = [np.zeros_like(p) for p, _ in model.params()]
        self.t = 0

    def step(self, model: Regressor) -> None:
        cfg = self.cfg
        self.t += 1
        for (p, g), m, v in zip(model.params(), self.m, self.v):
            m[...] = cfg.beta1 * m + (1 - cfg.beta1) * g
            v[...] = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**self.t)
            v_hat = v / (1 - cfg.beta2**self.t)
            p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1


def train(
    model: Regressor,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig = TrainConfig(),
) -> TrainHistory:
    """Mini-batch Adam under MSE; keeps the best-validation parameters.

    Deterministic under cfg.seed: fixed shuffle order and update sequence.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(7,)))
    optimizer = Adam(model, cfg)
    history = TrainHistory()
    best_state = model.state()
    best_val = np.inf
    n = len(train_x)
    for epoch in range(cfg.epochs):
        model.set_training(True)
        order = rng.permutation(n)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.zero_grads()
            pred = model.forward(train_x[idx])
            loss, grad = mse_loss(pred, train_y[idx])
            if not np.isfinite(loss):
                norm = float(np.sqrt(sum((p**2).sum() for p, _ in model.params())))
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batches} (parameter norm {norm:.3e})"
                )
            model.backward(grad)
            optimizer.step(model)
            epoch_loss += loss
            batches += 1
        history.train_loss.append(epoch_loss / max(1, batches))
        model.set_training(False)
        val_pred = _forward_in_chunks(model, val_x)
        vloss, _ = mse_loss(val_pred, val_y)
        history.val_loss.append(vloss)
        if vloss < best_val:
            best_val = vloss
            best_state = model.state()
            history.best_epoch = epoch
    model.load_state(best_state)
    model.set_training(False)
    return history


def _forward_in_chunks(model: Regressor, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = [model.forward(x[i : i + chunk]) for i in range(0, len(x), chunk)]
    return np.concatenate(outs, axis=0)


def predict(model: Regressor, x: np.ndarray) -> np.ndarray:
    model.set_training(False)
    return _forward_in_chunks(model, x)


def gradient_check(
    model: Regressor,
    x: np.ndarray,
    target: np.ndarray,
    epsilon: float = 1e-6,
    n_samples: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks a random subsample of at least `n_samples` parameters against the
    MSE loss at the given input/target pair.
    """
    if not 1e-8 <= epsilon <= 1e-2:
        raise ValueError("epsilon out of the sensible range")
    rng = np.random.default_rng(seed)
    model.set_training(True)
    model.zero_grads()
    pred = model.forward(x)
    _, grad = mse_loss(pred, target)
    model.backward(grad)
    analytic = [g.copy() for _, g in model.params()]

    worst = 0.0
    tensors = model.params()
    total = sum(p.size for p, _ in tensors)
    n_samples = min(n_samples, total)
    # Sample without replacement over the flattened parameter vector.
    flat_choice = rng.choice(total, size=n_samples, replace=False)
    offsets = np.cumsum([0] + [p.size for p, _ in tensors])

    def activation_masks():
        return [l._mask for l in model.layers if isinstance(l, LeakyReLU)]

    def fd(view, local, orig, h):
        view[local] = orig + h
        lp, _ = mse_loss(model.forward(x), target)
        masks_plus = [m.copy() for m in activation_masks()]
        view[local] = orig - h
        lm, _ = mse_loss(model.forward(x), target)
        crossed = any(
            not np.array_equal(a, b) for a, b in zip(masks_plus, activation_masks())
        )
        view[local] = orig
        return (lp - lm) / (2 * h), crossed

    for flat in flat_choice:
        t_idx = int(np.searchsorted(offsets, flat, side="right") - 1)
        local = int(flat - offsets[t_idx])
        p, _ = tensors[t_idx]
        view = p.reshape(-1)
        orig = view[local]
        h = epsilon * max(1.0, abs(orig))
        coarse, crossed_coarse = fd(view, local, orig, h)
        numeric, crossed = fd(view, local, orig, h / 2)
        # The central difference is only a valid oracle where the step does
        # not straddle an activation kink and is self-consistent under step
        # halving (inconsistency means float-resolution noise).
        if crossed or crossed_coarse:
            continue
        scale = max(abs(coarse), abs(numeric), 1e-8)
        if abs(coarse - numeric) / scale > 0.05:
            continue
        a = analytic[t_idx].reshape(-1)[local]
        # The floor reflects the resolution of the finite-difference oracle:
        # gradients far below it drown in float noise and carry no signal.
        denom = max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, abs(a - numeric) / denom)
    return worst


MODEL_MAGIC = "IMDL"


def save_model(path, model: Regressor) -> None:
    with open(path, "wb") as f:
        binio.write_magic(f, MODEL_MAGIC, 1)
        desc = model.descriptor().encode("utf-8")
        binio.write_u32(f, len(desc))
        f.write(desc)
        for p, _ in model.params():
            binio.write_f32_array(f, p)
        for b in model.buffers():
            binio.write_f32_array(f, b)


def load_model(path) -> Regressor:
    with open(path, "rb") as f:
        version = binio.read_magic(f, MODEL_MAGIC)
        if version != 1:
            raise binio.FormatError(f"unsupported model version {version}")
        length = binio.read_u32(f)
        desc = f.read(length).decode("utf-8")
        model = model_from_descriptor(desc)
        for p, _ in model.params():
            p[...] = binio.read_f32_array(f, p.shape)
        for b in model.buffers():
            b[...] = binio.read_f32_array(f, b.shape)
    model.set_training(False)
    return model


def model_from_descriptor(desc: str) -> Regressor:
    """Rebuild the layer stack (uninitialized weights) from a descriptor."""
    layers = []
    head = "direct"
    input_shape = None
    gain: float | np.ndarray = 1.0
    grid = None
    out_scale = None
    for part in desc.split(";"):
        tokens = part.strip().split()
        if not tokens:
            continue
        tag = tokens[0]
        if tag == "input":
            input_shape = (int(tokens[1]), int(tokens[2]), int(tokens[3]))
            gains = [float(t) for t in tokens[5:]]
            gain = gains[0] if len(gains) == 1 else np.array(gains)
        elif tag == "head":
            head = tokens[1]
        elif tag == "outscale":
            out_scale = np.array([float(t) for t in tokens[1:]])
        elif tag == "grid":
            grid = (int(tokens[1]), int(tokens[2]))
        elif tag == "conv":
            use_bias = bool(int(tokens[6])) if len(tokens) > 6 else True
            layers.append(
                Conv2d(int(tokens[1]), int(tokens[2]), int(tokens[3]), int(tokens[4]),
                       int(tokens[5]), use_bias=use_bias)
            )
        elif tag == "convt":
            use_bias = bool(int(tokens[7])) if len(tokens) > 7 else True
            layers.append(
                ConvTranspose2d(
                    int(tokens[1]),
                    int(tokens[2]),
                    (int(tokens[3]), int(tokens[4])),
                    (int(tokens[5]), int(tokens[6])),
                    use_bias=use_bias,
                )
            )
        elif tag == "lrelu":
            layers.append(LeakyReLU(float(tokens[1])))
        elif tag == "flatten":
            layers.append(Flatten())
        elif tag == "spatial_summary":
            layers.append(SpatialSummary(float(tokens[1]) if len(tokens) > 1 else 0.75))
        elif tag == "bnorm":
            layers.append(BatchNorm2d(int(tokens[1])))
        elif tag == "dense":
            layers.append(Dense(int(tokens[1]), int(tokens[2])))
        else:
            raise binio.FormatError(f"unknown layer tag {tag!r} in descriptor")
    if input_shape is None:
        raise binio.FormatError("descriptor missing input declaration")
    return Regressor(
        layers=layers,
        head=head,
        input_shape=input_shape,
        input_gain=gain,
        map_grid=grid,
        out_scale=out_scale,
    )
