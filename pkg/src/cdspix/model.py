"""Network components for content-disentangled superpixel prediction.

Two per-modality encoders produce pixel embeddings F; a single shared
channel gate splits each F into content features (kept per pixel) and a
global style vector (the spatially pooled rejected part); a single shared
bottom-up decoder turns content features into the 9-way association map;
a small conditional-Gaussian network scores one modality's style vector
given the other's for the mutual-information bound.

All forward functions accept (C, H, W) single images or (N, C, H, W)
batches and are differentiable end to end through the autodiff core.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .modality import resize_image, resize_labels
from .superpixels import GridSpec, enforce_connectivity, grid_index_map, hard_assign, plan_resize

__all__ = [
    "ModelConfig",
    "ConvParams",
    "BatchNormParams",
    "EncoderParams",
    "GateParams",
    "DecoderParams",
    "VariationalParams",
    "ModelParams",
    "init_params",
    "encode",
    "gate_forward",
    "decode",
    "variational_mean_logvar",
    "variational_loglik",
    "forward_rgb",
    "infer_labels",
]

LOG_2PI = math.log(2.0 * math.pi)
BN_EPS = 1e-5
LOGVAR_CLAMP = 6.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (stored in checkpoints)."""

    channels: int = 32
    d: int = 16
    gate_reduction: int = 4

    def __post_init__(self):
        if self.channels < 1 or self.gate_reduction < 1:
            raise ValueError("channels and gate_reduction must be positive")
        if self.d < 2 or (self.d & (self.d - 1)) != 0:
            raise ValueError(f"grid size d={self.d} must be a power of two >= 2")

    @property
    def n_levels(self) -> int:
        return int(round(math.log2(self.d)))

    @property
    def gate_hidden(self) -> int:
        return max(1, self.channels // self.gate_reduction)


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class EncoderParams:
    """A residual conv stack plus the projection head for one modality."""

    blocks: list[tuple[ConvParams, BatchNormParams]]
    proj: list[ConvParams]


@dataclass
class GateParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DecoderParams:
    deep: ConvParams
    up: list[ConvParams]
    head: ConvParams


@dataclass
class VariationalParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def detached(self) -> "VariationalParams":
        """Weight views cut from the graph: values flow, gradients do not."""
        return VariationalParams(
            self.w1.detach(), self.b1.detach(), self.w2.detach(), self.b2.detach()
        )


@dataclass
class ModelParams:
    cfg: ModelConfig
    enc_i: EncoderParams
    enc_a: EncoderParams
    gate: GateParams
    dec: DecoderParams
    var: VariationalParams

    def _encoder_tensors(self, name: str, enc: EncoderParams) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (conv, bn) in enumerate(enc.blocks):
            out[f"{name}.phi{i}.w"] = conv.w
            out[f"{name}.phi{i}.b"] = conv.b
            out[f"{name}.phi{i}.gamma"] = bn.gamma
            out[f"{name}.phi{i}.beta"] = bn.beta
        for i, conv in enumerate(enc.proj):
            out[f"{name}.proj{i}.w"] = conv.w
            out[f"{name}.proj{i}.b"] = conv.b
        return out

    def main_tensors(self) -> dict[str, Tensor]:
        """Encoder + gate + decoder parameters (the step-1 update group)."""
        out = self._encoder_tensors("enc_i", self.enc_i)
        out.update(self._encoder_tensors("enc_a", self.enc_a))
        out.update(
            {"gate.w1": self.gate.w1, "gate.b1": self.gate.b1, "gate.w2": self.gate.w2, "gate.b2": self.gate.b2}
        )
        out.update({"dec.deep.w": self.dec.deep.w, "dec.deep.b": self.dec.deep.b})
        for i, conv in enumerate(self.dec.up):
            out[f"dec.up{i}.w"] = conv.w
            out[f"dec.up{i}.b"] = conv.b
        out.update({"dec.head.w": self.dec.head.w, "dec.head.b": self.dec.head.b})
        return out

    def var_tensors(self) -> dict[str, Tensor]:
        """Variational-network parameters (the step-2 update group)."""
        return {"var.w1": self.var.w1, "var.b1": self.var.b1, "var.w2": self.var.w2, "var.b2": self.var.b2}

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.main_tensors()
        out.update(self.var_tensors())
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, enc in (("enc_i", self.enc_i), ("enc_a", self.enc_a)):
            for i, (_, bn) in enumerate(enc.blocks):
                out[f"{name}.phi{i}.running_mean"] = bn.running_mean
                out[f"{name}.phi{i}.running_var"] = bn.running_var
        return out

    def zero_main_grads(self) -> None:
        for t in self.main_tensors().values():
            t.zero_grad()

    def zero_var_grads(self) -> None:
        for t in self.var_tensors().values():
            t.zero_grad()


# -- initialization ----------------------------------------------------------------


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype) -> ConvParams:
    bound = math.sqrt(6.0 / (cin * k * k))
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype)
    return ConvParams(Tensor(w, requires_grad=True), Tensor(np.zeros(cout, dtype=dtype), requires_grad=True))


def _kaiming_linear(rng: np.random.Generator, dout: int, din: int, dtype) -> tuple[Tensor, Tensor]:
    bound = math.sqrt(6.0 / din)
    w = rng.uniform(-bound, bound, size=(dout, din)).astype(dtype)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)


def _init_encoder(rng: np.random.Generator, c: int, dtype) -> EncoderParams:
    widths = [(3, c), (c, c), (c, 3)]
    blocks = []
    for i, (cin, cout) in enumerate(widths):
        conv = _kaiming_conv(rng, cout, cin, 3, dtype)
        if i == len(widths) - 1:
            conv.w.data[:] = 0.0  # residual branch starts as identity
        bn = BatchNormParams(
            Tensor(np.ones(cout, dtype=dtype), requires_grad=True),
            Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
            np.zeros(cout, dtype=dtype),
            np.ones(cout, dtype=dtype),
        )
        blocks.append((conv, bn))
    proj = [_kaiming_conv(rng, c, 3, 3, dtype), _kaiming_conv(rng, c, c, 3, dtype)]
    return EncoderParams(blocks, proj)


def init_params(seed: int, cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """Deterministic parameter initialization for a given seed and config.

    Conv/linear weights are Kaiming-uniform; biases zero except the gate's
    output bias (+2, so gates start mostly open); the last residual conv is
    zeroed so each encoder initially passes the raw image to its projector.
    """
    rng = np.random.default_rng(seed)
    c = cfg.channels
    enc_i = _init_encoder(rng, c, dtype)
    enc_a = _init_encoder(rng, c, dtype)
    gw1, gb1 = _kaiming_linear(rng, cfg.gate_hidden, c, dtype)
    gw2, gb2 = _kaiming_linear(rng, c, cfg.gate_hidden, dtype)
    gb2.data[:] = 2.0
    gate = GateParams(gw1, gb1, gw2, gb2)
    n = cfg.n_levels
    deep = _kaiming_conv(rng, c, c, 3, dtype)
    up = [_kaiming_conv(rng, c, 2 * c, 3, dtype) for _ in range(n - 1)]
    head = _kaiming_conv(rng, 9, c, 1, dtype)
    dec = DecoderParams(deep, up, head)
    vw1, vb1 = _kaiming_linear(rng, 2 * c, c, dtype)
    vw2, vb2 = _kaiming_linear(rng, 2 * c, 2 * c, dtype)
    var = VariationalParams(vw1, vb1, vw2, vb2)
    return ModelParams(cfg, enc_i, enc_a, gate, dec, var)


# -- forward passes ----------------------------------------------------------------


def _ensure_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return ad.reshape(x, (1, *x.shape)), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")


def _batch_norm(
    x: Tensor,
    bn: BatchNormParams,
    training: bool,
    update_running: bool,
    momentum: float,
) -> Tensor:
    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        if update_running:
            bn.running_mean[:] = (1 - momentum) * bn.running_mean + momentum * mu
            bn.running_var[:] = (1 - momentum) * bn.running_var + momentum * var
        return ad.batch_norm2d(x, bn.gamma, bn.beta, BN_EPS, batch_stats=(mu, var))
    return ad.batch_norm2d(x, bn.gamma, bn.beta, BN_EPS, running_stats=(bn.running_mean, bn.running_var))


def encode(
    pixels: Tensor,
    enc: EncoderParams,
    training: bool = False,
    update_running: bool | None = None,
    bn_momentum: float = 0.1,
    validate: bool = True,
) -> Tensor:
    """Per-pixel embedding of one modality: residual conv stack then projector.

    ``pixels`` is (3, H, W) or (N, 3, H, W) in [0, 1]. Output keeps the
    spatial size and has the model's channel width.
    """
    x, squeeze = _ensure_batched(pixels)
    if validate and (x.data.min() < 0.0 or x.data.max() > 1.0):
        raise ValueError("encoder input must lie in [0, 1]")
    if update_running is None:
        update_running = training
    h = x
    for conv, bn in enc.blocks:
        h = ad.relu(_batch_norm(ad.conv2d(h, conv.w, conv.b, pad=1), bn, training, update_running, bn_momentum))
    h = h + x
    for conv in enc.proj:
        h = ad.relu(ad.conv2d(h, conv.w, conv.b, pad=1))
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def gate_forward(feat: Tensor, gp: GateParams) -> tuple[Tensor, Tensor]:
    """Split features into gated content and a pooled style vector.

    Returns ``(content, style)`` with content of the input shape and style
    of shape (..., C): content = g * F, style = spatial_mean((1-g) * F),
    g = sigmoid(W2 relu(W1 spatial_mean(F))).
    """
    x, squeeze = _ensure_batched(feat)
    n, c = x.shape[0], x.shape[1]
    pooled = ad.spatial_mean(x)
    hidden = ad.relu(ad.linear(pooled, gp.w1, gp.b1))
    g = ad.sigmoid(ad.linear(hidden, gp.w2, gp.b2))
    g4 = ad.reshape(g, (n, c, 1, 1))
    content = x * g4
    style = ad.spatial_mean((1.0 - g4) * x)
    if squeeze:
        return ad.reshape(content, content.shape[1:]), ad.reshape(style, (c,))
    return content, style


def decode(content: Tensor, dec: DecoderParams, d: int) -> Tensor:
    """Predict the (H, W, 9) association map from content features.

    A pyramid of log2(d) bilinear halvings feeds a bottom-up conv path
    with skip concatenation; the 1x1 head produces 9 logits per pixel and
    off-grid neighbor channels are masked before the softmax.
    """
    x, squeeze = _ensure_batched(content)
    n_img, c, h, w = x.shape
    if d < 2 or (d & (d - 1)) != 0:
        raise ValueError(f"d={d} must be a power of two >= 2")
    if h % d or w % d:
        raise ValueError(f"spatial size {h}x{w} not divisible by d={d}")
    n = int(round(math.log2(d)))
    pyr = [x]
    for i in range(1, n):
        pyr.append(ad.bilinear_resize(pyr[-1], h >> i, w >> i))
    y = ad.relu(ad.conv2d(pyr[-1], dec.deep.w, dec.deep.b, pad=1))
    for j, lvl in enumerate(range(n - 2, -1, -1)):
        y = ad.bilinear_resize(y, h >> lvl, w >> lvl)
        y = ad.relu(ad.conv2d(ad.concat([y, pyr[lvl]], axis=1), dec.up[j].w, dec.up[j].b, pad=1))
    logits = ad.conv2d(y, dec.head.w, dec.head.b, pad=0)
    _, valid = grid_index_map(h, w, d)
    mask = valid.transpose(2, 0, 1)[None]  # (1, 9, H, W)
    q = ad.softmax(logits, axis=1, mask=mask)
    q = ad.transpose(q, (0, 2, 3, 1))
    return ad.reshape(q, q.shape[1:]) if squeeze else q


def variational_mean_logvar(v_cond: Tensor, vp: VariationalParams) -> tuple[Tensor, Tensor]:
    """Conditional Gaussian parameters (mu, log-variance) given a style vector."""
    c = vp.w1.shape[1]
    hidden = ad.relu(ad.linear(v_cond, vp.w1, vp.b1))
    out = ad.linear(hidden, vp.w2, vp.b2)
    mu = ad.slice_axis(out, -1, 0, c)
    logvar = ad.clamp(ad.slice_axis(out, -1, c, 2 * c), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return mu, logvar


def variational_loglik(v_i: Tensor, v_a: Tensor, vp: VariationalParams) -> Tensor:
    """Diagonal-Gaussian log density of v_i under the net's prediction from v_a.

    Shapes (..., C) reduce over the channel axis; a (C,) pair yields a scalar.
    """
    mu, logvar = variational_mean_logvar(v_a, vp)
    var = ad.exp(logvar)
    d2 = (v_i - mu) * (v_i - mu)
    ll = -0.5 * LOG_2PI + (-0.5) * logvar - d2 / (2.0 * var)
    return ad.tsum(ll, axis=-1)


def forward_rgb(params: ModelParams, pixels: Tensor, training: bool = False) -> Tensor:
    """RGB-only forward to the association map (the inference path)."""
    f = encode(pixels, params.enc_i, training=training)
    content, _ = gate_forward(f, params.gate)
    return decode(content, params.dec, params.cfg.d)


def infer_labels(
    params: ModelParams,
    image: np.ndarray,
    sp: tuple[int, int],
    connectivity: bool = True,
) -> np.ndarray:
    """Full inference: resize to the working grid, assign, restore size.

    ``image`` is (H, W, 3) in [0, 1]; ``sp`` the requested (rows, cols) of
    superpixel cells. The label map comes back at the original resolution
    with at most sp[0]*sp[1] labels. No auxiliary modality is involved.
    """
    image = np.asarray(image)
    h0, w0 = image.shape[:2]
    d = params.cfg.d
    h2, w2 = plan_resize(h0, w0, sp[0], sp[1], d)
    work = resize_image(image, h2, w2) if (h2, w2) != (h0, w0) else image
    x = Tensor(np.ascontiguousarray(work.transpose(2, 0, 1))[None])
    with ad.no_grad():
        q = forward_rgb(params, x, training=False)
    labels = hard_assign(q.data[0], GridSpec(h2, w2, d))
    min_size = max(1, d * d // 16)
    if connectivity:
        labels = enforce_connectivity(labels, min_size)
    if (h2, w2) != (h0, w0):
        labels = resize_labels(labels, h0, w0)
        if connectivity:
            # nearest downscaling can sever thin regions; re-enforce at output scale
            scaled = max(1, round(min_size * (h0 * w0) / (h2 * w2)))
            labels = enforce_connectivity(labels, scaled)
    return labels
