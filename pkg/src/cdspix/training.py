"""Two-step alternating training, optimizer, checkpoints, synthetic data.

Each iteration performs the alternating update: step 1 builds the
auxiliary modality, runs both encoders, the shared gate and decoder,
and applies Adam to the main network under the combined objective while
the density network's weights are frozen; step 2 refits the density
network on detached style vectors with its own constant-rate Adam.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .imageio import load_image, load_labels, read_manifest, save_image, save_labels, write_manifest
from .model import (
    ModelConfig,
    ModelParams,
    decode,
    encode,
    gate_forward,
    init_params,
)
from .modality import AUX_KINDS, AugmentConfig, augment, make_aux

__all__ = [
    "TrainConfig",
    "NumericError",
    "AdamState",
    "adam_step",
    "poly_lr",
    "train_step",
    "train_loop",
    "save_checkpoint",
    "load_checkpoint",
    "make_synthetic_dataset",
    "parse_config_file",
    "apply_preset",
    "LOSS_CSV_HEADER",
]

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = "iter,lr,l_sp_i,l_sp_a,l_align,l_mi,l_theta"
CHECKPOINT_MAGIC = b"CDSP1"


class NumericError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    manifest: str = ""
    out_dir: str = "runs/cds"
    lr_main: float = 5e-4
    lr_h: float = 5e-3
    iters: int = 150_000
    batch: int = 8
    crop: int = 208
    d: int = 16
    channels: int = 32
    gate_reduction: int = 4
    poly_power: float = 0.9
    seed: int = 0
    modality: str = "gradient"
    lambda_pos: float = 0.003
    w_align: float = 1.0
    w_mi: float = 1.0
    w_sp_i: float = 1.0
    w_sp_a: float = 1.0
    semantic_capacity: int = 50
    log_every: int = 50
    checkpoint_every: int = 500

    def validate(self) -> "TrainConfig":
        if self.iters < 1 or self.batch < 1 or self.crop < 1:
            raise ValueError("iters, batch and crop must be positive")
        if self.lr_main <= 0 or self.lr_h <= 0 or self.poly_power <= 0:
            raise ValueError("learning rates and poly_power must be positive")
        if self.crop % self.d:
            raise ValueError(f"crop {self.crop} must be divisible by d {self.d}")
        if self.modality not in AUX_KINDS:
            raise ValueError(f"modality must be one of {AUX_KINDS}")
        ModelConfig(self.channels, self.d, self.gate_reduction)
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.channels, self.d, self.gate_reduction)

    def loss_weights(self) -> tuple[float, float, float, float]:
        return (self.w_align, self.w_mi, self.w_sp_i, self.w_sp_a)


PRESETS = {
    "desk": dict(iters=2000, batch=4, crop=64, d=8, channels=32),
    "paper": dict(iters=150_000, batch=8, crop=208, d=16, channels=32),
}


def apply_preset(cfg: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    return dataclasses.replace(cfg, **PRESETS[preset])


def parse_config_file(path: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse UTF-8 ``key = value`` lines ('#' comments); unknown keys error."""
    cfg = base if base is not None else TrainConfig()
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    updates: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                updates[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                updates[key] = int(value)
            elif isinstance(current, float):
                updates[key] = float(value)
            else:
                updates[key] = value
    return dataclasses.replace(cfg, **updates)


# -- optimizer ---------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(tensors: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update over a named parameter group."""
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for name, p in tensors.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / b1c
        vhat = v / b2c
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """Polynomial decay: lr0 * (1 - iter/iters) ** power."""
    if iteration < 0 or iteration > cfg.iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iters}]")
    return cfg.lr_main * (1.0 - iteration / cfg.iters) ** cfg.poly_power


# -- the two-step update --------------------------------------------------------------


def train_step(
    batch_images: np.ndarray,
    batch_labels: np.ndarray,
    params: ModelParams,
    opt_main: AdamState,
    opt_var: AdamState,
    cfg: TrainConfig,
    lr: float,
) -> dict[str, float]:
    """One alternating update on an augmented (N,H,W,3)/(N,H,W) batch."""
    n = batch_images.shape[0]
    d = params.cfg.d
    aux = np.stack([make_aux(im, cfg.modality) for im in batch_images])
    x_i = Tensor(np.ascontiguousarray(batch_images.transpose(0, 3, 1, 2)))
    x_a = Tensor(np.ascontiguousarray(aux.transpose(0, 3, 1, 2)))

    # step 1: update the main network, density network frozen
    f_i = encode(x_i, params.enc_i, training=True)
    f_a = encode(x_a, params.enc_a, training=True)
    c_i, v_i = gate_forward(f_i, params.gate)
    c_a, v_a = gate_forward(f_a, params.gate)
    q_both = decode(ad.concat([c_i, c_a], axis=0), params.dec, d)
    q_i = ad.slice_axis(q_both, 0, 0, n)
    q_a = ad.slice_axis(q_both, 0, n, 2 * n)
    h, w = batch_labels.shape[1:]
    # all-zero one-hot channels are exact no-ops in the loss, so the batch
    # only needs channels up to its own region count (capped as configured)
    capacity = min(cfg.semantic_capacity, int(batch_labels.max()) + 1)
    sem = losses.semantic_one_hot(batch_labels, capacity)
    pos = losses.position_features(h, w, n)
    l_sp_i = losses.superpixel_loss(q_i, sem, pos, d, cfg.lambda_pos)
    l_sp_a = losses.superpixel_loss(q_a, sem, pos, d, cfg.lambda_pos)
    l_align = losses.alignment_loss(c_i, c_a, d)
    l_mi = losses.mi_loss(v_i, v_a, params.var)
    total = losses.total_loss(l_align, l_mi, l_sp_i, l_sp_a, cfg.loss_weights())
    record = {
        "l_sp_i": l_sp_i.item(),
        "l_sp_a": l_sp_a.item(),
        "l_align": l_align.item(),
        "l_mi": l_mi.item(),
    }
    if not np.isfinite(total.item()):
        raise NumericError(f"non-finite training loss: {record}")
    v_i_data = v_i.data.copy()
    v_a_data = v_a.data.copy()
    params.zero_main_grads()
    params.zero_var_grads()
    total.backward()
    adam_step(params.main_tensors(), opt_main, lr)

    # step 2: refit the density network on detached style vectors
    l_theta = losses.variational_nll(Tensor(v_i_data), Tensor(v_a_data), params.var)
    record["l_theta"] = l_theta.item()
    if not np.isfinite(record["l_theta"]):
        raise NumericError(f"non-finite density-network loss: {record}")
    params.zero_var_grads()
    l_theta.backward()
    adam_step(params.var_tensors(), opt_var, cfg.lr_h)
    return record


def _sample_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))


def train_loop(manifest: str, cfg: TrainConfig, callback=None) -> tuple[str, str]:
    """Train from a dataset manifest; returns (checkpoint path, loss CSV path).

    Fully deterministic for a given config: batch sampling and per-sample
    augmentation derive from (seed, iteration, slot). Checkpoints are
    written every ``checkpoint_every`` iterations and at the end.
    """
    cfg.validate()
    pairs = read_manifest(manifest)
    if not pairs:
        raise ValueError(f"manifest {manifest} lists no samples")
    data = [(load_image(ip), load_labels(lp)) for ip, lp in pairs]
    os.makedirs(cfg.out_dir, exist_ok=True)
    with threadpool_limits(limits=1):
        return _train_loop_inner(manifest, cfg, data, callback)


def _train_loop_inner(manifest, cfg, data, callback) -> tuple[str, str]:
    # desk-scale GEMMs are small; one BLAS thread is both faster and keeps
    # checkpoint bytes independent of the host's thread count

    params = init_params(cfg.seed, cfg.model_config())
    opt_main = AdamState()
    opt_var = AdamState()
    aug_cfg = AugmentConfig(crop=cfg.crop)
    rows = []
    final_path = os.path.join(cfg.out_dir, "checkpoint_final.cdsp")
    csv_path = os.path.join(cfg.out_dir, "losses.csv")
    for it in range(cfg.iters):
        batch_rng = _sample_rng(cfg.seed, 0, it)
        idx = batch_rng.integers(0, len(data), size=cfg.batch)
        images, labels = [], []
        for slot, di in enumerate(idx):
            rng = _sample_rng(cfg.seed, 1, it, slot)
            im, lab = augment(data[di][0], data[di][1], aug_cfg, rng)
            images.append(im)
            labels.append(lab)
        lr = poly_lr(it, cfg)
        try:
            rec = train_step(np.stack(images), np.stack(labels), params, opt_main, opt_var, cfg, lr)
        except NumericError as e:
            raise NumericError(f"iteration {it}: {e}") from None
        rows.append(
            f"{it},{lr:.10g},{rec['l_sp_i']:.6f},{rec['l_sp_a']:.6f},"
            f"{rec['l_align']:.6f},{rec['l_mi']:.6f},{rec['l_theta']:.6f}"
        )
        if callback is not None:
            callback(it, rec)
        if (it + 1) % cfg.log_every == 0 or it == 0:
            log.info(
                "iter %d lr %.3g l_sp_i %.4f l_sp_a %.4f l_align %.4f l_mi %.4f l_theta %.4f",
                it, lr, rec["l_sp_i"], rec["l_sp_a"], rec["l_align"], rec["l_mi"], rec["l_theta"],
            )
        if (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(params, os.path.join(cfg.out_dir, f"checkpoint_{it + 1:06d}.cdsp"))
    save_checkpoint(params, final_path)
    with open(csv_path, "w", newline="\n") as fh:
        fh.write(LOSS_CSV_HEADER + "\n")
        fh.write("\n".join(rows))
        if rows:
            fh.write("\n")
    return final_path, csv_path


# -- checkpoint container --------------------------------------------------------------

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(params: ModelParams, path: str) -> None:
    """Write all parameters and batch-norm buffers in the versioned container."""
    meta = {
        "channels": float(params.cfg.channels),
        "d": float(params.cfg.d),
        "gate_reduction": float(params.cfg.gate_reduction),
    }
    arrays = {name: t.data for name, t in params.named_tensors().items()}
    arrays.update(params.named_buffers())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta)))
        for key, value in meta.items():
            kb = key.encode()
            fh.write(struct.pack("<H", len(kb)))
            fh.write(kb)
            fh.write(struct.pack("<d", value))
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            dt = np.dtype(arr.dtype)
            if dt not in _DTYPE_TAGS:
                raise ValueError(f"unsupported dtype {dt} for {name}")
            fh.write(struct.pack("<BB", _DTYPE_TAGS[dt], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


class CheckpointError(ValueError):
    """Malformed, truncated, or architecture-incompatible checkpoint."""


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> ModelParams:
    """Read a checkpoint, validating names and shapes against its config."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint file")
    (n_meta,) = r.unpack("<I")
    meta: dict[str, float] = {}
    for _ in range(n_meta):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode()
        (val,) = r.unpack("<d")
        meta[key] = val
    for need in ("channels", "d", "gate_reduction"):
        if need not in meta:
            raise CheckpointError(f"{path}: missing config entry {need!r}")
    cfg = ModelConfig(int(meta["channels"]), int(meta["d"]), int(meta["gate_reduction"]))
    (n_arrays,) = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        tag, rank = r.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{rank}I")
        dt = _TAG_DTYPES[tag]
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * dt.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(shape)
    dtype = next(iter(arrays.values())).dtype if arrays else np.float32
    params = init_params(0, cfg, dtype=dtype)
    expected = {name: t.data for name, t in params.named_tensors().items()}
    expected.update(params.named_buffers())
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: array names disagree with architecture (missing {missing}, extra {extra})")
    for name, t in params.named_tensors().items():
        if arrays[name].shape != t.data.shape:
            raise CheckpointError(f"{path}: {name} shape {arrays[name].shape} != {t.data.shape}")
        t.data = arrays[name].copy()
    buffers = params.named_buffers()
    for name, arr in buffers.items():
        if arrays[name].shape != arr.shape:
            raise CheckpointError(f"{path}: {name} shape {arrays[name].shape} != {arr.shape}")
        arr[:] = arrays[name]
    return params


# -- synthetic corpus ----------------------------------------------------------------


def _synth_one(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(64):
        target = int(rng.integers(3, 7))
        labels = np.zeros((size, size), dtype=np.int32)
        for shape_i in range(target - 1):
            kind = int(rng.integers(0, 2))
            if kind == 0:  # axis-aligned rectangle
                rh = int(rng.integers(size // 6, size // 2 + 1))
                rw = int(rng.integers(size // 6, size // 2 + 1))
                r0 = int(rng.integers(0, size - rh + 1))
                c0 = int(rng.integers(0, size - rw + 1))
                labels[r0 : r0 + rh, c0 : c0 + rw] = shape_i + 1
            else:  # triangle
                for _try in range(8):
                    v = rng.uniform(0, size, size=(3, 2))
                    e1 = (xs - v[0, 1]) * (v[1, 0] - v[0, 0]) - (ys - v[0, 0]) * (v[1, 1] - v[0, 1])
                    e2 = (xs - v[1, 1]) * (v[2, 0] - v[1, 0]) - (ys - v[1, 0]) * (v[2, 1] - v[1, 1])
                    e3 = (xs - v[2, 1]) * (v[0, 0] - v[2, 0]) - (ys - v[2, 0]) * (v[0, 1] - v[2, 1])
                    inside = ((e1 >= 0) & (e2 >= 0) & (e3 >= 0)) | ((e1 <= 0) & (e2 <= 0) & (e3 <= 0))
                    if inside.sum() >= size * size // 20:
                        labels[inside] = shape_i + 1
                        break
        _, labels = np.unique(labels, return_inverse=True)
        labels = labels.reshape(size, size).astype(np.int32)
        n_regions = int(labels.max()) + 1
        if 3 <= n_regions <= 6:
            break
    colors = np.zeros((n_regions, 3))
    for i in range(n_regions):
        for _try in range(50):
            c = rng.uniform(0.05, 0.95, size=3)
            if all(np.abs(c - colors[j]).sum() > 0.45 for j in range(i)):
                break
        colors[i] = c
    image = colors[labels].astype(np.float32)
    return image, labels


def make_synthetic_dataset(n: int, size: int, seed: int, out_dir: str) -> str:
    """Write ``n`` synthetic image/label pairs plus a manifest; returns its path.

    Each image holds 3-6 flat-colored regions built from rectangles and
    triangles over a background; labels are contiguous ids. Deterministic
    for a given seed.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    entries = []
    for i in range(n):
        rng = _sample_rng(seed, 2, i)
        image, labels = _synth_one(rng, size)
        ip = os.path.join("images", f"img_{i:04d}.ppm")
        lp = os.path.join("labels", f"lab_{i:04d}.pgm")
        save_image(os.path.join(out_dir, ip), image)
        save_labels(os.path.join(out_dir, lp), labels)
        entries.append((ip, lp))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, entries)
    return manifest
