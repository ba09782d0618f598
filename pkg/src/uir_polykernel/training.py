"""Training loop, AdamW, cosine schedule, augmentation, checkpoints.

Everything here is deterministic given the config seed: weight init comes
from the network's own seed, and every random augmentation decision is drawn
from a generator keyed as [seed, epoch, sample-index], so a rerun with the
same inputs reproduces the loss curve (and the final weights) exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .arch import NetworkConfig, PolyKernelNet
from .losses import composite_loss_terms
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"UIRPKNET"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Raised when a training run cannot proceed (bad data, non-finite loss)."""


class CheckpointError(RuntimeError):
    """Malformed or mismatched checkpoint file."""


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 16
    patch_size: int = 256
    lr_max: float = 2e-4
    lr_min: float = 1e-6
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.patch_size < 4:
            raise ValueError("epochs/batch_size must be >= 1 and patch_size >= 4")
        if self.patch_size % 4:
            raise ValueError(f"patch_size must be a multiple of 4, got {self.patch_size}")
        if not (0.0 < self.lr_min <= self.lr_max):
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}..{self.lr_max}")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be >= 0")


def cosine_lr(t: int, total: int, lr_max: float, lr_min: float) -> float:
    """Half-cosine decay over ``total`` steps; endpoints are returned exactly.

    Epoch e of training uses ``cosine_lr(e - 1, epochs, ...)``, so the first
    epoch runs at lr_max and the value reaches lr_min only one step past the
    final epoch.
    """
    if total < 1:
        raise ValueError("total must be >= 1")
    if t <= 0:
        return lr_max
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class AdamW:
    """Adam with decoupled weight decay.

        w <- w - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * w

    The decay term uses the pre-step weight. Every registered parameter must
    carry a gradient when ``step`` runs; a missing one means the backward
    pass silently lost a leaf, which is worth failing loudly over.
    """

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 1e-4):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - lr * update - lr * self.weight_decay * p.data

    def zero_grad(self) -> None:
        for _, p in self.params.items():
            p.zero_grad()


# --------------------------------------------------------------------------
# augmentation


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) array, half-pixel-center convention."""
    c, h, w = img.shape
    if out_h == h and out_w == w:
        return img.copy()

    def grid(n_out, n_in):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(img.dtype)

    y0, y1, wy = grid(out_h, h)
    x0, x1, wx = grid(out_w, w)
    wy = wy[None, :, None]
    wx = wx[None, None, :]
    rows0 = img[:, y0, :]
    rows1 = img[:, y1, :]
    top = rows0[:, :, x0] * (1 - wx) + rows0[:, :, x1] * wx
    bot = rows1[:, :, x0] * (1 - wx) + rows1[:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment_pair(inp: np.ndarray, tgt: np.ndarray, patch: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One random scale/crop/flip/rotate, applied identically to both images.

    The scale range is [0.75, 1.25], with the lower end raised so the scaled
    image never drops below the patch size. The draw order (scale, crop y,
    crop x, hflip, vflip, quarter-turns, transpose) is fixed; every decision
    is drawn even when it ends up a no-op, keeping the stream stable.
    """
    if inp.shape != tgt.shape:
        raise TrainingError(f"pair shapes differ: {inp.shape} vs {tgt.shape}")
    _, h, w = inp.shape
    lo = max(0.75, patch / h, patch / w)
    hi = max(1.25, lo)
    s = rng.uniform(lo, hi)
    nh = max(patch, int(round(h * s)))
    nw = max(patch, int(round(w * s)))
    y0 = int(rng.integers(0, nh - patch + 1))
    x0 = int(rng.integers(0, nw - patch + 1))
    do_h = rng.random() < 0.5
    do_v = rng.random() < 0.5
    quarter = int(rng.integers(0, 4))
    do_t = rng.random() < 0.5

    def apply(img):
        img = resize_bilinear(img, nh, nw)[:, y0 : y0 + patch, x0 : x0 + patch]
        if do_h:
            img = img[:, :, ::-1]
        if do_v:
            img = img[:, ::-1, :]
        if quarter:
            img = np.rot90(img, quarter, axes=(1, 2))
        if do_t:
            img = img.transpose(0, 2, 1)
        return np.ascontiguousarray(img)

    return apply(inp), apply(tgt)


# --------------------------------------------------------------------------
# the loop


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    if n < batch_size:
        return [order]
    steps = n // batch_size
    return [order[i * batch_size : (i + 1) * batch_size] for i in range(steps)]


def format_epoch_line(epoch: int, loss: float, lp: float, ls: float, lu: float, lr: float) -> str:
    return f"epoch={epoch} loss={loss:.6f} lp={lp:.6f} ls={ls:.6f} lu={lu:.6f} lr={lr:.8f}"


def train_loop(
    net: PolyKernelNet, pairs, config: TrainConfig, log_fn=None, optimizer: AdamW | None = None
) -> list[dict]:
    """Train on (degraded, clean) array pairs; returns the per-epoch history.

    ``pairs`` is a sequence of (input, target) float32 (3, H, W) arrays in
    [0, 1]. A non-finite loss aborts with the name of the first operation
    whose output went bad. Pass ``optimizer`` to keep a handle on the moment
    state (for checkpointing); otherwise a fresh one is created.
    """
    config.validate()
    if not pairs:
        raise TrainingError("no training pairs")
    for inp, tgt in pairs:
        if inp.ndim != 3 or inp.shape[0] != 3:
            raise TrainingError(f"expected (3, H, W) inputs, got {inp.shape}")
        if min(inp.shape[1:]) < 1 or inp.shape != tgt.shape:
            raise TrainingError(f"bad pair shapes {inp.shape} vs {tgt.shape}")

    opt = optimizer if optimizer is not None else AdamW(net.params, weight_decay=config.weight_decay)
    history: list[dict] = []
    n = len(pairs)

    for epoch in range(1, config.epochs + 1):
        lr = cosine_lr(epoch - 1, config.epochs, config.lr_max, config.lr_min)
        shuffle_rng = np.random.default_rng([config.seed, epoch])
        sums = np.zeros(4, dtype=np.float64)
        steps = 0
        for batch_idx in _epoch_batches(n, config.batch_size, shuffle_rng):
            xs, ys = [], []
            for idx in batch_idx:
                rng = np.random.default_rng([config.seed, epoch, int(idx)])
                a, b = augment_pair(pairs[idx][0], pairs[idx][1], config.patch_size, rng)
                xs.append(a)
                ys.append(b)
            x = Tensor(np.stack(xs))
            y = Tensor(np.stack(ys))
            with Tape() as tape:
                pred = net(x)
                total, lp, ls, lu = composite_loss_terms(pred, y)
                values = (total.item(), lp.item(), ls.item(), lu.item())
                if not all(math.isfinite(v) for v in values):
                    bad = tape.first_nonfinite() or "loss"
                    raise TrainingError(f"non-finite loss at epoch {epoch}; first bad op: {bad}")
                opt.zero_grad()
                tape.backward(total)
            opt.step(lr)
            sums += values
            steps += 1
        mean = sums / steps
        entry = {
            "epoch": epoch,
            "loss": float(mean[0]),
            "lp": float(mean[1]),
            "ls": float(mean[2]),
            "lu": float(mean[3]),
            "lr": lr,
        }
        history.append(entry)
        if log_fn is not None:
            log_fn(format_epoch_line(epoch, entry["loss"], entry["lp"], entry["ls"], entry["lu"], lr))
    return history


# --------------------------------------------------------------------------
# checkpoint file format
#
#   magic "UIRPKNET" | u32 version | u32 len + config text (key=value lines)
#   | u32 n_params | per param: u16 name len, name, 4x u32 shape, f32 data
#   | u8 has_optimizer | if set: u64 step count, then per param in the same
#     order: u16+name, f32 first moment, f32 second moment.
#
# All integers little-endian; all arrays float32, C order.


def _fmt_cfg_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_cfg_text(text: str) -> dict:
    out: dict = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"bad config line in checkpoint: {line!r}")
        key, value = line.split("=", 1)
        if value == "true":
            out[key] = True
        elif value == "false":
            out[key] = False
        else:
            try:
                out[key] = int(value)
            except ValueError:
                raise CheckpointError(f"bad config value in checkpoint: {line!r}") from None
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def done(self) -> bool:
        return self.pos == len(self.data)


def checkpoint_save(path, net: PolyKernelNet, optimizer: AdamW | None = None) -> None:
    cfg_text = "".join(
        f"{k}={_fmt_cfg_value(v)}\n" for k, v in sorted(net.config.to_dict().items())
    )
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    cfg_bytes = cfg_text.encode("utf-8")
    buf += struct.pack("<I", len(cfg_bytes))
    buf += cfg_bytes
    items = list(net.params.items())
    buf += struct.pack("<I", len(items))
    for name, tensor in items:
        nb = name.encode("utf-8")
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<4I", *tensor.shape)
        buf += np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    if optimizer is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<B", 1)
        buf += struct.pack("<Q", optimizer.t)
        for name, tensor in items:
            nb = name.encode("utf-8")
            buf += struct.pack("<H", len(nb))
            buf += nb
            buf += np.ascontiguousarray(optimizer.m[name], dtype="<f4").tobytes()
            buf += np.ascontiguousarray(optimizer.v[name], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def checkpoint_load(path):
    """Returns (NetworkConfig, {name: float32 array}, optimizer state or None)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg_text = r.take(r.unpack("<I")).decode("utf-8")
    try:
        config = NetworkConfig.from_dict(_parse_cfg_text(cfg_text))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from None

    arrays: dict[str, np.ndarray] = {}
    n_params = r.unpack("<I")
    for _ in range(n_params):
        name = r.take(r.unpack("<H")).decode("utf-8")
        shape = r.unpack("<4I")
        count = int(np.prod(shape))
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        arrays[name] = arr.copy()

    opt_state = None
    if r.unpack("<B"):
        t = r.unpack("<Q")
        m: dict[str, np.ndarray] = {}
        v: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            name = r.take(r.unpack("<H")).decode("utf-8")
            if name not in arrays:
                raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
            count = arrays[name].size
            shape = arrays[name].shape
            m[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
            v[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        opt_state = {"t": t, "m": m, "v": v}
    if not r.done():
        raise CheckpointError("trailing bytes after checkpoint payload")
    return config, arrays, opt_state


def load_network(path) -> PolyKernelNet:
    """Rebuild a network from a checkpoint (weights only)."""
    config, arrays, _ = checkpoint_load(path)
    net = PolyKernelNet(config, seed=0)
    net.load_param_data(arrays)
    return net
