"""A small U-Net noise predictor written directly in numpy.

Layout (c1, c2 are the configurable channel widths)::

    x ──conv──> a0 (c1, H)  ──s2 conv──> a1 (c2, H/2) ──s2 conv──> a2 (c2, H/4)
                                                         2 x residual block
    up(r) ++ a1 ──conv──> u1 (c2, H/2)
    up(u1) ++ a0 ──conv──> u2 (c1, H)
    u2 ++ x ──conv──> * exp(gain(t)) ──> eps_hat (3, H)

Every block except the output adds a per-channel projection of a sinusoidal
timestep embedding before its ReLU.  The output is scaled per channel by a
learned function of the timestep, since the noise estimate needs a much
larger gain at small t than at large t.  Forward passes record a tape of
closures so :func:`backward` can run reverse mode without a framework.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import DiffusionSchedule, q_sample

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CRDN"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    base_widths: tuple[int, int] = (16, 32)
    width_mult: float = 1.0
    emb_dim: int = 32
    in_channels: int = 3
    output_gain: bool = True

    @property
    def widths(self) -> tuple[int, int]:
        return tuple(max(1, int(round(w * self.width_mult))) for w in self.base_widths)


# (name, in channels, out channels, stride, adds time embedding)
def _layer_specs(cfg: DenoiserConfig):
    c1, c2 = cfg.widths
    ci = cfg.in_channels
    return [
        ("inc", ci, c1, 1, True),
        ("down1", c1, c2, 2, True),
        ("down2", c2, c2, 2, True),
        ("res1a", c2, c2, 1, True),
        ("res1b", c2, c2, 1, False),
        ("res2a", c2, c2, 1, True),
        ("res2b", c2, c2, 1, False),
        ("up1", 2 * c2, c2, 1, True),
        ("up2", c2 + c1, c1, 1, True),
        ("out", c1 + ci, ci, 1, False),
    ]


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, OrderedDict((k, v.copy()) for k, v in self.arrays.items()))

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.config, OrderedDict((k, v.astype(dtype)) for k, v in self.arrays.items()))

    @property
    def dtype(self):
        return next(iter(self.arrays.values())).dtype

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.arrays.items())


def init_params(config: DenoiserConfig = DenoiserConfig(), rng: np.random.Generator | None = None,
                dtype=np.float32) -> DenoiserParams:
    """Kaiming-uniform fan-in init; biases and the output layer start at zero."""
    rng = np.random.default_rng(0) if rng is None else rng
    D = config.emb_dim
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()

    def kaiming(shape, fan_in):
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    arrays["temb.w"] = kaiming((D, D), D)
    arrays["temb.b"] = np.zeros(D, dtype)
    for name, cin, cout, _, timed in _layer_specs(config):
        if name == "out":
            arrays[f"{name}.w"] = np.zeros((cout, cin, 3, 3), dtype)
        else:
            arrays[f"{name}.w"] = kaiming((cout, cin, 3, 3), cin * 9)
        arrays[f"{name}.b"] = np.zeros(cout, dtype)
        if timed:
            arrays[f"{name}.t"] = kaiming((D, cout), D) * 0.1
    if config.output_gain:
        arrays["gain.w"] = np.zeros((D, config.in_channels), dtype)
        arrays["gain.b"] = np.zeros(config.in_channels, dtype)
    return DenoiserParams(config, arrays)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# --------------------------------------------------------------------------
# primitive ops: each returns (output, backward_fn(grad_out) -> grad_in)

def _conv3x3(x, w, stride):
    """3x3 convolution, zero padding 1, via im2col and one matmul."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    ho, wo = h // stride, wd // stride
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n, c * 9, ho * wo)
    wm = w.reshape(o, c * 9)
    out = (wm @ cols).reshape(n, o, ho, wo)

    def back(g):
        g2 = g.reshape(n, o, ho * wo)
        dw = np.zeros_like(wm)
        for k in range(n):
            dw += g2[k] @ cols[k].T
        dcols = (wm.T @ g2).reshape(n, c, 3, 3, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        return dxp[:, :, 1:-1, 1:-1], dw.reshape(w.shape)

    return out, back


def _upsample2(x):
    return x.repeat(2, axis=2).repeat(2, axis=3)


def _upsample2_back(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --------------------------------------------------------------------------
# forward / backward

class _Tape:
    """Activations from one forward pass, enough to run backward."""

    def __init__(self):
        self.steps = []


def _forward(params: DenoiserParams, x, t, tape: _Tape | None):
    cfg = params.config
    p = params.arrays
    dtype = params.dtype
    x = np.asarray(x, dtype=dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ValueError(f"height and width must be divisible by 4, got {x.shape[2:]}")
    n = x.shape[0]
    t = np.broadcast_to(np.atleast_1d(np.asarray(t)), (n,))

    emb = timestep_embedding(t, cfg.emb_dim).astype(dtype)
    hz = emb @ p["temb.w"] + p["temb.b"]
    h = np.maximum(hz, 0)
    specs = {s[0]: s for s in _layer_specs(cfg)}

    def block(name, inp):
        _, _, _, stride, timed = specs[name]
        z, conv_back = _conv3x3(inp, p[f"{name}.w"], stride)
        z += p[f"{name}.b"][None, :, None, None]
        if timed:
            z += (h @ p[f"{name}.t"])[:, :, None, None]
        relu = name not in ("res1b", "res2b", "out")
        a = np.maximum(z, 0) if relu else z
        if tape is not None:
            tape.steps.append((name, conv_back, z if relu else None, timed))
        return a

    a0 = block("inc", x)
    a1 = block("down1", a0)
    a2 = block("down2", a1)
    r = a2
    for k in (1, 2):
        m = block(f"res{k}a", r)
        r = r + block(f"res{k}b", m)
    c1 = np.concatenate([_upsample2(r), a1], axis=1)
    u1 = block("up1", c1)
    c2 = np.concatenate([_upsample2(u1), a0], axis=1)
    u2 = block("up2", c2)
    y = block("out", np.concatenate([u2, x], axis=1))
    if cfg.output_gain:
        gain = np.exp(h @ p["gain.w"] + p["gain.b"])[:, :, None, None]
        if tape is not None:
            tape.pre_gain = y
        y = y * gain

    if tape is not None:
        tape.h, tape.hz, tape.emb = h, hz, emb
        tape.channels = (a0.shape[1], a1.shape[1], r.shape[1], u1.shape[1], u2.shape[1])
    return (y[0] if single else y), single


def forward(params: DenoiserParams, x_t, t) -> np.ndarray:
    """Predict the noise in ``x_t`` at step ``t``; output has the input's shape.

    ``x_t`` is (C, H, W) or a batch (N, C, H, W); ``t`` a scalar or one step
    per batch item.
    """
    y, _ = _forward(params, x_t, t, None)
    return y


def backward(params: DenoiserParams, x_t, t, upstream_grad) -> "OrderedDict[str, np.ndarray]":
    """Gradients of ``sum(forward(params, x_t, t) * upstream_grad)`` w.r.t. every parameter."""
    tape = _Tape()
    y, single = _forward(params, x_t, t, tape)
    g = np.asarray(upstream_grad, dtype=params.dtype)
    if g.shape != y.shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {y.shape}")
    if single:
        g = g[None]
    p = params.arrays
    grads = params.zeros_like()
    dh = np.zeros_like(tape.h)
    steps = {s[0]: s[1:] for s in tape.steps}

    def block_back(name, g_out):
        conv_back, z, timed = steps[name]
        gz = g_out * (z > 0) if z is not None else g_out
        gb = gz.sum(axis=(2, 3))
        grads[f"{name}.b"] += gb.sum(axis=0)
        if timed:
            grads[f"{name}.t"] += tape.h.T @ gb
            dh[...] += gb @ p[f"{name}.t"].T
        g_in, gw = conv_back(gz)
        grads[f"{name}.w"] += gw
        return g_in

    ca0, ca1, cr, cu1, cu2 = tape.channels
    if params.config.output_gain:
        gain = np.exp(tape.h @ p["gain.w"] + p["gain.b"])
        g_log = (g * tape.pre_gain).sum(axis=(2, 3)) * gain
        grads["gain.b"] += g_log.sum(axis=0)
        grads["gain.w"] += tape.h.T @ g_log
        dh += g_log @ p["gain.w"].T
        g = g * gain[:, :, None, None]
    g_cat = block_back("out", g)
    g_u2 = g_cat[:, :cu2]
    g_cat = block_back("up2", g_u2)
    g_u1 = _upsample2_back(g_cat[:, :cu1])
    g_a0 = g_cat[:, cu1:].copy()
    g_cat = block_back("up1", g_u1)
    g_r = _upsample2_back(g_cat[:, :cr])
    g_a1 = g_cat[:, cr:].copy()
    for k in (2, 1):
        g_m = block_back(f"res{k}b", g_r)
        g_r = g_r + block_back(f"res{k}a", g_m)
    g_a1 += block_back("down2", g_r)
    g_a0 += block_back("down1", g_a1)
    block_back("inc", g_a0)

    dhz = dh * (tape.hz > 0)
    grads["temb.w"] += tape.emb.T @ dhz
    grads["temb.b"] += dhz.sum(axis=0)
    return grads


# --------------------------------------------------------------------------
# optimisation

def sgd_step(params: DenoiserParams, grads, learning_rate: float) -> DenoiserParams:
    """Return new parameters ``p - learning_rate * g``."""
    if learning_rate < 0:
        raise ValueError("learning rate must be non-negative")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients in {bad}")
    new = OrderedDict((k, (v - learning_rate * grads[k]).astype(v.dtype))
                      for k, v in params.arrays.items())
    return DenoiserParams(params.config, new)


class _Optimizer:
    """Plain SGD by default; heavy-ball momentum or Adam when configured."""

    def __init__(self, kind: str, lr: float, momentum: float = 0.0,
                 betas=(0.9, 0.999), eps=1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr, self.momentum = kind, lr, momentum
        self.betas, self.eps = betas, eps
        self.state: dict = {}
        self.n = 0

    def step(self, params: DenoiserParams, grads) -> DenoiserParams:
        if self.kind == "sgd" and not self.momentum:
            return sgd_step(params, grads, self.lr)
        bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            raise TrainingError(f"non-finite gradients in {bad}")
        self.n += 1
        direction = OrderedDict()
        for k, g in grads.items():
            if self.kind == "sgd":
                v = self.state.get(k, 0.0) * self.momentum + g
                self.state[k] = v
                direction[k] = v
            else:
                b1, b2 = self.betas
                m, s = self.state.get(k, (0.0, 0.0))
                m = b1 * m + (1 - b1) * g
                s = b2 * s + (1 - b2) * g * g
                self.state[k] = (m, s)
                mh = m / (1 - b1 ** self.n)
                sh = s / (1 - b2 ** self.n)
                direction[k] = mh / (np.sqrt(sh) + self.eps)
        return sgd_step(params, direction, self.lr)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 10
    batch_size: int = 1
    max_steps: int | None = None
    seed: int = 0
    optimizer: str = "sgd"
    momentum: float = 0.0
    denoiser: DenoiserConfig = DenoiserConfig()
    dtype: str = "float32"
    divergence_factor: float = 5.0
    clip_norm: float | None = 1.0
    log_every: int = 100


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list[float]

    def smoothed(self, window: int = 50) -> np.ndarray:
        return smooth(self.losses, window)


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def clip_gradients(grads, max_norm: float | None):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``; returns (grads, norm)."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or not math.isfinite(norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return OrderedDict((k, (g * scale).astype(g.dtype)) for k, g in grads.items()), norm


def loss_and_grads(params: DenoiserParams, x0, t, eps, schedule: DiffusionSchedule):
    """Noise-prediction MSE for a batch and its parameter gradients."""
    x_t = q_sample(x0, t, eps, schedule)
    y = forward(params, x_t, t)
    diff = y - eps
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    grads = backward(params, x_t, t, (2.0 / diff.size) * diff)
    return loss, grads


def train(dataset, schedule: DiffusionSchedule, config: TrainConfig = TrainConfig(),
          params: DenoiserParams | None = None, callback=None) -> TrainResult:
    """Minibatch training of the noise predictor.

    Each step draws a batch (shuffled every epoch), a uniform step per item
    and fresh Gaussian noise, then applies one optimizer update on the
    norm-clipped gradients.  All randomness comes from ``config.seed``.

    Training stops with :class:`TrainingError` when the loss or gradient
    becomes non-finite or the loss exceeds ``divergence_factor`` times the
    first step's loss (about 1.0 for a fresh model, whose output is zero).
    """
    data = np.asarray(dataset)
    if data.size == 0 or len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if data.ndim != 4:
        raise TrainingError(f"dataset must be (N, C, H, W), got shape {data.shape}")
    if not np.all(np.isfinite(data)) or np.abs(data).max() > 1.0 + 1e-6:
        raise TrainingError("dataset must be finite and normalized to [-1, 1]")
    dtype = np.dtype(config.dtype)
    data = data.astype(dtype)
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config.denoiser, rng, dtype)
    opt = _Optimizer(config.optimizer, config.learning_rate, config.momentum)
    bs = max(1, min(config.batch_size, len(data)))
    losses: list[float] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), bs):
            if config.max_steps is not None and step >= config.max_steps:
                return TrainResult(params, losses)
            x0 = data[order[start:start + bs]]
            t = rng.integers(1, schedule.T + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape).astype(dtype)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grads(params, x0, t, eps, schedule)
                grads, norm = clip_gradients(grads, config.clip_norm)
            if not (math.isfinite(loss) and math.isfinite(norm)) or \
                    (losses and loss > config.divergence_factor * max(losses[0], 1e-12)):
                raise TrainingError(
                    f"training diverged at step {step} (epoch {epoch}): loss={loss!r}, "
                    f"gradient norm={norm:.4g}, initial loss={losses[0] if losses else float('nan'):.4g}, "
                    f"lr={config.learning_rate}")
            losses.append(loss)
            params = opt.step(params, grads)
            step += 1
            if config.log_every and step % config.log_every == 0:
                logger.info("step %d loss %.5f (smoothed %.5f)", step, loss, smooth(losses)[-1])
            if callback is not None:
                callback(step, loss, params)
    return TrainResult(params, losses)


def sample(params: DenoiserParams, schedule: DiffusionSchedule, count: int, shape,
           rng: np.random.Generator, batch_size: int = 4) -> np.ndarray:
    """Draw ``count`` tensors of ``shape`` by running the full reverse chain."""
    from .diffusion import p_sample_loop

    out = []
    for start in range(0, count, batch_size):
        n = min(batch_size, count - start)
        out.append(p_sample_loop(lambda x, t: forward(params, x, t), (n,) + tuple(shape),
                                 schedule, rng, dtype=params.dtype))
    if not out:
        return np.zeros((0,) + tuple(shape), dtype=params.dtype)
    return np.concatenate(out)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: b"CRDN", uint32 version, uint32 header length (all little-endian),
# UTF-8 JSON header, then each tensor's raw little-endian bytes in header
# order.  The header holds the model config, optional metadata (e.g. the
# schedule) and a manifest of {name, shape, dtype}.

def save_checkpoint(params: DenoiserParams, path, metadata: dict | None = None) -> None:
    cfg = asdict(params.config)
    manifest = []
    blobs = []
    for name, arr in params.arrays.items():
        le = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(le.tobytes())
    header = json.dumps({"config": cfg, "metadata": metadata or {}, "tensors": manifest},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a denoiser checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
        cfg = header["config"]
        config = DenoiserConfig(base_widths=tuple(cfg["base_widths"]), width_mult=cfg["width_mult"],
                                emb_dim=cfg["emb_dim"], in_channels=cfg["in_channels"],
                                output_gain=cfg.get("output_gain", False))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    pos = 12 + hlen
    arrays = OrderedDict()
    for entry in header.get("tensors", []):
        dt = np.dtype(entry["dtype"])
        size = int(np.prod(entry["shape"], dtype=np.int64)) * dt.itemsize
        if pos + size > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']}")
        arr = np.frombuffer(raw, dtype=dt, count=size // dt.itemsize, offset=pos)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
        pos += size
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    expected = init_params(config, np.random.default_rng(0), np.float64)
    for name, ref in expected.arrays.items():
        if name not in arrays or arrays[name].shape != ref.shape:
            raise CheckpointError(f"{path}: tensor {name} missing or mis-shaped")
    return DenoiserParams(config, arrays), header.get("metadata", {})
