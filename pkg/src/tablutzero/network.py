"""Dual-head residual network in plain numpy.

Layout is channels-last, ``(batch, 9, 9, channels)``.  Every conv is
followed by a per-sample, per-channel normalisation over the 81 squares
with a learned gain and bias (no batch statistics, so training and
inference behave identically).  Convs therefore carry no bias of their own.

Heads, one pair per side:

* policy: 1x1 conv to 32 channels + norm; channel c at square q is the logit
  of action ``q * 32 + c``
* value: 1x1 conv to 1 channel + norm + relu, dense 81 -> hidden + relu,
  dense hidden -> 1, tanh
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .encoding import NUM_ACTIONS, NUM_PLANES
from .rules import Side

NORM_EPS = 1e-5
SIDES = ("attacker", "defender")
FORMAT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    blocks: int = 8
    filters: int = 128
    value_hidden: int = 128
    input_planes: int = NUM_PLANES
    policy_actions: int = NUM_ACTIONS

    def __post_init__(self):
        if self.blocks < 1 or self.filters < 1 or self.value_hidden < 1:
            raise ValueError(f"invalid network config {self}")
        if self.policy_actions != 81 * 32:
            raise ValueError("the policy head layout requires 2592 actions")


class NetOutput(NamedTuple):
    logits_attacker: np.ndarray  # (B, 2592)
    value_attacker: np.ndarray  # (B,)
    logits_defender: np.ndarray
    value_defender: np.ndarray


@dataclass
class TrainBatch:
    inputs: np.ndarray  # (B, 9, 9, 43)
    policy_targets: np.ndarray  # (B, 2592)
    value_targets: np.ndarray  # (B,)
    sides: np.ndarray  # (B,) Side values, 0 = attacker
    legal_masks: np.ndarray  # (B, 2592) bool

    def __len__(self):
        return len(self.value_targets)


def param_shapes(cfg: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) order; checkpoints store tensors in this order."""
    f, h = cfg.filters, cfg.value_hidden
    shapes = [("stem.conv", (3, 3, cfg.input_planes, f)), ("stem.gain", (f,)), ("stem.bias", (f,))]
    for i in range(cfg.blocks):
        for j in (1, 2):
            shapes += [(f"block{i}.conv{j}", (3, 3, f, f)), (f"block{i}.gain{j}", (f,)),
                       (f"block{i}.bias{j}", (f,))]
    for side in SIDES:
        shapes += [(f"policy_{side}.conv", (f, 32)), (f"policy_{side}.gain", (32,)),
                   (f"policy_{side}.bias", (32,))]
        shapes += [(f"value_{side}.conv", (f, 1)), (f"value_{side}.gain", (1,)), (f"value_{side}.bias", (1,)),
                   (f"value_{side}.fc1.weight", (81, h)), (f"value_{side}.fc1.bias", (h,)),
                   (f"value_{side}.fc2.weight", (h, 1)), (f"value_{side}.fc2.bias", (1,))]
    return shapes


def is_decayed(name: str) -> bool:
    return ".conv" in name or name.endswith(".weight")


def init_params(cfg: NetConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, unit gains, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg):
        if "gain" in name:
            arr = np.ones(shape)
        elif is_decayed(name):
            fan_in = int(np.prod(shape[:-1]))
            arr = rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


# ---------------------------------------------------------------------------
# layers

def _conv3(x, w):
    b, _, _, c = x.shape
    xp = np.zeros((b, 11, 11, c), dtype=x.dtype)
    xp[:, 1:10, 1:10] = x
    cols = np.empty((b, 9, 9, 3, 3, c), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, :, i, j, :] = xp[:, i:i + 9, j:j + 9, :]
    cols = cols.reshape(b * 81, 9 * c)
    y = cols @ w.reshape(9 * c, -1)
    return y.reshape(b, 9, 9, -1), cols


def _conv3_backward(dy, cols, w):
    b = dy.shape[0]
    c = w.shape[2]
    dy2 = dy.reshape(b * 81, -1)
    dw = (cols.T @ dy2).reshape(w.shape)
    dcols = (dy2 @ w.reshape(9 * c, -1).T).reshape(b, 9, 9, 3, 3, c)
    dxp = np.zeros((b, 11, 11, c), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + 9, j:j + 9, :] += dcols[:, :, :, i, j, :]
    return dxp[:, 1:10, 1:10], dw


def _norm(x, gain, bias):
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = x.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    return xhat * gain + bias, (xhat, inv)


def _norm_backward(dy, cache, gain):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=(0, 1, 2))
    dbias = dy.sum(axis=(0, 1, 2))
    dxhat = dy * gain
    n = 81
    dx = inv / n * (n * dxhat - dxhat.sum(axis=(1, 2), keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True))
    return dx, dgain, dbias


def _blocks(params) -> int:
    return sum(1 for k in params if k.endswith(".conv1"))


def _forward(params, x, keep: bool):
    dtype = params["stem.conv"].dtype
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 4 or x.shape[1:3] != (9, 9) or x.shape[3] != params["stem.conv"].shape[2]:
        raise ValueError(f"input shape {x.shape} does not match the network")
    b = x.shape[0]
    cache = {}
    y, cols = _conv3(x, params["stem.conv"])
    y, nc = _norm(y, params["stem.gain"], params["stem.bias"])
    h = np.maximum(y, 0)
    if keep:
        cache["stem"] = (cols, nc, h)
    for i in range(_blocks(params)):
        p = f"block{i}."
        t, cols1 = _conv3(h, params[p + "conv1"])
        t, nc1 = _norm(t, params[p + "gain1"], params[p + "bias1"])
        t = np.maximum(t, 0)
        u, cols2 = _conv3(t, params[p + "conv2"])
        u, nc2 = _norm(u, params[p + "gain2"], params[p + "bias2"])
        h = np.maximum(u + h, 0)
        if keep:
            cache[p] = (cols1, nc1, t, cols2, nc2, h)
    f = h.shape[-1]
    h2 = h.reshape(b * 81, f)
    outs = []
    for side in SIDES:
        p = f"policy_{side}."
        z = (h2 @ params[p + "conv"]).reshape(b, 9, 9, 32)
        z, pnc = _norm(z, params[p + "gain"], params[p + "bias"])
        logits = z.reshape(b, NUM_ACTIONS)
        q = f"value_{side}."
        v = (h2 @ params[q + "conv"]).reshape(b, 9, 9, 1)
        v, vnc = _norm(v, params[q + "gain"], params[q + "bias"])
        v = np.maximum(v, 0).reshape(b, 81)
        z1 = np.maximum(v @ params[q + "fc1.weight"] + params[q + "fc1.bias"], 0)
        value = np.tanh(z1 @ params[q + "fc2.weight"] + params[q + "fc2.bias"])[:, 0]
        outs += [logits, value]
        if keep:
            cache[side] = (pnc, vnc, v, z1, value)
    if keep:
        cache["trunk_out"] = h
    return NetOutput(*outs), cache


def forward(params: dict[str, np.ndarray], x: np.ndarray) -> NetOutput:
    """Inference pass over a batch of (9, 9, 43) plane stacks."""
    return _forward(params, x, keep=False)[0]


def select_head(o: NetOutput, side):
    """(logits, value) of the head for ``side``; ``side`` may also be a per-sample array."""
    if isinstance(side, (Side, int)) and np.ndim(side) == 0:
        if Side(side) is Side.ATTACKER:
            return o.logits_attacker, o.value_attacker
        return o.logits_defender, o.value_defender
    att = np.asarray(side) == Side.ATTACKER
    return (np.where(att[:, None], o.logits_attacker, o.logits_defender),
            np.where(att, o.value_attacker, o.value_defender))


def _backward(params, cache, dheads):
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    h = cache["trunk_out"]
    b, f = h.shape[0], h.shape[-1]
    h2 = h.reshape(b * 81, f)
    dh2 = np.zeros_like(h2)
    for side in SIDES:
        dlogits, dvalue = dheads[side]
        pnc, vnc, v, z1, value = cache[side]
        p = f"policy_{side}."
        dz, grads[p + "gain"], grads[p + "bias"] = _norm_backward(
            dlogits.reshape(b, 9, 9, 32), pnc, params[p + "gain"])
        dz = dz.reshape(b * 81, 32)
        grads[p + "conv"] = h2.T @ dz
        dh2 += dz @ params[p + "conv"].T

        q = f"value_{side}."
        ds = (dvalue * (1.0 - value ** 2))[:, None]
        grads[q + "fc2.weight"] = z1.T @ ds
        grads[q + "fc2.bias"] = ds.sum(axis=0)
        dz1 = (ds @ params[q + "fc2.weight"].T) * (z1 > 0)
        grads[q + "fc1.weight"] = v.T @ dz1
        grads[q + "fc1.bias"] = dz1.sum(axis=0)
        dv = ((dz1 @ params[q + "fc1.weight"].T) * (v > 0)).reshape(b, 9, 9, 1)
        dv, grads[q + "gain"], grads[q + "bias"] = _norm_backward(dv, vnc, params[q + "gain"])
        dv = dv.reshape(b * 81, 1)
        grads[q + "conv"] = h2.T @ dv
        dh2 += dv @ params[q + "conv"].T

    dh = dh2.reshape(h.shape)
    for i in reversed(range(_blocks(params))):
        p = f"block{i}."
        cols1, nc1, t, cols2, nc2, hout = cache[p]
        dsum = dh * (hout > 0)
        du, grads[p + "gain2"], grads[p + "bias2"] = _norm_backward(dsum, nc2, params[p + "gain2"])
        dt, grads[p + "conv2"] = _conv3_backward(du, cols2, params[p + "conv2"])
        dt = dt * (t > 0)
        dt, grads[p + "gain1"], grads[p + "bias1"] = _norm_backward(dt, nc1, params[p + "gain1"])
        dx, grads[p + "conv1"] = _conv3_backward(dt, cols1, params[p + "conv1"])
        dh = dsum + dx
    cols, nc, hstem = cache["stem"]
    dy = dh * (hstem > 0)
    dy, grads["stem.gain"], grads["stem.bias"] = _norm_backward(dy, nc, params["stem.gain"])
    _, grads["stem.conv"] = _conv3_backward(dy, cols, params["stem.conv"])
    return grads


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """log-softmax over legal entries; illegal entries are -inf."""
    masked = np.where(mask, logits, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    shifted = masked - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_batch(batch: TrainBatch):
    illegal = np.where(batch.legal_masks, 0.0, batch.policy_targets)
    if np.any(illegal > 0):
        raise ValueError("policy target puts mass on an illegal action")


def loss_and_gradients(params, batch: TrainBatch, with_grads: bool = True):
    """Returns (total, terms, grads); ``grads`` is None when ``with_grads`` is false."""
    _check_batch(batch)
    out, cache = _forward(params, batch.inputs, keep=with_grads)
    dtype = params["stem.conv"].dtype
    sides = np.asarray(batch.sides)
    logits, values = select_head(out, sides)
    mask = np.asarray(batch.legal_masks, dtype=bool)
    logp = masked_log_softmax(logits, mask)
    safe_logp = np.where(mask, logp, 0.0)
    probs = np.exp(logp)
    targets = np.asarray(batch.policy_targets, dtype=dtype)
    z = np.asarray(batch.value_targets, dtype=dtype)
    ce = -(targets * safe_logp).sum(axis=1)
    mse = (values - z) ** 2
    entropy = -(probs * safe_logp).sum(axis=1)
    total = float(ce.mean() + mse.mean())
    terms = {"policy_ce": float(ce.mean()), "value_mse": float(mse.mean()), "entropy_metric": float(entropy.mean())}
    if not with_grads:
        return total, terms, None
    n = len(z)
    dlogits = ((probs - targets) / n).astype(dtype)
    dvalue = (2.0 * (values - z) / n).astype(dtype)
    att = sides == Side.ATTACKER
    dheads = {
        "attacker": (np.where(att[:, None], dlogits, 0).astype(dtype), np.where(att, dvalue, 0).astype(dtype)),
        "defender": (np.where(att[:, None], 0, dlogits).astype(dtype), np.where(att, 0, dvalue).astype(dtype)),
    }
    return total, terms, _backward(params, cache, dheads)


def loss(params, batch: TrainBatch):
    total, terms, _ = loss_and_gradients(params, batch, with_grads=False)
    return total, terms


def gradients(params, batch: TrainBatch):
    return loss_and_gradients(params, batch)[2]


# ---------------------------------------------------------------------------
# optimiser

@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 0.002
    min_lr: float = 0.00001
    warmup_steps: int = 500
    total_steps: int = 102_400
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptState:
    step: int
    first_moment: dict
    second_moment: dict
    config: OptimConfig = field(default_factory=OptimConfig)


def init_opt_state(params, config: OptimConfig | None = None) -> OptState:
    return OptState(0, {k: np.zeros_like(v) for k, v in params.items()},
                    {k: np.zeros_like(v) for k, v in params.items()}, config or OptimConfig())


def lr_at(step: int, config: OptimConfig | None = None) -> float:
    """Linear warmup to the peak, cosine down to the minimum, then flat."""
    c = config or OptimConfig()
    if step < c.warmup_steps:
        return c.peak_lr * step / c.warmup_steps
    if step >= c.total_steps:
        return c.min_lr
    progress = (step - c.warmup_steps) / max(c.total_steps - c.warmup_steps, 1)
    return c.min_lr + 0.5 * (c.peak_lr - c.min_lr) * (1.0 + math.cos(math.pi * progress))


def adamw_update(params, grads, opt: OptState):
    c = opt.config
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in {name} at step {opt.step}")
    lr = lr_at(opt.step, c)
    t = opt.step + 1
    bc1 = 1.0 - c.beta1 ** t
    bc2 = 1.0 - c.beta2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for name, w in params.items():
        g = grads[name]
        m = c.beta1 * opt.first_moment[name] + (1.0 - c.beta1) * g
        v = c.beta2 * opt.second_moment[name] + (1.0 - c.beta2) * g * g
        if is_decayed(name):
            w = w * (1.0 - lr * c.weight_decay)
        w = w - lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        new_params[name] = w.astype(params[name].dtype)
        m_out[name] = m.astype(params[name].dtype)
        v_out[name] = v.astype(params[name].dtype)
    return new_params, OptState(opt.step + 1, m_out, v_out, c)


# ---------------------------------------------------------------------------
# checkpoints
#
# file = u64 little-endian header length | UTF-8 JSON header | raw '<f4' tensors
# Tensors follow param_shapes() order, then (if present) the AdamW first
# moments and second moments in the same order.

@dataclass
class Checkpoint:
    params: dict
    net_config: NetConfig
    iteration: int = 0
    opt_state: Optional[OptState] = None
    seeds: dict = field(default_factory=dict)

    @property
    def agent_id(self) -> str:
        return f"iter{self.iteration}"


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    names = [n for n, _ in param_shapes(ckpt.net_config)]
    header = {
        "format_version": FORMAT_VERSION,
        "net_config": asdict(ckpt.net_config),
        "iteration": ckpt.iteration,
        "optimizer_step": ckpt.opt_state.step if ckpt.opt_state else 0,
        "optimizer": asdict(ckpt.opt_state.config) if ckpt.opt_state else None,
        "has_moments": ckpt.opt_state is not None,
        "rng_seeds": ckpt.seeds,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [struct.pack("<Q", len(blob)), blob]
    groups = [ckpt.params]
    if ckpt.opt_state is not None:
        groups += [ckpt.opt_state.first_moment, ckpt.opt_state.second_moment]
    for group in groups:
        for name in names:
            chunks.append(np.ascontiguousarray(group[name], dtype="<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
        (n,) = struct.unpack_from("<Q", data, 0)
        header = json.loads(data[8:8 + n].decode("utf-8"))
    except (OSError, struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    cfg = NetConfig(**header["net_config"])
    shapes = param_shapes(cfg)
    offset = 8 + n
    groups = 3 if header["has_moments"] else 1
    expected = offset + 4 * groups * sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != expected:
        raise CheckpointError(f"{path}: size {len(data)} does not match header (expected {expected})")
    out = []
    for _ in range(groups):
        group = {}
        for name, shape in shapes:
            size = int(np.prod(shape))
            group[name] = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
            offset += 4 * size
        out.append(group)
    opt = None
    if groups == 3:
        opt = OptState(header["optimizer_step"], out[1], out[2], OptimConfig(**header["optimizer"]))
    return Checkpoint(out[0], cfg, header["iteration"], opt, header.get("rng_seeds", {}))
