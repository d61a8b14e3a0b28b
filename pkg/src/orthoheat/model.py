"""Toy heatmap backbone with hand-written gradients, the four-term loss, and the optimizer.

The backbone turns each of the three views into a grid of patch tokens,
mixes them with two residual GELU layers (3x3 convolution over the token grid
plus a view-wide mean-pooled context term), and reads out

* a per-cell heatmap logit that is convex-upsampled back to full resolution
  and soft-maxed over all pixels, and
* an MLP over six tokens (per-view max pool, and the token under each view's
  heatmap peak) giving 3 x 72 rotation logits, a gripper and a collision logit.

The instruction enters by adding its mean word embedding to every token.
Views share all weights, so permuting the views permutes the outputs.
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .actionspace import N_ROT_BINS
from .errors import ConfigurationError, NonFiniteGradientError
from .heatmap import neighborhoods, neighborhoods_adjoint

logger = logging.getLogger(__name__)

N_AUX_OUT = 3 * N_ROT_BINS + 2

VOCAB = (
    "<pad> <unk> the a an to of on in into onto from with and "
    "reach touch press push put place pick up lift move insert drop grasp "
    "block cube button plate peg hole socket slot bowl cup box object target "
    "red green blue yellow orange purple white black cyan gray pink brown "
    "left right top front back small large"
).split()
assert len(VOCAB) <= 64


def tokenize(text: str, max_len: int = 12, vocab_size: int = 64) -> np.ndarray:
    """Lower-cased words -> ids (0 = pad, 1 = unknown), padded to ``max_len``."""
    index = {w: i for i, w in enumerate(VOCAB[:vocab_size])}
    words = re.findall(r"[a-z]+", text.lower())[:max_len]
    ids = [index.get(w, 1) for w in words]
    return np.array(ids + [0] * (max_len - len(ids)), dtype=np.int64)


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 224
    patch: int = 16
    dim: int = 32
    vocab: int = 64
    aux_hidden: int = 64
    max_tokens: int = 12
    dilation: int = 4  # tap spacing of the second mixing layer; widens the receptive field to 11x11 tokens
    positional: bool = False  # learned per-token position embedding; off keeps the map translation-equivariant
    float64: bool = False

    def __post_init__(self):
        if self.resolution % self.patch:
            raise ConfigurationError(f"resolution {self.resolution} not divisible by patch {self.patch}")
        if min(self.resolution, self.patch, self.dim, self.vocab, self.aux_hidden, self.max_tokens,
               self.dilation) < 1:
            raise ConfigurationError("model dimensions must be positive")

    @property
    def grid(self) -> int:
        return self.resolution // self.patch

    @property
    def dtype(self):
        return np.float64 if self.float64 else np.float32

    def echo(self) -> str:
        return " ".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))

    @classmethod
    def from_echo(cls, text: str) -> "ModelConfig":
        kv = dict(item.split("=", 1) for item in text.split())
        out = {}
        for f in fields(cls):
            if f.name in kv:
                out[f.name] = kv[f.name] == "True" if f.type in ("bool", bool) else int(kv[f.name])
        return cls(**out)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    p, d, t = cfg.patch, cfg.dim, cfg.grid ** 2
    shapes = {
        "embed_w": (3 * p * p, d),
        "embed_b": (d,),
        "word": (cfg.vocab, d),
    }
    if cfg.positional:
        shapes["pos"] = (t, d)
    for layer in (0, 1):
        shapes[f"mix{layer}_w"] = (9 * d, d)
        shapes[f"mix{layer}_b"] = (d,)
        shapes[f"mix{layer}_g"] = (d, d)
    shapes.update({
        "heat_w": (d,),  # no bias: a constant logit shift cancels in the pixel softmax
        "up_w": (d, p * p * 9),  # columns ordered (pixel row, pixel col, neighbor)
        "up_b": (p * p * 9,),
        "aux_w1": (6 * d, cfg.aux_hidden),
        "aux_b1": (cfg.aux_hidden,),
        "aux_w2": (cfg.aux_hidden, N_AUX_OUT),
        "aux_b2": (N_AUX_OUT,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, zero_heads: bool = False) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
            a = np.zeros(shape)
        elif name == "pos":
            a = rng.normal(0, 0.02, shape)
        elif name == "word":
            a = rng.normal(0, 0.1, shape)
        elif name.endswith("_g"):
            a = rng.normal(0, 0.1 / np.sqrt(shape[0]), shape)
        else:
            a = rng.normal(0, 1.0 / np.sqrt(shape[0]), shape)
        if name.startswith("mix") and name.endswith("_w"):
            a *= 0.5
        out[name] = a.astype(cfg.dtype)
    # upsampling starts as a uniform average over each 3x3 neighborhood
    out["up_w"][...] = 0
    if zero_heads:
        for name in ("heat_w", "up_w", "up_b", "aux_w2", "aux_b2"):
            out[name][...] = 0
    return out


# --------------------------------------------------------------------------
# forward


@dataclass
class Outputs:
    heatmaps: np.ndarray  # (N, 3, R, R)
    rotation_logits: np.ndarray  # (N, 3, 72)
    gripper_logit: np.ndarray  # (N,)
    collision_logit: np.ndarray  # (N,)
    features: np.ndarray  # (N, 3, G, G, D)
    cache: dict = field(default_factory=dict, repr=False)


def _patchify(views: np.ndarray, p: int) -> np.ndarray:
    """(M, R, R, 3) -> (M, T, 3 p p) with per-patch order (row, col, channel)."""
    m, r = views.shape[:2]
    g = r // p
    x = views.reshape(m, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(m, g * g, p * p * 3)


def _im2col(h: np.ndarray, dil: int = 1) -> np.ndarray:
    """(M, G, G, D) -> (M, G, G, 9 D) zero-padded 3x3 neighborhoods with tap spacing ``dil``."""
    g = h.shape[1]
    hp = np.pad(h, ((0, 0), (dil, dil), (dil, dil), (0, 0)))
    return np.concatenate([hp[:, dy * dil:dy * dil + g, dx * dil:dx * dil + g]
                           for dy in range(3) for dx in range(3)], axis=-1)


def _col2im(dcol: np.ndarray, dil: int = 1) -> np.ndarray:
    m, g, _, d9 = dcol.shape
    d = d9 // 9
    out = np.zeros((m, g + 2 * dil, g + 2 * dil, d), dtype=dcol.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            out[:, dy * dil:dy * dil + g, dx * dil:dx * dil + g] += dcol[..., k * d:(k + 1) * d]
            k += 1
    return out[:, dil:dil + g, dil:dil + g]


def _dilation(cfg: ModelConfig, layer: int) -> int:
    return 1 if layer == 0 else cfg.dilation


def _instruction_embedding(params, tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = (tokens > 0).astype(params["word"].dtype)
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
    emb = (params["word"][tokens] * mask[..., None]).sum(axis=1) / count
    return emb, mask / count


_GELU_C = float(np.sqrt(2.0 / np.pi))  # python float keeps float32 inputs in float32


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation; smooth so central differences are valid everywhere."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: dict, views, tokens, cfg: ModelConfig, peak_cells=None, pool_index=None) -> Outputs:
    """Run the backbone and heads.

    Args:
        views: (N, 3, R, R, 3) RGB in [0, 1] (top, front, right).
        tokens: (N, L) instruction ids.
        peak_cells: optional (N, 3) flat token indices to read the local
            tokens from; defaults to the cell under each predicted peak.
        pool_index: optional (3N, D) token index per channel for the global
            max pool; defaults to the argmax. Freezing both selections makes
            the output smooth in the parameters, as gradient checks need.
    """
    dt = cfg.dtype
    views = np.asarray(views, dtype=dt)
    tokens = np.asarray(tokens)
    r, p, g, d = cfg.resolution, cfg.patch, cfg.grid, cfg.dim
    if views.ndim != 5 or views.shape[1:] != (3, r, r, 3):
        raise ConfigurationError(f"views must be (N, 3, {r}, {r}, 3), got {views.shape}")
    n = views.shape[0]
    if tokens.shape[0] != n or tokens.ndim != 2:
        raise ConfigurationError(f"tokens must be (N, L) with N={n}, got {tokens.shape}")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= cfg.vocab:
        raise ConfigurationError("token id outside the vocabulary")
    m = n * 3
    t = g * g

    patches = _patchify(views.reshape(m, r, r, 3) - dt(0.5), p)  # (M, T, 3pp)
    instr, tok_w = _instruction_embedding(params, tokens)  # (N, D)
    h = patches @ params["embed_w"] + params["embed_b"]
    if cfg.positional:
        h = h + params["pos"]
    h = h + np.repeat(instr, 3, axis=0)[:, None, :]
    h = h.reshape(m, g, g, d)

    layers = []
    for layer in (0, 1):
        col = _im2col(h, _dilation(cfg, layer))
        pooled = h.mean(axis=(1, 2))  # (M, D) view-wide context
        z = col @ params[f"mix{layer}_w"] + params[f"mix{layer}_b"]
        z = z + (pooled @ params[f"mix{layer}_g"])[:, None, None, :]
        layers.append((col, pooled, z))
        h = h + gelu(z)

    feat = h  # (M, G, G, D)
    coarse = feat @ params["heat_w"]  # (M, G, G)
    # upsampling weights laid out (token, pixel-in-patch, neighbor) so the 9-way softmax is contiguous
    up = (feat.reshape(m * t, d) @ params["up_w"] + params["up_b"]).reshape(m * t, p * p, 9)
    # numpy reduces a short trailing axis slowly; elementwise max over slices and a matmul sum are faster
    up -= np.maximum.reduce([up[..., k] for k in range(9)])[..., None]
    w = np.exp(up, out=up)
    w /= w @ np.ones((9, 1), dtype=w.dtype)
    nb = neighborhoods(coarse)  # (M, G, G, 9)
    fine_tok = (w @ nb.reshape(m * t, 9, 1))[..., 0]  # (M T, p p)
    fine = fine_tok.reshape(m, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(m, r * r)
    heat = _softmax_last(fine)

    if peak_cells is None:
        flat_peak = heat.argmax(axis=1)
        py, px = np.divmod(flat_peak, r)
        peak_cells = (py // p) * g + (px // p)
    peak_cells = np.asarray(peak_cells).reshape(m)
    ftok = feat.reshape(m, t, d)
    gidx = ftok.argmax(axis=1) if pool_index is None else np.asarray(pool_index)  # (M, D)
    gtok = np.take_along_axis(ftok, gidx[:, None, :], axis=1)[:, 0]
    ltok = ftok[np.arange(m), peak_cells]
    x = np.concatenate([gtok.reshape(n, 3 * d), ltok.reshape(n, 3 * d)], axis=1)
    a1 = x @ params["aux_w1"] + params["aux_b1"]
    hid = gelu(a1)
    out = hid @ params["aux_w2"] + params["aux_b2"]

    cache = dict(patches=patches, tok_w=tok_w, tokens=tokens, layers=layers, feat=feat, nb=nb, w=w,
                 fine=fine_tok, heat=heat, peak_cells=peak_cells, gidx=gidx, x=x, a1=a1, hid=hid)
    return Outputs(heat.reshape(n, 3, r, r),
                   out[:, :3 * N_ROT_BINS].reshape(n, 3, N_ROT_BINS),
                   out[:, 3 * N_ROT_BINS],
                   out[:, 3 * N_ROT_BINS + 1],
                   feat.reshape(n, 3, g, g, d),
                   cache)


# --------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossBreakdown:
    trans: float
    rot: float
    gripper: float
    collision: float

    @property
    def total(self) -> float:
        return self.trans + self.rot + self.gripper + self.collision


@dataclass
class Targets:
    """Per-sample supervision; ``action_mask`` 0 marks grounding samples (heatmap term only)."""

    heatmaps: np.ndarray  # (N, 3, R, R)
    rotation_bins: np.ndarray  # (N, 3) int
    gripper: np.ndarray  # (N,)
    collision: np.ndarray  # (N,)
    action_mask: np.ndarray  # (N,)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _bce_with_logits(z, y):
    return np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def per_sample_loss(out: Outputs, tgt: Targets) -> np.ndarray:
    """(N, 4) columns trans, rot, gripper, collision."""
    n = out.heatmaps.shape[0]
    gt = tgt.heatmaps.reshape(n, 3, -1)
    logp = np.log(np.maximum(out.heatmaps.reshape(n, 3, -1).astype(np.float64), 1e-300))
    trans = -(gt * logp).sum(axis=2).mean(axis=1)
    lr = _log_softmax(out.rotation_logits.astype(np.float64))
    rot = -np.take_along_axis(lr, tgt.rotation_bins[..., None], axis=2)[..., 0].sum(axis=1)
    grip = _bce_with_logits(out.gripper_logit.astype(np.float64), tgt.gripper)
    coll = _bce_with_logits(out.collision_logit.astype(np.float64), tgt.collision)
    mask = tgt.action_mask
    return np.stack([trans, rot * mask, grip * mask, coll * mask], axis=1)


def loss(out: Outputs, tgt: Targets) -> LossBreakdown:
    """Batch mean of the four terms."""
    parts = per_sample_loss(out, tgt).mean(axis=0)
    return LossBreakdown(*(float(x) for x in parts))


# --------------------------------------------------------------------------
# backward


def backward(params: dict, out: Outputs, tgt: Targets, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean total loss with respect to every parameter block."""
    c = out.cache
    dt = cfg.dtype
    r, p, g, d = cfg.resolution, cfg.patch, cfg.grid, cfg.dim
    n = out.heatmaps.shape[0]
    m, t = 3 * n, g * g
    grads = {}

    # aux head
    mask = tgt.action_mask.astype(dt)
    prob_rot = _softmax_last(out.rotation_logits)
    onehot = np.zeros_like(prob_rot)
    np.put_along_axis(onehot, tgt.rotation_bins[..., None], 1.0, axis=2)
    d_rot = (prob_rot - onehot) * (mask / n)[:, None, None]
    d_grip = (_sigmoid(out.gripper_logit) - tgt.gripper) * mask / n
    d_coll = (_sigmoid(out.collision_logit) - tgt.collision) * mask / n
    d_out = np.concatenate([d_rot.reshape(n, -1), d_grip[:, None], d_coll[:, None]], axis=1).astype(dt)
    grads["aux_w2"] = c["hid"].T @ d_out
    grads["aux_b2"] = d_out.sum(axis=0)
    d_a1 = (d_out @ params["aux_w2"].T) * gelu_grad(c["a1"])
    grads["aux_w1"] = c["x"].T @ d_a1
    grads["aux_b1"] = d_a1.sum(axis=0)
    d_x = d_a1 @ params["aux_w1"].T
    d_g = d_x[:, :3 * d].reshape(m, d)
    d_l = d_x[:, 3 * d:].reshape(m, d)
    d_ftok = np.zeros((m, t, d), dtype=dt)
    np.put_along_axis(d_ftok, c["gidx"][:, None, :], d_g[:, None, :], axis=1)
    d_ftok[np.arange(m), c["peak_cells"]] += d_l

    # heatmap head: softmax over pixels then mean over views and batch
    gt = tgt.heatmaps.reshape(m, r * r).astype(dt)
    d_fine = (c["heat"] - gt) / dt(3 * n)
    d_fine = d_fine.reshape(m, g, p, g, p).transpose(0, 1, 3, 2, 4).reshape(m * t, p * p)
    w, nb = c["w"], c["nb"].reshape(m * t, 9)
    d_nb = (d_fine[:, None, :] @ w)[:, 0]  # (M T, 9)
    # softmax Jacobian: d logit_k = w_k * d_fine * (nb_k - fine)
    d_up = (nb[:, None, :] - c["fine"][..., None]) * (w * d_fine[..., None])
    d_up = d_up.reshape(m * t, p * p * 9)
    d_coarse = neighborhoods_adjoint(d_nb.reshape(m, g, g, 9))  # (M, G, G)
    feat = c["feat"].reshape(m * t, d)
    grads["up_w"] = feat.T @ d_up
    grads["up_b"] = d_up.sum(axis=0)
    grads["heat_w"] = feat.T @ d_coarse.reshape(-1)
    d_h = (d_up @ params["up_w"].T + d_coarse.reshape(-1, 1) * params["heat_w"]).reshape(m, g, g, d)
    d_h = d_h + d_ftok.reshape(m, g, g, d)

    # mixing layers, last first
    for layer in (1, 0):
        col, pooled, z = c["layers"][layer]
        d_z = d_h * gelu_grad(z)
        grads[f"mix{layer}_w"] = col.reshape(-1, 9 * d).T @ d_z.reshape(-1, d)
        grads[f"mix{layer}_b"] = d_z.sum(axis=(0, 1, 2))
        d_zsum = d_z.sum(axis=(1, 2))  # (M, D)
        grads[f"mix{layer}_g"] = pooled.T @ d_zsum
        d_pooled = d_zsum @ params[f"mix{layer}_g"].T
        d_col = d_z @ params[f"mix{layer}_w"].T
        d_h = d_h + _col2im(d_col, _dilation(cfg, layer)) + (d_pooled / t)[:, None, None, :]

    d_h0 = d_h.reshape(m, t, d)
    grads["embed_w"] = c["patches"].reshape(m * t, -1).T @ d_h0.reshape(m * t, d)
    grads["embed_b"] = d_h0.sum(axis=(0, 1))
    if cfg.positional:
        grads["pos"] = d_h0.sum(axis=0)
    d_instr = d_h0.sum(axis=1).reshape(n, 3, d).sum(axis=1)  # (N, D)
    d_word = np.zeros_like(params["word"])
    np.add.at(d_word, c["tokens"], c["tok_w"][..., None] * d_instr[:, None, :])
    grads["word"] = d_word

    for name, gr in grads.items():
        if not np.all(np.isfinite(gr)):
            raise NonFiniteGradientError(name, _first_bad_sample(out, tgt))
    return {k: grads[k].astype(params[k].dtype, copy=False) for k in params}


def _first_bad_sample(out: Outputs, tgt: Targets) -> int:
    n = out.heatmaps.shape[0]
    per_sample = [out.heatmaps, out.rotation_logits, out.gripper_logit, out.collision_logit,
                  tgt.heatmaps, tgt.gripper, tgt.collision]
    for i in range(n):
        if not all(np.all(np.isfinite(a[i])) for a in per_sample):
            return i
    return 0 if n == 1 else -1


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def sgd_step(params: dict, grads: dict, lr: float, clip: float | None = None) -> dict:
    """Plain gradient descent with optional global-norm clipping; returns new arrays."""
    scale = 1.0
    if clip is not None:
        norm = global_norm(grads)
        if norm > clip:
            scale = clip / norm
    return {k: (v - (lr * scale) * grads[k]).astype(v.dtype) for k, v in params.items()}


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, clip: float | None = None,
              betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0) -> dict:
    """AdamW update (decoupled weight decay) after global-norm clipping; mutates ``state``."""
    scale = 1.0
    if clip is not None:
        norm = global_norm(grads)
        if norm > clip:
            scale = clip / norm
    state.step += 1
    b1, b2 = betas
    out = {}
    for k, v in params.items():
        g = grads[k] * scale
        mk = state.m.get(k, np.zeros_like(v))
        vk = state.v.get(k, np.zeros_like(v))
        mk = b1 * mk + (1 - b1) * g
        vk = b2 * vk + (1 - b2) * g * g
        state.m[k], state.v[k] = mk, vk
        mhat = mk / (1 - b1 ** state.step)
        vhat = vk / (1 - b2 ** state.step)
        upd = mhat / (np.sqrt(vhat) + eps) + weight_decay * v
        out[k] = (v - lr * upd).astype(v.dtype)
    return out


# --------------------------------------------------------------------------
# checkpoints

_CK_MAGIC = b"BVCK"
_CK_VERSION = 1


def checkpoint_bytes(params: dict, cfg: ModelConfig, extra: str = "") -> bytes:
    """``BVCK`` u32 version, u32 len + config echo, u32 block count, then per block:
    u16 name length, name, u8 ndim, ndim x u32 dims, float32 data."""
    echo = (cfg.echo() + (" " + extra if extra else "")).encode("utf-8")
    parts = [_CK_MAGIC, struct.pack("<I", _CK_VERSION), struct.pack("<I", len(echo)), echo,
             struct.pack("<I", len(params))]
    for name in sorted(params):
        a = np.asarray(params[name])
        nb = name.encode("utf-8")
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", a.ndim),
                  struct.pack(f"<{a.ndim}I", *a.shape), np.ascontiguousarray(a, dtype="<f4").tobytes()]
    return b"".join(parts)


def save_checkpoint(path, params: dict, cfg: ModelConfig, extra: str = "") -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(params, cfg, extra))


def load_checkpoint(path) -> tuple[dict, ModelConfig, str]:
    buf = open(path, "rb").read()
    if buf[:4] != _CK_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _CK_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    (elen,) = struct.unpack_from("<I", buf, 8)
    echo = buf[12:12 + elen].decode("utf-8")
    pos = 12 + elen
    (nblocks,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    params = {}
    for _ in range(nblocks):
        (nl,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nl].decode("utf-8")
        pos += nl
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(dims))
        params[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    model_keys = {f.name for f in fields(ModelConfig)}
    cfg_items = " ".join(x for x in echo.split() if x.split("=")[0] in model_keys)
    extra = " ".join(x for x in echo.split() if x.split("=")[0] not in model_keys)
    return params, ModelConfig.from_echo(cfg_items), extra
