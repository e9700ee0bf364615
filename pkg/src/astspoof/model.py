"""Audio Spectrogram Transformer in plain numpy.

Overlapping 16x16 patches of the (time x mel) spectrogram are projected to
``embed_dim``, a CLS token is prepended, learned positions are added and the
sequence runs through pre-norm encoder blocks. The head reads the CLS state
and emits two logits: index 0 is "synthetic", index 1 is "bonafide".

Forward and backward are written out by hand and work at whatever float
dtype the parameters carry (float32 for training, float64 for gradient
checks).
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels

LN_EPS = 1e-6
SYNTHETIC, BONAFIDE = 0, 1
LABEL_INDEX = {"spoof": SYNTHETIC, "bonafide": BONAFIDE}
NO_DECAY = ("pos", "cls")

CKPT_MAGIC = b"ASTCKPT1"
CKPT_VERSION = 1


class ModelError(ValueError):
    pass


class CapacityError(ModelError):
    pass


class TooShortError(ModelError):
    pass


class CheckpointError(ModelError):
    pass


def grid_positions(length: int, patch: int, stride: int) -> int:
    """Number of patch rows along one axis: ceil((length - patch) / stride)."""
    if length < patch:
        raise TooShortError(f"axis length {length} shorter than patch {patch}")
    return -(-(length - patch) // stride)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    patch_h: int = 16
    patch_w: int = 16
    stride: int = 10
    mlp_ratio: float = 4.0
    n_classes: int = 2
    n_mels: int = 128
    max_frames: int = 1000

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ModelError("embed_dim must be divisible by n_heads")
        if self.patch_h != self.patch_w:
            raise ModelError("square patches only")
        if self.stride != self.patch_h - 6:
            raise ModelError("stride must leave a 6-pixel overlap")
        if min(self.embed_dim, self.n_layers, self.n_heads, self.n_classes) < 1:
            raise ModelError("sizes must be positive")

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**{"embed_dim": 768, "n_layers": 12, "n_heads": 12, **kw})

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w

    def n_patches(self, frames: int) -> int:
        return (grid_positions(frames, self.patch_h, self.stride)
                * grid_positions(self.n_mels, self.patch_w, self.stride))

    @property
    def max_positions(self) -> int:
        return 1 + self.n_patches(self.max_frames)


def param_shapes(cfg: ModelConfig) -> dict:
    d, m = cfg.embed_dim, cfg.mlp_dim
    shapes = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "cls": (d,),
        "pos": (cfg.max_positions, d),
    }
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, m), p + "mlp.b1": (m,),
            p + "mlp.w2": (m, d), p + "mlp.b2": (d,),
        })
    shapes.update({
        "head.ln.g": (d,), "head.ln.b": (d,),
        "head.w": (d, cfg.n_classes), "head.b": (cfg.n_classes,),
    })
    return shapes


def is_decayed(name: str, shape) -> bool:
    """Weight decay applies to projection matrices only."""
    return len(shape) >= 2 and name not in NO_DECAY


def _trunc_normal(rng, shape, std):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "cls" or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = arr.astype(dtype)
    return params


def check_params(params: dict, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise CheckpointError(
            f"shape mismatch: {len(missing)} tensors missing (e.g. {missing[:3]}), "
            f"{len(extra)} unexpected (e.g. {extra[:3]})")
    for name, shape in shapes.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(
                f"shape mismatch for {name}: {params[name].shape} vs {tuple(shape)}")


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def patchify(spec, cfg: ModelConfig):
    """Cut a (frames x n_mels) array into flattened patches.

    Returns ``(patches, (n_time, n_freq))`` with patches ordered time-major,
    frequency-minor, each flattened row-major (time rows, mel columns).
    """
    data = np.asarray(getattr(spec, "data", spec))
    frames, n_mels = data.shape
    if n_mels != cfg.n_mels:
        raise ModelError(f"expected {cfg.n_mels} mel bins, got {n_mels}")
    n_t = grid_positions(frames, cfg.patch_h, cfg.stride)
    n_f = grid_positions(n_mels, cfg.patch_w, cfg.stride)
    return kernels.extract_patches(data, n_t, n_f, cfg.patch_h, cfg.stride), (n_t, n_f)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _sum_rows(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _matmul_weight_grad(a, dy):
    # sum over batch and sequence of a^T dy
    return a.reshape(-1, a.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])


class LogitPair(NamedTuple):
    synthetic_logit: float
    bonafide_logit: float

    @property
    def score(self) -> float:
        return self.synthetic_logit - self.bonafide_logit


# ---------------------------------------------------------------------------
# forward / backward over a batch of equal-length patch sequences
# ---------------------------------------------------------------------------


def _split_heads(x, h):
    b, s, d = x.shape
    return x.reshape(b, s, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, s, h * dh)


def forward_patches(patches, params, cfg: ModelConfig, keep_cache=False):
    """Logits for a batch of patch sequences, shape (B, N, patch_dim) -> (B, 2)."""
    dtype = params["patch.w"].dtype
    x = np.asarray(patches, dtype=dtype)
    if x.ndim == 2:
        x = x[None]
    bsz, n, _ = x.shape
    seq = n + 1
    if seq > params["pos"].shape[0]:
        raise CapacityError(
            f"sequence of {seq} tokens exceeds positional table of {params['pos'].shape[0]}")
    emb = x @ params["patch.w"] + params["patch.b"]
    cls = np.broadcast_to(params["cls"], (bsz, 1, cfg.embed_dim))
    h = np.concatenate([cls, emb], axis=1) + params["pos"][:seq]
    caches = []
    nh = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.embed_dim // nh)
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        a_in, ln1 = _layernorm(h, params[p + "ln1.g"], params[p + "ln1.b"])
        q = _split_heads(a_in @ params[p + "attn.wq"] + params[p + "attn.bq"], nh)
        k = _split_heads(a_in @ params[p + "attn.wk"] + params[p + "attn.bk"], nh)
        v = _split_heads(a_in @ params[p + "attn.wv"] + params[p + "attn.bv"], nh)
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
        ctx = _merge_heads(att @ v)
        h = h + ctx @ params[p + "attn.wo"] + params[p + "attn.bo"]
        m_in, ln2 = _layernorm(h, params[p + "ln2.g"], params[p + "ln2.b"])
        u = m_in @ params[p + "mlp.w1"] + params[p + "mlp.b1"]
        gu, t = _gelu(u)
        h = h + gu @ params[p + "mlp.w2"] + params[p + "mlp.b2"]
        if keep_cache:
            caches.append((a_in, ln1, q, k, v, att, ctx, m_in, ln2, u, gu, t))
    z, lnf = _layernorm(h[:, 0], params["head.ln.g"], params["head.ln.b"])
    logits = z @ params["head.w"] + params["head.b"]
    if keep_cache:
        return logits, (x, caches, z, lnf, seq)
    return logits


def softmax_xent(logits, labels):
    """Per-example softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        loss, grad = softmax_xent(logits[None], np.atleast_1d(labels))
        return loss[0], grad[0]
    idx = np.asarray([LABEL_INDEX[l] if isinstance(l, str) else int(l)
                      for l in np.atleast_1d(labels)])
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(z.shape[0])
    loss = logsum - z[rows, idx]
    grad = np.exp(z - logsum[:, None])
    grad[rows, idx] -= 1.0
    return loss, grad


def backward_patches(patches, labels, params, cfg: ModelConfig):
    """Summed loss, summed parameter gradients and logits for one batch."""
    logits, (x, caches, z, lnf, seq) = forward_patches(patches, params, cfg, keep_cache=True)
    losses, dlogits = softmax_xent(logits, labels)
    dlogits = dlogits.astype(logits.dtype)
    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    grads["head.w"] = z.T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    dz = dlogits @ params["head.w"].T
    dcls, grads["head.ln.g"], grads["head.ln.b"] = _layernorm_back(dz, params["head.ln.g"], lnf)
    bsz = x.shape[0]
    dh = np.zeros((bsz, seq, cfg.embed_dim), dtype=logits.dtype)
    dh[:, 0] = dcls
    nh = cfg.n_heads
    scale = 1.0 / math.sqrt(cfg.embed_dim // nh)
    for i in reversed(range(cfg.n_layers)):
        p = f"blocks.{i}."
        a_in, ln1, q, k, v, att, ctx, m_in, ln2, u, gu, t = caches[i]
        # MLP branch
        grads[p + "mlp.b2"] = _sum_rows(dh)
        grads[p + "mlp.w2"] = _matmul_weight_grad(gu, dh)
        dgu = dh @ params[p + "mlp.w2"].T
        du = _gelu_back(dgu, u, t)
        grads[p + "mlp.b1"] = _sum_rows(du)
        grads[p + "mlp.w1"] = _matmul_weight_grad(m_in, du)
        dm_in = du @ params[p + "mlp.w1"].T
        dx, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layernorm_back(dm_in, params[p + "ln2.g"], ln2)
        dh = dh + dx
        # attention branch
        grads[p + "attn.bo"] = _sum_rows(dh)
        grads[p + "attn.wo"] = _matmul_weight_grad(ctx, dh)
        dctx = _split_heads(dh @ params[p + "attn.wo"].T, nh)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscore = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
        dq = dscore @ k
        dk = dscore.transpose(0, 1, 3, 2) @ q
        da_in = np.zeros_like(a_in)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            grads[p + f"attn.b{name}"] = _sum_rows(dproj)
            grads[p + f"attn.w{name}"] = _matmul_weight_grad(a_in, dproj)
            da_in += dproj @ params[p + f"attn.w{name}"].T
        dx, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layernorm_back(da_in, params[p + "ln1.g"], ln1)
        dh = dh + dx
    grads["pos"][:seq] = dh.sum(axis=0)
    grads["cls"] = dh[:, 0].sum(axis=0)
    demb = dh[:, 1:]
    grads["patch.b"] = _sum_rows(demb)
    grads["patch.w"] = _matmul_weight_grad(x, demb)
    return float(losses.sum()), grads, logits


def forward(spec, params, cfg: ModelConfig) -> LogitPair:
    patches, _ = patchify(spec, cfg)
    logits = forward_patches(patches[None], params, cfg)[0]
    return LogitPair(float(logits[0]), float(logits[1]))


def loss(logits, label):
    """Cross-entropy of one logit pair and its gradient."""
    l, g = softmax_xent(np.asarray(logits, dtype=np.float64), [label])
    return float(l), g


def backward(spec, label, params, cfg: ModelConfig):
    """Loss and exact gradients for a single spectrogram."""
    patches, _ = patchify(spec, cfg)
    total, grads, _ = backward_patches(patches[None], [label], params, cfg)
    return total, grads


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class NormStats:
    mean: float = 0.0
    std: float = 1.0


@dataclass
class CheckpointMeta:
    step: int = 0
    val_eer: float = float("nan")
    extra: dict = field(default_factory=dict)


def _pack_blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(params, cfg: ModelConfig, stats: NormStats,
                      meta: CheckpointMeta | None = None) -> bytes:
    meta = meta or CheckpointMeta()
    check_params(params, cfg)
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
           _pack_blob(json.dumps(asdict(cfg), sort_keys=True).encode())]
    names = list(param_shapes(cfg))
    out.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    out.append(struct.pack("<dd", stats.mean, stats.std))
    out.append(struct.pack("<Qd", meta.step, meta.val_eer))
    out.append(_pack_blob(json.dumps(meta.extra, sort_keys=True).encode()))
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def blob(self):
        (n,) = self.unpack("<I")
        return self.take(n)


def decode_checkpoint(data: bytes, expect: ModelConfig | None = None):
    if len(data) < len(CKPT_MAGIC) + 8 or data[:8] != CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(8)
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupt)")
    try:
        cfg = ModelConfig(**json.loads(r.blob()))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from None
    params = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        params[name] = arr.astype(np.float32)
    mean, std = r.unpack("<dd")
    step, val_eer = r.unpack("<Qd")
    extra = json.loads(r.blob())
    if r.pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    check_params(params, cfg)
    if expect is not None:
        check_params(params, expect)
        if expect != cfg:
            raise CheckpointError(f"checkpoint config {cfg} does not match requested {expect}")
    return params, cfg, NormStats(mean, std), CheckpointMeta(step, val_eer, extra)


def save_checkpoint(path, params, cfg, stats, meta=None) -> None:
    data = encode_checkpoint(params, cfg, stats, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path, expect: ModelConfig | None = None):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), expect)
