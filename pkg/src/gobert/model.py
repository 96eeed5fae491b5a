"""Order-invariant transformer encoder with two output heads.

No positional encoding anywhere: annotation sets are unordered, so the
architecture is permutation-equivariant over non-PAD positions by
construction. Forward and reverse passes are hand-written numpy; gradients
are exact and verified against finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masking import IGNORE, MaskedBatch

CHECKPOINT_MAGIC = b"GOBERT1"
NEG_BIAS = -1e9
LN_EPS = 1e-5


class ModelError(Exception):
    pass


@dataclass
class ModelConfig:
    hidden: int = 256
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 1024
    vocab_size: int = 0
    label_size: int = 0
    lam: float = 0.5              # weight of the neighborhood (explicit) loss
    neg_downsample: float = 0.001
    embed_dim: int | None = None  # != hidden enables the input projection
    neighbor_head: bool = True

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if not 0.0 <= self.lam <= 1.0:
            raise ModelError(f"lambda must be in [0, 1], got {self.lam}")
        if not 0.0 < self.neg_downsample <= 1.0:
            raise ModelError(f"neg_downsample must be in (0, 1], got {self.neg_downsample}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {"hidden": self.hidden, "layers": self.layers, "heads": self.heads,
                "ffn_dim": self.ffn_dim, "vocab_size": self.vocab_size,
                "label_size": self.label_size, "lam": self.lam,
                "neg_downsample": self.neg_downsample, "embed_dim": self.embed_dim,
                "neighbor_head": self.neighbor_head}

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ModelParameters:
    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def astype(self, dtype) -> "ModelParameters":
        return ModelParameters(self.config,
                               {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {k: v.copy() for k, v in self.arrays.items()})


@dataclass
class ForwardOutput:
    hidden_states: np.ndarray             # [B, S, d]
    mlm_logits: np.ndarray                # [B, S, vocab]
    neighbor_logits: np.ndarray | None    # [B, S, L]


def init_parameters(config: ModelConfig, token_embedding: np.ndarray | None = None,
                    seed: int = 0, dtype=np.float32, init_std: float = 0.02) -> ModelParameters:
    """Gaussian(0, init_std) weight init; the token table starts from the
    provided embedding matrix when given (rows cast to dtype)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x1417])))
    d, h, dk, f = config.hidden, config.heads, config.head_dim, config.ffn_dim
    e_dim = config.embed_dim if config.embed_dim is not None else d

    def w(*shape):
        return rng.normal(0.0, init_std, size=shape).astype(dtype)

    p: dict[str, np.ndarray] = {}
    if token_embedding is not None:
        if token_embedding.shape != (config.vocab_size, e_dim):
            raise ModelError(f"embedding table shape {token_embedding.shape} != "
                             f"({config.vocab_size}, {e_dim})")
        p["token_embedding"] = token_embedding.astype(dtype).copy()
    else:
        p["token_embedding"] = w(config.vocab_size, e_dim)
    if e_dim != d:
        p["input_projection/weight"] = w(e_dim, d)
        p["input_projection/bias"] = np.zeros(d, dtype=dtype)
    for i in range(config.layers):
        pre = f"layer{i}"
        p[f"{pre}/attn/w_q"] = w(h, d, dk)
        p[f"{pre}/attn/w_k"] = w(h, d, dk)
        p[f"{pre}/attn/w_v"] = w(h, d, dk)
        p[f"{pre}/attn/w_o"] = w(d, d)
        p[f"{pre}/ln1/gamma"] = np.ones(d, dtype=dtype)
        p[f"{pre}/ln1/beta"] = np.zeros(d, dtype=dtype)
        p[f"{pre}/ffn/w1"] = w(d, f)
        p[f"{pre}/ffn/b1"] = np.zeros(f, dtype=dtype)
        p[f"{pre}/ffn/w2"] = w(f, d)
        p[f"{pre}/ffn/b2"] = np.zeros(d, dtype=dtype)
        p[f"{pre}/ln2/gamma"] = np.ones(d, dtype=dtype)
        p[f"{pre}/ln2/beta"] = np.zeros(d, dtype=dtype)
    p["mlm_head/weight"] = w(d, config.vocab_size)
    p["mlm_head/bias"] = np.zeros(config.vocab_size, dtype=dtype)
    if config.neighbor_head:
        p["neighbor_head/weight"] = w(d, config.label_size)
        p["neighbor_head/bias"] = np.zeros(config.label_size, dtype=dtype)
    return ModelParameters(config, p)


# -- primitives ----------------------------------------------------------------

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
              key_mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled dot-product attention; key_mask is 1 at attendable keys."""
    for name, arr in (("q", q), ("k", k), ("v", v)):
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"non-finite values in {name}")
    dk = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk)
    if key_mask is not None:
        scores = scores + (1.0 - key_mask[..., None, :]) * NEG_BIAS
    return softmax(scores) @ v


def _layer_norm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return gamma * xhat + beta, (xhat, sigma, gamma)


def _layer_norm_backward(dy, cache):
    xhat, sigma, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) / sigma
    return dx, dgamma, dbeta


def _forward_cached(params: ModelParameters, batch: MaskedBatch):
    cfg = params.config
    p = params.arrays
    ids = batch.input_ids
    if ids.max(initial=0) >= cfg.vocab_size:
        raise ModelError("input id outside vocabulary")
    dtype = p["token_embedding"].dtype
    attn = batch.attention_mask.astype(dtype)

    cache: dict = {"ids": ids, "attn": attn}
    x = p["token_embedding"][ids]
    if "input_projection/weight" in p:
        cache["embed_raw"] = x
        x = x @ p["input_projection/weight"] + p["input_projection/bias"]

    dk = cfg.head_dim
    key_bias = ((1.0 - attn) * NEG_BIAS)[:, None, None, :]     # [B,1,1,S]
    layer_caches = []
    for i in range(cfg.layers):
        pre = f"layer{i}"
        wq, wk, wv = p[f"{pre}/attn/w_q"], p[f"{pre}/attn/w_k"], p[f"{pre}/attn/w_v"]
        q = np.einsum("bsd,hdk->bhsk", x, wq)
        k = np.einsum("bsd,hdk->bhsk", x, wk)
        v = np.einsum("bsd,hdk->bhsk", x, wv)
        scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk) + key_bias
        probs = softmax(scores)
        ctx = probs @ v                                          # [B,h,S,dk]
        B, _, S, _ = ctx.shape
        concat = np.transpose(ctx, (0, 2, 1, 3)).reshape(B, S, cfg.hidden)
        attn_out = concat @ p[f"{pre}/attn/w_o"]
        ln1_in = x + attn_out
        x1, ln1_cache = _layer_norm_forward(ln1_in, p[f"{pre}/ln1/gamma"],
                                            p[f"{pre}/ln1/beta"])
        pre_act = x1 @ p[f"{pre}/ffn/w1"] + p[f"{pre}/ffn/b1"]
        act = np.maximum(pre_act, 0.0)
        ffn_out = act @ p[f"{pre}/ffn/w2"] + p[f"{pre}/ffn/b2"]
        ln2_in = x1 + ffn_out
        x2, ln2_cache = _layer_norm_forward(ln2_in, p[f"{pre}/ln2/gamma"],
                                            p[f"{pre}/ln2/beta"])
        layer_caches.append({"x": x, "q": q, "k": k, "v": v, "probs": probs,
                             "concat": concat, "x1": x1, "pre_act": pre_act,
                             "act": act, "ln1": ln1_cache, "ln2": ln2_cache})
        x = x2
    cache["layers"] = layer_caches
    cache["final"] = x

    mlm_logits = x @ p["mlm_head/weight"] + p["mlm_head/bias"]
    nbr_logits = None
    if cfg.neighbor_head:
        nbr_logits = x @ p["neighbor_head/weight"] + p["neighbor_head/bias"]
    out = ForwardOutput(hidden_states=x, mlm_logits=mlm_logits,
                        neighbor_logits=nbr_logits)
    if not np.all(np.isfinite(mlm_logits)):
        raise ModelError("non-finite mlm logits")
    return out, cache


def forward(params: ModelParameters, batch: MaskedBatch) -> ForwardOutput:
    out, _ = _forward_cached(params, batch)
    return out


def _backward(params: ModelParameters, cache, d_final: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse pass from d(loss)/d(final hidden states) to every parameter.

    Head gradients are handled by the caller; this covers embedding, optional
    projection, and the encoder stack.
    """
    cfg = params.config
    p = params.arrays
    grads: dict[str, np.ndarray] = {}
    dk = cfg.head_dim
    dx = d_final
    for i in reversed(range(cfg.layers)):
        pre = f"layer{i}"
        lc = cache["layers"][i]
        d_ln2_in, g, b = _layer_norm_backward(dx, lc["ln2"])
        grads[f"{pre}/ln2/gamma"], grads[f"{pre}/ln2/beta"] = g, b
        d_x1 = d_ln2_in.copy()
        d_ffn_out = d_ln2_in
        grads[f"{pre}/ffn/w2"] = np.einsum("bsf,bsd->fd", lc["act"], d_ffn_out)
        grads[f"{pre}/ffn/b2"] = d_ffn_out.sum(axis=(0, 1))
        d_act = d_ffn_out @ p[f"{pre}/ffn/w2"].T
        d_pre = d_act * (lc["pre_act"] > 0)
        grads[f"{pre}/ffn/w1"] = np.einsum("bsd,bsf->df", lc["x1"], d_pre)
        grads[f"{pre}/ffn/b1"] = d_pre.sum(axis=(0, 1))
        d_x1 += d_pre @ p[f"{pre}/ffn/w1"].T

        d_ln1_in, g, b = _layer_norm_backward(d_x1, lc["ln1"])
        grads[f"{pre}/ln1/gamma"], grads[f"{pre}/ln1/beta"] = g, b
        d_x = d_ln1_in.copy()
        d_attn_out = d_ln1_in
        grads[f"{pre}/attn/w_o"] = np.einsum("bsd,bse->de", lc["concat"], d_attn_out)
        d_concat = d_attn_out @ p[f"{pre}/attn/w_o"].T
        B, S, _ = d_concat.shape
        d_ctx = np.transpose(d_concat.reshape(B, S, cfg.heads, dk), (0, 2, 1, 3))
        probs, q, k, v, x_in = lc["probs"], lc["q"], lc["k"], lc["v"], lc["x"]
        d_probs = d_ctx @ np.swapaxes(v, -1, -2)
        d_v = np.swapaxes(probs, -1, -2) @ d_ctx
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_q = d_scores @ k / np.sqrt(dk)
        d_k = np.swapaxes(d_scores, -1, -2) @ q / np.sqrt(dk)
        for name, dproj in (("w_q", d_q), ("w_k", d_k), ("w_v", d_v)):
            grads[f"{pre}/attn/{name}"] = np.einsum("bsd,bhsk->hdk", x_in, dproj)
            d_x += np.einsum("bhsk,hdk->bsd", dproj, p[f"{pre}/attn/{name}"])
        dx = d_x

    ids = cache["ids"]
    if "input_projection/weight" in p:
        raw = cache["embed_raw"]
        grads["input_projection/weight"] = np.einsum("bse,bsd->ed", raw, dx)
        grads["input_projection/bias"] = dx.sum(axis=(0, 1))
        d_raw = dx @ p["input_projection/weight"].T
    else:
        d_raw = dx
    d_embed = np.zeros_like(p["token_embedding"])
    np.add.at(d_embed, ids, d_raw)
    grads["token_embedding"] = d_embed
    return grads


# -- losses --------------------------------------------------------------------

def mlm_loss(output: ForwardOutput, labels: np.ndarray) -> float:
    loss, _ = _mlm_loss_grad(output.mlm_logits, labels)
    return loss


def _mlm_loss_grad(logits: np.ndarray, labels: np.ndarray):
    sup = labels != IGNORE
    n = int(sup.sum())
    if n == 0:
        raise ModelError("mlm loss undefined: every position is IGNORE")
    z = logits[sup]                                  # [n, vocab]
    y = labels[sup]
    zmax = z.max(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=-1))
    loss = float(np.mean(lse - z[np.arange(n), y]))
    probs = np.exp(z - zmax)
    probs /= probs.sum(axis=-1, keepdims=True)
    probs[np.arange(n), y] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[sup] = probs / n
    return loss, dlogits


def _negative_sample_mask(targets: np.ndarray, valid: np.ndarray,
                          rho: float, seed: int) -> np.ndarray:
    """Entry mask over [B,S,L]: all positives plus Bernoulli(rho) negatives,
    only at valid (non-PAD) positions. Deterministic in seed and shapes."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x9E6])))
    draws = rng.random(targets.shape) < rho
    sampled = (targets.astype(bool) | draws) & valid[..., None]
    return sampled


def neighborhood_targets(batch: MaskedBatch, adjacency) -> tuple[np.ndarray, np.ndarray]:
    """Per-position adjacency-row targets [B,S,L] and validity mask [B,S].

    Corrupted positions use the original term's row via batch.term_rows.
    ``adjacency`` is dense or scipy-sparse [L, L].
    """
    B, S = batch.term_rows.shape
    valid = batch.term_rows >= 0
    rows = np.where(valid, batch.term_rows, 0).reshape(-1)
    sub = adjacency[rows]
    if hasattr(sub, "toarray"):
        sub = sub.toarray()
    targets = np.asarray(sub, dtype=np.float64).reshape(B, S, -1)
    targets[~valid] = 0.0
    return targets, valid


def neighborhood_loss(output: ForwardOutput, batch: MaskedBatch, adjacency,
                      rho: float, seed: int) -> float:
    if output.neighbor_logits is None:
        raise ModelError("model has no neighborhood head")
    targets, valid = neighborhood_targets(batch, adjacency)
    sampled = _negative_sample_mask(targets, valid, rho, seed)
    loss, _ = _bce_loss_grad(output.neighbor_logits, targets, sampled)
    return loss


def _bce_loss_grad(logits: np.ndarray, targets: np.ndarray, sampled: np.ndarray):
    m = int(sampled.sum())
    if m == 0:
        return 0.0, np.zeros_like(logits)
    z = logits[sampled].astype(np.float64)
    t = targets[sampled]
    # stable BCE-with-logits
    loss = float(np.mean(np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))))
    dz = (1.0 / (1.0 + np.exp(-z)) - t) / m
    dlogits = np.zeros_like(logits)
    dlogits[sampled] = dz.astype(logits.dtype)
    return loss, dlogits


def total_loss(mlm: float, nbr: float, lam: float) -> float:
    return lam * nbr + (1.0 - lam) * mlm


@dataclass
class LossBreakdown:
    total: float
    mlm: float
    neighborhood: float | None


def gradients(params: ModelParameters, batch: MaskedBatch, adjacency=None,
              seed: int = 0) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Exact gradients of the joint loss w.r.t. every parameter.

    lam and neg_downsample come from params.config. With lam == 0 the
    neighborhood branch contributes nothing; with lam == 1 the MLM head gets
    exactly zero gradient (its loss is still reported).
    """
    cfg = params.config
    out, cache = _forward_cached(params, batch)
    p = params.arrays
    grads = {k: np.zeros_like(v) for k, v in p.items()}

    mlm, d_mlm_logits = _mlm_loss_grad(out.mlm_logits, batch.labels)
    nbr = None
    d_final = np.zeros_like(out.hidden_states)

    w_im = 1.0 - cfg.lam
    if w_im != 0.0:
        grads["mlm_head/weight"] += w_im * np.einsum("bsd,bsv->dv",
                                                     cache["final"], d_mlm_logits)
        grads["mlm_head/bias"] += w_im * d_mlm_logits.sum(axis=(0, 1))
        d_final += w_im * (d_mlm_logits @ p["mlm_head/weight"].T)

    if cfg.neighbor_head:
        if adjacency is None:
            raise ModelError("adjacency required for the neighborhood loss")
        targets, valid = neighborhood_targets(batch, adjacency)
        sampled = _negative_sample_mask(targets, valid, cfg.neg_downsample, seed)
        nbr, d_nbr_logits = _bce_loss_grad(out.neighbor_logits, targets, sampled)
        if cfg.lam != 0.0:
            grads["neighbor_head/weight"] += cfg.lam * np.einsum(
                "bsd,bsl->dl", cache["final"], d_nbr_logits)
            grads["neighbor_head/bias"] += cfg.lam * d_nbr_logits.sum(axis=(0, 1))
            d_final += cfg.lam * (d_nbr_logits @ p["neighbor_head/weight"].T)

    body = _backward(params, cache, d_final)
    for k, g in body.items():
        grads[k] += g

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient in {name}")
    total = total_loss(mlm, nbr if nbr is not None else 0.0,
                       cfg.lam if cfg.neighbor_head else 0.0)
    return LossBreakdown(total=total, mlm=mlm, neighborhood=nbr), grads


def compute_losses(params: ModelParameters, batch: MaskedBatch, adjacency=None,
                   seed: int = 0) -> LossBreakdown:
    """Loss values only, with the identical negative sample as gradients()."""
    cfg = params.config
    out = forward(params, batch)
    mlm, _ = _mlm_loss_grad(out.mlm_logits, batch.labels)
    nbr = None
    if cfg.neighbor_head:
        targets, valid = neighborhood_targets(batch, adjacency)
        sampled = _negative_sample_mask(targets, valid, cfg.neg_downsample, seed)
        nbr, _ = _bce_loss_grad(out.neighbor_logits, targets, sampled)
    total = total_loss(mlm, nbr if nbr is not None else 0.0,
                       cfg.lam if cfg.neighbor_head else 0.0)
    return LossBreakdown(total=total, mlm=mlm, neighborhood=nbr)


# -- checkpoint IO -------------------------------------------------------------

def write_checkpoint(path: str | Path, params: ModelParameters,
                     extra_arrays: dict[str, np.ndarray] | None = None,
                     meta: dict | None = None) -> None:
    """GOBERT1 container: magic, JSON header (config + meta), then named
    little-endian float32 blocks with shape headers. Byte-stable."""
    header = {"config": params.config.to_dict(), "meta": meta or {}}
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blocks = dict(params.arrays)
    for k, v in (extra_arrays or {}).items():
        blocks[f"extra/{k}"] = v
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(hdr)), hdr,
             struct.pack("<I", len(blocks))]
    for name in sorted(blocks):
        arr = np.ascontiguousarray(blocks[name], dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: str | Path):
    """Returns (ModelParameters, extra_arrays, meta)."""
    data = Path(path).read_bytes()
    if data[:7] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: bad checkpoint magic")
    off = 7
    hdr_len, = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hdr_len].decode("utf-8"))
    off += hdr_len
    count, = struct.unpack_from("<I", data, off)
    off += 4
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + name_len].decode("utf-8")
        off += name_len
        ndim, = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
        blocks[name] = arr
    extras = {k[len("extra/"):]: v for k, v in blocks.items() if k.startswith("extra/")}
    arrays = {k: v for k, v in blocks.items() if not k.startswith("extra/")}
    config = ModelConfig.from_dict(header["config"])
    return ModelParameters(config, arrays), extras, header.get("meta", {})
