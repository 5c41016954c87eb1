"""Multi-head decoder-only transformer with a shared stem.

All decoder layers up to the penultimate one form the stem. Each token
head is one further decoder layer plus its own final layer norm; every
head projects through one shared output embedding. Head i predicts the
token i positions ahead of the current one, so a single stem evaluation
yields n predictions.

Gradients are returned in three tagged streams so training can apply
separate learning rates: "base" (head-1 loss into stem, head 1 and the
embeddings), "cross" (losses of heads 2..n flowing back into the same
base parameters) and "new" (losses of heads 2..n into their own layers).
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import layers
from .decoder import HeadDistribution
from .vocab import Vocab

__all__ = [
    "ModelConfig",
    "MultiHeadModel",
    "CheckpointError",
    "transfer_from_base",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_STD = 0.02
CKPT_MAGIC = b"DYNC"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files."""


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 128
    stem_layers: int = 2
    n_heads: int = 3
    context_len: int = 256
    attn_heads: int = 4

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.stem_layers < 1 or self.n_heads < 1:
            raise ValueError("need at least one stem layer and one head")
        if self.context_len < self.n_heads + 1:
            raise ValueError("context length must be >= n_heads + 1")
        if self.dim % self.attn_heads != 0:
            raise ValueError("dim must be divisible by attn_heads")


def _init_block(rng, dim, prefix, params):
    params[f"{prefix}.ln1.g"] = np.ones(dim)
    params[f"{prefix}.ln1.b"] = np.zeros(dim)
    params[f"{prefix}.attn.wqkv"] = rng.normal(0.0, INIT_STD, (dim, 3 * dim))
    params[f"{prefix}.attn.bqkv"] = np.zeros(3 * dim)
    params[f"{prefix}.attn.wo"] = rng.normal(0.0, INIT_STD, (dim, dim))
    params[f"{prefix}.attn.bo"] = np.zeros(dim)
    params[f"{prefix}.ln2.g"] = np.ones(dim)
    params[f"{prefix}.ln2.b"] = np.zeros(dim)
    params[f"{prefix}.mlp.w1"] = rng.normal(0.0, INIT_STD, (dim, 4 * dim))
    params[f"{prefix}.mlp.b1"] = np.zeros(4 * dim)
    params[f"{prefix}.mlp.w2"] = rng.normal(0.0, INIT_STD, (4 * dim, dim))
    params[f"{prefix}.mlp.b2"] = np.zeros(dim)


def _block_param_names(prefix):
    return [
        f"{prefix}.{k}"
        for k in (
            "ln1.g", "ln1.b",
            "attn.wqkv", "attn.bqkv", "attn.wo", "attn.bo",
            "ln2.g", "ln2.b",
            "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
        )
    ]


class MultiHeadModel:
    """Shared-stem multi-head transformer over a fixed vocabulary."""

    def __init__(self, config: ModelConfig, seed: int = 0, params: dict | None = None):
        self.config = config
        self.stem_evals = 0  # forward-pass counter; one per call, not per head
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}
        p["tok_emb"] = rng.normal(0.0, INIT_STD, (config.vocab_size, config.dim))
        p["pos_emb"] = rng.normal(0.0, INIT_STD, (config.context_len, config.dim))
        for i in range(config.stem_layers):
            _init_block(rng, config.dim, f"stem{i}", p)
        for h in range(1, config.n_heads + 1):
            _init_block(rng, config.dim, f"head{h}", p)
            p[f"head{h}.lnf.g"] = np.ones(config.dim)
            p[f"head{h}.lnf.b"] = np.zeros(config.dim)
        p["out_emb"] = rng.normal(0.0, INIT_STD, (config.vocab_size, config.dim))
        self.params = p

    # -- parameter bookkeeping -------------------------------------------

    @property
    def n_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def base_param_names(self) -> list[str]:
        names = ["tok_emb", "pos_emb"]
        for i in range(self.config.stem_layers):
            names += _block_param_names(f"stem{i}")
        names += _block_param_names("head1") + ["head1.lnf.g", "head1.lnf.b", "out_emb"]
        return names

    def new_param_names(self) -> list[str]:
        names = []
        for h in range(2, self.config.n_heads + 1):
            names += _block_param_names(f"head{h}") + [f"head{h}.lnf.g", f"head{h}.lnf.b"]
        return names

    # -- forward ----------------------------------------------------------

    def _forward(self, ids: np.ndarray, need_cache: bool):
        cfg = self.config
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        if L < 1:
            raise ValueError("context must hold at least one token")
        if L > cfg.context_len:
            raise ValueError(f"context of {L} tokens exceeds limit {cfg.context_len}")
        self.stem_evals += 1
        x = self.params["tok_emb"][ids] + self.params["pos_emb"][:L]
        stem_caches = []
        for i in range(cfg.stem_layers):
            x, cache = layers.block_forward(x, self.params, f"stem{i}", cfg.attn_heads)
            if need_cache:
                stem_caches.append(cache)
        head_logits = []
        head_caches = []
        for h in range(1, cfg.n_heads + 1):
            y, bc = layers.block_forward(x, self.params, f"head{h}", cfg.attn_heads)
            z, lc = layers.layer_norm_forward(y, self.params[f"head{h}.lnf.g"], self.params[f"head{h}.lnf.b"])
            logits = z @ self.params["out_emb"].T
            head_logits.append(logits)
            if need_cache:
                head_caches.append((bc, lc, z))
        cache = {"ids": ids, "stem": stem_caches, "heads": head_caches, "stem_out": x} if need_cache else None
        return head_logits, cache

    def head_logits(self, ids: np.ndarray) -> list[np.ndarray]:
        """Per-head logits of shape (B, L, V); one stem evaluation total."""
        logits, _ = self._forward(ids, need_cache=False)
        return logits

    def position_log_probs(self, ids: np.ndarray) -> list[np.ndarray]:
        """Per-head log-probabilities (L, V) for a single sequence."""
        logits = self.head_logits(np.asarray(ids, dtype=np.int64)[None, :])
        return [layers.log_softmax(lg[0]) for lg in logits]

    def head_distributions(self, context: np.ndarray, crop: bool = True) -> list[HeadDistribution]:
        """Raw (temperature 1) head distributions at the last position."""
        ctx = np.asarray(context, dtype=np.int64)
        if crop and ctx.size > self.config.context_len:
            ctx = ctx[-self.config.context_len :]
        logits = self.head_logits(ctx[None, :])
        out = []
        for h, lg in enumerate(logits, start=1):
            lp = layers.log_softmax(lg[0, -1])
            out.append(HeadDistribution(head_index=h, probs=np.exp(lp)))
        return out

    # -- losses and gradients ----------------------------------------------

    def _head_loss_grad(self, logits, ids, lengths, offset):
        """Mean cross-entropy of predicting ids shifted by ``offset``."""
        B, L, V = logits.shape
        pos = np.arange(L)
        valid = pos[None, :] < (lengths[:, None] - offset)
        count = int(valid.sum())
        if count == 0:
            return 0.0, None, 0
        labels = np.zeros((B, L), dtype=np.int64)
        for b in range(B):
            n_valid = max(0, int(lengths[b]) - offset)
            labels[b, :n_valid] = ids[b, offset : offset + n_valid]
        logp = layers.log_softmax(logits)
        picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
        loss = -float(picked[valid].sum()) / count
        dlogits = np.exp(logp)
        rows = np.zeros((B, L, V))
        np.put_along_axis(rows, labels[..., None], 1.0, axis=-1)
        dlogits = (dlogits - rows) * valid[..., None] / count
        return loss, dlogits, count

    def losses(self, batch: list[np.ndarray]) -> np.ndarray:
        """Per-head mean negative log-likelihoods for a list of sequences."""
        ids, lengths = _pad_batch(batch, self.config.n_heads)
        logits, _ = self._forward(ids, need_cache=False)
        out = np.zeros(self.config.n_heads)
        for h, lg in enumerate(logits, start=1):
            loss, _, _ = self._head_loss_grad(lg, ids, lengths, h)
            out[h - 1] = loss
        return out

    def loss_and_grads(self, batch: list[np.ndarray]):
        """Per-head losses plus tagged gradient streams (base/cross/new)."""
        cfg = self.config
        ids, lengths = _pad_batch(batch, cfg.n_heads)
        logits, cache = self._forward(ids, need_cache=True)

        losses = np.zeros(cfg.n_heads)
        g_base: dict[str, np.ndarray] = {}
        g_cross: dict[str, np.ndarray] = {}
        g_new: dict[str, np.ndarray] = {}
        d_stem_base = np.zeros_like(cache["stem_out"])
        d_stem_cross = np.zeros_like(cache["stem_out"])

        for h in range(1, cfg.n_heads + 1):
            loss, dlogits, count = self._head_loss_grad(logits[h - 1], ids, lengths, h)
            losses[h - 1] = loss
            if dlogits is None:
                continue
            bc, lc, z = cache["heads"][h - 1]
            V, D = self.params["out_emb"].shape
            d_out_emb = dlogits.reshape(-1, V).T @ z.reshape(-1, D)
            dz = dlogits @ self.params["out_emb"]
            dy, g_lnf = layers.layer_norm_backward(dz, lc)
            d_stem, g_block = layers.block_backward(dy, bc)
            sink = g_base if h == 1 else g_new
            for k, v in g_block.items():
                _acc(sink, k, v)
            _acc(sink, f"head{h}.lnf.g", g_lnf["g"])
            _acc(sink, f"head{h}.lnf.b", g_lnf["b"])
            if h == 1:
                _acc(g_base, "out_emb", d_out_emb)
                d_stem_base += d_stem
            else:
                _acc(g_cross, "out_emb", d_out_emb)
                d_stem_cross += d_stem

        for d_stem, sink in ((d_stem_base, g_base), (d_stem_cross, g_cross)):
            dx = d_stem
            for blk_cache in reversed(cache["stem"]):
                dx, g_block = layers.block_backward(dx, blk_cache)
                for k, v in g_block.items():
                    _acc(sink, k, v)
            d_tok = np.zeros_like(self.params["tok_emb"])
            np.add.at(d_tok, cache["ids"], dx)
            _acc(sink, "tok_emb", d_tok)
            d_pos = np.zeros_like(self.params["pos_emb"])
            d_pos[: dx.shape[1]] = dx.sum(axis=0)
            _acc(sink, "pos_emb", d_pos)

        return losses, g_base, g_cross, g_new

    def clone(self) -> "MultiHeadModel":
        return MultiHeadModel(self.config, params={k: v.copy() for k, v in self.params.items()})


def _acc(sink: dict, key: str, value: np.ndarray):
    if key in sink:
        sink[key] = sink[key] + value
    else:
        sink[key] = value


def _pad_batch(batch: list[np.ndarray], n_heads: int):
    usable = []
    for seq in batch:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size < n_heads + 1:
            warnings.warn(
                f"skipping sequence of length {seq.size}; need at least {n_heads + 1} tokens",
                stacklevel=3,
            )
            continue
        usable.append(seq)
    if not usable:
        raise ValueError("no usable sequences in batch")
    lengths = np.array([s.size for s in usable], dtype=np.int64)
    L = int(lengths.max())
    ids = np.zeros((len(usable), L), dtype=np.int64)
    for b, s in enumerate(usable):
        ids[b, : s.size] = s
    return ids, lengths


def transfer_from_base(base: MultiHeadModel, n_heads: int, copy_init: bool = False, seed: int = 0) -> MultiHeadModel:
    """Grow a single-head model into an n-head one.

    The base stem and final layer become the new stem and head 1; heads
    2..n start fresh (or as copies of head 1 with ``copy_init``). The
    output embedding is shared, so head-1 predictions are bit-identical
    to the base model's before any further training.
    """
    if base.config.n_heads != 1:
        raise ValueError(f"transfer expects a single-head base, got {base.config.n_heads} heads")
    if n_heads < 2:
        raise ValueError("target head count must be >= 2")
    cfg = ModelConfig(
        vocab_size=base.config.vocab_size,
        dim=base.config.dim,
        stem_layers=base.config.stem_layers,
        n_heads=n_heads,
        context_len=base.config.context_len,
        attn_heads=base.config.attn_heads,
    )
    model = MultiHeadModel(cfg, seed=seed)
    for k, v in base.params.items():
        model.params[k] = v.copy()
    if copy_init:
        for h in range(2, n_heads + 1):
            for src in _block_param_names("head1") + ["head1.lnf.g", "head1.lnf.b"]:
                model.params[src.replace("head1", f"head{h}")] = base.params[src].copy()
    return model


def save_checkpoint(path: str | Path, model: MultiHeadModel, vocab: Vocab | None = None):
    """Write config, optional vocab, and f32 little-endian parameter tensors."""
    meta = {
        "model_config": asdict(model.config),
        "vocab": None if vocab is None else {"mode": vocab.mode, "symbols": list(vocab.symbols)},
        "param_names": sorted(model.params),
    }
    blob = json.dumps(meta).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(blob)), blob]
    parts.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        tensor = np.ascontiguousarray(model.params[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))


def load_checkpoint(path: str | Path):
    """Read a checkpoint; returns (model, vocab-or-None)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 14 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path} at offset 0")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack("<I", raw[-4:])[0]:
        raise CheckpointError(f"checkpoint CRC mismatch at offset {len(raw) - 4}")
    version, meta_len = struct.unpack("<HI", raw[4:10])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 10
    meta = json.loads(raw[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (n_tensors,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    params = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", raw[off : off + 2])
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = raw[off]
        off += 1
        shape = struct.unpack(f"<{ndim}I", raw[off : off + 4 * ndim])
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensor = np.frombuffer(raw[off : off + 4 * size], dtype="<f4").reshape(shape)
        off += 4 * size
        params[name] = tensor.astype(np.float64)
    config = ModelConfig(**meta["model_config"])
    model = MultiHeadModel(config, params=params)
    vocab = None
    if meta.get("vocab"):
        mode = meta["vocab"]["mode"]
        syms = meta["vocab"]["symbols"]
        vocab = Vocab(mode=mode, symbols=tuple(syms) if mode == "byte" else tuple(str(s) for s in syms))
    return model, vocab
