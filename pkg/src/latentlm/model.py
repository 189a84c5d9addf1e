"""Decoder-only transformer over the autograd tensors.

Pre-norm blocks (norm -> attention -> residual, norm -> MLP -> residual),
learned absolute positional embeddings, causal attention with an
incremental KV cache, optionally tied input/output embeddings, and an
optional bottleneck adapter that maps hidden states into embedding space
for untied models.

forward() consumes embeddings, not token ids: continuous thinking vectors
are spliced in by the caller and bypass the vocabulary lookup, so the
lookup lives in embed().
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tz
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LTT1"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    tied_embeddings: bool = True
    adapter_hidden_dim: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff, self.vocab_size) < 1:
            raise ValueError("model dimensions must be positive")
        if self.adapter_hidden_dim is not None:
            if self.tied_embeddings:
                raise ValueError("adapter_hidden_dim is only valid for untied embeddings")
            if self.adapter_hidden_dim < 1:
                raise ValueError("adapter_hidden_dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class KVCache:
    """Per-layer cached keys/values, each [n_heads, cached_len, head_dim].

    Functionally extended: forward() returns a new cache referencing the
    concatenated tensors, so training graphs stay intact across segments.
    """

    keys: list[Tensor] = field(default_factory=list)
    values: list[Tensor] = field(default_factory=list)

    @property
    def cached_len(self) -> int:
        if not self.keys:
            return 0
        lens = {k.shape[1] for k in self.keys} | {v.shape[1] for v in self.values}
        if len(lens) != 1:
            raise ValueError(f"inconsistent cache lengths across layers: {sorted(lens)}")
        return self.keys[0].shape[1]


@dataclass
class ForwardResult:
    """hidden[0] is the post-embedding stream, hidden[i] the output of block i
    (pre final norm); logits are head outputs for the segment; attentions are
    per-layer probability arrays [n_heads, n, key_len] (views of graph data)."""

    hidden: list[Tensor]
    logits: Tensor
    cache: KVCache
    attentions: list[np.ndarray]


class _Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, ff = cfg.d_model, cfg.d_ff

        def w(*shape):
            return Tensor(rng.standard_normal(shape) * INIT_STD, requires_grad=True)

        self.ln1_gain = tz.full([d], 1.0, requires_grad=True)
        self.ln1_bias = tz.zeros([d], requires_grad=True)
        self.wq, self.bq = w(d, d), w(d)
        self.wk, self.bk = w(d, d), w(d)
        self.wv, self.bv = w(d, d), w(d)
        self.wo, self.bo = w(d, d), w(d)
        self.ln2_gain = tz.full([d], 1.0, requires_grad=True)
        self.ln2_bias = tz.zeros([d], requires_grad=True)
        self.w1, self.b1 = w(d, ff), w(ff)
        self.w2, self.b2 = w(ff, d), w(d)

    def named_parameters(self, prefix: str):
        names = [
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2",
        ]
        return [(f"{prefix}.{n}", getattr(self, n)) for n in names]


class Model:
    """Transformer parameters plus config. Construction is deterministic per seed."""

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        d = cfg.d_model

        self.token_embedding = Tensor(rng.standard_normal((cfg.vocab_size, d)) * INIT_STD, requires_grad=True)
        self.positional_embedding = Tensor(rng.standard_normal((cfg.max_seq_len, d)) * INIT_STD, requires_grad=True)
        self.blocks = [_Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.ln_f_gain = tz.full([d], 1.0, requires_grad=True)
        self.ln_f_bias = tz.zeros([d], requires_grad=True)
        if cfg.tied_embeddings:
            self.output_head = self.token_embedding  # same storage, one grad accumulator
        else:
            self.output_head = Tensor(rng.standard_normal((cfg.vocab_size, d)) * INIT_STD, requires_grad=True)
        if cfg.adapter_hidden_dim is not None:
            a = cfg.adapter_hidden_dim
            self.adapter_down = Tensor(rng.standard_normal((d, a)) * INIT_STD, requires_grad=True)
            self.adapter_up = Tensor(rng.standard_normal((a, d)) * INIT_STD, requires_grad=True)
        else:
            self.adapter_down = None
            self.adapter_up = None

    # -- parameter access ------------------------------------------------

    def named_parameters(self):
        out = [("token_embedding", self.token_embedding), ("positional_embedding", self.positional_embedding)]
        for i, blk in enumerate(self.blocks):
            out.extend(blk.named_parameters(f"block{i}"))
        out.append(("ln_f_gain", self.ln_f_gain))
        out.append(("ln_f_bias", self.ln_f_bias))
        if not self.config.tied_embeddings:
            out.append(("output_head", self.output_head))
        if self.adapter_down is not None:
            out.append(("adapter_down", self.adapter_down))
            out.append(("adapter_up", self.adapter_up))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- core ops ----------------------------------------------------------

    def embed(self, token_ids, offset: int = 0) -> Tensor:
        """Token embedding plus positional embedding at the absolute position."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("embed expects a non-empty 1-D id sequence")
        if ids.min() < 0 or ids.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size}): {int(ids.max())}")
        if offset < 0 or offset + ids.size > self.config.max_seq_len:
            raise ValueError(
                f"positions [{offset}, {offset + ids.size}) exceed max_seq_len {self.config.max_seq_len}"
            )
        tok = self.token_embedding[ids]
        pos = self.positional_embedding[offset : offset + ids.size]
        return tok + pos

    def position_row(self, position: int) -> Tensor:
        """Positional embedding row [1, d] for splicing continuous inputs."""
        if not 0 <= position < self.config.max_seq_len:
            raise ValueError(f"position {position} exceeds max_seq_len {self.config.max_seq_len}")
        return self.positional_embedding[position : position + 1]

    def forward(self, embeddings: Tensor, cache: KVCache | None = None) -> ForwardResult:
        """Causal forward over an [n, d] embedding segment, attending to the cache.

        Returns hidden states at every layer boundary so any layer can serve
        as the context source, plus logits and an extended cache.
        """
        cfg = self.config
        if embeddings.data.ndim != 2 or embeddings.shape[1] != cfg.d_model or embeddings.shape[0] == 0:
            raise ValueError(f"forward expects [n, {cfg.d_model}] embeddings, got {list(embeddings.shape)}")
        if cache is None:
            cache = KVCache()
        n = embeddings.shape[0]
        past = cache.cached_len
        if past + n > cfg.max_seq_len:
            raise ValueError(f"sequence length {past + n} exceeds max_seq_len {cfg.max_seq_len}")

        h, hd = cfg.n_heads, cfg.head_dim
        total = past + n
        # query at absolute position past+i sees keys at absolute positions <= past+i
        causal = np.arange(total)[None, :] <= (past + np.arange(n))[:, None]

        x = embeddings
        hidden = [x]
        attentions: list[np.ndarray] = []
        new_keys: list[Tensor] = []
        new_values: list[Tensor] = []

        for li, blk in enumerate(self.blocks):
            xn = tz.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
            q = (xn @ blk.wq + blk.bq).reshape((n, h, hd)).transpose((1, 0, 2))
            k = (xn @ blk.wk + blk.bk).reshape((n, h, hd)).transpose((1, 0, 2))
            v = (xn @ blk.wv + blk.bv).reshape((n, h, hd)).transpose((1, 0, 2))
            if past > 0:
                k = tz.concat([cache.keys[li], k], axis=1)
                v = tz.concat([cache.values[li], v], axis=1)
            new_keys.append(k)
            new_values.append(v)

            scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(hd))
            attn = tz.softmax(scores, axis=-1, mask=causal[None, :, :])
            attentions.append(attn.data)
            ctx = (attn @ v).transpose((1, 0, 2)).reshape((n, cfg.d_model))
            x = x + (ctx @ blk.wo + blk.bo)

            xn2 = tz.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
            x = x + (tz.gelu(xn2 @ blk.w1 + blk.b1) @ blk.w2 + blk.b2)
            hidden.append(x)

        final = tz.layer_norm(x, self.ln_f_gain, self.ln_f_bias)
        logits = final @ self.output_head.T
        return ForwardResult(hidden, logits, KVCache(new_keys, new_values), attentions)

    def forward_tokens(self, token_ids, cache: KVCache | None = None) -> ForwardResult:
        """Convenience: embed then forward, offset-aware via the cache."""
        offset = 0 if cache is None else cache.cached_len
        return self.forward(self.embed(token_ids, offset=offset), cache)

    def forward_batch(self, embeddings: Tensor, valid: np.ndarray) -> Tensor:
        """Uncached causal forward over a padded [B, T, d] batch -> [B, T, vocab]
        logits. valid is a [B, T] bool mask; padded positions are excluded from
        every attention row (their own rows attend to themselves only, and their
        outputs are garbage the caller must mask out of the loss).

        Teacher-forced training over same-shape sequences runs an order of
        magnitude faster here than as per-example cached forwards.
        """
        cfg = self.config
        if embeddings.data.ndim != 3 or embeddings.shape[2] != cfg.d_model:
            raise ValueError(f"forward_batch expects [B, T, {cfg.d_model}] embeddings")
        bsz, n, d = embeddings.shape
        if n > cfg.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
        if valid.shape != (bsz, n):
            raise ValueError("valid mask must be [B, T]")
        h, hd = cfg.n_heads, cfg.head_dim

        causal = np.tril(np.ones((n, n), dtype=bool))
        mask = causal[None, :, :] & valid[:, None, :]
        diag = np.arange(n)
        mask[:, diag, diag] = True  # padded rows self-attend so their softmax stays defined
        mask = np.broadcast_to(mask[:, None, :, :], (bsz, h, n, n)).reshape(bsz * h, n, n)

        def heads(t: Tensor) -> Tensor:
            return t.reshape((bsz, n, h, hd)).transpose((0, 2, 1, 3)).reshape((bsz * h, n, hd))

        x = embeddings
        for blk in self.blocks:
            xn = tz.layer_norm(x, blk.ln1_gain, blk.ln1_bias)
            flat = xn.reshape((bsz * n, d))
            q = heads((flat @ blk.wq + blk.bq).reshape((bsz, n, d)))
            k = heads((flat @ blk.wk + blk.bk).reshape((bsz, n, d)))
            v = heads((flat @ blk.wv + blk.bv).reshape((bsz, n, d)))
            scores = (q @ k.transpose((0, 2, 1))) * (1.0 / np.sqrt(hd))
            attn = tz.softmax(scores, axis=-1, mask=mask)
            ctx = (attn @ v).reshape((bsz, h, n, hd)).transpose((0, 2, 1, 3)).reshape((bsz * n, d))
            x = x + (ctx @ blk.wo + blk.bo).reshape((bsz, n, d))
            xn2 = tz.layer_norm(x, blk.ln2_gain, blk.ln2_bias)
            mlp = tz.gelu(xn2.reshape((bsz * n, d)) @ blk.w1 + blk.b1) @ blk.w2 + blk.b2
            x = x + mlp.reshape((bsz, n, d))

        final = tz.layer_norm(x, self.ln_f_gain, self.ln_f_bias)
        logits = final.reshape((bsz * n, d)) @ self.output_head.T
        return logits.reshape((bsz, n, cfg.vocab_size))

    def final_norm(self, x: Tensor) -> Tensor:
        return tz.layer_norm(x, self.ln_f_gain, self.ln_f_bias)

    def adapter_apply(self, h: Tensor) -> Tensor:
        """Bottleneck map up(GELU(down(h))) from hidden space to embedding space."""
        if self.adapter_down is None:
            raise ValueError("adapter not configured")
        flat = h if h.data.ndim == 2 else h.reshape((1, h.shape[-1]))
        out = tz.gelu(flat @ self.adapter_down) @ self.adapter_up
        return out if h.data.ndim == 2 else out.reshape((h.shape[-1],))


def init_model(config: ModelConfig) -> Model:
    return Model(config)


# -- checkpoint persistence ----------------------------------------------------
#
# Layout: magic "LTT1", little-endian u32 header length, UTF-8 JSON header
# {version, config, params: [{name, shape}, ...]}, then raw little-endian
# float64 blobs in manifest order. Tied models store the shared matrix once.


def save_checkpoint(model: Model, path):
    manifest = [{"name": name, "shape": list(p.shape)} for name, p in model.named_parameters()]
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "params": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, p in model.named_parameters():
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a model checkpoint: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig(**header["config"])
        model = Model(config)
        expected = {name: p for name, p in model.named_parameters()}
        if [m["name"] for m in header["params"]] != list(expected.keys()):
            raise ValueError("checkpoint parameter manifest does not match the config")
        for m in header["params"]:
            p = expected[m["name"]]
            if list(p.shape) != m["shape"]:
                raise ValueError(f"shape mismatch for {m['name']}: file {m['shape']} vs model {list(p.shape)}")
            raw = f.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"truncated checkpoint while reading {m['name']}")
            p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    return model


def checkpoint_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
