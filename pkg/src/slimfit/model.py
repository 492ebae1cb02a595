"""Configurable transformer encoder with a freezable-layer registry.

The architecture is the classic encoder stack: embeddings (word, position,
segment) with a LayerNorm, L blocks of multi-head attention plus a 4x-wide
feed-forward network (each followed by residual add and LayerNorm), then a
first-token pooler and a classifier head. Every unit that can be frozen
independently is registered under a stable integer id and a dotted name,
giving n = 4 + 8L + 2 freezable layers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, RegistryError, ShapeError
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    blocks: int = 3               # L
    hidden: int = 32              # H
    heads: int = 4
    max_seq: int = 16             # T
    vocab: int = 64
    num_classes: int = 4
    pre_norm: bool = False        # False: post-norm (BERT-like); True: pre-norm (ViT-like)
    type_vocab: int = 2

    # FFN width is fixed at 4H.
    @property
    def intermediate(self) -> int:
        return 4 * self.hidden

    def validate(self):
        for name in ("blocks", "hidden", "heads", "max_seq", "vocab", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")


@dataclass
class RegistryEntry:
    layer_id: int
    name: str
    kind: str                     # embedding | layernorm | dense
    params: list = field(default_factory=list)


class LayerRegistry:
    """Ordered map layer_id -> freezable unit, ids dense 0..n-1."""

    def __init__(self):
        self.entries: list[RegistryEntry] = []
        self._by_name = {}

    def register(self, name: str, kind: str) -> RegistryEntry:
        entry = RegistryEntry(len(self.entries), name, kind)
        self.entries.append(entry)
        self._by_name[name] = entry
        return entry

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self, layer_id: int) -> RegistryEntry:
        if not 0 <= layer_id < len(self.entries):
            raise RegistryError(f"unknown layer id {layer_id} (registry has {len(self.entries)})")
        return self.entries[layer_id]

    def by_name(self, name: str) -> RegistryEntry:
        try:
            return self._by_name[name]
        except KeyError:
            raise RegistryError(f"unknown layer name {name!r}") from None

    def names(self) -> list[str]:
        return [e.name for e in self.entries]


@dataclass
class Batch:
    token_ids: np.ndarray              # (B, T) ints < vocab
    labels: np.ndarray                 # (B,) ints
    attention_mask: np.ndarray | None = None


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, dtype=np.float32):
    # Resample draws beyond 2 sigma, the usual truncated init.
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Model:
    """Parameter container plus the forward graph builder."""

    def __init__(self, config: ModelConfig, registry: LayerRegistry):
        self.config = config
        self.registry = registry

    # -- construction ------------------------------------------------------

    @staticmethod
    def build(config: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        config.validate()
        rng = np.random.default_rng(seed)
        reg = LayerRegistry()
        model = Model(config, reg)
        H, I = config.hidden, config.intermediate

        def dense_entry(name, fan_in, fan_out):
            e = reg.register(name, "dense")
            w = Parameter(_trunc_normal(rng, (fan_in, fan_out), dtype=dtype), e.layer_id)
            b = Parameter(np.zeros(fan_out, dtype=dtype), e.layer_id)
            e.params = [w, b]
            return e

        def layernorm_entry(name):
            e = reg.register(name, "layernorm")
            g = Parameter(np.ones(H, dtype=dtype), e.layer_id)
            b = Parameter(np.zeros(H, dtype=dtype), e.layer_id)
            e.params = [g, b]
            return e

        def embedding_entry(name, rows):
            e = reg.register(name, "embedding")
            w = Parameter(_trunc_normal(rng, (rows, H), dtype=dtype), e.layer_id)
            e.params = [w]
            return e

        embedding_entry("embeddings.word_embeddings", config.vocab)
        embedding_entry("embeddings.position_embeddings", config.max_seq)
        # Single-segment tasks feed a constant segment 0; the slot stays in
        # the registry so layer indices line up with the usual encoder naming.
        embedding_entry("embeddings.token_type_embeddings", config.type_vocab)
        layernorm_entry("embeddings.LayerNorm")
        for i in range(config.blocks):
            p = f"encoder.layer.{i}"
            dense_entry(f"{p}.attention.self.query", H, H)
            dense_entry(f"{p}.attention.self.key", H, H)
            dense_entry(f"{p}.attention.self.value", H, H)
            dense_entry(f"{p}.attention.output.dense", H, H)
            layernorm_entry(f"{p}.attention.output.LayerNorm")
            dense_entry(f"{p}.intermediate.dense", H, I)
            dense_entry(f"{p}.output.dense", I, H)
            layernorm_entry(f"{p}.output.LayerNorm")
        dense_entry("pooler.dense", H, H)
        dense_entry("classifier", H, config.num_classes)
        return model

    # -- freeze control ----------------------------------------------------

    def freeze_set(self, layer_ids):
        """Set update_enabled False for exactly the listed layers."""
        frozen = set(layer_ids)
        for lid in frozen:
            self.registry.by_id(lid)  # raises RegistryError on bad ids
        for entry in self.registry:
            enabled = entry.layer_id not in frozen
            for p in entry.params:
                p.update_enabled = enabled

    def parameters(self):
        for entry in self.registry:
            yield from entry.params

    def named_parameters(self):
        suffixes = {"dense": ("weight", "bias"), "layernorm": ("gamma", "beta"),
                    "embedding": ("weight",)}
        for entry in self.registry:
            for p, suffix in zip(entry.params, suffixes[entry.kind]):
                yield f"{entry.name}.{suffix}", p

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone_layer_data(self, layer_ids) -> dict:
        return {lid: [p.data.copy() for p in self.registry.by_id(lid).params]
                for lid in layer_ids}

    # -- forward -----------------------------------------------------------

    def _entry(self, name) -> RegistryEntry:
        return self.registry.by_name(name)

    def forward(self, batch: Batch) -> Tensor:
        """Logits (B, num_classes) for a batch of token sequences."""
        cfg = self.config
        ids = np.asarray(batch.token_ids)
        if ids.ndim != 2:
            raise ShapeError(f"token_ids must be (B, T), got {ids.shape}")
        B, Tn = ids.shape
        if Tn > cfg.max_seq:
            raise ShapeError(f"sequence length {Tn} exceeds configured maximum {cfg.max_seq}")
        if ids.size and ids.max() >= cfg.vocab:
            raise ShapeError(f"token id {ids.max()} out of vocabulary {cfg.vocab}")

        word = self._entry("embeddings.word_embeddings").params[0]
        pos = self._entry("embeddings.position_embeddings").params[0]
        tok_type = self._entry("embeddings.token_type_embeddings").params[0]

        x = T_add3(
            T.embedding(word, ids, save_name="embeddings.word_embeddings"),
            T.row_slice(pos, Tn),
            T.row_slice(tok_type, 1),
        )
        g, b = self._entry("embeddings.LayerNorm").params
        x = T.layernorm(x, g, b, save_name="embeddings.LayerNorm")

        mask_bias = None
        if batch.attention_mask is not None:
            m = np.asarray(batch.attention_mask, dtype=x.data.dtype)
            mask_bias = Tensor(((1.0 - m) * -1e9)[:, None, None, :].astype(x.data.dtype))

        for i in range(cfg.blocks):
            x = self._block(x, i, B, Tn, mask_bias)

        cls = T.first_token(x)
        pw, pb = self._entry("pooler.dense").params
        pooled = T.tanh(T.linear(cls, pw, pb, save_name="pooler.dense"), save_name="pooler.tanh")
        cw, cb = self._entry("classifier").params
        return T.linear(pooled, cw, cb, save_name="classifier")

    def _block(self, x: Tensor, i: int, B: int, Tn: int, mask_bias) -> Tensor:
        cfg = self.config
        p = f"encoder.layer.{i}"
        heads, H = cfg.heads, cfg.hidden
        dh = H // heads

        def split_heads(t):
            return T.transpose(T.reshape(t, (B, Tn, heads, dh)), (0, 2, 1, 3))

        attn_in = x
        if cfg.pre_norm:
            g, b = self._entry(f"{p}.attention.output.LayerNorm").params
            attn_in = T.layernorm(x, g, b, save_name=f"{p}.attention.output.LayerNorm")

        qw, qb = self._entry(f"{p}.attention.self.query").params
        kw, kb = self._entry(f"{p}.attention.self.key").params
        vw, vb = self._entry(f"{p}.attention.self.value").params
        q = split_heads(T.linear(attn_in, qw, qb, save_name=f"{p}.attention.self.query"))
        k = split_heads(T.linear(attn_in, kw, kb, save_name=f"{p}.attention.self.key"))
        v = split_heads(T.linear(attn_in, vw, vb, save_name=f"{p}.attention.self.value"))

        scores = T.scale(
            T.matmul(q, T.transpose(k, (0, 1, 3, 2)), compress="matsoft8",
                     save_name=f"{p}.attention.scores"),
            1.0 / math.sqrt(dh))
        if mask_bias is not None:
            scores = T.add(scores, mask_bias)
        probs = T.softmax(scores, axis=-1, compress="matsoft8",
                          save_name=f"{p}.attention.softmax")
        ctx = T.matmul(probs, v, compress="matsoft8", save_name=f"{p}.attention.context")
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, Tn, H))

        ow, ob = self._entry(f"{p}.attention.output.dense").params
        attn_out = T.linear(ctx, ow, ob, save_name=f"{p}.attention.output.dense")
        x = T.add(x, attn_out)
        if not cfg.pre_norm:
            g, b = self._entry(f"{p}.attention.output.LayerNorm").params
            x = T.layernorm(x, g, b, save_name=f"{p}.attention.output.LayerNorm")

        ffn_in = x
        if cfg.pre_norm:
            g, b = self._entry(f"{p}.output.LayerNorm").params
            ffn_in = T.layernorm(x, g, b, save_name=f"{p}.output.LayerNorm")

        iw, ib = self._entry(f"{p}.intermediate.dense").params
        h = T.gelu(T.linear(ffn_in, iw, ib, save_name=f"{p}.intermediate.dense"),
                   save_name=f"{p}.intermediate.gelu")
        dw, db = self._entry(f"{p}.output.dense").params
        # The one imbalanced input (4H wide): quantized to 8 bits when the
        # dense codec is on, evening its cached bytes out with the others.
        ffn_out = T.linear(h, dw, db, compress="dense8", save_name=f"{p}.output.dense")
        x = T.add(x, ffn_out)
        if not cfg.pre_norm:
            g, b = self._entry(f"{p}.output.LayerNorm").params
            x = T.layernorm(x, g, b, save_name=f"{p}.output.LayerNorm")
        return x

    # -- checkpointing -----------------------------------------------------

    def save_checkpoint(self, path: str):
        """Flat little-endian float32 container plus a text manifest."""
        offset = 0
        lines = []
        with open(path, "wb") as f:
            for name, p in self.named_parameters():
                buf = p.data.astype("<f4").tobytes()
                f.write(buf)
                dims = "x".join(str(d) for d in p.data.shape)
                lines.append(f"{name}\t{dims}\t{offset}\t{len(buf)}\n")
                offset += len(buf)
        with open(path + ".manifest", "w") as f:
            f.writelines(lines)

    def load_checkpoint(self, path: str):
        with open(path, "rb") as f:
            blob = f.read()
        params = dict(self.named_parameters())
        with open(path + ".manifest") as f:
            for line in f:
                name, dims, offset, nbytes = line.rstrip("\n").split("\t")
                shape = tuple(int(d) for d in dims.split("x"))
                arr = np.frombuffer(blob[int(offset):int(offset) + int(nbytes)],
                                    dtype="<f4").reshape(shape)
                p = params[name]
                if p.data.shape != shape:
                    raise ShapeError(f"checkpoint shape {shape} vs parameter {p.data.shape} for {name}")
                p.data = arr.astype(p.data.dtype)

    def copy(self) -> "Model":
        """Deep copy with identical parameter values (fresh registry)."""
        clone = Model.build(self.config, seed=0, dtype=next(self.parameters()).data.dtype)
        theirs = dict(clone.named_parameters())
        for name, p in self.named_parameters():
            theirs[name].data = p.data.copy()
        return clone


def T_add3(a, b, c):
    return T.add(T.add(a, b), c)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    return Model.build(config, seed, dtype)


def registry_size(blocks: int) -> int:
    """Freezable layer count for the standard layout: 4 + 8L + 2."""
    return 4 + 8 * blocks + 2
