"""Analytic accounting of cached-activation memory.

Each buffer the engine caches for the backward pass is enumerated
symbolically from the model configuration: dynamic buffers (dense-layer and
embedding inputs) that vanish when their layer freezes, static buffers
(attention score/probability tensors, GELU inputs, per-row norm scalars,
loss bookkeeping) that survive any freeze decision, and semi-static buffers
(standardized LayerNorm inputs) that shrink to a pruned form when frozen.
Byte counts use the same codec formulas as the engine, so an instrumented
run can be audited against the analytic numbers exactly.

A run's reported footprint is the maximum over its iterations: a budget has
to cover the most expensive iteration, which is also why a constant
per-iteration freeze rate saves memory while progressively growing freeze
sets do not.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig
from .scheduler import FreezeDecision, frozen_count
from .tensor import CompressionConfig

BYTES_F32 = 4
BYTES_I32 = 4
BYTES_ADAM_MOMENTS = 8   # two float32 moment buffers per parameter element


@dataclass(frozen=True)
class ActivationRecord:
    """One cached buffer: who owns it, how big, and how it is encoded."""

    name: str
    kind: str                 # dynamic | static | semi_static
    count: int                # element count
    layer_id: int | None      # owning freezable layer, None for unfreezable ops
    codec_slot: str = "raw"   # raw | dense8 | matsoft8 | gelu4 | ln_prune | int32

    def bytes_under(self, codecs: CompressionConfig | None, frozen: bool) -> int:
        """Cached bytes for this record given codecs and the owner's state."""
        if self.codec_slot == "int32":
            return self.count * BYTES_I32
        if codecs is not None:
            if self.codec_slot == "dense8" and codecs.quant_dense:
                return self.count  # one int8 code per element
            if self.codec_slot == "matsoft8" and codecs.quant_matmul_softmax:
                return self.count if codecs.matmul_softmax_spec.bits == 8 \
                    else math.ceil(self.count / 2)
            if self.codec_slot == "gelu4" and codecs.quant_gelu:
                return math.ceil(self.count / 2)  # two 4-bit codes per byte
            if self.codec_slot == "ln_prune" and codecs.prune_layernorm and frozen:
                return math.ceil(codecs.keep_frac * self.count) * (BYTES_F32 + BYTES_I32)
        return self.count * BYTES_F32


@dataclass
class MemoryReport:
    config: ModelConfig
    batch_size: int
    freeze_rate: float
    per_layer: list = field(default_factory=list)   # (name, kind, bytes)
    totals: dict = field(default_factory=dict)      # dynamic/static/semi_static/activations_total
    per_iteration_totals: list = field(default_factory=list)
    max_over_iterations: int = 0
    aside: dict = field(default_factory=dict)       # parameter/gradient/optimizer bytes

    def to_dict(self) -> dict:
        return {
            "model": {"blocks": self.config.blocks, "hidden": self.config.hidden,
                      "heads": self.config.heads, "max_seq": self.config.max_seq,
                      "num_classes": self.config.num_classes},
            "batch_size": self.batch_size,
            "freeze_rate": self.freeze_rate,
            "records": [{"name": n, "kind": k, "bytes": b} for n, k, b in self.per_layer],
            "totals": dict(self.totals),
            "per_iteration_totals": list(self.per_iteration_totals),
            "max_over_iterations": self.max_over_iterations,
            "aside": dict(self.aside),
        }


def enumerate_records(config: ModelConfig, batch_size: int) -> list[ActivationRecord]:
    """Every buffer one forward pass caches, in forward order."""
    B, Tn, H = batch_size, config.max_seq, config.hidden
    heads, C = config.heads, config.num_classes
    BTH = B * Tn * H
    recs = [
        ActivationRecord("embeddings.word_embeddings.ids", "dynamic", B * Tn, 0, "int32"),
        ActivationRecord("embeddings.LayerNorm.xtilde", "semi_static", BTH, 3, "ln_prune"),
        ActivationRecord("embeddings.LayerNorm.rstd", "static", B * Tn, None),
    ]
    for i in range(config.blocks):
        p = f"encoder.layer.{i}"
        base = 4 + 8 * i
        recs += [
            ActivationRecord(f"{p}.attention.self.query.input", "dynamic", BTH, base + 0),
            ActivationRecord(f"{p}.attention.self.key.input", "dynamic", BTH, base + 1),
            ActivationRecord(f"{p}.attention.self.value.input", "dynamic", BTH, base + 2),
            # score matmul caches both head-split operands (same element
            # count as the unsplit tensors)
            ActivationRecord(f"{p}.attention.scores.lhs", "static", BTH, None, "matsoft8"),
            ActivationRecord(f"{p}.attention.scores.rhs", "static", BTH, None, "matsoft8"),
            # probabilities carry the head dimension; the buffer is shared
            # between softmax and the context matmul and counted once
            ActivationRecord(f"{p}.attention.softmax.probs", "static",
                             B * heads * Tn * Tn, None, "matsoft8"),
            ActivationRecord(f"{p}.attention.context.rhs", "static", BTH, None, "matsoft8"),
            ActivationRecord(f"{p}.attention.output.dense.input", "dynamic", BTH, base + 3),
            ActivationRecord(f"{p}.attention.output.LayerNorm.xtilde", "semi_static",
                             BTH, base + 4, "ln_prune"),
            ActivationRecord(f"{p}.attention.output.LayerNorm.rstd", "static", B * Tn, None),
            ActivationRecord(f"{p}.intermediate.dense.input", "dynamic", BTH, base + 5),
            ActivationRecord(f"{p}.intermediate.gelu.input", "static", 4 * BTH, None, "gelu4"),
            # the single imbalanced dynamic input, 4x wider than the rest
            ActivationRecord(f"{p}.output.dense.input", "dynamic", 4 * BTH, base + 6, "dense8"),
            ActivationRecord(f"{p}.output.LayerNorm.xtilde", "semi_static",
                             BTH, base + 7, "ln_prune"),
            ActivationRecord(f"{p}.output.LayerNorm.rstd", "static", B * Tn, None),
        ]
    n = 4 + 8 * config.blocks + 2
    recs += [
        ActivationRecord("pooler.dense.input", "dynamic", B * H, n - 2),
        ActivationRecord("pooler.tanh.output", "static", B * H, None),
        ActivationRecord("classifier.input", "dynamic", B * H, n - 1),
        ActivationRecord("loss.probs", "static", B * C, None),
        ActivationRecord("loss.labels", "static", B, None, "int32"),
    ]
    return recs


def block_trainable_counts(config: ModelConfig, batch_size: int) -> list[tuple[str, int]]:
    """Input element counts for one block's eight trainable layers."""
    B, Tn, H = batch_size, config.max_seq, config.hidden
    BTH = B * Tn * H
    return [
        ("attention.self.query", BTH),
        ("attention.self.key", BTH),
        ("attention.self.value", BTH),
        ("attention.output.dense", BTH),
        ("attention.output.LayerNorm", BTH),
        ("intermediate.dense", BTH),
        ("output.dense", 4 * BTH),
        ("output.LayerNorm", BTH),
    ]


def imbalance_ratio(config: ModelConfig) -> float:
    """Max over min input element count across a block's trainable layers."""
    counts = [c for _, c in block_trainable_counts(config, batch_size=1)]
    return max(counts) / min(counts)


def imbalance_byte_ratio(config: ModelConfig, codecs: CompressionConfig) -> float:
    """Same ratio in bytes once the wide input's codec is applied."""
    B, Tn, H = 1, config.max_seq, config.hidden
    wide = ActivationRecord("output.dense.input", "dynamic", 4 * B * Tn * H, 0, "dense8")
    narrow = ActivationRecord("intermediate.dense.input", "dynamic", B * Tn * H, 0)
    return wide.bytes_under(codecs, False) / narrow.bytes_under(codecs, False)


def account_iteration(config: ModelConfig, batch_size: int, decision: FreezeDecision,
                      codecs: CompressionConfig | None = None) -> MemoryReport:
    """Activation bytes for one iteration under a freeze decision.

    Dynamic records count only while their layer is active; static records
    always count; semi-static records count full-size when active and at
    their pruned size when frozen (if pruning is enabled).
    """
    frozen = decision.frozen_ids
    per_layer = []
    totals = {"dynamic": 0, "static": 0, "semi_static": 0}
    for rec in enumerate_records(config, batch_size):
        is_frozen = rec.layer_id in frozen if rec.layer_id is not None else False
        if rec.kind == "dynamic" and is_frozen:
            continue
        b = rec.bytes_under(codecs, is_frozen)
        per_layer.append((rec.name, rec.kind, b))
        totals[rec.kind] += b
    totals["activations_total"] = sum(totals.values())

    report = MemoryReport(config, batch_size, freeze_rate=len(frozen) / max(1, _n_layers(config)),
                          per_layer=per_layer, totals=totals,
                          per_iteration_totals=[totals["activations_total"]],
                          max_over_iterations=totals["activations_total"])
    report.aside = parameter_aside(config)
    return report


def _n_layers(config: ModelConfig) -> int:
    return 4 + 8 * config.blocks + 2


def parameter_aside(config: ModelConfig) -> dict:
    """Closed-form weight/gradient/optimizer byte counts, reported separately."""
    H, I, V = config.hidden, config.intermediate, config.vocab
    per_block = 4 * (H * H + H) + 2 * (2 * H) + (H * I + I) + (I * H + H)
    emb = V * H + config.max_seq * H + config.type_vocab * H + 2 * H
    head = (H * H + H) + (H * config.num_classes + config.num_classes)
    n_params = emb + config.blocks * per_block + head
    return {
        "parameter_bytes": n_params * BYTES_F32,
        "gradient_bytes": n_params * BYTES_F32,
        "optimizer_moment_bytes": n_params * BYTES_ADAM_MOMENTS,
    }


def budget_decision(config: ModelConfig, freeze_rate: float) -> FreezeDecision:
    """Worst-case decision at a freeze rate: the cheapest layers freeze first.

    With the most expensive dynamic contributors left active, the resulting
    footprint is the number a memory budget must cover (the max over any
    schedule at this rate).
    """
    n = _n_layers(config)
    k = frozen_count(n, freeze_rate)
    cost = np.zeros(n)
    for rec in enumerate_records(config, batch_size=1):
        if rec.layer_id is None:
            continue
        if rec.kind == "dynamic":
            cost[rec.layer_id] += rec.count * BYTES_F32
        elif rec.kind == "semi_static":
            cost[rec.layer_id] += rec.count * BYTES_F32 * 0.8  # active-vs-pruned delta
    order = np.argsort(cost, kind="stable")
    frozen = frozenset(int(i) for i in order[:k])
    return FreezeDecision(0, frozen, frozenset(range(n)) - frozen)


def account_budget(config: ModelConfig, batch_size: int, freeze_rate: float,
                   codecs: CompressionConfig | None = None) -> MemoryReport:
    """Budget-style report at a freeze rate (worst-case iteration)."""
    report = account_iteration(config, batch_size, budget_decision(config, freeze_rate), codecs)
    report.freeze_rate = freeze_rate
    return report


def account_schedule(config: ModelConfig, batch_size: int, decisions,
                     codecs: CompressionConfig | None = None) -> MemoryReport:
    """Fold per-iteration accounts over a schedule; footprint is the max."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("account_schedule needs at least one decision")
    per_iter = []
    worst = None
    for dec in decisions:
        rep = account_iteration(config, batch_size, dec, codecs)
        per_iter.append(rep.totals["activations_total"])
        if worst is None or rep.totals["activations_total"] > worst.totals["activations_total"]:
            worst = rep
    worst.per_iteration_totals = per_iter
    worst.max_over_iterations = max(per_iter)
    return worst


@dataclass
class AuditResult:
    analytic: dict
    instrumented: dict
    relative_difference: float

    @property
    def within(self) -> float:
        return self.relative_difference


def audit_runtime(config: ModelConfig, batch_size: int, decision: FreezeDecision,
                  codecs: CompressionConfig | None, tape) -> AuditResult:
    """Compare analytic accounting against a recorded tape's cached bytes."""
    analytic = account_iteration(config, batch_size, decision, codecs).totals
    measured = tape.cached_bytes()
    instrumented = {
        "dynamic": measured["dynamic"],
        "static": measured["static"],
        "semi_static": measured["semi_static"],
        "activations_total": measured["total"],
    }
    a, m = analytic["activations_total"], instrumented["activations_total"]
    rel = abs(a - m) / max(1, m)
    return AuditResult(analytic, instrumented, rel)
