"""Dense tensors with reverse-mode automatic differentiation.

The engine's distinguishing feature is a pluggable activation-saving path:
what an operation caches for its backward pass depends on whether the
owning layer is frozen and on the active compression config, while the
forward values themselves are always computed (and cached values always
decompressed) in plain floating point. Freezing or compressing therefore
never changes a forward output, only what is kept around and which
parameter gradients are produced.

A tape is recorded per iteration inside a `record()` context; `no_grad()`
runs forward-only. Tapes are single-threaded; independent tapes in
different threads do not interact.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .compression import CompressedActivation, FixedPointSpec, Q2_2, Q4_4
from .errors import ShapeError, SlimfitError

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


@dataclass
class CompressionConfig:
    """Which cached activations get compressed, and how.

    Compression applies to cached copies only. quant_dense covers the one
    imbalanced dense input per block (the 4x-wide FFN output dense),
    quant_matmul_softmax the attention score/probability buffers, and
    quant_gelu the GELU input. prune_layernorm applies top-k pruning to the
    standardized input of a LayerNorm only while that layer is frozen.
    """

    quant_dense: bool = False
    quant_matmul_softmax: bool = False
    quant_gelu: bool = False
    prune_layernorm: bool = False
    keep_frac: float = 0.1
    dense_spec: FixedPointSpec = Q4_4
    matmul_softmax_spec: FixedPointSpec = Q4_4
    gelu_spec: FixedPointSpec = Q2_2
    prune_by_magnitude: bool = True

    @classmethod
    def all_on(cls, **overrides) -> "CompressionConfig":
        kwargs = dict(quant_dense=True, quant_matmul_softmax=True,
                      quant_gelu=True, prune_layernorm=True)
        kwargs.update(overrides)
        return cls(**kwargs)


class Tensor:
    """n-dimensional array of reals plus an optional gradient buffer.

    float32 by default; building a graph from float64 leaves runs the whole
    graph at 64-bit, which is how gradient checking gets its precision.
    """

    __slots__ = ("data", "grad", "node")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif not (isinstance(data, np.ndarray) and arr.dtype == np.float64):
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Parameter(Tensor):
    """Trainable tensor belonging to one freezable layer.

    update_enabled mirrors the layer's frozen/active state: when False the
    backward pass neither caches this op's input activation nor produces a
    gradient for the parameter.
    """

    __slots__ = ("layer_id", "update_enabled")

    def __init__(self, data, layer_id: int, dtype=None):
        super().__init__(data, dtype)
        self.layer_id = layer_id
        self.update_enabled = True


class SavedValue:
    """One cached activation: a raw array or a CompressedActivation.

    kind tags the ledger category: "dynamic" buffers exist only while their
    layer is active, "static" ones survive any freeze decision, and
    "semi_static" ones (standardized LayerNorm inputs) shrink to a pruned
    form when their layer is frozen.
    """

    __slots__ = ("value", "kind", "name")

    def __init__(self, value, kind: str, name: str = ""):
        self.value = value
        self.kind = kind
        self.name = name

    def get(self, dtype=None) -> np.ndarray:
        if isinstance(self.value, CompressedActivation):
            return self.value.decompress(dtype or np.float32)
        return self.value

    @property
    def nbytes(self) -> int:
        if isinstance(self.value, CompressedActivation):
            return self.value.nbytes
        return int(self.value.nbytes)


class TapeNode:
    """One recorded operation: parents, cached values, backward closure."""

    __slots__ = ("op_kind", "parents", "saved", "update_enabled", "backward_fn", "shared_out")

    def __init__(self, op_kind, parents, saved, backward_fn, update_enabled=True):
        self.op_kind = op_kind
        self.parents = parents
        self.saved = saved
        self.backward_fn = backward_fn
        self.update_enabled = update_enabled
        self.shared_out = None  # SavedValue holding this node's own output, if reusable


class Tape:
    """Recording of one forward pass; owns the cached-activation ledger."""

    def __init__(self, compression: CompressionConfig | None = None):
        self.compression = compression
        self.nodes: list[TapeNode] = []

    def add(self, node: TapeNode):
        self.nodes.append(node)

    def cached_bytes(self) -> dict:
        """Cached activation bytes by kind, shared buffers counted once."""
        seen = set()
        totals = {"dynamic": 0, "static": 0, "semi_static": 0}
        for node in self.nodes:
            for sv in node.saved:
                if id(sv) in seen:
                    continue
                seen.add(id(sv))
                totals[sv.kind] += sv.nbytes
        totals["total"] = sum(totals.values())
        return totals

    def saved_records(self) -> list:
        """(name, kind, nbytes) per distinct cached buffer, for audits."""
        seen = set()
        out = []
        for node in self.nodes:
            for sv in node.saved:
                if id(sv) in seen:
                    continue
                seen.add(id(sv))
                out.append((sv.name, sv.kind, sv.nbytes))
        return out


class _EngineState(threading.local):
    def __init__(self):
        self.tape = None


_state = _EngineState()


class record:
    """Context manager that installs a fresh tape for one iteration."""

    def __init__(self, compression: CompressionConfig | None = None):
        self.tape = Tape(compression)
        self._prev = None

    def __enter__(self) -> Tape:
        self._prev = _state.tape
        _state.tape = self.tape
        return self.tape

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class no_grad:
    """Context manager that disables recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = None
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


def current_tape() -> Tape | None:
    return _state.tape


def _recording() -> bool:
    return _state.tape is not None


def _compression() -> CompressionConfig | None:
    tape = _state.tape
    return tape.compression if tape is not None else None


def _attach(out: Tensor, node: TapeNode):
    _state.tape.add(node)
    out.node = node


def _accumulate(t: Tensor, g: np.ndarray):
    if g is None:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# saving helpers


def _save_raw(arr: np.ndarray, kind: str, name: str) -> SavedValue:
    return SavedValue(arr, kind, name)


def _save_maybe_quant8(arr, enabled, spec, kind, name) -> SavedValue:
    if enabled:
        return SavedValue(CompressedActivation.quantized(arr, spec), kind, name)
    return SavedValue(arr, kind, name)


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor, *, compress: str | None = None,
           save_name: str = "matmul") -> Tensor:
    """Batched matrix product; leading dimensions broadcast.

    Both inputs are cached as static activations (each is needed for the
    other's gradient). If an input was produced by softmax, its already
    cached output buffer is shared instead of caching a second copy.
    compress="matsoft8" quantizes the cached copies to 8 bits when the
    matmul/softmax codec is enabled.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} x {bd.shape}")
    try:
        out_data = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul shapes not broadcastable: {ad.shape} x {bd.shape}") from exc
    out = Tensor(out_data)
    if not _recording():
        return out

    cfg = _compression()
    quant = (compress == "matsoft8" and cfg is not None and cfg.quant_matmul_softmax)
    spec = cfg.matmul_softmax_spec if cfg is not None else None

    def save_side(t: Tensor, side: str) -> SavedValue:
        node = t.node
        if node is not None and node.shared_out is not None:
            return node.shared_out
        return _save_maybe_quant8(t.data, quant, spec, "static", f"{save_name}.{side}")

    sv_a = save_side(a, "lhs")
    sv_b = save_side(b, "rhs")
    dt = ad.dtype

    def backward(g):
        av = sv_a.get(dt)
        bv = sv_b.get(dt)
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    _attach(out, TapeNode("matmul", (a, b), [sv_a, sv_b], backward))
    return out


def linear(x: Tensor, weight: Parameter, bias: Parameter | None = None, *,
           compress: str | None = None, save_name: str = "dense") -> Tensor:
    """Dense layer y = x @ W + b with freeze-aware input caching.

    The input is a dynamic activation: it is cached (for the weight
    gradient) only while the layer is update-enabled. When frozen, only the
    input gradient y_hat @ W^T is produced, which needs no cached
    activation because the weight is a parameter. compress="dense8"
    quantizes the cached input to 8 bits when the dense codec is enabled
    (the load-balancing path for the imbalanced FFN output dense).
    """
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(f"linear input width {x.data.shape} vs weight {weight.data.shape}")
    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    out = Tensor(out_data)
    if not _recording():
        return out

    enabled = weight.update_enabled
    cfg = _compression()
    quant = (compress == "dense8" and cfg is not None and cfg.quant_dense)
    saved = []
    sv_x = None
    if enabled:
        sv_x = _save_maybe_quant8(x.data, quant, cfg.dense_spec if cfg else None,
                                  "dynamic", f"{save_name}.input")
        saved.append(sv_x)
    dt = x.data.dtype

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        _accumulate(x, (g @ weight.data.T).reshape(x.shape))
        if enabled:
            xv = sv_x.get(dt).reshape(-1, weight.data.shape[0])
            _accumulate(weight, xv.T @ g2)
            if bias is not None:
                _accumulate(bias, g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    _attach(out, TapeNode("linear", parents, saved, backward, update_enabled=enabled))
    return out


def gelu(x: Tensor, *, save_name: str = "gelu") -> Tensor:
    """GELU via the tanh approximation 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715x^3))).

    The input is a static activation (GELU has no parameters and can never
    be frozen); it is cached 4-bit packed when the GELU codec is enabled.
    """
    xd = x.data
    inner = SQRT_2_OVER_PI * (xd + GELU_CUBIC * xd ** 3)
    out = Tensor(0.5 * xd * (1.0 + np.tanh(inner)))
    if not _recording():
        return out

    cfg = _compression()
    if cfg is not None and cfg.quant_gelu:
        sv = SavedValue(CompressedActivation.packed(xd, cfg.gelu_spec),
                        "static", f"{save_name}.input")
    else:
        sv = _save_raw(xd, "static", f"{save_name}.input")
    dt = xd.dtype

    def backward(g):
        xv = sv.get(dt)
        u = SQRT_2_OVER_PI * (xv + GELU_CUBIC * xv ** 3)
        t = np.tanh(u)
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xv ** 2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t ** 2) * du))

    _attach(out, TapeNode("gelu", (x,), [sv], backward))
    return out


def softmax(x: Tensor, axis: int = -1, *, compress: str | None = None,
            save_name: str = "softmax") -> Tensor:
    """Shift-by-max softmax along `axis`.

    The output (not the input) is what the backward pass needs, so the
    output is cached; a downstream matmul consuming this tensor shares the
    same cached buffer instead of saving its own copy.
    """
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {xd.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(out_data)
    if not _recording():
        return out

    cfg = _compression()
    quant = (compress == "matsoft8" and cfg is not None and cfg.quant_matmul_softmax)
    sv = _save_maybe_quant8(out_data, quant, cfg.matmul_softmax_spec if cfg else None,
                            "static", f"{save_name}.probs")
    dt = xd.dtype

    def backward(g):
        p = sv.get(dt)
        _accumulate(x, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    node = TapeNode("softmax", (x,), [sv], backward)
    node.shared_out = sv
    _attach(out, node)
    return out


def layernorm(x: Tensor, gamma: Parameter, beta: Parameter, eps: float = 1e-5, *,
              save_name: str = "layernorm") -> Tensor:
    """Layer normalization over the last axis with a semi-static cache.

    Forward standardizes with the population variance, then applies the
    affine pair. What is cached is the standardized input x_tilde plus the
    per-row reciprocal std. While the layer is update-enabled the full
    x_tilde is kept and the backward pass is exact, including the gamma and
    beta gradients. While frozen, the gamma/beta gradients are skipped
    outright, and if the pruning codec is on, x_tilde is cached as its
    top-k magnitude survivors only; the input gradient is then computed
    from that pruned reconstruction.
    """
    H = x.data.shape[-1]
    if gamma.data.shape != (H,) or beta.data.shape != (H,):
        raise ShapeError(f"layernorm affine shape {gamma.data.shape} vs last axis {H}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xt = (x.data - mean) * rstd
    out = Tensor(xt * gamma.data + beta.data)
    if not _recording():
        return out

    enabled = gamma.update_enabled
    cfg = _compression()
    if not enabled and cfg is not None and cfg.prune_layernorm:
        sv_xt = SavedValue(CompressedActivation.pruned(xt, cfg.keep_frac, cfg.prune_by_magnitude),
                           "semi_static", f"{save_name}.xtilde")
    else:
        sv_xt = _save_raw(xt, "semi_static", f"{save_name}.xtilde")
    sv_rstd = _save_raw(rstd, "static", f"{save_name}.rstd")
    dt = x.data.dtype

    def backward(g):
        xtv = sv_xt.get(dt)
        rs = sv_rstd.get(dt)
        gg = gamma.data * g * rs / H
        _accumulate(x, H * gg - gg.sum(axis=-1, keepdims=True)
                    - xtv * (gg * xtv).sum(axis=-1, keepdims=True))
        if enabled:
            flat = (xtv * g).reshape(-1, H)
            _accumulate(gamma, flat.sum(axis=0))
            _accumulate(beta, g.reshape(-1, H).sum(axis=0))

    _attach(out, TapeNode("layernorm", (x, gamma, beta), [sv_xt, sv_rstd],
                          backward, update_enabled=enabled))
    return out


def embedding(table: Parameter, ids: np.ndarray, *, save_name: str = "embedding") -> Tensor:
    """Row lookup out = table[ids]; ids are cached only while trainable."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding ids out of range for table {table.data.shape}")
    out = Tensor(table.data[ids])
    if not _recording():
        return out

    enabled = table.update_enabled
    saved = []
    sv_ids = None
    if enabled:
        sv_ids = _save_raw(ids.astype(np.int32), "dynamic", f"{save_name}.ids")
        saved.append(sv_ids)

    def backward(g):
        if enabled:
            gt = np.zeros_like(table.data)
            np.add.at(gt, sv_ids.value, g)
            _accumulate(table, gt)

    _attach(out, TapeNode("embedding", (table,), saved, backward, update_enabled=enabled))
    return out


def row_slice(table: Parameter, n: int) -> Tensor:
    """First n rows of a parameter table (position/segment embeddings).

    Caches nothing: the gradient is a sum of the upstream gradient into the
    leading rows.
    """
    if n > table.data.shape[0]:
        raise ShapeError(f"row_slice wants {n} rows from table {table.data.shape}")
    out = Tensor(table.data[:n])
    if not _recording():
        return out

    enabled = table.update_enabled

    def backward(g):
        if enabled:
            gt = np.zeros_like(table.data)
            gt[:n] = g
            _accumulate(table, gt)

    _attach(out, TapeNode("row_slice", (table,), [], backward, update_enabled=enabled))
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting add; caches nothing."""
    try:
        out = Tensor(a.data + b.data)
    except ValueError as exc:
        raise ShapeError(f"add shapes not broadcastable: {a.shape} + {b.shape}") from exc
    if not _recording():
        return out

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    _attach(out, TapeNode("add", (a, b), [], backward))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; both inputs cached raw."""
    try:
        out = Tensor(a.data * b.data)
    except ValueError as exc:
        raise ShapeError(f"mul shapes not broadcastable: {a.shape} * {b.shape}") from exc
    if not _recording():
        return out
    sv_a = _save_raw(a.data, "static", "mul.lhs")
    sv_b = _save_raw(b.data, "static", "mul.rhs")

    def backward(g):
        _accumulate(a, _unbroadcast(g * sv_b.value, a.shape))
        _accumulate(b, _unbroadcast(g * sv_a.value, b.shape))

    _attach(out, TapeNode("mul", (a, b), [sv_a, sv_b], backward))
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a constant; caches nothing."""
    out = Tensor(x.data * x.data.dtype.type(c))
    if not _recording():
        return out

    def backward(g):
        _accumulate(x, g * x.data.dtype.type(c))

    _attach(out, TapeNode("scale", (x,), [], backward))
    return out


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    if not _recording():
        return out
    inv = np.argsort(axes)

    def backward(g):
        _accumulate(x, np.transpose(g, inv))

    _attach(out, TapeNode("transpose", (x,), [], backward))
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    if not _recording():
        return out

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    _attach(out, TapeNode("reshape", (x,), [], backward))
    return out


def first_token(x: Tensor) -> Tensor:
    """Select position 0 along axis 1: (B, T, H) -> (B, H)."""
    out = Tensor(x.data[:, 0, :])
    if not _recording():
        return out

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, 0, :] = g
        _accumulate(x, gx)

    _attach(out, TapeNode("first_token", (x,), [], backward))
    return out


def tanh(x: Tensor, *, save_name: str = "tanh") -> Tensor:
    """Elementwise tanh; the output is cached (1 - y^2 backward)."""
    out_data = np.tanh(x.data)
    out = Tensor(out_data)
    if not _recording():
        return out
    sv = _save_raw(out_data, "static", f"{save_name}.output")

    def backward(g):
        _accumulate(x, g * (1.0 - sv.value ** 2))

    _attach(out, TapeNode("tanh", (x,), [sv], backward))
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray, *,
                  save_name: str = "loss") -> Tensor:
    """Mean cross-entropy of logits (B, C) against integer labels (B,)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    B = logits.shape[0]
    nll = -(z[np.arange(B), labels] - np.log(e.sum(axis=1)))
    out = Tensor(np.asarray(nll.mean(), dtype=logits.data.dtype))
    if not _recording():
        return out
    sv_probs = _save_raw(probs, "static", f"{save_name}.probs")
    sv_labels = _save_raw(labels.astype(np.int32), "static", f"{save_name}.labels")

    def backward(g):
        p = sv_probs.value.copy()
        p[np.arange(B), sv_labels.value] -= 1.0
        _accumulate(logits, g * p / B)

    _attach(out, TapeNode("cross_entropy", (logits,), [sv_probs, sv_labels], backward))
    return out


# ---------------------------------------------------------------------------
# backward traversal


def backward(loss: Tensor):
    """Reverse-topological sweep filling gradients from a scalar loss.

    Gradients accumulate into every tensor on the path; parameters of
    frozen layers receive none (their ops produced no weight-gradient
    closure), while input gradients pass through frozen layers unchanged.
    """
    if loss.size != 1:
        raise SlimfitError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t.grad is None:
            continue
        t.node.backward_fn(t.grad)
