"""Reverse-mode automatic differentiation over float32 tensors.

Every operation records onto an explicit :class:`Tape` whose records stay in
topological order; :func:`backward` replays them in exact reverse order and
is free of side effects, so repeated calls yield identical gradients.

Numeric conventions (the underlying math leaves these open, so they are
fixed here for reproducibility):

* values are float32; reductions, convolutions and dense products
  accumulate in float64 before rounding back,
* relu / hinge_pos use subgradient 0 at exactly 0,
* maxpool ties resolve to the first block entry in row-major order,
* batchnorm uses eps=1e-5 and running-stat momentum 0.1.

The shape contracts below are per-sample (e.g. conv input ``[C,D,H,W]``);
conv3d, maxpool3d, batchnorm3d, dense and flatten_rows also accept an extra
leading batch axis, which the training code uses to keep BLAS matrices
large.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "GradientStore",
    "BatchNormState",
    "conv3d",
    "maxpool3d",
    "dense",
    "relu",
    "tanh",
    "sigmoid",
    "log",
    "hinge_pos",
    "add",
    "sub",
    "mul",
    "scale",
    "batchnorm3d",
    "concat",
    "mean_of_set",
    "flatten",
    "flatten_rows",
    "take_row",
    "dropout",
    "reduce_sum",
    "backward",
    "grad_check",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A float32 n-d array, optionally bound to a node of a Tape.

    ``data`` exposes the flat row-major buffer; a tensor not bound to any
    tape has ``node is None``.
    """

    __slots__ = ("array", "node", "_tape_uid")

    def __init__(self, values, node: Optional[int] = None, tape_uid: Optional[int] = None):
        arr = np.asarray(values, dtype=np.float32)
        if arr.size == 0:
            raise ShapeError(f"tensor must have extents >= 1, got shape {arr.shape}")
        self.array = np.ascontiguousarray(arr)
        self.node = node
        self._tape_uid = tape_uid

    @property
    def shape(self) -> tuple:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major float32 view of the buffer."""
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        return self.array.size

    def detach(self) -> "Tensor":
        """Same values, no tape binding (buffer is shared, not copied)."""
        return Tensor(self.array)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.array.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node})"


@dataclass(frozen=True)
class TapeRecord:
    kind: str
    inputs: tuple
    output: int
    saved: tuple


class Tape:
    """Append-only record of primitive applications in topological order."""

    _uids = itertools.count(1)

    def __init__(self):
        self.uid = next(Tape._uids)
        self.records: list[TapeRecord] = []
        self.node_shapes: list[tuple] = []

    @property
    def n_nodes(self) -> int:
        return len(self.node_shapes)

    def watch(self, t: Tensor) -> Tensor:
        """Register a tensor as a leaf node (idempotent on this tape)."""
        self._bind(t)
        return t

    def _bind(self, t: Tensor) -> int:
        if t._tape_uid == self.uid and t.node is not None:
            return t.node
        nid = self._alloc(t.shape)
        t.node = nid
        t._tape_uid = self.uid
        return nid

    def _alloc(self, shape) -> int:
        self.node_shapes.append(tuple(shape))
        return len(self.node_shapes) - 1

    def _emit(self, kind: str, inputs: Sequence[Tensor], out_values: np.ndarray,
              saved: tuple = ()) -> Tensor:
        ids = tuple(self._bind(t) for t in inputs)
        out_id = self._alloc(out_values.shape)
        self.records.append(TapeRecord(kind, ids, out_id, saved))
        return Tensor(out_values, node=out_id, tape_uid=self.uid)


class GradientStore:
    """Gradient buffer per tape node; nodes backward never reached read as zeros."""

    def __init__(self, tape: Tape, grads: dict):
        self._shapes = tape.node_shapes
        self._grads = grads

    def __getitem__(self, key) -> np.ndarray:
        nid = key.node if isinstance(key, Tensor) else key
        if nid is None:
            raise KeyError("tensor is not bound to the tape")
        g = self._grads.get(nid)
        if g is None:
            g = np.zeros(self._shapes[nid], dtype=np.float32)
            self._grads[nid] = g
        return g


def _result(tape: Optional[Tape], kind: str, inputs: Sequence[Tensor],
            out: np.ndarray, saved: tuple = ()) -> Tensor:
    if tape is None:
        return Tensor(out)
    return tape._emit(kind, inputs, out, saved)


def _canon5(arr: np.ndarray, what: str):
    """View a [C,D,H,W] or [B,C,D,H,W] array as batched 5-D."""
    if arr.ndim == 4:
        return arr[None], False
    if arr.ndim == 5:
        return arr, True
    raise ShapeError(f"{what} must be 4-D [C,D,H,W] or 5-D [B,C,D,H,W], got {arr.shape}")


# ---------------------------------------------------------------------------
# convolution / pooling / dense


def conv3d(inp: Tensor, kernels: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3x3x3 convolution, stride 1, zero padding 1 (spatial shape preserved)."""
    x5, batched = _canon5(inp.array, "conv3d input")
    k = kernels.array
    if k.ndim != 5 or k.shape[2:] != (3, 3, 3):
        raise ShapeError(f"kernels must be [C_out,C_in,3,3,3], got {k.shape}")
    if k.shape[1] != x5.shape[1]:
        raise ShapeError(
            f"input has {x5.shape[1]} channels but kernels expect {k.shape[1]} "
            f"(input {inp.shape}, kernels {k.shape})")
    if bias.shape != (k.shape[0],):
        raise ShapeError(f"bias must be [{k.shape[0]}], got {bias.shape}")
    out = _kernels.conv3d_forward(x5, k, bias.array)
    if not batched:
        out = out[0]
    return _result(tape, "conv3d", (inp, kernels, bias), out, saved=(x5, k, batched))


def _vjp_conv3d(rec: TapeRecord, g: np.ndarray):
    x5, k, batched = rec.saved
    g5 = g if batched else g[None]
    gx = _kernels.conv3d_grad_input(g5, k)
    gk = _kernels.conv3d_grad_kernels(x5, g5, k.shape)
    gb = g5.sum(axis=(0, 2, 3, 4), dtype=np.float64).astype(np.float32)
    if not batched:
        gx = gx[0]
    return gx, gk, gb


def maxpool3d(inp: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2x2 max pooling over disjoint blocks; gradient goes to the first
    (row-major) argmax voxel of each block."""
    x5, batched = _canon5(inp.array, "maxpool3d input")
    b, c, d, h, w = x5.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"maxpool3d needs even spatial extents, got {(d, h, w)}")
    blocks = (
        x5.reshape(b, c, d // 2, 2, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(b, c, d // 2, h // 2, w // 2, 8)
    )
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    out = np.ascontiguousarray(out)
    if not batched:
        out = out[0]
    return _result(tape, "maxpool3d", (inp,), out,
                   saved=(arg.astype(np.uint8), x5.shape, batched))


def _vjp_maxpool3d(rec: TapeRecord, g: np.ndarray):
    arg, in_shape, batched = rec.saved
    b, c, d, h, w = in_shape
    g5 = g if batched else g[None]
    spread = np.zeros((b, c, d // 2, h // 2, w // 2, 8), dtype=np.float32)
    np.put_along_axis(spread, arg[..., None].astype(np.intp), g5[..., None], axis=-1)
    gx = (
        spread.reshape(b, c, d // 2, h // 2, w // 2, 2, 2, 2)
        .transpose(0, 1, 2, 5, 3, 6, 4, 7)
        .reshape(in_shape)
    )
    gx = np.ascontiguousarray(gx)
    return (gx if batched else gx[0],)


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Affine map y = W x + b for x of shape [N] (or row-wise for [B,N])."""
    w = weight.array
    if w.ndim != 2:
        raise ShapeError(f"weight must be 2-D [M,N], got {w.shape}")
    xa = x.array
    if xa.ndim not in (1, 2) or xa.shape[-1] != w.shape[1]:
        raise ShapeError(
            f"dense input {xa.shape} incompatible with weight {w.shape}")
    if bias.shape != (w.shape[0],):
        raise ShapeError(f"bias must be [{w.shape[0]}], got {bias.shape}")
    x2 = xa if xa.ndim == 2 else xa[None]
    out = (x2.astype(np.float64) @ w.astype(np.float64).T
           + bias.array.astype(np.float64)).astype(np.float32)
    if xa.ndim == 1:
        out = out[0]
    return _result(tape, "dense", (x, weight, bias), out, saved=(xa, w))


def _vjp_dense(rec: TapeRecord, g: np.ndarray):
    xa, w = rec.saved
    g2 = g if g.ndim == 2 else g[None]
    x2 = xa if xa.ndim == 2 else xa[None]
    gx = (g2.astype(np.float64) @ w.astype(np.float64)).astype(np.float32)
    gw = (g2.astype(np.float64).T @ x2.astype(np.float64)).astype(np.float32)
    gb = g2.sum(axis=0, dtype=np.float64).astype(np.float32)
    if xa.ndim == 1:
        gx = gx[0]
    return gx, gw, gb


# ---------------------------------------------------------------------------
# pointwise


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.maximum(x.array, np.float32(0.0))
    return _result(tape, "relu", (x,), out, saved=(x.array > 0,))


def hinge_pos(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """max(x, 0); the positive-part hinge used by the monotonicity penalty."""
    out = np.maximum(x.array, np.float32(0.0))
    return _result(tape, "hinge_pos", (x,), out, saved=(x.array > 0,))


def _vjp_relu(rec: TapeRecord, g: np.ndarray):
    (mask,) = rec.saved
    return (np.where(mask, g, np.float32(0.0)),)


def tanh(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.tanh(x.array.astype(np.float64)).astype(np.float32)
    return _result(tape, "tanh", (x,), out, saved=(out,))


def _vjp_tanh(rec: TapeRecord, g: np.ndarray):
    (y,) = rec.saved
    return ((g.astype(np.float64) * (1.0 - y.astype(np.float64) ** 2)).astype(np.float32),)


def sigmoid(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    x64 = x.array.astype(np.float64)
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-x64))).astype(np.float32)
    return _result(tape, "sigmoid", (x,), out, saved=(out,))


def _vjp_sigmoid(rec: TapeRecord, g: np.ndarray):
    (y,) = rec.saved
    y64 = y.astype(np.float64)
    return ((g.astype(np.float64) * y64 * (1.0 - y64)).astype(np.float32),)


def log(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Natural log; the caller is responsible for keeping operands positive."""
    out = np.log(x.array.astype(np.float64)).astype(np.float32)
    return _result(tape, "log", (x,), out, saved=(x.array,))


def _vjp_log(rec: TapeRecord, g: np.ndarray):
    (xa,) = rec.saved
    return ((g.astype(np.float64) / xa.astype(np.float64)).astype(np.float32),)


def _binary(kind: str, a: Tensor, b: Tensor, tape: Optional[Tape], out, saved=()):
    if a.shape != b.shape:
        raise ShapeError(f"{kind} needs equal shapes, got {a.shape} vs {b.shape}")
    return _result(tape, kind, (a, b), out, saved)


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return _binary("add", a, b, tape, a.array + b.array)


def sub(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return _binary("sub", a, b, tape, a.array - b.array)


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    return _binary("mul", a, b, tape, a.array * b.array, saved=(a.array, b.array))


def _vjp_add(rec: TapeRecord, g: np.ndarray):
    return g.copy(), g.copy()


def _vjp_sub(rec: TapeRecord, g: np.ndarray):
    return g.copy(), -g


def _vjp_mul(rec: TapeRecord, g: np.ndarray):
    a, b = rec.saved
    return g * b, g * a


def scale(x: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    f = np.float32(factor)
    return _result(tape, "scale", (x,), x.array * f, saved=(f,))


def _vjp_scale(rec: TapeRecord, g: np.ndarray):
    (f,) = rec.saved
    return (g * f,)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics; empty until the first train-mode pass."""

    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @property
    def initialized(self) -> bool:
        return self.mean is not None


def batchnorm3d(x: Tensor, gamma: Tensor, beta: Tensor, mode: str,
                state: BatchNormState, tape: Optional[Tape] = None) -> Tensor:
    """Per-channel normalization over all voxels of the current mini-batch
    (train) or over stored running statistics (eval)."""
    _check_mode(mode)
    x5, batched = _canon5(x.array, "batchnorm3d input")
    c = x5.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be [{c}], got {gamma.shape}/{beta.shape}")
    if mode == "train":
        x64 = x5.astype(np.float64)
        mean = x64.mean(axis=(0, 2, 3, 4))
        var = x64.var(axis=(0, 2, 3, 4))
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = ((x64 - mean[None, :, None, None, None])
                * inv_std[None, :, None, None, None]).astype(np.float32)
        if state.mean is None:
            state.mean = mean.astype(np.float32)
            state.var = var.astype(np.float32)
        else:
            m = state.momentum
            state.mean = ((1.0 - m) * state.mean + m * mean).astype(np.float32)
            state.var = ((1.0 - m) * state.var + m * var).astype(np.float32)
        kind = "batchnorm3d_train"
    else:
        if not state.initialized:
            raise ValueError("batchnorm3d eval mode requires populated running stats")
        inv_std = 1.0 / np.sqrt(state.var.astype(np.float64) + state.eps)
        xhat = ((x5.astype(np.float64) - state.mean.astype(np.float64)[None, :, None, None, None])
                * inv_std[None, :, None, None, None]).astype(np.float32)
        kind = "batchnorm3d_eval"
    out = (gamma.array[None, :, None, None, None] * xhat
           + beta.array[None, :, None, None, None])
    if not batched:
        out = out[0]
    return _result(tape, kind, (x, gamma, beta), out,
                   saved=(xhat, inv_std, gamma.array, batched))


def _vjp_batchnorm_train(rec: TapeRecord, g: np.ndarray):
    xhat, inv_std, gamma, batched = rec.saved
    g5 = (g if batched else g[None]).astype(np.float64)
    xh = xhat.astype(np.float64)
    n = g5.shape[0] * g5.shape[2] * g5.shape[3] * g5.shape[4]
    dxhat = g5 * gamma.astype(np.float64)[None, :, None, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3, 4))
    s2 = (dxhat * xh).sum(axis=(0, 2, 3, 4))
    gx = (inv_std[None, :, None, None, None] / n) * (
        n * dxhat
        - s1[None, :, None, None, None]
        - xh * s2[None, :, None, None, None]
    )
    gx = gx.astype(np.float32)
    ggamma = (g5 * xh).sum(axis=(0, 2, 3, 4)).astype(np.float32)
    gbeta = g5.sum(axis=(0, 2, 3, 4)).astype(np.float32)
    return (gx if batched else gx[0]), ggamma, gbeta


def _vjp_batchnorm_eval(rec: TapeRecord, g: np.ndarray):
    xhat, inv_std, gamma, batched = rec.saved
    g5 = (g if batched else g[None]).astype(np.float64)
    gx = (g5 * (gamma.astype(np.float64) * inv_std)[None, :, None, None, None]
          ).astype(np.float32)
    ggamma = (g5 * xhat.astype(np.float64)).sum(axis=(0, 2, 3, 4)).astype(np.float32)
    gbeta = g5.sum(axis=(0, 2, 3, 4)).astype(np.float32)
    return (gx if batched else gx[0]), ggamma, gbeta


# ---------------------------------------------------------------------------
# structural


def concat(parts: Sequence[Tensor], axis: int = 0, tape: Optional[Tape] = None) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one operand")
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            i != axis and p.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat shapes differ off-axis: {[p.shape for p in parts]}")
    out = np.concatenate([p.array for p in parts], axis=axis)
    sizes = tuple(p.shape[axis] for p in parts)
    return _result(tape, "concat", tuple(parts), out, saved=(axis, sizes))


def _vjp_concat(rec: TapeRecord, g: np.ndarray):
    axis, sizes = rec.saved
    offsets = np.cumsum(sizes)[:-1]
    return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))


def mean_of_set(parts: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    if not parts:
        raise ShapeError("mean_of_set needs a nonempty operand set")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape != ref:
            raise ShapeError(f"mean_of_set shapes differ: {[p.shape for p in parts]}")
    acc = np.zeros(ref, dtype=np.float64)
    for p in parts:
        acc += p.array
    out = (acc / len(parts)).astype(np.float32)
    return _result(tape, "mean_of_set", tuple(parts), out, saved=(len(parts),))


def _vjp_mean_of_set(rec: TapeRecord, g: np.ndarray):
    (n,) = rec.saved
    share = (g.astype(np.float64) / n).astype(np.float32)
    return tuple(share.copy() for _ in range(n))


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = x.array.reshape(-1).copy()
    return _result(tape, "flatten", (x,), out, saved=(x.shape,))


def flatten_rows(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Flatten all but the leading (batch) axis: [B, ...] -> [B, K]."""
    if x.array.ndim < 2:
        raise ShapeError(f"flatten_rows needs >= 2-D input, got {x.shape}")
    out = x.array.reshape(x.shape[0], -1).copy()
    return _result(tape, "flatten", (x,), out, saved=(x.shape,))


def _vjp_flatten(rec: TapeRecord, g: np.ndarray):
    (orig,) = rec.saved
    return (g.reshape(orig).copy(),)


def take_row(x: Tensor, index: int, tape: Optional[Tape] = None) -> Tensor:
    """Select row ``index`` of a 2-D tensor."""
    if x.array.ndim != 2:
        raise ShapeError(f"take_row needs a 2-D tensor, got {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ShapeError(f"row {index} out of range for {x.shape}")
    out = x.array[index].copy()
    return _result(tape, "take_row", (x,), out, saved=(index, x.shape))


def _vjp_take_row(rec: TapeRecord, g: np.ndarray):
    index, shape = rec.saved
    gx = np.zeros(shape, dtype=np.float32)
    gx[index] = g
    return (gx,)


def dropout(x: Tensor, rate: float, mode: str, rng: Optional[np.random.Generator] = None,
            tape: Optional[Tape] = None) -> Tensor:
    """Inverted dropout: train mode zeroes entries with probability ``rate``
    and rescales survivors by 1/(1-rate); eval mode is a pass-through."""
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "eval":
        return x
    if rate == 0.0:
        mask = np.ones(x.shape, dtype=bool)
    else:
        if rng is None:
            raise ValueError("train-mode dropout with rate > 0 needs an rng")
        mask = rng.random(x.shape) >= rate
    keep = np.float32(1.0 / (1.0 - rate))
    out = np.where(mask, x.array * keep, np.float32(0.0))
    return _result(tape, "dropout", (x,), out, saved=(mask, keep))


def _vjp_dropout(rec: TapeRecord, g: np.ndarray):
    mask, keep = rec.saved
    return (np.where(mask, g * keep, np.float32(0.0)),)


def reduce_sum(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = np.float32(x.array.sum(dtype=np.float64)).reshape(())
    return _result(tape, "reduce_sum", (x,), out, saved=(x.shape,))


def _vjp_reduce_sum(rec: TapeRecord, g: np.ndarray):
    (shape,) = rec.saved
    return (np.full(shape, g.reshape(()), dtype=np.float32),)


def _check_mode(mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


_VJPS: dict[str, Callable] = {
    "conv3d": _vjp_conv3d,
    "maxpool3d": _vjp_maxpool3d,
    "dense": _vjp_dense,
    "relu": _vjp_relu,
    "hinge_pos": _vjp_relu,
    "tanh": _vjp_tanh,
    "sigmoid": _vjp_sigmoid,
    "log": _vjp_log,
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "scale": _vjp_scale,
    "batchnorm3d_train": _vjp_batchnorm_train,
    "batchnorm3d_eval": _vjp_batchnorm_eval,
    "concat": _vjp_concat,
    "mean_of_set": _vjp_mean_of_set,
    "flatten": _vjp_flatten,
    "take_row": _vjp_take_row,
    "dropout": _vjp_dropout,
    "reduce_sum": _vjp_reduce_sum,
}


def backward(tape: Tape, loss_node) -> GradientStore:
    """Accumulate d(loss)/d(node) for every node reachable backward from the
    size-1 loss node, visiting records in exact reverse insertion order."""
    nid = loss_node.node if isinstance(loss_node, Tensor) else loss_node
    if nid is None or not 0 <= nid < tape.n_nodes:
        raise ValueError("loss node is not on this tape")
    shape = tape.node_shapes[nid]
    if int(np.prod(shape)) != 1:
        raise ShapeError(f"loss node must be scalar-shaped, got {shape}")
    grads: dict[int, np.ndarray] = {nid: np.ones(shape, dtype=np.float32)}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        for in_id, gin in zip(rec.inputs, _VJPS[rec.kind](rec, g)):
            if gin is None:
                continue
            cur = grads.get(in_id)
            if cur is None:
                grads[in_id] = gin
            else:
                cur += gin
    return GradientStore(tape, grads)


def grad_check(f: Callable[[Tensor, Optional[Tape]], Tensor], x: Tensor,
               eps: float = 1e-3) -> float:
    """Max relative error between tape gradients of the scalar function ``f``
    and central finite differences at step ``eps``.

    ``f(t, tape)`` must evaluate the same deterministic function whether or
    not a tape is supplied.  Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    tape = Tape()
    xt = Tensor(x.array.copy())
    tape.watch(xt)
    y = f(xt, tape)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    analytic = backward(tape, y.node)[xt.node].astype(np.float64).ravel()
    flat = x.array.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        # evaluate at the float32-realized points and divide by their exact
        # distance, so step quantization does not pollute the quotient
        x_plus = np.float32(flat[i] + np.float32(eps))
        x_minus = np.float32(flat[i] - np.float32(eps))
        bumped = x.array.copy()
        bumped.reshape(-1)[i] = x_plus
        f_plus = f(Tensor(bumped), None).item()
        bumped.reshape(-1)[i] = x_minus
        f_minus = f(Tensor(bumped), None).item()
        numeric[i] = (f_plus - f_minus) / (float(x_plus) - float(x_minus))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
