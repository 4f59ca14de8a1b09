"""Minimal reverse-mode autodiff over numpy arrays.

Everything the table model needs and nothing else: a ``Tensor`` wrapper, a
``Tape`` that records primitive calls, hand-derived backward rules per
primitive, an Adam optimizer step, and a flat binary checkpoint format.
numpy supplies storage and BLAS; differentiation is done here.

Broadcasting is deliberately restricted: a second operand may be expanded
along *leading* axes only (that is, its shape must match a trailing suffix
of the first operand's shape, or be scalar).  Anything fancier raises.

Precision is a construction-time choice: build parameters with
``dtype_for(32)`` or ``dtype_for(64)`` and every op preserves it.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "tensor", "dtype_for",
    "add", "sub", "mul", "neg", "matmul", "softmax", "layernorm", "gelu",
    "tsum", "tmean", "concat", "narrow", "transpose", "reshape", "gather",
    "where_mask", "log", "exp", "sqrt",
    "backward", "AdamState", "adam_step",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = "LDMCKPT v1"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def dtype_for(bits: int) -> np.dtype:
    """Map a precision in bits (32 or 64) to the numpy dtype used kernel-wide."""
    if bits == 32:
        return np.dtype(np.float32)
    if bits == 64:
        return np.dtype(np.float64)
    raise ValueError(f"unsupported precision: {bits} (want 32 or 64)")


class Tensor:
    """A numpy array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, dtype=None, name: str | None = None) -> Tensor:
    """Wrap ``data`` in a Tensor, optionally casting to ``dtype``."""
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, name=name)


class Tape:
    """Ordered record of primitive calls for one forward pass.

    Use as a context manager; primitives executed inside append
    ``(out, inputs, backward_fn)`` entries.  ``backward`` replays the
    record once, in reverse, which is reverse topological order for any
    well-formed forward pass.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self):
        return len(self._records)


_tape_stack: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    t = _active_tape()
    if t is not None:
        t._records.append((out, inputs, bwd))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every tensor recorded on ``tape`` reachable from ``loss``.

    ``loss`` must be scalar (size 1).  Existing grads on recorded tensors are
    cleared first; leaves accumulate contributions from every use.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, bwd in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for inp, contrib in zip(inputs, bwd(g)):
            if contrib is None:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    # whatever is left in the map belongs to leaves (tensors no record produced);
    # each entry already holds the fully accumulated gradient, so overwrite
    if grads:
        seen: dict[int, Tensor] = {}
        for _, inputs, _ in tape._records:
            for inp in inputs:
                seen.setdefault(id(inp), inp)
        for key, g in grads.items():
            t = seen.get(key)
            if t is not None:
                t.grad = g


def _coerce(other, like: np.ndarray) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=like.dtype))


def _check_leading_broadcast(a_shape, b_shape):
    """Allow b to expand along leading axes of a only (or be scalar)."""
    if b_shape == () or a_shape == b_shape:
        return
    if len(b_shape) <= len(a_shape) and a_shape[len(a_shape) - len(b_shape):] == b_shape:
        return
    raise ValueError(
        f"broadcast {b_shape} -> {a_shape} not allowed (leading-axis expansion only)")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of leading-axis expansion)."""
    if grad.shape == tuple(shape):
        return grad
    n_extra = grad.ndim - len(shape)
    if n_extra > 0:
        grad = grad.sum(axis=tuple(range(n_extra)))
    # no partial-axis broadcast is ever allowed, so shapes now match
    return grad.reshape(shape)


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.data)
    _check_leading_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return g, _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.data)
    _check_leading_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return g, -_unbroadcast(g, b.data.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a.data)
    _check_leading_broadcast(a.data.shape, b.data.shape)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return g * b.data, _unbroadcast(g * a.data, b.data.shape)

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bwd(g):
        return (-g,)

    return _record(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supported shapes: 2-D @ 2-D, batched with identical
    leading dims, or batched @ 2-D (shared right operand, e.g. a weight)."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    batched_pair = ad.ndim == bd.ndim and ad.shape[:-2] == bd.shape[:-2]
    shared_right = bd.ndim == 2
    if not (batched_pair or shared_right):
        raise ValueError(f"unsupported matmul shapes: {ad.shape} @ {bd.shape}")
    out = Tensor(np.matmul(ad, bd))

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if shared_right and ad.ndim > 2:
            k, n = bd.shape
            gb = np.matmul(ad.reshape(-1, k).T, g.reshape(-1, n))
        else:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``.  ``-inf`` entries come out exactly zero, so an
    additive mask works; each slice needs at least one finite entry."""
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    y = e / np.sum(e, axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, axis: int = -1,
              eps: float = 1e-5) -> Tensor:
    """Normalize ``x`` over one axis, then scale and shift."""
    xd = x.data
    n = xd.shape[axis]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ValueError("layernorm gain/bias must be vectors over the normalized axis")
    mean = np.mean(xd, axis=axis, keepdims=True)
    xc = xd - mean
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    xhat = xc * inv
    shp = [1] * xd.ndim
    shp[axis] = n
    gview = gain.data.reshape(shp)
    bview = bias.data.reshape(shp)
    out = Tensor(xhat * gview + bview)

    def bwd(g):
        reduce_axes = tuple(i for i in range(xd.ndim) if i != (axis % xd.ndim))
        dgain = np.sum(g * xhat, axis=reduce_axes)
        dbias = np.sum(g, axis=reduce_axes)
        dxhat = g * gview
        m1 = np.mean(dxhat, axis=axis, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=axis, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit: ``x * Phi(x)`` with the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * np.asarray(_INV_SQRT2, dtype=xd.dtype)))
    cdf = cdf.astype(xd.dtype, copy=False)
    out = Tensor(xd * cdf)

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * np.asarray(_INV_SQRT2PI, dtype=xd.dtype)
        return (g * (cdf + xd * pdf),)

    return _record(out, (x,), bwd)


def _sum_backward_expand(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape).copy()
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape).copy()


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum reduction (deterministic: fixed numpy pairwise order)."""
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))
    in_shape = x.data.shape

    def bwd(g):
        return (_sum_backward_expand(g, in_shape, axis, keepdims),)

    return _record(out, (x,), bwd)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean reduction."""
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))
    in_shape = x.data.shape
    count = x.data.size if out.data.size == 0 else x.data.size // max(out.data.size, 1)

    def bwd(g):
        expanded = _sum_backward_expand(g, in_shape, axis, keepdims)
        return (expanded / count,)

    return _record(out, (x,), bwd)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    key = [slice(None)] * x.data.ndim
    key[axis] = slice(start, start + length)
    key = tuple(key)
    out = Tensor(x.data[key])
    in_shape = x.data.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[key] = g
        return (full,)

    return _record(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.data.shape
    out = Tensor(np.reshape(x.data, shape))

    def bwd(g):
        return (np.reshape(g, in_shape),)

    return _record(out, (x,), bwd)


def gather(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Pick entries along ``axis`` with an integer index array of the same rank
    (``np.take_along_axis`` semantics).  Backward scatter-adds."""
    idx = np.asarray(indices)
    if idx.ndim != x.data.ndim:
        raise ValueError("gather index must have the same rank as the input")
    out = Tensor(np.take_along_axis(x.data, idx, axis=axis))
    in_shape = x.data.shape

    def bwd(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        ax = axis % len(in_shape)
        moved_g = np.moveaxis(g, ax, -1)
        moved_idx = np.moveaxis(np.broadcast_to(idx, g.shape), ax, -1)
        full_m = np.moveaxis(full, ax, -1)
        flat = full_m.reshape(-1, in_shape[ax])
        rows = np.repeat(np.arange(flat.shape[0]), moved_idx.shape[-1])
        np.add.at(flat, (rows, moved_idx.reshape(-1)), moved_g.reshape(-1))
        return (full,)

    return _record(out, (x,), bwd)


def where_mask(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``.

    ``cond`` is data, not a differentiable input; gradients route to the
    selected branch only, so the unselected value never influences anything.
    """
    cond = np.asarray(cond, dtype=bool)
    _check_leading_broadcast(cond.shape, a.data.shape)
    _check_leading_broadcast(cond.shape, b.data.shape)
    out = Tensor(np.where(cond, a.data, b.data))

    def bwd(g):
        ga = _unbroadcast(np.where(cond, g, np.zeros((), dtype=g.dtype)), a.data.shape)
        gb = _unbroadcast(np.where(cond, np.zeros((), dtype=g.dtype), g), b.data.shape)
        return ga, gb

    return _record(out, (a, b), bwd)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    xd = x.data

    def bwd(g):
        return (g / xd,)

    return _record(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def bwd(g):
        return (g * out.data,)

    return _record(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))

    def bwd(g):
        return (g * 0.5 / out.data,)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias-corrected moments.

    Parameters missing from ``grads`` (or mapped to None) are left untouched.
    """
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        dt = p.data.dtype
        g = g.astype(dt, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= dt.type(beta1)
        m += dt.type(1.0 - beta1) * g
        v *= dt.type(beta2)
        v += dt.type(1.0 - beta2) * (g * g)
        mhat = m / dt.type(1.0 - beta1 ** t)
        vhat = v / dt.type(1.0 - beta2 ** t)
        p.data -= dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))


# ---------------------------------------------------------------------------
# checkpoint I/O


class CheckpointError(RuntimeError):
    pass


_DTYPE_TO_TAG = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}
_TAG_TO_DTYPE = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_checkpoint(path, tensors: dict[str, Tensor | np.ndarray]) -> None:
    """Write tensors to ``path``: a magic line, one ``name shape dtype offset``
    line per tensor, a blank line, then raw little-endian payloads in header
    order.  Header order is the dict's insertion order, so re-saving the same
    dict yields identical bytes."""
    header_lines = [CHECKPOINT_MAGIC]
    payloads = []
    offset = 0
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        tag = _DTYPE_TO_TAG.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"cannot checkpoint dtype {arr.dtype} for {name!r}")
        if any(ch.isspace() for ch in name) or not name:
            raise CheckpointError(f"bad tensor name {name!r}")
        shape = ",".join(str(s) for s in arr.shape) if arr.ndim else "-"
        header_lines.append(f"{name} {shape} {tag} {offset}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        payloads.append(raw)
        offset += len(raw)
    blob = ("\n".join(header_lines) + "\n\n").encode("utf-8") + b"".join(payloads)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path) -> dict[str, Tensor]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    header = blob[:sep].decode("utf-8").split("\n")
    payload = blob[sep + 2:]
    if not header or header[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic line {header[0] if header else ''!r}")
    out: dict[str, Tensor] = {}
    entries = []
    for line in header[1:]:
        fields = line.split(" ")
        if len(fields) != 4:
            raise CheckpointError(f"{path}: malformed header line {line!r}")
        name, shape_s, tag, off_s = fields
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"{path}: unknown dtype tag {tag!r}")
        shape = () if shape_s == "-" else tuple(int(s) for s in shape_s.split(","))
        entries.append((name, shape, tag, int(off_s)))
    for name, shape, tag, off in entries:
        dt = _TAG_TO_DTYPE[tag]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        raw = payload[off:off + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(
                f"{path}: payload for {name!r} truncated (want {nbytes} bytes, "
                f"have {len(raw)})")
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        out[name] = Tensor(arr, name=name)
    return out


def finite_difference(f, tensors: list[Tensor], h: float = 1e-5,
                      coords: dict[int, list[tuple]] | None = None) -> list[np.ndarray]:
    """Central-difference gradients of scalar ``f()`` w.r.t. the given tensors.

    ``coords`` optionally restricts which coordinates of each tensor (by list
    index) get probed; unprobed entries come back as nan so callers can mask.
    """
    grads = []
    for i, t in enumerate(tensors):
        if coords is not None and i in coords:
            picks = coords[i]
        else:
            picks = list(np.ndindex(*t.data.shape)) if t.data.ndim else [()]
        g = np.full_like(t.data, np.nan)
        for c in picks:
            orig = t.data[c]
            t.data[c] = orig + h
            fp = float(f())
            t.data[c] = orig - h
            fm = float(f())
            t.data[c] = orig
            g[c] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads
