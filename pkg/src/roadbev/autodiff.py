"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the primitives the elevation heads need, each with an analytic
backward pass. Tensors wrap numpy arrays; ops build a tape of parent links and
`Tensor.backward` walks it in reverse topological order. Compute dtype follows
the inputs: float32 for training, float64 for gradient-check shadow runs.

Graphs are per-sample and single-threaded; leaf gradients accumulate across
backward calls until `ParamStore.zero_grad`.
"""

from __future__ import annotations

import contextlib
import json
import struct
import warnings
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ContractError, DataError, DomainError, TrainingError


class NoSupervisionWarning(UserWarning):
    """Raised (as a warning) when a loss sees an all-zero validity mask."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)


def _wrap(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    if isinstance(value, (int, float)) and like is not None:
        return Tensor(np.asarray(value, dtype=like.data.dtype))
    return Tensor(value)


def _make(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def make_node(data, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op output tensor; hook for ops defined outside this module."""
    return _make(data, parents, backward_fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    data = np.where(pos, x.data, 0)

    def bwd(g):
        x._accum(g * pos)

    return _make(data, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    in_shape = x.data.shape
    data = x.data.reshape(shape)

    def bwd(g):
        x._accum(g.reshape(in_shape))

    return _make(data, (x,), bwd)


def concat_channel(parts: list[Tensor]) -> Tensor:
    sizes = [p.data.shape[0] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p._accum(g[lo:hi])

    return _make(data, tuple(parts), bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        x._accum(np.broadcast_to(gg, x.data.shape))

    return _make(data, (x,), bwd)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in np.atleast_1d(axis)])
    total = reduce_sum(x, axis=axis, keepdims=keepdims)
    return mul(total, 1.0 / float(count))


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax along axis 0, computed with max subtraction."""
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=0, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=0, keepdims=True)
        x._accum(data * (g - dot))

    return _make(data, (x,), bwd)


# ---------------------------------------------------------------------------
# convolutions and normalization
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 3 or w.data.ndim != 4 or x.data.shape[0] != w.data.shape[1]:
        raise ContractError(f"conv2d shapes incompatible: input {x.data.shape}, weight {w.data.shape}")
    data = kernels.conv2d_fwd(x.data, w.data, stride, padding)
    if bias is not None:
        data = data + bias.data[:, None, None]

    def bwd(g):
        gx, gw = kernels.conv2d_bwd(x.data, w.data, g, stride, padding)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, bwd)


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 5 or x.data.shape[0] != w.data.shape[1]:
        raise ContractError(f"conv3d shapes incompatible: input {x.data.shape}, weight {w.data.shape}")
    data = kernels.conv3d_fwd(x.data, w.data, stride, padding)
    if bias is not None:
        data = data + bias.data[:, None, None, None]

    def bwd(g):
        gx, gw = kernels.conv3d_bwd(x.data, w.data, g, stride, padding)
        if x.requires_grad:
            x._accum(gx)
        if w.requires_grad:
            w._accum(gw)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=(1, 2, 3)))

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(data, parents, bwd)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor,
                 mean: np.ndarray, var: np.ndarray, eps: float = 1e-5) -> Tensor:
    """Per-channel affine normalization with frozen statistics (batch-free)."""
    c = x.data.shape[0]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ContractError(
            f"norm parameters {gamma.data.shape}/{beta.data.shape} do not match {c} channels")
    bshape = (c,) + (1,) * (x.data.ndim - 1)
    inv = (1.0 / np.sqrt(np.asarray(var) + eps)).astype(x.data.dtype).reshape(bshape)
    mu = np.asarray(mean, dtype=x.data.dtype).reshape(bshape)
    xhat = (x.data - mu) * inv
    data = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    axes = tuple(range(1, x.data.ndim))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (gamma.data.reshape(bshape) * inv))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accum(g.sum(axis=axes))

    return _make(data, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def nearest_resize2d(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    if x.data.ndim != 3:
        raise ContractError(f"nearest_resize2d expects (C, H, W), got {x.data.shape}")
    c, h, w = x.data.shape
    h2, w2 = out_hw
    rows = np.minimum((np.floor((np.arange(h2) + 0.5) * h / h2)).astype(np.int64), h - 1)
    cols = np.minimum((np.floor((np.arange(w2) + 0.5) * w / w2)).astype(np.int64), w - 1)
    data = x.data[:, rows[:, None], cols[None, :]]
    flat = (rows[:, None] * w + cols[None, :]).ravel()

    def bwd(g):
        gflat = g.reshape(c, -1)
        gx = np.empty((c, h * w), dtype=x.data.dtype)
        for ch in range(c):
            gx[ch] = np.bincount(flat, weights=gflat[ch], minlength=h * w)
        x._accum(gx.reshape(c, h, w))

    return _make(data, (x,), bwd)


def _interp_weights(n_in: int, n_out: int):
    """align-corners linear interpolation index/weight arrays."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(pos).astype(np.int64), max(n_in - 2, 0))
    w1 = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, w1


def linear_interp_axis(x: Tensor, new_size: int, axis: int) -> Tensor:
    """Linear (align-corners) resampling along one axis; identity when sizes match."""
    n_in = x.data.shape[axis]
    if new_size < 1:
        raise DomainError(f"new_size must be >= 1, got {new_size}")
    i0, i1, w1 = _interp_weights(n_in, new_size)
    xm = np.moveaxis(x.data, axis, 0)
    wshape = (new_size,) + (1,) * (xm.ndim - 1)
    w1s = w1.reshape(wshape).astype(x.data.dtype)
    out_m = xm[i0] * (1 - w1s) + xm[i1] * w1s
    data = np.moveaxis(out_m, 0, axis)

    def bwd(g):
        gm = np.moveaxis(g, axis, 0)
        gxm = np.zeros_like(xm)
        np.add.at(gxm, i0, gm * (1 - w1s))
        np.add.at(gxm, i1, gm * w1s)
        x._accum(np.moveaxis(gxm, 0, axis))

    return _make(data, (x,), bwd)


def linear_resize3d(x: Tensor, out_dhw: tuple[int, int, int]) -> Tensor:
    """Separable trilinear resize of a (C, D, H, W) tensor."""
    if x.data.ndim != 4:
        raise ContractError(f"linear_resize3d expects (C, D, H, W), got {x.data.shape}")
    out = x
    for axis, size in zip((1, 2, 3), out_dhw):
        out = linear_interp_axis(out, size, axis)
    return out


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def masked_cross_entropy(logits: Tensor, onehot: np.ndarray, mask: np.ndarray,
                         reduction: str = "mean") -> Tensor:
    """Cross entropy over class axis 0, summed (or averaged) over mask-valid cells.

    Uses log-softmax with max subtraction. An all-zero mask yields 0 and a
    NoSupervisionWarning.
    """
    if reduction not in ("sum", "mean"):
        raise DomainError(f"reduction must be sum or mean, got {reduction!r}")
    z = logits.data
    if onehot.shape != z.shape or mask.shape != z.shape[1:]:
        raise ContractError(
            f"loss shapes incompatible: logits {z.shape}, labels {onehot.shape}, mask {mask.shape}")
    mask = mask.astype(bool)
    n_valid = int(mask.sum())
    if n_valid == 0:
        warnings.warn("loss mask is all zero: no supervision", NoSupervisionWarning)

        def bwd_zero(g):
            logits._accum(np.zeros_like(z))

        return _make(np.asarray(0.0, dtype=z.dtype), (logits,), bwd_zero)

    zmax = z.max(axis=0, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=0)) + zmax[0]
    ce = lse - (onehot * z).sum(axis=0)
    total = ce[mask].sum()
    scale = 1.0 if reduction == "sum" else 1.0 / n_valid
    data = np.asarray(total * scale, dtype=z.dtype)

    def bwd(g):
        e = np.exp(zs)
        p = e / e.sum(axis=0, keepdims=True)
        glogits = (p - onehot) * mask[None].astype(z.dtype)
        logits._accum(glogits * (float(g) * scale))

    return _make(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with AdamW moment buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        self._moments[name] = (np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def named(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise ContractError(f"checkpoint is missing parameter {name!r}")
            arr = arrays[name]
            if tuple(arr.shape) != tuple(t.data.shape):
                raise ContractError(
                    f"checkpoint shape mismatch for {name!r}: {arr.shape} vs {t.data.shape}")
            t.data = arr.astype(t.data.dtype)


def one_cycle_scale(step: int, total_steps: int, warmup_frac: float = 0.1) -> float:
    """Linear warm-up to 1.0 over the first `warmup_frac` of steps, then linear decay."""
    if total_steps < 1:
        raise DomainError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step < total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps})")
    warm = max(1, int(round(warmup_frac * total_steps)))
    if step < warm:
        return (step + 1) / warm
    if warm >= total_steps:
        return 1.0
    return (total_steps - step) / (total_steps - warm)


def adamw_step(store: ParamStore, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 1e-4, eps: float = 1e-8,
               schedule_position: tuple[int, int] | None = None) -> None:
    """Decoupled-weight-decay Adam update over all parameters in the store.

    `schedule_position = (step, total_steps)` scales the peak lr by the
    one-cycle profile.
    """
    if schedule_position is not None:
        lr = lr * one_cycle_scale(*schedule_position)
    b1, b2 = betas
    store.step_count += 1
    t = store.step_count
    for name, p in store.named():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if np.isnan(g).any():
            raise TrainingError(f"gradient for parameter {name!r} contains NaN")
        m, v = store._moments[name]
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


CHECKPOINT_MAGIC = b"RBCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Named-tensor container (little-endian): parameters, optimizer moments and
    any extra named arrays (e.g. frozen normalization statistics)."""
    entries: list[tuple[str, np.ndarray]] = []
    for name, p in store.named():
        m, v = store._moments[name]
        entries.append((name, p.data))
        entries.append((name + ".adam_m", m))
        entries.append((name + ".adam_v", v))
    for name, arr in (extra or {}).items():
        entries.append((name, np.asarray(arr)))
    meta = dict(meta or {})
    meta["step_count"] = store.step_count
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    blob = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries)),
            struct.pack("<I", len(meta_bytes)), meta_bytes]
    for name, arr in entries:
        nb = name.encode()
        arr = np.ascontiguousarray(arr)
        code = _DTYPE_CODES[np.dtype(arr.dtype).newbyteorder("<")]
        blob.append(struct.pack("<H", len(nb)))
        blob.append(nb)
        blob.append(struct.pack("<BB", code, arr.ndim))
        blob.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blob.append(arr.astype(_CODE_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", raw[12:16])
    off = 16
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len
    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dtype = _CODE_DTYPES[code]
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
            off += n * dtype.itemsize
            arrays[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return arrays, meta


def restore_into(store: ParamStore, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Load parameters and optimizer moments saved by `save_checkpoint`."""
    store.load_arrays({k: v for k, v in arrays.items() if not k.endswith((".adam_m", ".adam_v"))})
    for name in store._params:
        m_key, v_key = name + ".adam_m", name + ".adam_v"
        if m_key in arrays and v_key in arrays:
            m, v = store._moments[name]
            m[:] = arrays[m_key]
            v[:] = arrays[v_key]
    store.step_count = int(meta.get("step_count", 0))
