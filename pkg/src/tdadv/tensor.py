"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the transforms, the classifier and the attack losses
need are provided.  Tensors default to float32; gradient tests build float64
tensors for finite-difference comparisons.  Subgradient conventions are
fixed: relu'(0) = 0, clamp' outside the range = 0, max-pool ties route to
the first maximum in scan order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_POW = 1e-6

_ids = itertools.count()


class Node:
    """One recorded operation: op id, parent tensors, backward closure.

    ``backward_fn(upstream) -> tuple[np.ndarray | None, ...]`` returns one
    gradient per parent (None for parents that do not require grad).
    """

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; b may be a scalar
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.id = next(_ids)
    out.node = Node(op, tuple(parents), backward_fn) if out.requires_grad else None
    return out


def _coerce_pair(a: Tensor, b) -> tuple[Tensor, np.ndarray, bool]:
    """Return (a, b-array, b_is_tensor); scalars are cast to a's dtype."""
    if isinstance(b, Tensor):
        if b.data.shape != a.data.shape and b.data.shape != () and a.data.shape != ():
            raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
        if b.data.dtype != a.data.dtype:
            raise ValueError(f"dtype mismatch: {a.data.dtype} vs {b.data.dtype}")
        return a, b.data, True
    return a, np.asarray(b, dtype=a.data.dtype), False


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    a, bd, is_t = _coerce_pair(a, b)
    parents = (a, b) if is_t else (a,)

    def backward_fn(g):
        ga = _unbroadcast(g, a.data.shape)
        if is_t:
            return ga, _unbroadcast(g, bd.shape)
        return (ga,)

    return _make(a.data + bd, "add", parents, backward_fn)


def sub(a: Tensor, b) -> Tensor:
    a, bd, is_t = _coerce_pair(a, b)
    parents = (a, b) if is_t else (a,)

    def backward_fn(g):
        ga = _unbroadcast(g, a.data.shape)
        if is_t:
            return ga, _unbroadcast(-g, bd.shape)
        return (ga,)

    return _make(a.data - bd, "sub", parents, backward_fn)


def mul(a: Tensor, b) -> Tensor:
    a, bd, is_t = _coerce_pair(a, b)
    parents = (a, b) if is_t else (a,)

    def backward_fn(g):
        ga = _unbroadcast(g * bd, a.data.shape)
        if is_t:
            return ga, _unbroadcast(g * a.data, bd.shape)
        return (ga,)

    return _make(a.data * bd, "mul", parents, backward_fn)


def div(a: Tensor, b) -> Tensor:
    a, bd, is_t = _coerce_pair(a, b)
    if np.any(bd == 0):
        raise ValueError("division by zero")
    parents = (a, b) if is_t else (a,)

    def backward_fn(g):
        ga = _unbroadcast(g / bd, a.data.shape)
        if is_t:
            return ga, _unbroadcast(-g * a.data / (bd * bd), bd.shape)
        return (ga,)

    return _make(a.data / bd, "div", parents, backward_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is supported
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if shape == () else g


def pow_const(x: Tensor, e: float) -> Tensor:
    # slack of one part in 1e3 tolerates the float32 representation of the floor
    if np.any(x.data < EPS_POW * 0.999):
        raise ValueError(f"pow_const requires inputs >= {EPS_POW}; clamp first")
    out = x.data**e

    def backward_fn(g):
        return (g * e * x.data ** (e - 1.0),)

    return _make(out, "pow_const", (x,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim not in (2, 3):
        raise ValueError("matmul supports 2-D or 3-D operands")
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {ad.shape} @ {bd.shape}")
    if ad.ndim == 3 and bd.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ValueError("batch dimensions disagree")
    out = np.matmul(ad, bd)

    def backward_fn(g):
        da = db = None
        if a.requires_grad:
            da = np.matmul(g, np.swapaxes(bd, -1, -2))
            if da.ndim > ad.ndim:
                da = da.sum(axis=0)
        if b.requires_grad:
            db = np.matmul(np.swapaxes(ad, -1, -2), g)
            if db.ndim > bd.ndim:
                db = db.sum(axis=0)
        return da, db

    return _make(out, "matmul", (a, b), backward_fn)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(x.data.transpose(axes)),
        "transpose",
        (x,),
        lambda g: (g.transpose(inv),),
    )


def flip_axis(x: Tensor, axis: int) -> Tensor:
    return _make(
        np.ascontiguousarray(np.flip(x.data, axis)),
        "flip",
        (x,),
        lambda g: (np.flip(g, axis),),
    )


def pad2d(x: Tensor, pads: tuple[tuple[int, int], tuple[int, int]], mode: str = "zero") -> Tensor:
    """Pad the last two axes. mode: zero | reflect | edge.

    'reflect' is the edge-inclusive mirror (abc -> ba|abc|cb), so an
    averaging kernel preserves constants and an interior impulse is not
    duplicated into the padding.
    """
    (pt, pb), (pl, pr) = pads
    nd = x.data.ndim
    if mode == "zero":
        widths = [(0, 0)] * (nd - 2) + [(pt, pb), (pl, pr)]
        out = np.pad(x.data, widths)

        def backward_fn(g):
            sl = (Ellipsis, slice(pt, g.shape[-2] - pb), slice(pl, g.shape[-1] - pr))
            return (g[sl],)

        return _make(out, "pad2d", (x,), backward_fn)

    if mode not in ("reflect", "edge"):
        raise ValueError(f"unknown pad mode {mode!r}")
    np_mode = "symmetric" if mode == "reflect" else "edge"
    H, W = x.data.shape[-2:]
    ri = np.pad(np.arange(H), (pt, pb), mode=np_mode)
    ci = np.pad(np.arange(W), (pl, pr), mode=np_mode)
    out = np.ascontiguousarray(x.data[..., ri[:, None], ci[None, :]])
    # backward folds duplicated rows/cols via one-hot scatter matmuls
    sr = np.zeros((H, len(ri)), dtype=x.data.dtype)
    sr[ri, np.arange(len(ri))] = 1.0
    sc = np.zeros((W, len(ci)), dtype=x.data.dtype)
    sc[ci, np.arange(len(ci))] = 1.0

    def backward_fn(g):
        return (np.matmul(sr, np.matmul(g, sc.T)),)

    return _make(out, "pad2d", (x,), backward_fn)


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    H, W = x.data.shape[-2:]
    if top < 0 or left < 0 or top + h > H or left + w > W:
        raise ValueError("crop window outside input")
    out = np.ascontiguousarray(x.data[..., top : top + h, left : left + w])

    def backward_fn(g):
        dx = np.zeros(x.data.shape, dtype=g.dtype)
        dx[..., top : top + h, left : left + w] = g
        return (dx,)

    return _make(out, "crop2d", (x,), backward_fn)


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x: [N, K] plus per-column bias b: [K]."""
    if x.data.ndim != 2 or b.data.shape != (x.data.shape[1],):
        raise ValueError("add_rowvec expects [N,K] and [K]")

    def backward_fn(g):
        return g, (g.sum(axis=0) if b.requires_grad else None)

    return _make(x.data + b.data[None, :], "add_rowvec", (x, b), backward_fn)


def add_chanvec(x: Tensor, b: Tensor) -> Tensor:
    """x: [N, C, H, W] plus per-channel bias b: [C]."""
    if x.data.ndim != 4 or b.data.shape != (x.data.shape[1],):
        raise ValueError("add_chanvec expects [N,C,H,W] and [C]")

    def backward_fn(g):
        return g, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return _make(x.data + b.data[None, :, None, None], "add_chanvec", (x, b), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape).astype(x.data.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), "sum", (x,), backward_fn)


def pick(x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 1 or not 0 <= index < x.data.shape[0]:
        raise ValueError("pick expects a 1-D tensor and a valid index")

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    return _make(np.asarray(x.data[index]), "pick", (x,), backward_fn)


def masked_max(x: Tensor, exclude_index: int) -> Tensor:
    """Max over entries of a 1-D tensor excluding one index (first-max ties)."""
    if x.data.ndim != 1 or not 0 <= exclude_index < x.data.shape[0]:
        raise ValueError("masked_max expects a 1-D tensor and a valid index")
    if x.data.shape[0] < 2:
        raise ValueError("masked_max needs at least two entries")
    masked = x.data.copy()
    masked[exclude_index] = -np.inf
    arg = int(np.argmax(masked))

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[arg] = g
        return (dx,)

    return _make(np.asarray(x.data[arg]), "masked_max", (x,), backward_fn)


# ---------------------------------------------------------------------------
# nonlinearities and pooling


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0), "relu", (x,), backward_fn)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    if lo > hi:
        raise ValueError(f"clamp bounds inverted: {lo} > {hi}")
    mask = (x.data >= lo) & (x.data <= hi)

    def backward_fn(g):
        return (g * mask,)

    return _make(np.clip(x.data, lo, hi), "clamp", (x,), backward_fn)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    N, C, H, W = x.data.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ValueError("pooling window larger than input")
    xc = x.data[:, :, : Ho * k, : Wo * k]
    win = xc.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    out = win.max(axis=-1)

    def backward_fn(g):
        # argmax picks the first maximum in scan order; computed only on demand
        arg = win.argmax(axis=-1)
        dwin = np.zeros((N, C, Ho, Wo, k * k), dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = np.zeros((N, C, H, W), dtype=g.dtype)
        dx[:, :, : Ho * k, : Wo * k] = (
            dwin.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * k, Wo * k)
        )
        return (dx,)

    return _make(out, "max_pool2d", (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C], averaging the spatial map."""
    N, C, H, W = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), (N, C, H, W)).astype(g.dtype, copy=True),)

    return _make(out, "global_avg_pool", (x,), backward_fn)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, k: Tensor, stride: int = 1, padding: int = 0, pad_mode: str = "zero") -> Tensor:
    """Cross-correlation of [N,C,H,W] with kernels [O,C,kh,kw]."""
    if padding:
        x = pad2d(x, ((padding, padding), (padding, padding)), mode=pad_mode)
    return _conv2d_core(x, k, stride)


def _conv2d_core(x: Tensor, k: Tensor, stride: int) -> Tensor:
    N, C, H, W = x.data.shape
    O, C2, kh, kw = k.data.shape
    if C != C2:
        raise ValueError(f"channel mismatch: input {C} vs kernel {C2}")
    if kh > H or kw > W:
        raise ValueError("kernel larger than (padded) input")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    kmat = k.data.reshape(O, C * kh * kw)
    out = (cols @ kmat.T).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        dk = (gm.T @ cols).reshape(O, C, kh, kw) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            dwin = (gm @ kmat).reshape(N, Ho, Wo, C, kh, kw)
            dx = np.zeros((N, C, H, W), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += dwin[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
        return dx, dk

    return _make(out, "conv2d", (x, k), backward_fn)


# ---------------------------------------------------------------------------
# sampling


def grid_sample_bilinear(x: Tensor, coords: np.ndarray, mode: str = "border") -> Tensor:
    """Sample [C,H,W] at real (row, col) coords [Ho,Wo,2].

    mode 'border' clamps source coordinates to the image; mode 'zeros'
    contributes 0 outside.  Differentiable w.r.t. x only; coords are
    constants.
    """
    if mode not in ("border", "zeros"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    C, H, W = x.data.shape
    coords = np.asarray(coords, dtype=np.float64)
    if not np.all(np.isfinite(coords)):
        raise ValueError("non-finite sample coordinates")
    r, c = coords[..., 0], coords[..., 1]
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = (r - r0).astype(x.data.dtype)
    fc = (c - c0).astype(x.data.dtype)
    corners = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, ci = r0 + dr, c0 + dc
        w = (fr if dr else (1.0 - fr)) * (fc if dc else (1.0 - fc))
        if mode == "border":
            ric = np.clip(ri, 0, H - 1)
            cic = np.clip(ci, 0, W - 1)
        else:
            valid = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
            w = w * valid
            ric = np.clip(ri, 0, H - 1)
            cic = np.clip(ci, 0, W - 1)
        corners.append((ric, cic, w))
    out = np.zeros((C,) + r.shape, dtype=x.data.dtype)
    for ric, cic, w in corners:
        out += x.data[:, ric, cic] * w[None]

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        for ric, cic, w in corners:
            vals = g * w[None]
            for ch in range(C):
                np.add.at(dx[ch], (ric, cic), vals[ch])
        return (dx,)

    return _make(out, "grid_sample_bilinear", (x,), backward_fn)


# ---------------------------------------------------------------------------
# rounding surrogates (JPEG quantization)


def round_smooth(x: Tensor) -> Tensor:
    """round(v) + frac^3 with analytic derivative 3*frac^2."""
    n = np.round(x.data)
    f = x.data - n

    def backward_fn(g):
        return (g * 3.0 * f * f,)

    return _make(n + f**3, "round_smooth", (x,), backward_fn)


def round_hard(x: Tensor) -> Tensor:
    """Exact rounding; forward-only (the output is detached from the tape)."""
    out = Tensor(np.round(x.data))
    return out


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits: Tensor, target, reduction: str = "mean", label_smoothing: float = 0.0) -> Tensor:
    """Cross-entropy from raw logits, log-sum-exp stabilized.

    1-D logits [K] take an int target; 2-D logits [N,K] take a sequence of
    N targets reduced by 'mean' or 'sum'.  Gradient is softmax - onehot.
    label_smoothing (2-D form only) mixes the onehot with uniform mass.
    """
    z = logits.data
    if z.ndim == 1:
        t = int(target)
        if not 0 <= t < z.shape[0]:
            raise ValueError(f"target {t} out of range for {z.shape[0]} classes")
        m = z.max()
        ez = np.exp(z - m)
        p = ez / ez.sum()
        loss = np.asarray((m + np.log(ez.sum())) - z[t], dtype=z.dtype)

        def backward_fn(g):
            dz = p.astype(z.dtype, copy=True)
            dz[t] -= 1.0
            return (dz * g,)

        return _make(loss, "softmax_cross_entropy", (logits,), backward_fn)

    if z.ndim != 2:
        raise ValueError("logits must be 1-D or 2-D")
    targets = np.asarray(target, dtype=np.int64)
    if targets.shape != (z.shape[0],):
        raise ValueError("need one target per row")
    if np.any(targets < 0) or np.any(targets >= z.shape[1]):
        raise ValueError("target out of range")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must lie in [0, 1)")
    n, k = z.shape
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    s = ez.sum(axis=1, keepdims=True)
    p = ez / s
    rows = np.arange(n)
    lse = m[:, 0] + np.log(s[:, 0])
    # soft target (1-ls) * onehot + ls/k
    losses = lse - (1.0 - label_smoothing) * z[rows, targets] - (label_smoothing / k) * z.sum(axis=1)
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = np.asarray(losses.sum() * scale, dtype=z.dtype)

    def backward_fn(g):
        dz = p.astype(z.dtype, copy=True)
        dz -= label_smoothing / k
        dz[rows, targets] -= 1.0 - label_smoothing
        return (dz * (g * scale),)

    return _make(loss, "softmax_cross_entropy", (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered nodes reachable from one output tensor."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    def __len__(self) -> int:
        return len(self.tensors)


def trace(out: Tensor) -> Tape:
    """Collect the graph below ``out`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if t.id in seen:
            continue
        seen.add(t.id)
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.id not in seen and (p.requires_grad or p.node is not None):
                    stack.append((p, False))
    return Tape(order)


class GradientMap(dict):
    """node id -> gradient Tensor; lookup by Tensor works too."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.id
        return super().__contains__(key)


def backward(loss: Tensor) -> GradientMap:
    """Reverse sweep from a scalar loss; each node is visited exactly once.

    Returns gradients for every requires_grad leaf reachable from the loss;
    multiple paths accumulate by summation.
    """
    if loss.data.shape != ():
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is not connected to any requires_grad tensor")
    tape = trace(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.data.dtype)}
    result = GradientMap()
    for t in reversed(tape.tensors):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                result[t.id] = Tensor(g)
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    return result
