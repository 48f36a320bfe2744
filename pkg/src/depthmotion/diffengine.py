"""Reverse-mode differentiation over the closed set of array ops used by the pipeline.

Every op accepts plain numpy arrays or :class:`Var` nodes. When no input is a
``Var`` the op is evaluated eagerly with numpy and nothing is recorded, so the
same geometry/loss code runs both on the tape and as a plain numeric function
(which is what finite-difference checks use).

Nodes are appended to their :class:`Tape` in creation order, which is a valid
topological order; :meth:`Tape.backward` walks it once in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


def _is_basic_key(key) -> bool:
    if not isinstance(key, tuple):
        key = (key,)
    return all(isinstance(k, (int, np.integer, slice, type(None), type(Ellipsis))) for k in key)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Var:
    """A tape node holding a float64 array value."""

    __slots__ = ("value", "tape", "parents", "vjp", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape: "Tape", parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self):
        self.nodes: list[Var] = []

    def variable(self, value) -> Var:
        """Register a differentiable leaf."""
        return Var(np.array(value, dtype=np.float64), self)

    def backward(self, loss: Var) -> dict[int, np.ndarray]:
        """Return adjoints keyed by node index for every node reachable from ``loss``."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise ContractError("loss must be a node recorded on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        out: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = adj.pop(node.index, None)
            if g is None:
                continue
            out[node.index] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var):
                    continue
                prev = adj.get(parent.index)
                adj[parent.index] = pg if prev is None else prev + pg
        return out


def backward(tape: Tape, loss: Var, wrt: Mapping[str, Var]) -> dict[str, np.ndarray]:
    """Gradients of ``loss`` with respect to each named leaf.

    Leaves that do not influence the loss get an exact zero array.
    """
    adj = tape.backward(loss)
    grads = {}
    for name, leaf in wrt.items():
        g = adj.get(leaf.index)
        grads[name] = np.zeros_like(leaf.value) if g is None else np.array(g, dtype=np.float64).reshape(leaf.shape)
    return grads


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("inputs recorded on different tapes")
    return tape


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av + bv
    if tape is None:
        return out
    return Var(out, tape, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av - bv
    if tape is None:
        return out
    return Var(out, tape, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av * bv
    if tape is None:
        return out
    return Var(out, tape, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    if tape is None:
        return out

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return Var(out, tape, (a, b), vjp)


def power(a, exponent: float):
    av = value(a)
    out = av ** exponent
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def square(a):
    av = value(a)
    out = av * av
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    out = np.exp(value(a))
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    out = np.log(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (0.5 * g / out,))


def abs_(a):
    av = value(a)
    out = np.abs(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g * np.sign(av),))


def sin(a):
    av = value(a)
    out = np.sin(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value(a)
    out = np.cos(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (-g * np.sin(av),))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant."""
    cond = np.asarray(cond, dtype=bool)
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = np.where(cond, av, bv)
    if tape is None:
        return out
    return Var(out, tape, (a, b), lambda g: (
        _unbroadcast(np.where(cond, g, 0.0), av.shape),
        _unbroadcast(np.where(cond, 0.0, g), bv.shape),
    ))


def minimum(a, b):
    # ties route the gradient to ``a``
    av, bv = value(a), value(b)
    return where(av <= bv, a, b)


# -- shape and reductions ---------------------------------------------------

def sum_(a, axis=None):
    av = value(a)
    out = av.sum(axis=axis)
    if not isinstance(a, Var):
        return out

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return Var(out, a.tape, (a,), vjp)


def mean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    return sum_(a, axis) / float(n)


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key):
    av = value(a)
    out = av[key]
    if not isinstance(a, Var):
        return np.array(out, dtype=np.float64)
    basic = _is_basic_key(key)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Var(out, a.tape, (a,), vjp)


def stack(items: Sequence, axis: int = 0):
    tape = _tape_of(*items)
    vals = [value(x) for x in items]
    out = np.stack(vals, axis=axis)
    if tape is None:
        return out

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return Var(out, tape, tuple(items), vjp)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    out = av @ bv
    if tape is None:
        return out
    return Var(out, tape, (a, b), lambda g: (g @ bv.T, av.T @ g))


def downsample2(a):
    """2x2 block average over the two leading axes."""
    av = value(a)
    h, w = av.shape[:2]
    if h % 2 or w % 2:
        raise ContractError(f"cannot halve shape {av.shape}")
    blocks = reshape(a, (h // 2, 2, w // 2, 2) + av.shape[2:])
    return mean(mean(blocks, axis=3), axis=1)


# -- image primitives -------------------------------------------------------

def _box3_value(x: np.ndarray) -> np.ndarray:
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (x.ndim - 2)
    p = np.pad(x, pad, mode="reflect")
    h, w = x.shape[:2]
    acc = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            acc += p[dy:dy + h, dx:dx + w]
    return acc / 9.0


def _box3_adjoint(g: np.ndarray) -> np.ndarray:
    h, w = g.shape[:2]
    gp = np.zeros((h + 2, w + 2) + g.shape[2:])
    for dy in range(3):
        for dx in range(3):
            gp[dy:dy + h, dx:dx + w] += g
    gp /= 9.0
    # fold the reflected border back onto its source rows/columns
    gp[2] += gp[0]
    gp[h - 1] += gp[h + 1]
    gp = gp[1:h + 1]
    gp[:, 2] += gp[:, 0]
    gp[:, w - 1] += gp[:, w + 1]
    return gp[:, 1:w + 1]


def box_filter3(a):
    """3x3 mean filter with reflect padding over the two leading axes."""
    av = value(a)
    if av.shape[0] < 2 or av.shape[1] < 2:
        raise ContractError("box filter needs at least 2x2 input")
    out = _box3_value(av)
    if not isinstance(a, Var):
        return out
    return Var(out, a.tape, (a,), lambda g: (_box3_adjoint(g),))


def sample_bilinear(img, x, y):
    """Bilinear lookup of ``img`` (H, W, C) at coordinates ``x``, ``y`` (same shape S).

    Coordinates are clamped to the image rectangle; returns shape S + (C,).
    Gradients flow to the image and to both coordinate arrays. The coordinate
    gradient is zero where clamping is active.
    """
    iv = value(img)
    if iv.ndim != 3:
        raise ContractError(f"image must be (H, W, C), got {iv.shape}")
    h, w, c = iv.shape
    if h < 2 or w < 2:
        raise ContractError("image must be at least 2x2")
    xv, yv = value(x), value(y)
    if xv.shape != yv.shape:
        raise ContractError("coordinate arrays differ in shape")
    xc = np.clip(xv, 0.0, w - 1.0)
    yc = np.clip(yv, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    flat = iv.reshape(-1, c)
    i00 = y0 * w + x0
    v00 = flat[i00]
    v01 = flat[i00 + 1]
    v10 = flat[i00 + w]
    v11 = flat[i00 + w + 1]
    fxe = fx[..., None]
    fye = fy[..., None]
    top = v00 + fxe * (v01 - v00)
    bot = v10 + fxe * (v11 - v10)
    out = top + fye * (bot - top)
    tape = _tape_of(img, x, y)
    if tape is None:
        return out

    def vjp(g):
        gimg = None
        if isinstance(img, Var):
            w00 = ((1 - fx) * (1 - fy)).ravel()
            w01 = (fx * (1 - fy)).ravel()
            w10 = ((1 - fx) * fy).ravel()
            w11 = (fx * fy).ravel()
            idx = np.concatenate([i00.ravel(), i00.ravel() + 1, i00.ravel() + w, i00.ravel() + w + 1])
            wts = np.concatenate([w00, w01, w10, w11])
            g2 = g.reshape(-1, c)
            gimg = np.empty((h * w, c))
            for ch in range(c):
                gimg[:, ch] = np.bincount(idx, weights=wts * np.tile(g2[:, ch], 4), minlength=h * w)
            gimg = gimg.reshape(h, w, c)
        gx = gy = None
        if isinstance(x, Var):
            dx = (1 - fye) * (v01 - v00) + fye * (v11 - v10)
            inside = (xv >= 0.0) & (xv <= w - 1.0)
            gx = np.where(inside, (g * dx).sum(axis=-1), 0.0)
        if isinstance(y, Var):
            dy = bot - top
            inside = (yv >= 0.0) & (yv <= h - 1.0)
            gy = np.where(inside, (g * dy).sum(axis=-1), 0.0)
        return gimg, gx, gy

    return Var(out, tape, (img, x, y), vjp)


# -- parameters and checking ------------------------------------------------

class ParamSet:
    """Named float64 arrays; every entry has a gradient slot of identical shape."""

    def __init__(self, items: Mapping[str, np.ndarray] | None = None):
        self._values: dict[str, np.ndarray] = {}
        for name, v in (items or {}).items():
            self.add(name, v)

    def add(self, name: str, init) -> None:
        if name in self._values:
            raise ContractError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(init, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, v) -> None:
        if name not in self._values:
            raise KeyError(name)
        arr = np.array(v, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ContractError(f"shape mismatch for {name!r}: {arr.shape} vs {self._values[name].shape}")
        self._values[name] = arr

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self):
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._values.items()})

    def bind(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.variable(v) for k, v in self._values.items()}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self._values.items()}


def grad_check(
    f: Callable[[Mapping], object],
    params: ParamSet,
    h: float = 1e-4,
    n: int = 100,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a name->value mapping to a scalar; it is called once with tape
    variables and ``2 n`` times with plain arrays. ``n`` components are drawn
    uniformly (with replacement) from the flattened parameters in ``names``.
    """
    if h <= 0 or n < 1:
        raise ContractError("need h > 0 and n >= 1")
    rng = rng or np.random.default_rng(0)
    names = list(names) if names is not None else params.names()
    tape = Tape()
    leaves = params.bind(tape)
    loss = f(leaves)
    grads = backward(tape, loss, leaves)

    sizes = np.array([params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = rng.integers(0, offsets[-1], size=n)
    base = {k: v.copy() for k, v in params.items()}
    worst = 0.0
    for flat in picks:
        j = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, idx = names[j], int(flat - offsets[j])
        arr = base[name]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + h
        fp = float(value(f(base)))
        arr.flat[idx] = orig - h
        fm = float(value(f(base)))
        arr.flat[idx] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = float(grads[name].flat[idx])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
