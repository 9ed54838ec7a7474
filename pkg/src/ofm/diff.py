"""Tape-based reverse-mode differentiation over dense numpy arrays.

A :class:`Tape` records every operation applied to tracked tensors in
insertion order, which is also a valid topological order.  Gradients are
obtained by walking the tape backwards once per set of cotangents.

Tensors that are not attached to a tape behave like plain arrays: the ops
below compute values without recording anything, which is how the vector
fields are evaluated inside ODE solvers when no gradient is needed.

FFT convention: the forward transform is unnormalized and the inverse
carries the ``1/n`` factor (numpy's default).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import special


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node: int, op: str):
        super().__init__(f"non-finite value produced by node {node} ({op})")
        self.node = node
        self.op = op


class NonDifferentiableError(RuntimeError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    backward: Callable | None


class Tensor:
    """Array value with an optional position on a tape."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {tag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of operations on tracked tensors."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value, name: str | None = None) -> Tensor:
        value = np.asarray(value)
        if not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        idx = len(self.nodes)
        self.nodes.append(Node(f"input:{name}" if name else "input", (), None))
        return Tensor(value, self, idx)

    def record(self, op: str, parents: Sequence[Tensor], value, backward) -> Tensor:
        idx = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(idx, op)
        inputs = tuple(-1 if p.node is None else p.node for p in parents)
        self.nodes.append(Node(op, inputs, backward))
        return Tensor(value, self, idx)

    def gradients(
        self,
        outputs: Sequence[Tensor],
        cotangents: Sequence,
        wrt: Sequence[Tensor],
    ) -> list[np.ndarray]:
        """Return d<cotangents, outputs>/d(wrt) by one reverse sweep."""
        adj: dict[int, np.ndarray] = {}
        for out, cot in zip(outputs, cotangents):
            cot = np.asarray(cot, dtype=out.data.dtype if np.issubdtype(out.data.dtype, np.floating) else np.float64)
            if cot.shape != out.shape:
                raise ShapeError(f"cotangent shape {cot.shape} != output shape {out.shape}")
            if out.node is None or out.tape is not self:
                continue
            adj[out.node] = adj[out.node] + cot if out.node in adj else cot
        if not adj:
            return [np.zeros_like(w.data) for w in wrt]
        keep = {w.node for w in wrt}
        start = max(adj)
        for idx in range(start, -1, -1):
            g = adj.get(idx)
            if g is None:
                continue
            node = self.nodes[idx]
            if not node.inputs:
                continue
            if node.backward is None:
                if np.any(g != 0):
                    raise NonDifferentiableError(f"node {idx} ({node.op}) is not differentiable")
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.inputs, grads):
                if parent < 0 or pg is None:
                    continue
                if parent in adj:
                    adj[parent] = adj[parent] + pg
                else:
                    adj[parent] = pg
            if idx not in keep:
                del adj[idx]
        result = []
        for w in wrt:
            g = adj.get(w.node)
            result.append(np.zeros_like(w.data) if g is None else g)
        return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64) if np.isscalar(x) else np.asarray(x))


def _operands(a, b) -> tuple[Tensor, Tensor]:
    # python scalars take the dtype of the other operand (keeps float32 graphs float32)
    if np.isscalar(a) and isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype if b.dtype.kind == "f" else np.float64)), b
    if np.isscalar(b) and isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype if a.dtype.kind == "f" else np.float64))
    return as_tensor(a), as_tensor(b)


def _tape_of(*xs: Tensor) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("tensors belong to different tapes")
            tape = x.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _emit(op, parents, value, backward) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(value)
    return tape.record(op, parents, value, backward)


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    av, bv = a.data, b.data
    return _emit("mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    av, bv = a.data, b.data
    out = av / bv
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("pow", (a,), av ** p, lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("square", (a,), av * av, lambda g: (2.0 * g * av,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("log", (a,), np.log(av), lambda g: (g / av,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("sin", (a,), np.sin(av), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _emit("cos", (a,), np.cos(av), lambda g: (-g * np.sin(av),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit("gelu", (a,), out, backward)


def floor(a) -> Tensor:
    """Piecewise-constant op; reverse sweeps through it with a nonzero
    cotangent raise :class:`NonDifferentiableError`."""
    a = as_tensor(a)
    return _emit("floor", (a,), np.floor(a.data), None)


def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data)


# -- reductions and shape ops --------------------------------------------------

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), a.data.sum(axis=axis, keepdims=keepdims), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _emit("broadcast", (a,), np.broadcast_to(a.data, shape).copy(),
                 lambda g: (_unbroadcast(g, old),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=axis), backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("getitem", (a,), a.data[idx], backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return (_unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape))

    return _emit("matmul", (a, b), av @ bv, backward)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum.  Every index of an operand must appear either in
    the other operand or in the output."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        for c in own:
            if c not in other and c not in out_idx:
                raise ShapeError(f"index {c!r} in {spec!r} is summed within one operand")
    av, bv = a.data, b.data

    def backward(g):
        return (np.einsum(f"{out_idx},{ib}->{ia}", g, bv),
                np.einsum(f"{out_idx},{ia}->{ib}", g, av))

    try:
        value = np.einsum(spec, av, bv)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _emit("einsum", (a, b), value, backward)


def linear(x, weight, bias=None) -> Tensor:
    """Pointwise channel mixing: y[b, o, ...] = sum_i W[o, i] x[b, i, ...] + bias[o].

    ``x`` is channels-first with any number of trailing spatial axes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xv, wv = x.data, weight.data
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(f"linear: input has {xv.shape[1]} channels, weight expects {wv.shape[1]}")
    bsz, cin = xv.shape[:2]
    spatial = xv.shape[2:]
    flat = xv.reshape(bsz, cin, -1)
    out = np.matmul(wv, flat)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None]
    out = out.reshape((bsz, wv.shape[0]) + spatial)

    need_x = x.node is not None
    need_w = weight.node is not None or (bias is not None and as_tensor(bias).node is not None)

    def backward(g):
        gf = g.reshape(bsz, wv.shape[0], -1)
        gx = np.matmul(wv.T, gf).reshape(xv.shape) if need_x else None
        gw = np.tensordot(gf, flat, axes=([0, 2], [0, 2])) if need_w else None
        if bias is None:
            return gx, gw
        return gx, gw, (gf.sum(axis=(0, 2)) if need_w else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", parents, out, backward)


# -- spectral ------------------------------------------------------------------

@dataclass(frozen=True)
class SpectralCoeffs:
    """Real-FFT coefficients of a signal on a regular grid.

    ``coeffs`` has the grid's spatial shape except for the last axis, which
    holds ``n // 2 + 1`` entries (the Hermitian-redundant half is omitted).
    """

    coeffs: np.ndarray
    grid_shape: tuple[int, ...]

    def __post_init__(self):
        d = len(self.grid_shape)
        tail = self.coeffs.shape[-d:]
        expected = tuple(self.grid_shape[:-1]) + (self.grid_shape[-1] // 2 + 1,)
        if tail != expected:
            raise ShapeError(
                f"coefficient layout {tail} inconsistent with grid {self.grid_shape} (expected {expected})")

    @property
    def retained_modes(self) -> tuple[int, ...]:
        return self.coeffs.shape[-len(self.grid_shape):]


def spectral_transform(signal, direction: str = "forward", dims: int | Sequence[int] = 1,
                       grid_shape: Sequence[int] | None = None):
    """Real FFT over the trailing ``dims`` axes.

    ``direction="forward"`` maps a real array to :class:`SpectralCoeffs`
    (unnormalized); ``"inverse"`` maps coefficients back to real values with
    the ``1/n`` factor, on ``grid_shape`` (taken from the coefficients when
    omitted).
    """
    ndims = dims if isinstance(dims, int) else len(dims)
    axes = tuple(range(-ndims, 0))
    if direction == "forward":
        x = np.asarray(signal.data if isinstance(signal, Tensor) else signal, dtype=float)
        grid = x.shape[-ndims:]
        if min(grid) < 2:
            raise ShapeError(f"spatial extents must be >= 2, got {grid}")
        return SpectralCoeffs(np.fft.rfftn(x, axes=axes), tuple(grid))
    if direction == "inverse":
        if isinstance(signal, SpectralCoeffs):
            coeffs, grid = signal.coeffs, signal.grid_shape
            if grid_shape is not None and tuple(grid_shape) != grid:
                SpectralCoeffs(coeffs, tuple(grid_shape))
                grid = tuple(grid_shape)
        else:
            if grid_shape is None:
                raise ShapeError("inverse transform of raw coefficients needs grid_shape")
            coeffs, grid = np.asarray(signal), tuple(grid_shape)
            SpectralCoeffs(coeffs, grid)
        return np.fft.irfftn(coeffs, s=grid, axes=axes)
    raise ValueError(f"unknown direction {direction!r}")


def mode_index(n: int, modes: int, last: bool) -> np.ndarray:
    """Retained frequency indices along one axis of an rfftn layout."""
    if last:
        if modes > n // 2 + 1:
            raise ShapeError(f"{modes} modes exceed the {n // 2 + 1} coefficients of a length-{n} axis")
        return np.arange(modes)
    if 2 * modes > n:
        raise ShapeError(f"{modes} modes (both signs) exceed a length-{n} axis")
    return np.concatenate([np.arange(modes), np.arange(n - modes, n)])


def _half_weights(n: int, kmax: int) -> np.ndarray:
    """Multiplicity of each retained rfft coefficient on the last axis."""
    c = np.full(kmax, 2.0)
    c[0] = 1.0
    if n % 2 == 0 and kmax > n // 2:
        c[n // 2] = 1.0
    return c


def _complex_view(w: np.ndarray) -> np.ndarray:
    if w.dtype != np.float32:
        w = w.astype(np.float64, copy=False)
    w = np.ascontiguousarray(w)
    return w.view(np.complex64 if w.dtype == np.float32 else np.complex128)[..., 0]


def _real_view(z: np.ndarray, dtype) -> np.ndarray:
    z = np.ascontiguousarray(z)
    return z.view(z.real.dtype).reshape(z.shape + (2,)).astype(dtype, copy=False)


@lru_cache(maxsize=64)
def _selection(spatial: tuple[int, ...], modes: tuple[int, ...]):
    d = len(modes)
    idx = [mode_index(n, k, last=(i == d - 1)) for i, (n, k) in enumerate(zip(spatial, modes))]
    sel = (slice(None), slice(None)) + tuple(np.ix_(*idx))
    return sel, tuple(len(i) for i in idx)


def spectral_conv(x, weight, modes: Sequence[int]) -> Tensor:
    """FFT, truncate to retained modes, complex channel mixing, zero-pad, inverse FFT.

    x: (B, Cin, *S) real.  weight: real array of shape
    (Cin, Cout, *R, 2) holding real/imaginary parts, where R is the retained
    index count per spatial axis (``2*modes`` on leading axes, ``modes`` on
    the last one).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    xv, wv = x.data, weight.data
    modes = tuple(int(m) for m in modes)
    d = len(modes)
    spatial = xv.shape[2:]
    if len(spatial) != d:
        raise ShapeError(f"spectral_conv: {d} mode counts for {len(spatial)} spatial axes")
    sel, rshape = _selection(spatial, modes)
    cin, cout = wv.shape[:2]
    if wv.shape[2:] != rshape + (2,) or cin != xv.shape[1]:
        raise ShapeError(f"spectral weight shape {wv.shape} incompatible with input {xv.shape} / modes {modes}")
    bsz = xv.shape[0]
    nmodes = int(np.prod(rshape))
    ntot = int(np.prod(spatial))
    axes = tuple(range(2, 2 + d))
    nlast = spatial[-1]
    kf = nlast // 2 + 1
    cw = _half_weights(nlast, kf)
    need_w = weight.node is not None

    wc = np.ascontiguousarray(_complex_view(wv).reshape(cin, cout, nmodes).transpose(2, 0, 1))  # (M, Cin, Cout)
    if d == 1:
        k = modes[0]
        xs = np.ascontiguousarray(np.fft.rfft(xv, axis=-1)[..., :k].transpose(2, 0, 1))  # (M, B, Cin)
        ys = np.matmul(xs, wc)
        out = np.fft.irfft(ys.transpose(1, 2, 0), n=nlast, axis=-1)
    else:
        xf = np.fft.rfftn(xv, axes=axes)
        xs = np.ascontiguousarray(xf[sel].reshape(bsz, cin, nmodes).transpose(2, 0, 1))
        ys = np.matmul(xs, wc)
        yf = np.zeros((bsz, cout) + xf.shape[2:], dtype=xf.dtype)
        yf[sel] = ys.transpose(1, 2, 0).reshape((bsz, cout) + rshape)
        out = np.fft.irfftn(yf, s=spatial, axes=axes)
    out = out.astype(xv.dtype, copy=False)

    def backward(g):
        if d == 1:
            k = modes[0]
            gys = np.ascontiguousarray((np.fft.rfft(g, axis=-1)[..., :k] * (cw[:k] / ntot)).transpose(2, 0, 1))
        else:
            gyf = np.fft.rfftn(g, axes=axes) * (cw / ntot)
            gys = np.ascontiguousarray(gyf[sel].reshape(bsz, cout, nmodes).transpose(2, 0, 1))  # (M, B, Cout)
        gxs = np.matmul(gys, np.ascontiguousarray(np.conj(wc).transpose(0, 2, 1)))  # (M, B, Cin)
        if need_w:
            gwc = np.matmul(np.ascontiguousarray(np.conj(xs).transpose(0, 2, 1)), gys)  # (M, Cin, Cout)
        if d == 1:
            k = modes[0]
            gx = np.fft.irfft(gxs.transpose(1, 2, 0) / cw[:k], n=nlast, axis=-1) * ntot
        else:
            gxf = np.zeros((bsz, cin) + spatial[:-1] + (kf,), dtype=gxs.dtype)
            gxf[sel] = gxs.transpose(1, 2, 0).reshape((bsz, cin) + rshape)
            gx = np.fft.irfftn(gxf / cw, s=spatial, axes=axes) * ntot
        gx = gx.astype(xv.dtype, copy=False)
        if not need_w:
            return gx, None
        gw = gwc.transpose(1, 2, 0).reshape((cin, cout) + rshape)
        return gx, _real_view(gw, wv.dtype)

    return _emit("spectral_conv", (x, weight), out, backward)


# -- graph-level API -----------------------------------------------------------

class Graph:
    """A function of named tensors, traced onto a fresh tape on every call.

    ``fn`` receives keyword :class:`Tensor` arguments and returns a Tensor,
    a tuple of Tensors or a dict of Tensors.  ``differentiable`` names the
    inputs gradients are reported for (default: all of them).
    """

    def __init__(self, fn: Callable, inputs: Sequence[str] | None = None,
                 differentiable: Iterable[str] | None = None, check_finite: bool = True):
        self.fn = fn
        self.input_names = None if inputs is None else tuple(inputs)
        self.differentiable = None if differentiable is None else frozenset(differentiable)
        self.check_finite = check_finite
        self.tape: Tape | None = None

    def _trace(self, inputs: Mapping[str, np.ndarray]):
        if self.input_names is not None and set(inputs) != set(self.input_names):
            raise ShapeError(f"graph expects inputs {sorted(self.input_names)}, got {sorted(inputs)}")
        tape = Tape(self.check_finite)
        tracked = {k: tape.variable(np.asarray(v, dtype=float), k) for k, v in inputs.items()}
        out = self.fn(**tracked)
        if isinstance(out, Tensor):
            outs = {"out": out}
        elif isinstance(out, dict):
            outs = dict(out)
        else:
            outs = {f"out{i}": o for i, o in enumerate(out)}
        self.tape = tape
        return tape, tracked, outs


def forward(graph: Graph, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    _, _, outs = graph._trace(inputs)
    return {k: as_tensor(v).data for k, v in outs.items()}


def vjp(graph: Graph, inputs: Mapping[str, np.ndarray], cotangent) -> dict[str, np.ndarray]:
    """Gradient of <cotangent, outputs> with respect to each differentiable input."""
    tape, tracked, outs = graph._trace(inputs)
    if not isinstance(cotangent, Mapping):
        if len(outs) != 1:
            raise ShapeError("graph has several outputs; pass cotangents by name")
        cotangent = {next(iter(outs)): cotangent}
    if set(cotangent) != set(outs):
        raise ShapeError(f"cotangents for {sorted(cotangent)} but outputs are {sorted(outs)}")
    names = [k for k in tracked if graph.differentiable is None or k in graph.differentiable]
    outputs = [as_tensor(outs[k]) for k in cotangent]
    grads = tape.gradients(outputs, [cotangent[k] for k in cotangent], [tracked[k] for k in names])
    return dict(zip(names, grads))
