"""Reverse-mode automatic differentiation on a tape of numpy arrays.

A :class:`Tape` records every primitive applied to tracked values (:class:`Var`)
in execution order; :meth:`Tape.backward` walks the records in reverse and
accumulates adjoints. Operands that are plain numbers or arrays are treated
as constants. All arithmetic is float64.

Trainable scalars live in a :class:`ParamVector` (one flat array split into
named segments) so that gradients and optimizer state stay flat as well.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, TapeStateError

_BASIC_INDEX = (int, np.integer, slice, type(None), type(Ellipsis))


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(a):
    return np.swapaxes(a, -1, -2)


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "slot")
    __array_priority__ = 1000

    def __init__(self, tape, slot):
        self.tape = tape
        self.slot = slot

    @property
    def value(self):
        return self.tape.values[self.slot]

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(slot={self.slot}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive operations with value and adjoint buffers."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.values = []
        self.records = []
        self.adjoints = None
        self.params = []  # (slot, ParamVector, flat offset)

    def __len__(self):
        return len(self.records)

    def _new(self, value):
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def leaf(self, value):
        """Tracked input; gradients are available after :meth:`backward`."""
        value = np.array(value, dtype=np.float64)
        var = self._new(value)
        self.records.append(("leaf", (), var.slot, None))
        return var

    def param(self, pv, segment, offset=0, shape=None):
        """Leaf viewing a slice of a :class:`ParamVector` segment."""
        seg_off, seg_len = pv.segments[segment]
        if shape is None:
            shape = (seg_len - offset,)
        size = int(np.prod(shape))
        if offset + size > seg_len:
            raise InvalidArgument(f"slice exceeds segment {segment!r}")
        start = seg_off + offset
        value = pv.data[start : start + size].reshape(shape)
        var = self._new(value)
        self.records.append(("leaf", (), var.slot, None))
        self.params.append((var.slot, pv, start))
        return var

    def record(self, op, operands, value, aux=None):
        ins = []
        for o in operands:
            if isinstance(o, Var):
                if o.tape is not self:
                    raise InvalidArgument("operands belong to different tapes")
                ins.append(o.slot)
            else:
                ins.append(None)
        consts = [None if isinstance(o, Var) else o for o in operands]
        out = self._new(value)
        self.records.append((op, (tuple(ins), consts), out.slot, aux))
        return out

    def backward(self, output, seed=None):
        """Propagate adjoints from ``output`` (or a list of ``(var, seed)``)."""
        if not self.records:
            raise TapeStateError("backward called before any forward computation")
        adj = [None] * len(self.values)
        owned = set()
        seeds = [(output, seed)] if isinstance(output, Var) else list(output)
        last = -1
        for var, s in seeds:
            if var.tape is not self:
                raise InvalidArgument("seed variable belongs to a different tape")
            s = np.ones_like(var.value) if s is None else np.asarray(s, dtype=np.float64)
            s = np.array(np.broadcast_to(s, var.value.shape))
            adj[var.slot] = s if adj[var.slot] is None else adj[var.slot] + s
            owned.add(var.slot)
            last = max(last, var.slot)
        seed_slots = {v.slot for v, _ in seeds}
        values = self.values
        for op, io, out, aux in reversed(self.records):
            if out > last or op == "leaf":
                continue
            g = adj[out]
            if g is None:
                continue
            ins, consts = io
            in_vals = [values[s] if s is not None else c for s, c in zip(ins, consts)]
            need = [s is not None for s in ins]
            grads = _VJP[op](g, in_vals, values[out], aux, need)
            for s, gi in zip(ins, grads):
                if s is None or gi is None:
                    continue
                # gradients may alias each other or g; copy before the first in-place add
                if adj[s] is None:
                    adj[s] = gi
                elif s in owned:
                    adj[s] += gi
                else:
                    adj[s] = adj[s] + gi
                    owned.add(s)
            if out not in seed_slots:
                adj[out] = None  # intermediates are released; leaves and seeds keep theirs
        self.adjoints = adj
        return adj

    def grad(self, var):
        if self.adjoints is None:
            raise TapeStateError("no backward pass has been run on this tape")
        g = self.adjoints[var.slot]
        return np.zeros_like(var.value) if g is None else g

    def param_grad(self, pv):
        """Flat gradient over the whole of ``pv`` (zeros where untouched)."""
        if self.adjoints is None:
            raise TapeStateError("no backward pass has been run on this tape")
        out = np.zeros_like(pv.data)
        for slot, owner, start in self.params:
            if owner is not pv:
                continue
            g = self.adjoints[slot]
            if g is not None:
                out[start : start + g.size] += g.ravel()
        return out


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _binary(op, a, b, fn):
    tape = _tape_of(a, b)
    value = fn(_val(a), _val(b))
    if tape is None:
        return value
    return tape.record(op, (a, b), value)


def _unary(op, a, fn, aux=None):
    value = fn(_val(a))
    if not isinstance(a, Var):
        return value
    return a.tape.record(op, (a,), value, aux)


# ---- primitives -----------------------------------------------------------


def add(a, b):
    return _binary("add", a, b, np.add)


def sub(a, b):
    return _binary("sub", a, b, np.subtract)


def mul(a, b):
    return _binary("mul", a, b, np.multiply)


def div(a, b):
    return _binary("div", a, b, np.divide)


def neg(a):
    return _unary("neg", a, np.negative)


def exp(a):
    return _unary("exp", a, np.exp)


def log(a):
    return _unary("log", a, np.log)


def sqrt(a):
    return _unary("sqrt", a, np.sqrt)


def sin(a):
    return _unary("sin", a, np.sin)


def cos(a):
    return _unary("cos", a, np.cos)


def square(a):
    return _unary("square", a, np.square)


def abs_(a):
    return _unary("abs", a, np.abs)


def arccos_clamped(a, eps=0.0):
    """``arccos`` of the input clipped to [-1+eps, 1-eps]."""
    lo, hi = -1.0 + eps, 1.0 - eps
    return _unary("arccos", a, lambda v: np.arccos(np.clip(v, lo, hi)), (lo, hi))


def maximum(a, c):
    """Elementwise ``max(a, c)`` against a constant."""
    return _unary("maximum", a, lambda v: np.maximum(v, c), c)


def minimum(a, c):
    return _unary("minimum", a, lambda v: np.minimum(v, c), c)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


def sigmoid(a):
    def fn(v):
        e = np.exp(-np.abs(v))
        return np.where(v >= 0, 1.0, e) / (1.0 + e)

    return _unary("sigmoid", a, fn)


def softplus(a):
    """``log(1 + e^a)``, evaluated without overflow."""
    return _unary("softplus", a, lambda v: np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))))


def _elu_value(v):
    # e^x - 1 >= x everywhere, so the max picks the right branch
    out = np.array(np.minimum(v, 0.0))
    np.exp(out, out=out)
    out -= 1.0
    return np.maximum(v, out, out=out)


def elu(a):
    return _unary("elu", a, _elu_value)


def elu_slope(h):
    """ELU derivative expressed through the ELU *output* ``h``: ``min(h, 0) + 1``.

    Equals 1 for x >= 0 and e^x otherwise; differentiable through ``h``.
    """

    def fn(v):
        out = np.minimum(v, 0.0)
        out += 1.0
        return out

    return _unary("elu_slope", h, fn)


def elu_grad(a):
    """Derivative of ELU as a function of its input."""
    return elu_slope(elu(a))


def sum_(a, axis=None, keepdims=False):
    return _unary("sum", a, lambda v: np.sum(v, axis=axis, keepdims=keepdims), (axis, keepdims))


def mean(a, axis=None, keepdims=False):
    v = _val(a)
    n = v.size if axis is None else np.prod([v.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def l1_norm(a, axis=-1):
    return sum_(abs_(a), axis=axis)


def l2_norm(a, axis=-1):
    return sqrt(sum_(square(a), axis=axis))


def matmul(a, b):
    return _binary("matmul", a, b, np.matmul)


def matmul_t(a, b):
    """``a @ b^T`` over the last two axes."""
    return _binary("matmul_t", a, b, lambda x, y: x @ _swap(y))


def affine(x, W, b):
    """``x @ W + b`` for ``x`` of shape ``(in,)`` or ``(N, in)``."""
    tape = _tape_of(x, W, b)
    value = _val(x) @ _val(W)
    value += _val(b)
    if tape is None:
        return value
    return tape.record("affine", (x, W, b), value)


def transpose(a):
    return _unary("transpose", a, _swap)


def reshape(a, shape):
    return _unary("reshape", a, lambda v: v.reshape(shape))


def getitem(a, idx):
    return _unary("getitem", a, lambda v: v[idx], idx)


def take(a, indices):
    """Gather rows: ``a[indices]`` along the first axis."""
    indices = np.asarray(indices, dtype=np.intp)
    return _unary("take", a, lambda v: np.take(v, indices, axis=0), indices)


def concat(xs, axis=-1):
    tape = _tape_of(*xs)
    vals = [_val(x) for x in xs]
    value = np.concatenate(vals, axis=axis)
    if tape is None:
        return value
    sizes = [v.shape[axis] for v in vals]
    return tape.record("concat", xs, value, (axis, sizes))


def stack(xs, axis=0):
    tape = _tape_of(*xs)
    value = np.stack([_val(x) for x in xs], axis=axis)
    if tape is None:
        return value
    return tape.record("stack", xs, value, axis)


def where(mask, a, b):
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    tape = _tape_of(a, b)
    value = np.where(mask, _val(a), _val(b))
    if tape is None:
        return value
    return tape.record("where", (a, b), value, mask)


def cumprod_exclusive(a):
    """``out[..., i] = prod(a[..., :i])`` along the last axis (``out[..., 0] = 1``)."""

    def fn(v):
        out = np.ones_like(v)
        out[..., 1:] = np.cumprod(v[..., :-1], axis=-1)
        return out

    return _unary("cumprod_excl", a, fn)


def detach(a):
    return _val(a).copy()


# ---- vector-Jacobian products --------------------------------------------


def _vjp_add(g, ins, out, aux, need):
    return [_unbroadcast(g, np.shape(ins[0])) if need[0] else None,
            _unbroadcast(g, np.shape(ins[1])) if need[1] else None]


def _vjp_sub(g, ins, out, aux, need):
    return [_unbroadcast(g, np.shape(ins[0])) if need[0] else None,
            _unbroadcast(-g, np.shape(ins[1])) if need[1] else None]


def _vjp_mul(g, ins, out, aux, need):
    a, b = ins
    return [_unbroadcast(g * b, np.shape(a)) if need[0] else None,
            _unbroadcast(g * a, np.shape(b)) if need[1] else None]


def _vjp_div(g, ins, out, aux, need):
    a, b = ins
    ga = g / b
    return [_unbroadcast(ga, np.shape(a)) if need[0] else None,
            _unbroadcast(-ga * out, np.shape(b)) if need[1] else None]


def _vjp_sum(g, ins, out, aux, need):
    axis, keepdims = aux
    shape = np.shape(ins[0])
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, shape)]


def _vjp_matmul(g, ins, out, aux, need):
    a, b = ins
    return [_unbroadcast(g @ _swap(b), np.shape(a)) if need[0] else None,
            _unbroadcast(_swap(a) @ g, np.shape(b)) if need[1] else None]


def _vjp_matmul_t(g, ins, out, aux, need):
    a, b = ins
    return [_unbroadcast(g @ b, np.shape(a)) if need[0] else None,
            _unbroadcast(_swap(g) @ a, np.shape(b)) if need[1] else None]


def _vjp_affine(g, ins, out, aux, need):
    x, W, b = ins
    gx = gW = gb = None
    if need[0]:
        gx = g @ W.T
    if need[1]:
        gW = np.outer(x, g) if x.ndim == 1 else x.T @ g
    if need[2]:
        gb = g if g.ndim == 1 else g.sum(axis=0)
    return [gx, gW, gb]


def _vjp_getitem(g, ins, out, aux, need):
    idx = aux
    gz = np.zeros_like(ins[0])
    parts = idx if isinstance(idx, tuple) else (idx,)
    if all(isinstance(p, _BASIC_INDEX) for p in parts):
        gz[idx] = g
    else:
        np.add.at(gz, idx, g)
    return [gz]


def _vjp_take(g, ins, out, aux, need):
    gz = np.zeros_like(ins[0])
    np.add.at(gz, aux, g)
    return [gz]


def _vjp_concat(g, ins, out, aux, need):
    axis, sizes = aux
    splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
    return [s if n else None for s, n in zip(splits, need)]


def _vjp_stack(g, ins, out, aux, need):
    axis = aux
    return [np.take(g, i, axis=axis) if n else None for i, n in enumerate(need)]


def _vjp_where(g, ins, out, aux, need):
    mask = aux
    a, b = ins
    # masked-out branches are always finite by construction, so multiplying is safe
    return [_unbroadcast(g * mask, np.shape(a)) if need[0] else None,
            _unbroadcast(g * ~mask, np.shape(b)) if need[1] else None]


def _vjp_cumprod_excl(g, ins, out, aux, need):
    x = ins[0]
    n = x.shape[-1]
    # grad_j = out_j * S_j,  S_j = g_{j+1} + x_{j+1} * S_{j+1},  S_{n-1} = 0
    S = np.zeros_like(x)
    for j in range(n - 2, -1, -1):
        S[..., j] = g[..., j + 1] + x[..., j + 1] * S[..., j + 1]
    return [out * S]


def _vjp_elu(g, ins, out, aux, need):
    slope = np.minimum(out, 0.0)
    slope += 1.0
    slope *= g
    return [slope]


def _vjp_arccos(g, ins, out, aux, need):
    lo, hi = aux
    x = ins[0]
    inside = (x > lo) & (x < hi)
    xs = np.where(inside, x, 0.0)
    return [np.where(inside, -g / np.sqrt(1.0 - xs * xs), 0.0)]


_VJP = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "neg": lambda g, ins, out, aux, need: [-g],
    "exp": lambda g, ins, out, aux, need: [g * out],
    "log": lambda g, ins, out, aux, need: [g / ins[0]],
    "sqrt": lambda g, ins, out, aux, need: [g * 0.5 / out],
    "sin": lambda g, ins, out, aux, need: [g * np.cos(ins[0])],
    "cos": lambda g, ins, out, aux, need: [-g * np.sin(ins[0])],
    "square": lambda g, ins, out, aux, need: [2.0 * g * ins[0]],
    "abs": lambda g, ins, out, aux, need: [g * np.sign(ins[0])],
    "arccos": _vjp_arccos,
    "maximum": lambda g, ins, out, aux, need: [g * (ins[0] >= aux)],
    "minimum": lambda g, ins, out, aux, need: [g * (ins[0] <= aux)],
    "sigmoid": lambda g, ins, out, aux, need: [g * out * (1.0 - out)],
    "softplus": lambda g, ins, out, aux, need: [g * (1.0 - np.exp(-out))],
    "elu": _vjp_elu,
    "elu_slope": lambda g, ins, out, aux, need: [g * (ins[0] < 0)],
    "sum": _vjp_sum,
    "matmul": _vjp_matmul,
    "matmul_t": _vjp_matmul_t,
    "affine": _vjp_affine,
    "transpose": lambda g, ins, out, aux, need: [_swap(g)],
    "reshape": lambda g, ins, out, aux, need: [g.reshape(np.shape(ins[0]))],
    "getitem": _vjp_getitem,
    "take": _vjp_take,
    "concat": _vjp_concat,
    "stack": _vjp_stack,
    "where": _vjp_where,
    "cumprod_excl": _vjp_cumprod_excl,
}


def backward(tape, output, seed=None):
    return tape.backward(output, seed)


# ---- parameters, MLPs, optimizer -----------------------------------------


class ParamVector:
    """Flat float64 parameter storage with a named segment table."""

    def __init__(self):
        self.data = np.zeros(0)
        self.segments = {}

    def __len__(self):
        return len(self.data)

    def add_segment(self, name, values):
        if name in self.segments:
            raise InvalidArgument(f"segment {name!r} already exists")
        values = np.asarray(values, dtype=np.float64).ravel()
        self.segments[name] = (len(self.data), len(values))
        self.data = np.concatenate([self.data, values])
        return self

    def segment(self, name):
        off, n = self.segments[name]
        return self.data[off : off + n]

    def mask(self, *names):
        m = np.zeros(len(self.data), dtype=bool)
        for name in names:
            off, n = self.segments[name]
            m[off : off + n] = True
        return m

    def copy(self):
        pv = ParamVector()
        pv.data = self.data.copy()
        pv.segments = dict(self.segments)
        return pv


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: ELU on hidden layers, linear output."""

    input_width: int
    hidden: tuple
    output_width: int

    def __post_init__(self):
        widths = (self.input_width, *self.hidden, self.output_width)
        if any(int(w) != w or w < 1 for w in widths):
            raise InvalidArgument("layer widths must be positive integers")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_shapes(self):
        widths = (self.input_width, *self.hidden, self.output_width)
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self.layer_shapes)


def init_mlp(spec, rng, zero_output=False):
    """Glorot-uniform weights, zero biases; optionally a zeroed output layer."""
    chunks = []
    shapes = spec.layer_shapes
    for k, (fan_in, fan_out) in enumerate(shapes):
        if zero_output and k == len(shapes) - 1:
            W = np.zeros((fan_in, fan_out))
        else:
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        chunks += [W.ravel(), np.zeros(fan_out)]
    return np.concatenate(chunks)


def _mlp_weights(params, spec, tape, segment):
    off, n = params.segments[segment]
    if n != spec.n_params:
        raise InvalidArgument(f"segment {segment!r} holds {n} values, network needs {spec.n_params}")
    layers = []
    pos = 0
    for fan_in, fan_out in spec.layer_shapes:
        W = tape.param(params, segment, pos, (fan_in, fan_out))
        pos += fan_in * fan_out
        b = tape.param(params, segment, pos, (fan_out,))
        pos += fan_out
        layers.append((W, b))
    return layers


def _check_input(spec, x):
    shape = np.shape(_val(x))
    if not shape or shape[-1] != spec.input_width:
        raise InvalidArgument(f"input width {shape[-1] if shape else 0} != {spec.input_width}")


def _elu_and_slope(a):
    """ELU of ``a`` (in place) and its derivative ``min(h, 0) + 1``."""
    h = _elu_value(a)
    s = np.minimum(h, 0.0)
    s += 1.0
    return h, s


def _fused_forward(x, weights, keep):
    hs, ss = [x], []
    h = x
    for W, b in weights[:-1]:
        a = h @ W
        a += b
        h, s = _elu_and_slope(a)
        hs.append(h)
        ss.append(s)
    W, b = weights[-1]
    out = h @ W
    out += b
    return out, (hs, ss) if keep else None


def _weights_as(layers, dtype):
    return [(W.value.astype(dtype, copy=False), b.value.astype(dtype, copy=False)) for W, b in layers]


def _mlp_record(tape, op, x, layers, value, aux):
    operands = [x]
    for W, b in layers:
        operands += [W, b]
    return tape.record(op, operands, value, aux)


def _vjp_mlp(g, ins, out, aux, need):
    hs, ss, dtype = aux
    n_layers = (len(ins) - 1) // 2
    Ws = [W.astype(dtype, copy=False) for W in ins[1::2]]
    g = g.astype(dtype, copy=False)
    grads = [None] * len(ins)
    h_bar = g
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            h_bar = h_bar * ss[k]  # now the adjoint of the pre-activation
        grads[1 + 2 * k] = hs[k].T @ h_bar
        grads[2 + 2 * k] = h_bar.sum(axis=0)
        if k > 0 or need[0]:
            h_bar = h_bar @ Ws[k].T
    grads[0] = h_bar if need[0] else None
    return [None if gr is None else gr.astype(np.float64, copy=False) for gr in grads]


def _vjp_mlp_grad(g, ins, out, aux, need):
    """Reverse pass through both the network and its input-gradient chain.

    With ``a_l = h_l W_l + b_l``, ``h_{l+1} = elu(a_l)`` and ``s_l = elu'(a_l)``
    the input gradient is built as ``u_l = s_l * c_{l+1}``, ``c_l = u_l W_l^T``
    starting from the output weight column. Its adjoint reaches the
    pre-activations through ``elu''(a) = s * [a < 0]``.
    """
    hs, ss, us, cs, out_w, out_index, dtype = aux
    n_hidden = len(ss)
    Ws = [W.astype(dtype, copy=False) for W in ins[1::2]]
    g = g.astype(dtype, copy=False)
    grads = [None] * len(ins)
    o_bar = g[:, :out_w]
    c_bar = g[:, out_w:]
    a_bar = [None] * n_hidden
    col_bar = None
    if np.any(c_bar):
        for l in range(n_hidden):
            grads[1 + 2 * l] = c_bar.T @ us[l]
            u_bar = c_bar @ Ws[l]
            c_bar = u_bar * ss[l]
            s_bar = u_bar * cs[l]
            s_bar *= ss[l]
            s_bar *= ss[l] < 1.0
            a_bar[l] = s_bar
        col_bar = c_bar.sum(axis=0)
    h_bar = o_bar
    for k in range(n_hidden, -1, -1):
        if k < n_hidden:
            h_bar = h_bar * ss[k]
            if a_bar[k] is not None:
                h_bar += a_bar[k]
        gW = hs[k].T @ h_bar
        grads[1 + 2 * k] = gW if grads[1 + 2 * k] is None else grads[1 + 2 * k] + gW
        grads[2 + 2 * k] = h_bar.sum(axis=0)
        if k > 0 or need[0]:
            h_bar = h_bar @ Ws[k].T
    if col_bar is not None:
        grads[-2][:, out_index] += col_bar
    grads[0] = h_bar if need[0] else None
    return [None if gr is None else gr.astype(np.float64, copy=False) for gr in grads]


_VJP["mlp"] = _vjp_mlp
_VJP["mlp_grad"] = _vjp_mlp_grad


def mlp_forward(params, spec, x, tape, segment, fused=True, dtype=np.float64):
    """Evaluate the network stored in ``params[segment]`` on ``x`` (``(in,)`` or ``(N, in)``).

    ``fused=False`` builds the same computation from elementary tape
    operations; it is slower and serves as a cross-check. ``dtype`` sets the
    working precision inside the fused op; inputs, outputs and gradients
    stay float64.
    """
    _check_input(spec, x)
    layers = _mlp_weights(params, spec, tape, segment)
    if not fused:
        return _mlp_forward_composed(x, layers)
    one = np.ndim(_val(x)) == 1
    xv = _val(x).reshape(1, -1) if one else _val(x)
    if isinstance(x, Var) and one:
        x = x.reshape((1, spec.input_width))
    value, aux = _fused_forward(xv.astype(dtype, copy=False), _weights_as(layers, dtype), True)
    out = _mlp_record(tape, "mlp", x, layers, value.astype(np.float64, copy=False), (*aux, dtype))
    return out.reshape((spec.output_width,)) if one else out


def _mlp_forward_composed(x, layers):
    h = x
    for k, (W, b) in enumerate(layers):
        h = affine(h, W, b)
        if k < len(layers) - 1:
            h = elu(h)
    return h


def mlp_forward_with_input_grad(params, spec, x, tape, segment, out_index=0, fused=True,
                                dtype=np.float64):
    """Network output plus the gradient of output column ``out_index`` w.r.t. ``x``.

    The input gradient is itself differentiable (e.g. by an Eikonal penalty).
    ``x`` must be a batch ``(N, in)``.
    """
    _check_input(spec, x)
    if np.ndim(_val(x)) != 2:
        raise InvalidArgument("input gradients need a batch of shape (N, in)")
    layers = _mlp_weights(params, spec, tape, segment)
    if not fused:
        return _mlp_input_grad_composed(spec, x, layers, out_index)
    xv = _val(x).astype(dtype, copy=False)
    weights = _weights_as(layers, dtype)
    value, (hs, ss) = _fused_forward(xv, weights, True)
    # back-substitution for d out[:, k] / d x, keeping every u_l = g_l * s_l
    n_hidden = len(ss)
    us, cs = [None] * n_hidden, [None] * n_hidden
    g = weights[-1][0][:, out_index]
    for l in range(n_hidden - 1, -1, -1):
        cs[l] = g
        us[l] = ss[l] * g
        g = us[l] @ weights[l][0].T
    if n_hidden == 0:
        g = np.broadcast_to(g, xv.shape)
    both = np.concatenate([value, g], axis=1).astype(np.float64, copy=False)
    out_w = spec.output_width
    rec = _mlp_record(tape, "mlp_grad", x, layers, both, (hs, ss, us, cs, out_w, out_index, dtype))
    return getitem(rec, (slice(None), slice(0, out_w))), getitem(rec, (slice(None), slice(out_w, None)))


def _mlp_input_grad_composed(spec, x, layers, out_index):
    h = x
    acts = []
    for k, (W, b) in enumerate(layers):
        h = affine(h, W, b)
        if k < len(layers) - 1:
            h = elu(h)
            acts.append(h)
    W_out = layers[-1][0]
    g = W_out[:, out_index].reshape((1, spec.hidden[-1] if spec.hidden else spec.input_width))
    for k in range(len(layers) - 2, -1, -1):
        g = mul(g, elu_slope(acts[k]))
        g = matmul_t(g, layers[k][0])
    n_rows = np.shape(_val(x))[0]
    if np.shape(g.value)[0] != n_rows:
        g = g + np.zeros((n_rows, 1))
    return h, g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    nonfinite: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place. ``lr`` may be per-parameter."""
    data = params.data if isinstance(params, ParamVector) else params
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != data.shape or state.m.shape != data.shape:
        raise InvalidArgument("parameter, gradient and state lengths differ")
    lr = np.asarray(lr, dtype=np.float64)
    if np.any(lr <= 0):
        raise InvalidArgument("learning rate must be positive")
    bad = ~np.isfinite(grads)
    if bad.any():
        state.nonfinite += int(bad.sum())
        grads = np.where(bad, 0.0, grads)
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def finite_diff_gradient(fn, x, h=1e-5):
    """Central-difference gradient of a scalar function of a vector."""
    x = np.array(x, dtype=np.float64)
    flat = x.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# ---- checkpoints ----------------------------------------------------------

CHECKPOINT_MAGIC = b"PORFCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params):
    """Write ``params`` as a versioned header followed by little-endian float64 data."""
    lines = [f"version {CHECKPOINT_VERSION}", f"segments {len(params.segments)}"]
    for name, (off, n) in params.segments.items():
        if not name or any(c.isspace() for c in name):
            raise InvalidArgument(f"segment name {name!r} cannot be stored")
        lines.append(f"{name} {off} {n}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.asarray(params.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path}: not a parameter checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    lines = blob[pos : pos + hlen].decode("utf-8").splitlines()
    pos += hlen
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise InvalidArgument(f"{path}: unsupported checkpoint version {version}")
    count = int(lines[1].split()[1])
    pv = ParamVector()
    pv.data = np.frombuffer(blob[pos:], dtype="<f8").astype(np.float64)
    for line in lines[2 : 2 + count]:
        name, off, n = line.split()
        pv.segments[name] = (int(off), int(n))
    total = sum(n for _, n in pv.segments.values())
    if total != len(pv.data):
        raise InvalidArgument(f"{path}: segment table does not cover the data")
    return pv
