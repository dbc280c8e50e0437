"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in this package that learns is built on this module: a Tensor
wraps a numpy array and remembers which operation produced it, backward()
walks that record once in reverse topological order, and gradients land on
the leaves that asked for them. Mlp and Adam live here too, along with the
binary checkpoint format (see docs/checkpoint_format.md) and the
finite-difference gradient oracle used throughout the test suite.

Deliberate non-features: no views into shared storage, no in-place ops on
tensors, no higher-order derivatives, no dtypes other than float64.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import ShapeError, ValidationError

CHECKPOINT_SCHEMA_VERSION = 1


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus the recipe that produced it.

    Tensors are value-like: operations return new tensors and never mutate
    their inputs. requires_grad propagates through every op, so subgraphs
    that cannot reach a trainable leaf are not recorded at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False):
        self.data = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        self must be a scalar. Intermediate cotangents are kept in a local
        table and discarded, so calling backward twice on the same graph
        adds the same gradient twice (leaves accumulate; they are only
        cleared by zero_grad or by hand).
        """
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValidationError("backward on a tensor that depends on no trainable leaf")

        # Iterative postorder. A node is marked seen when it is expanded,
        # not when it is pushed: marking on push can emit a shared node
        # before all of its consumers and silently drop their gradient
        # contributions.
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        cotan = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = cotan.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate persistently
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = cotan.get(key)
                cotan[key] = pg if prev is None else prev + pg

    # Arithmetic sugar. Plain numbers and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """A named trainable leaf. grad is allocated up front and zeroed on demand."""

    __slots__ = ("name", "trainable")

    def __init__(self, values, name: str = "", trainable: bool = True):
        super().__init__(values, requires_grad=True)
        self.name = name
        self.trainable = bool(trainable)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.data.shape})"


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def make_op(data: np.ndarray, parents: tuple, vjp) -> Tensor:
    """Escape hatch for building a differentiable op out of raw numpy.

    vjp receives the cotangent of the output and must return one gradient
    array (or None) per parent, already reduced to that parent's shape.
    Anything built this way should be checked against finite_diff_grad.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), vjp)


def _broadcast_check(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    _broadcast_check(a, b, "mul")

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supports 2d @ 2d plus batched operands on either side.

    The common case of a stacked input against a 2d weight, (..., m, k) @
    (k, n), is flattened into a single GEMM; everything else goes through
    numpy's broadcasting matmul.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2d+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(*lead, n)

        def vjp(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), vjp)

    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None,
           activation: str = "identity") -> Tensor:
    """act(x @ w + b) as one graph node.

    Fuses the affine layer into a single GEMM with the bias add and the
    activation applied in place on the GEMM output. Values match the
    composition of matmul/add/relu exactly; the only difference is that
    no intermediate arrays are materialized, which matters on the edge
    tensors where each temporary is tens of megabytes.
    """
    if w.ndim != 2:
        raise ShapeError(f"linear weight must be 2d, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear mismatch: {x.shape} @ {w.shape}")
    if activation not in ("relu", "identity"):
        raise ValidationError(f"unknown activation {activation!r}")
    k, n = w.shape
    if b is not None and b.shape != (n,):
        raise ShapeError(f"linear bias must be ({n},), got {b.shape}")

    x2 = x.data.reshape(-1, k)
    out2 = x2 @ w.data
    if b is not None:
        np.add(out2, b.data, out=out2)
    if activation == "relu":
        np.maximum(out2, 0.0, out=out2)

    def vjp(g):
        g2 = g.reshape(-1, n)
        if activation == "relu":
            # out = max(pre, 0), so out > 0 is exactly pre > 0
            g2 = g2 * (out2 > 0)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out2.reshape(*x.shape[:-1], n), parents, vjp)


def linear_pair(a: Tensor, c: Tensor, wa: Tensor, wc: Tensor,
                b: Tensor | None = None, activation: str = "identity") -> Tensor:
    """act(a @ wa + c @ wc + b): a two-operand affine layer in one node.

    Equivalent to concatenating a and c and multiplying by the stacked
    weight [wa; wc], but skips the concat and evaluates the halves as two
    GEMMs accumulated into one buffer.
    """
    for w, operand, label in ((wa, a, "a"), (wc, c, "c")):
        if w.ndim != 2:
            raise ShapeError(f"linear_pair weights must be 2d, got {w.shape}")
        if operand.shape[-1] != w.shape[0]:
            raise ShapeError(f"linear_pair mismatch on {label}: {operand.shape} @ {w.shape}")
    if a.shape[:-1] != c.shape[:-1]:
        raise ShapeError(f"linear_pair operands disagree: {a.shape} vs {c.shape}")
    if wa.shape[1] != wc.shape[1]:
        raise ShapeError(f"linear_pair outputs disagree: {wa.shape} vs {wc.shape}")
    if activation not in ("relu", "identity"):
        raise ValidationError(f"unknown activation {activation!r}")
    n = wa.shape[1]
    if b is not None and b.shape != (n,):
        raise ShapeError(f"linear_pair bias must be ({n},), got {b.shape}")

    a2 = a.data.reshape(-1, wa.shape[0])
    c2 = c.data.reshape(-1, wc.shape[0])
    out2 = a2 @ wa.data
    np.add(out2, c2 @ wc.data, out=out2)
    if b is not None:
        np.add(out2, b.data, out=out2)
    if activation == "relu":
        np.maximum(out2, 0.0, out=out2)

    def vjp(g):
        g2 = g.reshape(-1, n)
        if activation == "relu":
            g2 = g2 * (out2 > 0)
        ga = (g2 @ wa.data.T).reshape(a.shape) if a.requires_grad else None
        gc = (g2 @ wc.data.T).reshape(c.shape) if c.requires_grad else None
        gwa = a2.T @ g2 if wa.requires_grad else None
        gwc = c2.T @ g2 if wc.requires_grad else None
        if b is None:
            return ga, gc, gwa, gwc
        gb = g2.sum(axis=0) if b.requires_grad else None
        return ga, gc, gwa, gwc, gb

    parents = (a, c, wa, wc) if b is None else (a, c, wa, wc, b)
    return _make(out2.reshape(*a.shape[:-1], n), parents, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with the usual max-shift for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((g - inner) * y,)

    return _make(y, (x,), vjp)


def concat(parts: list, axis: int = -1) -> Tensor:
    """Concatenate tensors along one axis (the feature axis by default)."""
    if not parts:
        raise ShapeError("concat of zero tensors")
    datas = [p.data for p in parts]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp)


def narrow(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice [start:stop) along one axis."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return tmean(mul(d, d))


def finite_diff_grad(f, x, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar-valued function at x.

    This is the oracle that every analytic gradient in the test suite is
    checked against, so it deliberately shares no code with backward():
    each coordinate is bumped by +-h and f re-evaluated from scratch.
    f must be pure and must return a scalar Tensor.
    """
    base = _as_array(x.data if isinstance(x, Tensor) else x)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = float(f(Tensor(bumped.reshape(base.shape))).data)
        bumped[i] = flat[i] - h
        fm = float(f(Tensor(bumped.reshape(base.shape))).data)
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


class Mlp:
    """A stack of affine layers: x @ W + b, relu between layers by default.

    dims gives every width in order, so dims=[4, 16, 2] is a two-layer
    network 4 -> 16 -> 2. The final layer uses output_activation (identity
    unless asked otherwise). Weights and biases start uniform in
    +-1/sqrt(d_in), drawn from the generator handed in.
    """

    ACTIVATIONS = ("relu", "identity")

    def __init__(self, dims, rng: np.random.Generator, name: str = "mlp",
                 hidden_activation: str = "relu", output_activation: str = "identity"):
        if len(dims) < 2:
            raise ValidationError(f"mlp needs at least [d_in, d_out], got {list(dims)}")
        for act in (hidden_activation, output_activation):
            if act not in self.ACTIVATIONS:
                raise ValidationError(f"unknown activation {act!r}, expected one of {self.ACTIVATIONS}")
        self.name = name
        self.layers = []
        last = len(dims) - 2
        for i in range(len(dims) - 1):
            d_in, d_out = int(dims[i]), int(dims[i + 1])
            bound = 1.0 / np.sqrt(d_in)
            w = Param(rng.uniform(-bound, bound, size=(d_in, d_out)), name=f"{name}.w{i}")
            b = Param(rng.uniform(-bound, bound, size=(d_out,)), name=f"{name}.b{i}")
            act = output_activation if i == last else hidden_activation
            self.layers.append((w, b, act))

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, act in self.layers:
            x = linear(x, w, b, activation=act)
        return x

    def params(self) -> list:
        out = []
        for w, b, _ in self.layers:
            out.append(w)
            out.append(b)
        return out


class Adam:
    """Adam with bias correction, the standard recurrence.

    Holds one (m, v) pair per trainable param; step() reads .grad and
    updates .data in place. Updates are deterministic functions of
    (params, grads, state).
    """

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.beta1 ** self.t
        correct2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / correct1
            v_hat = v / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict:
        """Optimizer state as plain arrays, for checkpointing."""
        out = {"t": np.array([float(self.t)])}
        for i, p in enumerate(self.params):
            out[f"m.{i}.{p.name}"] = self.m[i]
            out[f"v.{i}.{p.name}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        self.t = int(arrays["t"][0])
        for i, p in enumerate(self.params):
            m = arrays[f"m.{i}.{p.name}"]
            v = arrays[f"v.{i}.{p.name}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ValidationError(f"optimizer state shape mismatch for {p.name}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()


# ---------------------------------------------------------------------------
# Checkpoint format. One file: an 8-byte little-endian header length, a JSON
# manifest, then the raw row-major float64 values of every array in manifest
# order. docs/checkpoint_format.md spells out the layout byte by byte.
# ---------------------------------------------------------------------------

def save_arrays(path: str, named_arrays: list, extra: dict | None = None) -> None:
    """Write (name, array) pairs to a checkpoint file atomically.

    The file is staged next to its destination and moved into place with
    os.replace, so a crash mid-write never leaves a truncated checkpoint
    under the real name.
    """
    names = [n for n, _ in named_arrays]
    if len(set(names)) != len(names):
        raise ValidationError("duplicate array names in checkpoint")
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "params": [{"name": n, "shape": list(a.shape)} for n, a in named_arrays],
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, a in named_arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_arrays(path: str) -> tuple:
    """Read a checkpoint written by save_arrays. Returns (manifest, {name: array})."""
    with open(path, "rb") as fh:
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise ValidationError(f"checkpoint {path} too short for a header")
        (header_len,) = struct.unpack("<Q", raw_len)
        header = fh.read(header_len)
        if len(header) != header_len:
            raise ValidationError(f"checkpoint {path} truncated inside the manifest")
        try:
            manifest = json.loads(header.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValidationError(f"checkpoint {path} has a corrupt manifest: {exc}") from None
        if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ValidationError(
                f"checkpoint {path} has schema_version {manifest.get('schema_version')}, "
                f"this build reads {CHECKPOINT_SCHEMA_VERSION}")
        blob = fh.read()
    arrays = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValidationError(f"checkpoint {path} truncated in values for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise ValidationError(f"checkpoint {path} has {len(blob) - offset} trailing bytes")
    return manifest, arrays


def save_params(path: str, params: list, extra: dict | None = None) -> None:
    """Checkpoint a list of Params under their own names."""
    save_arrays(path, [(p.name, p.data) for p in params], extra=extra)


def load_params(path: str, params: list) -> dict:
    """Load a checkpoint into an existing list of Params, matching by name.

    Every param must be present with the right shape. Returns the manifest
    extra dict so callers can recover whatever metadata they stored.
    """
    manifest, arrays = load_arrays(path)
    for p in params:
        if p.name not in arrays:
            raise ValidationError(f"checkpoint {path} is missing param {p.name!r}")
        loaded = arrays[p.name]
        if loaded.shape != p.data.shape:
            raise ValidationError(
                f"checkpoint {path}: param {p.name!r} has shape {loaded.shape}, "
                f"expected {p.data.shape}")
        p.data = loaded.copy()
    return manifest.get("extra", {})
