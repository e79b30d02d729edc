"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The tape is implicit: each differentiable op returns a :class:`Tensor` that
records its parent tensors and a closure producing their gradient
contributions. Calling ``backward()`` on a scalar output walks the recorded
graph once in reverse topological order, accumulates gradients into the
leaves, and frees the graph, so a graph lives for exactly one batch.

Everything is 64-bit. Values are checked to be finite on construction;
NaN/Inf anywhere is an error state, never a value. Gradient accumulation
never updates arrays in place, which keeps views produced by backward
closures safe to hand out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError, ShapeError

Array = np.ndarray

# A parameter set is an ordered name -> Tensor map; gradients mirror its keys.
ParamSet = dict[str, "Tensor"]
Gradients = dict[str, Array]


class Tensor:
    """A dense float64 array plus the bookkeeping for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        if not np.isfinite(arr).all():
            raise NumericError("non-finite values in tensor")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of dims {self.dims}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar, then free the graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        if not self.requires_grad:
            return
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
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            node._parents = ()
            node._backward = None

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def _accum(t: Tensor, g: Array) -> None:
    # No in-place adds: closures may hand out views of a consumer's grad.
    t.grad = g if t.grad is None else t.grad + g


def _attach(out: Tensor, parents: tuple[Tensor, ...], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Differentiable ops
# ---------------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for x of dims (m, k), w (k, p), b (p,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"affine expects 2-d x, 2-d w, 1-d b, got {x.dims}, {w.dims}, {b.dims}"
        )
    if x.dims[1] != w.dims[0] or w.dims[1] != b.dims[0]:
        raise ShapeError(f"affine dims mismatch: {x.dims} @ {w.dims} + {b.dims}")
    out = Tensor(x.data @ w.data + b.data)

    def _bw():
        g = out.grad
        if x.requires_grad:
            _accum(x, g @ w.data.T)
        if w.requires_grad:
            _accum(w, x.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _attach(out, (x, w, b), _bw)


def dual_affine(x: Tensor, wx: Tensor, h: Tensor, uh: Tensor, b: Tensor) -> Tensor:
    """``x @ wx + h @ uh + b``, the fused preactivation of a recurrent gate."""
    if x.dims[1] != wx.dims[0] or h.dims[1] != uh.dims[0]:
        raise ShapeError(
            f"dual_affine dims mismatch: {x.dims} @ {wx.dims}, {h.dims} @ {uh.dims}"
        )
    if wx.dims[1] != uh.dims[1] or b.dims != (wx.dims[1],):
        raise ShapeError(f"dual_affine output dims mismatch: {wx.dims}, {uh.dims}, {b.dims}")
    out = Tensor(x.data @ wx.data + h.data @ uh.data + b.data)

    def _bw():
        g = out.grad
        if x.requires_grad:
            _accum(x, g @ wx.data.T)
        if wx.requires_grad:
            _accum(wx, x.data.T @ g)
        if h.requires_grad:
            _accum(h, g @ uh.data.T)
        if uh.requires_grad:
            _accum(uh, h.data.T @ g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _attach(out, (x, wx, h, uh, b), _bw)


ACTIVATIONS = ("sigmoid", "tanh", "relu")


def elementwise(x: Tensor, kind: str) -> Tensor:
    """Apply sigmoid, tanh or relu; backward uses the analytic derivative."""
    if kind == "sigmoid":
        out = Tensor(1.0 / (1.0 + np.exp(-x.data)))

        def _bw():
            s = out.data
            _accum(x, out.grad * s * (1.0 - s))

    elif kind == "tanh":
        out = Tensor(np.tanh(x.data))

        def _bw():
            t = out.data
            _accum(x, out.grad * (1.0 - t * t))

    elif kind == "relu":
        out = Tensor(np.maximum(x.data, 0.0))

        def _bw():
            _accum(x, out.grad * (x.data > 0.0))

    else:
        raise InputError(f"unknown elementwise kind {kind!r}, expected one of {ACTIVATIONS}")
    return _attach(out, (x,), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shaped tensors."""
    if a.dims != b.dims:
        raise ShapeError(f"mul dims mismatch: {a.dims} vs {b.dims}")
    out = Tensor(a.data * b.data)

    def _bw():
        g = out.grad
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _attach(out, (a, b), _bw)


def gate_blend(z: Tensor, h: Tensor, cand: Tensor) -> Tensor:
    """``(1 - z) * h + z * cand``, the update-gate interpolation of a GRU."""
    if not (z.dims == h.dims == cand.dims):
        raise ShapeError(f"gate_blend dims mismatch: {z.dims}, {h.dims}, {cand.dims}")
    out = Tensor((1.0 - z.data) * h.data + z.data * cand.data)

    def _bw():
        g = out.grad
        if z.requires_grad:
            _accum(z, g * (cand.data - h.data))
        if h.requires_grad:
            _accum(h, g * (1.0 - z.data))
        if cand.requires_grad:
            _accum(cand, g * z.data)

    return _attach(out, (z, h, cand), _bw)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Concatenate 2-d tensors along the feature axis."""
    if not parts:
        raise InputError("concat_cols needs at least one tensor")
    m = parts[0].dims[0]
    for p in parts:
        if p.data.ndim != 2 or p.dims[0] != m:
            raise ShapeError(f"concat_cols row mismatch: {[p.dims for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    widths = [p.dims[1] for p in parts]

    def _bw():
        g = out.grad
        offset = 0
        for p, w in zip(parts, widths):
            if p.requires_grad:
                _accum(p, g[:, offset : offset + w])
            offset += w

    return _attach(out, tuple(parts), _bw)


def reshape(x: Tensor, dims: tuple[int, ...]) -> Tensor:
    if int(np.prod(dims)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.dims} to {dims}")
    out = Tensor(x.data.reshape(dims))

    def _bw():
        _accum(x, out.grad.reshape(x.dims))

    return _attach(out, (x,), _bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row of a 2-d tensor to unit euclidean norm."""
    norms = np.linalg.norm(x.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericError("cannot normalize a zero row")
    out = Tensor(x.data / norms)

    def _bw():
        g = out.grad
        y = out.data
        # d(x/|x|) projects the upstream gradient onto the tangent of the sphere
        _accum(x, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)

    return _attach(out, (x,), _bw)


def total_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()))

    def _bw():
        _accum(x, np.broadcast_to(out.grad, x.dims).copy())

    return _attach(out, (x,), _bw)


# ---------------------------------------------------------------------------
# Softmax cross-entropy
# ---------------------------------------------------------------------------

LOG_CLAMP = 1e-12


def softmax_xent(
    logits: Array, labels, weights: Array | None = None
) -> tuple[float, Array]:
    """Mean (optionally class-weighted) softmax cross-entropy and its gradient.

    loss = (1/m) * sum_i w[y_i] * (-log softmax(logits_i)[y_i]), stabilized by
    row-max subtraction, with the log argument clamped at ``LOG_CLAMP``.
    Returns ``(loss, dlogits)`` where dlogits is the exact gradient of the
    unclamped loss.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got dims {arr.shape}")
    y = np.asarray(labels, dtype=np.int64)
    m, n_classes = arr.shape
    if y.shape != (m,):
        raise ShapeError(f"labels must have length {m}, got {y.shape}")
    if m == 0:
        raise InputError("empty batch")
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError(f"label out of range [0, {n_classes})")
    if weights is None:
        w = np.ones(m)
    else:
        wv = np.asarray(weights, dtype=np.float64)
        if wv.shape != (n_classes,):
            raise ShapeError(f"weights must have length {n_classes}, got {wv.shape}")
        w = wv[y]
    z = arr - arr.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(m)
    py = np.maximum(p[rows, y], LOG_CLAMP)
    loss = float(np.mean(w * -np.log(py)))
    dlogits = p * (w / m)[:, None]
    dlogits[rows, y] -= w / m
    return loss, dlogits


def cross_entropy(logits: Tensor, labels, weights: Array | None = None) -> Tensor:
    """Tape node wrapping :func:`softmax_xent`; returns a scalar tensor."""
    loss, dlogits = softmax_xent(logits.data, labels, weights)
    out = Tensor(np.asarray(loss))

    def _bw():
        _accum(logits, out.grad * dlogits)

    return _attach(out, (logits,), _bw)


def collect_grads(params: ParamSet) -> Gradients:
    """Read accumulated leaf gradients, substituting zeros for unused leaves."""
    return {
        name: (p.grad if p.grad is not None else np.zeros(p.dims))
        for name, p in params.items()
    }


def reset_grads(params: ParamSet) -> None:
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Adaptive-moment optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Functional Adam state; :func:`adam_step` returns a successor, never mutates."""

    step_count: int
    first_moment: dict[str, Array]
    second_moment: dict[str, Array]
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(
    params: ParamSet,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> OptimizerState:
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise InputError(f"betas must lie in (0, 1), got {beta1}, {beta2}")
    if epsilon <= 0.0:
        raise InputError(f"epsilon must be positive, got {epsilon}")
    if learning_rate <= 0.0:
        raise InputError(f"learning rate must be positive, got {learning_rate}")
    zeros = lambda: {name: np.zeros(p.dims) for name, p in params.items()}
    return OptimizerState(0, zeros(), zeros(), learning_rate, beta1, beta2, epsilon)


def adam_step(
    params: ParamSet, grads: Gradients, state: OptimizerState
) -> tuple[ParamSet, OptimizerState]:
    """One bias-corrected adaptive-moment update; returns new params and state."""
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ShapeError("parameter, gradient and moment key sets differ")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    new_params: ParamSet = {}
    m_new: dict[str, Array] = {}
    v_new: dict[str, Array] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.dims:
            raise ShapeError(f"gradient shape {g.shape} != param {p.dims} for {name!r}")
        m = b1 * state.first_moment[name] + (1.0 - b1) * g
        v = b2 * state.second_moment[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        m_new[name] = m
        v_new[name] = v
        new_params[name] = Tensor(new_data, requires_grad=True)
    new_state = OptimizerState(
        t, m_new, v_new, state.learning_rate, b1, b2, state.epsilon
    )
    return new_params, new_state


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


def grad_check(
    fn,
    params: ParamSet,
    step: float = 1e-3,
    max_coords_per_tensor: int = 16,
    seed: int = 0,
) -> float:
    """Compare autodiff gradients of ``fn`` against central finite differences.

    ``fn`` maps a ParamSet to a scalar Tensor built from the ops above. Every
    coordinate is checked for small tensors; larger tensors get a seeded
    sample of ``max_coords_per_tensor`` coordinates. Returns the maximum of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0.0:
        raise InputError(f"step must be positive, got {step}")
    reset_grads(params)
    out = fn(params)
    if not np.isfinite(out.item()):
        raise NumericError("function value is not finite")
    out.backward()
    analytic = {name: g.copy() for name, g in collect_grads(params).items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        size = p.data.size
        if size <= max_coords_per_tensor:
            flat_indices = np.arange(size)
        else:
            flat_indices = rng.choice(size, size=max_coords_per_tensor, replace=False)
        flat = p.data.reshape(-1)
        for idx in flat_indices:
            for sign in (+1.0, -1.0):
                bumped = flat.copy()
                bumped[idx] += sign * step
                probe = dict(params)
                probe[name] = Tensor(bumped.reshape(p.dims), requires_grad=True)
                value = fn(probe).item()
                if not np.isfinite(value):
                    raise NumericError("function value is not finite at a probe point")
                if sign > 0:
                    f_plus = value
                else:
                    f_minus = value
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
