"""Minimal reverse-mode tensor engine.

Only the forward operations the encoder-decoder architecture needs are
provided, each with an exact hand-written adjoint recorded on a
:class:`GradTape`.  All arithmetic is 64-bit.  Convolution follows the
cross-correlation convention (no kernel flip):

    out[r, c, k] = sum_{i,j,ch} kernel_k[i, j, ch] * in[r+i, c+j, ch]

Feature maps are rank-3 ``(rows, cols, channels)`` arrays with rows =
space and cols = time; kernels are 2x2 with an input-channel axis.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UsageError


class Tensor3:
    """Rank-3 value node: (rows, cols, channels) float64, row-major, channel-fastest.

    2-D input is promoted to a single channel.  Entries must be finite.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"expected (rows, cols, channels), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor entries must be finite")
        self.data = np.ascontiguousarray(arr)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor3":
        # Internal fast path: arr is a freshly computed float64 array.
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        return t

    @property
    def dims(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor3{self.data.shape}"


class Kernel2x2:
    """A learnable 2x2 convolution kernel over ``cin`` input channels (no bias)."""

    __slots__ = ("weights", "grad")

    def __init__(self, weights):
        arr = np.asarray(weights, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[:2] != (2, 2) or arr.shape[2] < 1:
            raise ShapeError(f"kernel must be (2, 2, cin), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("kernel weights must be finite")
        self.weights = np.ascontiguousarray(arr)
        self.grad = None

    @property
    def cin(self) -> int:
        return self.weights.shape[2]

    def copy(self) -> "Kernel2x2":
        return Kernel2x2(self.weights.copy())

    def __repr__(self):
        return f"Kernel2x2(cin={self.cin})"


class Scalar:
    """A scalar node (losses and penalties)."""

    __slots__ = ("value", "grad")

    def __init__(self, value: float):
        self.value = float(value)
        self.grad = None

    def __repr__(self):
        return f"Scalar({self.value!r})"


class GradTape:
    """Ordered record of executed operations.

    Replaying adjoints visits operations in exact reverse execution order.
    A tape with zero recorded operations yields zero gradients for every
    parameter.  One tape belongs to one forward pass; do not share.
    """

    __slots__ = ("_ops", "_out_ids")

    def __init__(self):
        self._ops = []
        self._out_ids = set()

    def __len__(self) -> int:
        return len(self._ops)

    def record(self, nodes, backward_fn, output) -> None:
        """Append one op: ``nodes`` are every node touched, ``output`` its result."""
        self._ops.append((nodes, backward_fn))
        self._out_ids.add(id(output))

    def gradients(self, loss: Scalar, params) -> list[np.ndarray]:
        """Reverse-replay the tape from ``loss``; return one gradient per parameter.

        Gradients of parameters the loss never saw are exactly zero.
        """
        if self._ops and id(loss) not in self._out_ids:
            raise UsageError("loss was not produced by an operation recorded on this tape")
        for nodes, _ in self._ops:
            for nd in nodes:
                nd.grad = None
        for p in params:
            p.grad = None
        loss.grad = 1.0
        for _, fn in reversed(self._ops):
            fn()
        return [p.grad if p.grad is not None else np.zeros_like(p.weights) for p in params]


def backward(tape: GradTape, loss: Scalar, params) -> list[np.ndarray]:
    """Reverse-mode gradients of ``loss`` for every kernel in ``params``."""
    return tape.gradients(loss, params)


def _stack_weights(kernels) -> np.ndarray:
    return np.stack([k.weights for k in kernels], axis=3)  # (2, 2, cin, K)


def conv2d_valid(x: Tensor3, kernels, tape: GradTape | None = None) -> Tensor3:
    """Valid (unpadded) cross-correlation with a bank of 2x2 kernels.

    (R, C, cin) -> (R-1, C-1, K); linear in the input and in the kernels,
    no bias.
    """
    kernels = list(kernels)
    if not kernels:
        raise ShapeError("need at least one kernel")
    xd = x.data
    rows, cols, cin = xd.shape
    if rows < 2 or cols < 2:
        raise ShapeError(f"input {xd.shape} too small for a 2x2 valid convolution")
    for k in kernels:
        if k.cin != cin:
            raise ShapeError(f"kernel expects {k.cin} channels, input has {cin}")
    w = _stack_weights(kernels)
    out_arr = (
        np.tensordot(xd[:-1, :-1], w[0, 0], 1)
        + np.tensordot(xd[:-1, 1:], w[0, 1], 1)
        + np.tensordot(xd[1:, :-1], w[1, 0], 1)
        + np.tensordot(xd[1:, 1:], w[1, 1], 1)
    )
    out = Tensor3._wrap(out_arr)
    if tape is not None:
        def bwd(x=x, kernels=kernels, w=w, out=out, xd=xd):
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(xd)
            xg = x.grad
            xg[:-1, :-1] += g @ w[0, 0].T
            xg[:-1, 1:] += g @ w[0, 1].T
            xg[1:, :-1] += g @ w[1, 0].T
            xg[1:, 1:] += g @ w[1, 1].T
            g00 = np.tensordot(xd[:-1, :-1], g, ([0, 1], [0, 1]))  # (cin, K)
            g01 = np.tensordot(xd[:-1, 1:], g, ([0, 1], [0, 1]))
            g10 = np.tensordot(xd[1:, :-1], g, ([0, 1], [0, 1]))
            g11 = np.tensordot(xd[1:, 1:], g, ([0, 1], [0, 1]))
            for idx, k in enumerate(kernels):
                if k.grad is None:
                    k.grad = np.zeros_like(k.weights)
                kg = k.grad
                kg[0, 0] += g00[:, idx]
                kg[0, 1] += g01[:, idx]
                kg[1, 0] += g10[:, idx]
                kg[1, 1] += g11[:, idx]
        tape.record((x, *kernels, out), bwd, out)
    return out


def transpose_conv2d(y: Tensor3, kernels, tape: GradTape | None = None) -> Tensor3:
    """Exact transpose of :func:`conv2d_valid` as a linear map, same kernels.

    ``y`` must have one channel per kernel; the output has the kernels'
    channel count: (R, C, K) -> (R+1, C+1, cin), with
    out[r+i, c+j, ch] += kernel_k[i, j, ch] * y[r, c, k].
    """
    kernels = list(kernels)
    if not kernels:
        raise ShapeError("need at least one kernel")
    yd = y.data
    rows, cols, ych = yd.shape
    if ych != len(kernels):
        raise ShapeError(f"input has {ych} channels but {len(kernels)} kernels given")
    cout = kernels[0].cin
    for k in kernels:
        if k.cin != cout:
            raise ShapeError("all kernels must share one channel count")
    w = _stack_weights(kernels)  # (2, 2, cout, K)
    out_arr = np.zeros((rows + 1, cols + 1, cout))
    out_arr[:-1, :-1] += yd @ w[0, 0].T
    out_arr[:-1, 1:] += yd @ w[0, 1].T
    out_arr[1:, :-1] += yd @ w[1, 0].T
    out_arr[1:, 1:] += yd @ w[1, 1].T
    out = Tensor3._wrap(out_arr)
    if tape is not None:
        def bwd(y=y, kernels=kernels, w=w, out=out, yd=yd):
            g = out.grad
            if g is None:
                return
            if y.grad is None:
                y.grad = np.zeros_like(yd)
            yg = y.grad
            yg += g[:-1, :-1] @ w[0, 0]
            yg += g[:-1, 1:] @ w[0, 1]
            yg += g[1:, :-1] @ w[1, 0]
            yg += g[1:, 1:] @ w[1, 1]
            g00 = np.tensordot(g[:-1, :-1], yd, ([0, 1], [0, 1]))  # (cout, K)
            g01 = np.tensordot(g[:-1, 1:], yd, ([0, 1], [0, 1]))
            g10 = np.tensordot(g[1:, :-1], yd, ([0, 1], [0, 1]))
            g11 = np.tensordot(g[1:, 1:], yd, ([0, 1], [0, 1]))
            for idx, k in enumerate(kernels):
                if k.grad is None:
                    k.grad = np.zeros_like(k.weights)
                kg = k.grad
                kg[0, 0] += g00[:, idx]
                kg[0, 1] += g01[:, idx]
                kg[1, 0] += g10[:, idx]
                kg[1, 1] += g11[:, idx]
        tape.record((y, *kernels, out), bwd, out)
    return out


def avg_pool_halves(x: Tensor3, tape: GradTape | None = None) -> Tensor3:
    """Average the spatial axis into two halves: (R, C, ch) -> (2, C, ch).

    Row 0 is the mean over spatial rows [0, ceil(R/2)), row 1 the rest.
    """
    xd = x.data
    rows = xd.shape[0]
    if rows < 2:
        raise ShapeError("need at least two spatial rows to pool into halves")
    h = (rows + 1) // 2
    out_arr = np.stack((xd[:h].mean(axis=0), xd[h:].mean(axis=0)))
    out = Tensor3._wrap(out_arr)
    if tape is not None:
        def bwd(x=x, out=out, h=h, rows=rows, shape=xd.shape):
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros(shape)
            x.grad[:h] += g[0] / h
            x.grad[h:] += g[1] / (rows - h)
        tape.record((x, out), bwd, out)
    return out


def tanh_map(x: Tensor3, tape: GradTape | None = None) -> Tensor3:
    """Elementwise tanh; adjoint is elementwise 1 - tanh^2."""
    out = Tensor3._wrap(np.tanh(x.data))
    if tape is not None:
        def bwd(x=x, out=out):
            g = out.grad
            if g is None:
                return
            delta = g * (1.0 - out.data * out.data)
            if x.grad is None:
                x.grad = delta
            else:
                x.grad += delta
        tape.record((x, out), bwd, out)
    return out


def channel_product(a: Tensor3, b: Tensor3, tape: GradTape | None = None) -> Tensor3:
    """Elementwise product of two identically shaped maps (product rule adjoints)."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor3._wrap(a.data * b.data)
    if tape is not None:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if g is None:
                return
            da = g * b.data
            db = g * a.data
            a.grad = da if a.grad is None else a.grad + da
            b.grad = db if b.grad is None else b.grad + db
        tape.record((a, b, out), bwd, out)
    return out


def append_product_channel(x: Tensor3, tape: GradTape | None = None) -> Tensor3:
    """Coupling layer: append channel 0 * channel 1 as a new last channel."""
    xd = x.data
    if xd.shape[2] < 2:
        raise ShapeError("coupling needs at least two channels")
    prod = xd[:, :, 0] * xd[:, :, 1]
    out = Tensor3._wrap(np.concatenate((xd, prod[:, :, None]), axis=2))
    if tape is not None:
        def bwd(x=x, out=out, xd=xd):
            g = out.grad
            if g is None:
                return
            k = xd.shape[2]
            if x.grad is None:
                x.grad = np.zeros_like(xd)
            xg = x.grad
            xg += g[:, :, :k]
            xg[:, :, 0] += g[:, :, k] * xd[:, :, 1]
            xg[:, :, 1] += g[:, :, k] * xd[:, :, 0]
        tape.record((x, out), bwd, out)
    return out


def concat_channels(a: Tensor3, b: Tensor3, tape: GradTape | None = None) -> Tensor3:
    """Stack two maps along the channel axis."""
    if a.data.shape[:2] != b.data.shape[:2]:
        raise ShapeError(f"row/col mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor3._wrap(np.concatenate((a.data, b.data), axis=2))
    if tape is not None:
        def bwd(a=a, b=b, out=out):
            g = out.grad
            if g is None:
                return
            ka = a.data.shape[2]
            ga = g[:, :, :ka]
            gb = g[:, :, ka:]
            a.grad = ga.copy() if a.grad is None else a.grad + ga
            b.grad = gb.copy() if b.grad is None else b.grad + gb
        tape.record((a, b, out), bwd, out)
    return out


def replicate_rows_halves(x: Tensor3, rows: int, tape: GradTape | None = None) -> Tensor3:
    """Nearest-neighbour inverse of :func:`avg_pool_halves`.

    (2, C, ch) -> (rows, C, ch): row 0 fills the first ceil(rows/2) rows,
    row 1 the rest.
    """
    xd = x.data
    if xd.shape[0] != 2:
        raise ShapeError("expected a pooled (2, C, ch) input")
    if rows < 2:
        raise ShapeError("need at least two output rows")
    h = (rows + 1) // 2
    out_arr = np.empty((rows,) + xd.shape[1:])
    out_arr[:h] = xd[0]
    out_arr[h:] = xd[1]
    out = Tensor3._wrap(out_arr)
    if tape is not None:
        def bwd(x=x, out=out, h=h):
            g = out.grad
            if g is None:
                return
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            x.grad[0] += g[:h].sum(axis=0)
            x.grad[1] += g[h:].sum(axis=0)
        tape.record((x, out), bwd, out)
    return out


def _target_array(target) -> np.ndarray:
    if isinstance(target, Tensor3):
        return target.data
    arr = np.asarray(target, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def mse(pred: Tensor3, target, tape: GradTape | None = None) -> Scalar:
    """Mean squared difference over all entries; gradient flows to ``pred`` only."""
    t = _target_array(target)
    if pred.data.shape != t.shape:
        raise ShapeError(f"shape mismatch {pred.data.shape} vs {t.shape}")
    diff = pred.data - t
    out = Scalar(np.mean(diff * diff))
    if tape is not None:
        n = diff.size
        def bwd(pred=pred, diff=diff, out=out, n=n):
            g = out.grad
            if g is None:
                return
            delta = (2.0 * g / n) * diff
            pred.grad = delta if pred.grad is None else pred.grad + delta
        tape.record((pred, out), bwd, out)
    return out


def zero_sum_penalty(kernels, lam: float, tape: GradTape | None = None) -> Scalar:
    """lambda * sum over kernels of (sum of weights)^2.

    Zero exactly when every kernel sums to zero (for lambda > 0), which by
    linearity makes the kernel annihilate constant fields.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    kernels = list(kernels)
    sums = np.array([k.weights.sum() for k in kernels])
    out = Scalar(lam * float(np.dot(sums, sums)))
    if tape is not None:
        def bwd(kernels=kernels, sums=sums, out=out, lam=lam):
            g = out.grad
            if g is None:
                return
            for k, s in zip(kernels, sums):
                if k.grad is None:
                    k.grad = np.zeros_like(k.weights)
                k.grad += (2.0 * lam * s) * g
        tape.record((*kernels, out), bwd, out)
    return out


def scalar_sum(terms, weights=None, tape: GradTape | None = None) -> Scalar:
    """Weighted sum of scalar nodes (loss assembly)."""
    terms = list(terms)
    if weights is None:
        weights = [1.0] * len(terms)
    weights = [float(w) for w in weights]
    if len(weights) != len(terms):
        raise ShapeError("one weight per term required")
    out = Scalar(sum(w * t.value for w, t in zip(weights, terms)))
    if tape is not None:
        def bwd(terms=terms, weights=weights, out=out):
            g = out.grad
            if g is None:
                return
            for w, t in zip(weights, terms):
                t.grad = (t.grad or 0.0) + w * g
        tape.record((*terms, out), bwd, out)
    return out


class AdaDeltaState:
    """Per-parameter accumulators E[g^2] and E[dx^2] plus hyperparameters."""

    __slots__ = ("lr", "rho", "eps", "decay", "eg2", "edx2", "steps")

    def __init__(self, params, lr=0.85, rho=0.95, eps=1e-6, decay=0.0):
        self.lr = float(lr)
        self.rho = float(rho)
        self.eps = float(eps)
        self.decay = float(decay)
        self.eg2 = [np.zeros_like(p.weights) for p in params]
        self.edx2 = [np.zeros_like(p.weights) for p in params]
        self.steps = 0


class AdaDelta:
    """AdaDelta update rule.

    E[g^2] <- rho E[g^2] + (1-rho) g^2
    dx     = -lr * sqrt((E[dx^2] + eps) / (E[g^2] + eps)) * g
    E[dx^2]<- rho E[dx^2] + (1-rho) dx^2
    w      += dx

    With decay=0 the learning rate is constant; otherwise
    lr_t = lr / (1 + decay * (t-1)).
    """

    def __init__(self, params, lr=0.85, rho=0.95, eps=1e-6, decay=0.0):
        self.params = list(params)
        self.state = AdaDeltaState(self.params, lr=lr, rho=rho, eps=eps, decay=decay)

    def step(self, grads) -> None:
        st = self.state
        st.steps += 1
        lr_t = st.lr / (1.0 + st.decay * (st.steps - 1))
        rho = st.rho
        eps = st.eps
        for p, g, eg2, edx2 in zip(self.params, grads, st.eg2, st.edx2):
            eg2 *= rho
            eg2 += (1.0 - rho) * g * g
            dx = (-lr_t) * np.sqrt((edx2 + eps) / (eg2 + eps)) * g
            edx2 *= rho
            edx2 += (1.0 - rho) * dx * dx
            p.weights += dx
