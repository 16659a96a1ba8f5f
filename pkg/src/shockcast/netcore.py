"""Minimal differentiable tensor core for the encoder-decoder network.

Tensors are plain numpy arrays of shape (batch, channels, height, width).
The operation set is deliberately small: 3x3 convolution and transposed
convolution at stride 1 / padding 1 (both shape-preserving), ReLU,
element-wise skip addition, the training losses, and Adam.  A recording
Tape provides exact reverse-mode gradients for any composition of these
operations.

Convolutions run as nine tap-wise GEMMs with in-place BLAS accumulation;
this keeps the hot loop inside sgemm/dgemm instead of numpy temporaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dgemm, sgemm

from .boxfilter import box_mean_2d, box_mean_adjoint_2d

Tensor4 = np.ndarray

SMOOTHING_WINDOWS = (10, 5, 3)
SMOOTHED_TERM_WEIGHT = 1000.0


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the requested operation."""


class GraphStateError(RuntimeError):
    """backward() called without a recorded forward pass for the given loss."""


# ---------------------------------------------------------------------------
# convolution engine
# ---------------------------------------------------------------------------

def _gemm_for(dtype) -> object:
    if dtype == np.float32:
        return sgemm
    if dtype == np.float64:
        return dgemm
    raise TypeError(f"unsupported dtype {dtype}; use float32 or float64")


def _check_tensor4(x: np.ndarray, name: str = "x") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4D (batch, channels, height, width), got shape {x.shape}")


def _conv3x3_taps(x: Tensor4, taps: list[np.ndarray], biases: np.ndarray) -> Tensor4:
    """out[b,o,i,j] = biases[o] + sum_{u,v,c} x[b,c,i+u-1,j+v-1] * taps[3u+v][c,o].

    Spatial zero padding of 1 on both axes; taps are nine (C, O) matrices.
    """
    b_n, c_n, h, w = x.shape
    o_n = taps[0].shape[1]
    gemm = _gemm_for(x.dtype)

    xp = np.zeros((b_n, c_n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.empty((b_n, o_n, h, w), dtype=x.dtype)
    buf = np.empty((c_n, h * w), dtype=x.dtype)
    buf3 = buf.reshape(c_n, h, w)

    for b in range(b_n):
        ob = out[b].reshape(o_n, h * w)
        ob[:] = biases[:, None]
        ob_t = ob.T  # (HW, O) Fortran view, accumulated in place by gemm
        t = 0
        for u in range(3):
            for v in range(3):
                np.copyto(buf3, xp[b, :, u:u + h, v:v + w])
                gemm(1.0, buf.T, taps[t], 1.0, ob_t, overwrite_c=1)
                t += 1
    return out


def _conv3x3_kernel_grad(x: Tensor4, g: Tensor4) -> np.ndarray:
    """d(sum out*g)/d(taps): nine (C, O) matrices stacked as (3, 3, C, O)."""
    b_n, c_n, h, w = x.shape
    o_n = g.shape[1]
    gemm = _gemm_for(x.dtype)

    xp = np.zeros((b_n, c_n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    buf = np.empty((c_n, h * w), dtype=x.dtype)
    buf3 = buf.reshape(c_n, h, w)
    dtaps = np.zeros((3, 3, c_n, o_n), dtype=x.dtype)

    for b in range(b_n):
        gb = g[b].reshape(o_n, h * w)
        for u in range(3):
            for v in range(3):
                np.copyto(buf3, xp[b, :, u:u + h, v:v + w])
                # dtap (C, O) += buf (C, HW) @ gb.T (HW, O); run it transposed
                # so the in-place target is the Fortran view dtap.T (O, C).
                gemm(1.0, gb.T, buf.T, 1.0, dtaps[u, v].T, trans_a=1, overwrite_c=1)
    return dtaps


def _taps_from_kernels(kernels: np.ndarray, flip: bool, swap_channels: bool) -> list[np.ndarray]:
    """Nine (C_in, C_out) tap matrices from a (O, C, 3, 3) kernel tensor."""
    taps = []
    for u in range(3):
        for v in range(3):
            uu, vv = (2 - u, 2 - v) if flip else (u, v)
            m = kernels[:, :, uu, vv]          # (O, C)
            m = m if swap_channels else m.T    # engine wants (in, out)
            taps.append(np.asfortranarray(m))
    return taps


# ---------------------------------------------------------------------------
# layer parameters and public forward operations
# ---------------------------------------------------------------------------

@dataclass
class ConvLayerParams:
    """Parameters of one 3x3 layer: kernels (out, in, 3, 3), biases (out,)."""

    kernels: np.ndarray
    biases: np.ndarray
    mode: str = "conv"  # "conv" | "deconv"

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2:] != (3, 3):
            raise ShapeError(f"kernels must have shape (out, in, 3, 3), got {self.kernels.shape}")
        if self.biases.shape != (self.kernels.shape[0],):
            raise ShapeError(f"biases must have shape ({self.kernels.shape[0]},), got {self.biases.shape}")
        if self.mode not in ("conv", "deconv"):
            raise ValueError(f"mode must be 'conv' or 'deconv', got {self.mode!r}")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def parameter_count(self) -> int:
        return self.kernels.size + self.biases.size


def _forward(x: Tensor4, p: ConvLayerParams, flip: bool) -> Tensor4:
    _check_tensor4(x)
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but layer expects {p.in_channels}"
        )
    taps = _taps_from_kernels(p.kernels, flip=flip, swap_channels=False)
    return _conv3x3_taps(x, taps, p.biases)


def conv2d_forward(x: Tensor4, p: ConvLayerParams) -> Tensor4:
    """3x3 convolution, stride 1, zero padding 1 (shape-preserving).

    out(b,o,i,j) = bias(o) + sum_{c,u,v} x(b,c,i+u-1,j+v-1) * k(o,c,u,v)
    """
    return _forward(x, p, flip=False)


def deconv2d_forward(x: Tensor4, p: ConvLayerParams) -> Tensor4:
    """Transposed 3x3 convolution, stride 1, padding 1 (shape-preserving).

    Adjoint of conv2d_forward in the spatial taps: an input impulse is
    spread as the kernel stamped around it.  Equivalent to conv2d_forward
    with the spatially flipped kernel.
    """
    return _forward(x, p, flip=True)


def conv2d_backward(x: Tensor4, p: ConvLayerParams, g: Tensor4):
    """Gradients (dx, dkernels, dbiases) of sum(conv2d_forward(x, p) * g)."""
    # dx spreads g back through the taps: the flipped kernel with channel
    # roles swapped (i.e. the transposed convolution of g).
    dx_taps = _taps_from_kernels(p.kernels, flip=True, swap_channels=True)
    dx = _conv3x3_taps(g, dx_taps, np.zeros(p.in_channels, dtype=g.dtype))
    dtaps = _conv3x3_kernel_grad(x, g)  # (3, 3, C, O)
    dkernels = np.ascontiguousarray(dtaps.transpose(3, 2, 0, 1))  # (O, C, 3, 3)
    dbiases = g.sum(axis=(0, 2, 3))
    return dx, dkernels, dbiases


def deconv2d_backward(x: Tensor4, p: ConvLayerParams, g: Tensor4):
    """Gradients (dx, dkernels, dbiases) of sum(deconv2d_forward(x, p) * g)."""
    # adjoint of the transposed convolution is the plain convolution of g
    dx_taps = _taps_from_kernels(p.kernels, flip=False, swap_channels=True)
    dx = _conv3x3_taps(g, dx_taps, np.zeros(p.in_channels, dtype=g.dtype))
    # dK(o,c,u,v) = sum_{b,p,q} x(b,c,p,q) g(b,o,p+u-1,q+v-1): the kernel-grad
    # engine with the roles of activation and upstream gradient swapped.
    dtaps = _conv3x3_kernel_grad(g, x)  # (3, 3, O, C)
    dkernels = np.ascontiguousarray(dtaps.transpose(2, 3, 0, 1))  # (O, C, 3, 3)
    dbiases = g.sum(axis=(0, 2, 3))
    return dx, dkernels, dbiases


def relu(x: Tensor4) -> Tensor4:
    """Element-wise max(0, x)."""
    return np.maximum(x, 0)


def skip_add(a: Tensor4, b: Tensor4) -> Tensor4:
    """Element-wise sum of two tensors with identical dims."""
    if a.shape != b.shape:
        raise ShapeError(f"skip_add shapes differ: {a.shape} vs {b.shape}")
    return a + b


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")


def mse(pred: Tensor4, target: Tensor4) -> float:
    """Mean squared error over all elements (per-sample mean averaged over batch)."""
    _check_same_shape(pred, target)
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(d * d))


def mae(pred: Tensor4, target: Tensor4) -> float:
    """Mean absolute error over all elements."""
    _check_same_shape(pred, target)
    d = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.mean(np.abs(d)))


def smoothed_mse(pred: Tensor4, target: Tensor4, w: int) -> float:
    """MSE between the two grids after each is smoothed with a w x w sliding mean.

    Zero padding, constant divisor w*w; even w uses the [-w//2, w//2-1]
    offset convention (w=10 covers [-5, +4]).
    """
    _check_same_shape(pred, target)
    sp = box_mean_2d(pred.astype(np.float64), w)
    st = box_mean_2d(target.astype(np.float64), w)
    d = sp - st
    return float(np.mean(d * d))


def custom_loss(pred: Tensor4, target: Tensor4) -> float:
    """Training loss: MSE + 1000 * (MSE_10 + MSE_5 + MSE_3) on smoothed grids."""
    total = mse(pred, target)
    for w in SMOOTHING_WINDOWS:
        total += SMOOTHED_TERM_WEIGHT * smoothed_mse(pred, target, w)
    return total


# ---------------------------------------------------------------------------
# recording tape (reverse-mode differentiation)
# ---------------------------------------------------------------------------

class Tape:
    """Records forward operations and replays them in reverse for gradients.

    Every op returns a fresh array; arrays are identified by object id, so
    results must flow through tape ops (not be copied) for gradients to
    connect.  Scalars (losses) are 0-d float64 arrays.
    """

    def __init__(self):
        self._ops = []       # (backward_fn, out, inputs) in execution order
        self._outputs = set()

    def _record(self, out, back) -> np.ndarray:
        self._ops.append((back, out))
        self._outputs.add(id(out))
        return out

    # -- tensor ops --

    def conv2d(self, x: Tensor4, p: ConvLayerParams) -> Tensor4:
        out = conv2d_forward(x, p)

        def back(g, acc):
            dx, dk, db = conv2d_backward(x, p, g)
            acc(x, dx)
            acc(p.kernels, dk)
            acc(p.biases, db)

        return self._record(out, back)

    def deconv2d(self, x: Tensor4, p: ConvLayerParams) -> Tensor4:
        out = deconv2d_forward(x, p)

        def back(g, acc):
            dx, dk, db = deconv2d_backward(x, p, g)
            acc(x, dx)
            acc(p.kernels, dk)
            acc(p.biases, db)

        return self._record(out, back)

    def layer(self, x: Tensor4, p: ConvLayerParams) -> Tensor4:
        return self.deconv2d(x, p) if p.mode == "deconv" else self.conv2d(x, p)

    def relu(self, x: Tensor4) -> Tensor4:
        out = relu(x)

        def back(g, acc):
            acc(x, g * (out > 0))

        return self._record(out, back)

    def add(self, a: Tensor4, b: Tensor4) -> Tensor4:
        out = skip_add(a, b)

        def back(g, acc):
            acc(a, g)
            acc(b, g)

        return self._record(out, back)

    # -- scalar loss ops --

    def mse_loss(self, pred: Tensor4, target: Tensor4) -> np.ndarray:
        out = np.float64(mse(pred, target)).reshape(())
        n = pred.size

        def back(g, acc):
            scale = 2.0 * float(g) / n
            acc(pred, (scale * (pred.astype(np.float64) - target)).astype(pred.dtype))

        return self._record(out, back)

    def smoothed_mse_loss(self, pred: Tensor4, target: Tensor4, w: int) -> np.ndarray:
        _check_same_shape(pred, target)
        sp = box_mean_2d(pred.astype(np.float64), w)
        st = box_mean_2d(target.astype(np.float64), w)
        diff = sp - st
        out = np.float64(np.mean(diff * diff)).reshape(())
        n = pred.size

        def back(g, acc):
            scale = 2.0 * float(g) / n
            acc(pred, box_mean_adjoint_2d(scale * diff, w).astype(pred.dtype))

        return self._record(out, back)

    def weighted_sum(self, terms: list[np.ndarray], weights: list[float]) -> np.ndarray:
        if len(terms) != len(weights):
            raise ValueError("terms and weights must have equal length")
        out = np.float64(sum(float(t) * w for t, w in zip(terms, weights))).reshape(())

        def back(g, acc):
            for t, w in zip(terms, weights):
                acc(t, np.float64(float(g) * w).reshape(()))

        return self._record(out, back)

    def custom_loss(self, pred: Tensor4, target: Tensor4) -> np.ndarray:
        terms = [self.mse_loss(pred, target)]
        weights = [1.0]
        for w in SMOOTHING_WINDOWS:
            terms.append(self.smoothed_mse_loss(pred, target, w))
            weights.append(SMOOTHED_TERM_WEIGHT)
        return self.weighted_sum(terms, weights)

    # -- reverse pass --

    def backward(self, loss: np.ndarray) -> "Gradients":
        """Walk the recorded ops in reverse from the given scalar loss."""
        if not self._ops:
            raise GraphStateError("backward() before any recorded forward operation")
        if id(loss) not in self._outputs:
            raise GraphStateError("loss was not produced by an operation on this tape")
        if loss.shape != ():
            raise GraphStateError("backward() target must be a scalar loss")

        grads: dict[int, np.ndarray] = {id(loss): np.float64(1.0).reshape(())}
        keep: dict[int, np.ndarray] = {}

        def acc(arr, g):
            k = id(arr)
            if k in grads:
                grads[k] = grads[k] + g
            else:
                grads[k] = g
            keep[k] = arr

        for back, out in reversed(self._ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue  # this output does not feed the loss
            back(g, acc)
        return Gradients(grads, keep)


class Gradients:
    """Gradient lookup keyed by the original array objects."""

    def __init__(self, grads, keep):
        self._grads = grads
        self._keep = keep

    def wrt(self, arr: np.ndarray):
        return self._grads.get(id(arr))

    def for_params(self, arrays: list[np.ndarray]) -> list[np.ndarray]:
        """Gradients aligned to a parameter list; zeros where disconnected."""
        return [
            self._grads.get(id(a), np.zeros_like(a)) for a in arrays
        ]


def backward(tape: Tape, loss: np.ndarray) -> Gradients:
    """Module-level alias for Tape.backward."""
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Moment estimates and hyperparameters for Adam."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], learning_rate: float = 0.001,
                   beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
            step_count=0,
            first_moment=[np.zeros_like(p) for p in params],
            second_moment=[np.zeros_like(p) for p in params],
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState):
    """One Adam update, in place on params.  Returns (params, state).

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2; both bias-corrected;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params, state
