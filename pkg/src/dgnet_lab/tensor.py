"""Minimal reverse-mode autodiff engine over numpy arrays.

Covers exactly the operations the segmentation network needs: elementwise
arithmetic, sigmoid / leaky ReLU / exp / log / clamp, dense layers, strided
2-D convolution and its transpose, batch normalization, and full-graph
backpropagation with a finite-difference checker.

Tensors default to 32-bit floats; float64 is supported so gradient checks can
run the same graph at higher precision.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


_nan_checks = True


def set_nan_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check after each forward op (on by default)."""
    global _nan_checks
    _nan_checks = bool(enabled)


def _as_float_array(data, dtype):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(dtype if dtype is not None else np.float32)
    elif dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None):
        self.data = _as_float_array(data, dtype)
        if _nan_checks and not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds non-finite values")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(p for p in _parents if p.requires_grad)
        self._backward_fn = _backward

    # -- convenience -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accum_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        requires = any(p.requires_grad for p in parents)
        return Tensor(data, requires_grad=requires, _parents=parents,
                      _backward=backward if requires else None)

    # -- elementwise arithmetic ---------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape and other.size != 1 and self.size != 1:
                raise ShapeError(f"shape mismatch: {self.shape} vs {other.shape}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = Tensor._result(self.data + other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum_grad(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accum_grad(_unbroadcast(out.grad, other.shape))
        out._backward_fn = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor._result(-self.data, (self,), None)

        def backward():
            self._accum_grad(-out.grad)
        out._backward_fn = backward if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        other = self._coerce(other)
        out = Tensor._result(self.data * other.data, (self, other), None)

        def backward():
            if self.requires_grad:
                self._accum_grad(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accum_grad(_unbroadcast(out.grad * self.data, other.shape))
        out._backward_fn = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return self * (1.0 / float(other))

    def __pow__(self, exponent):
        p = float(exponent)
        out = Tensor._result(self.data ** p, (self,), None)

        def backward():
            self._accum_grad(out.grad * p * self.data ** (p - 1.0))
        out._backward_fn = backward if out.requires_grad else None
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        with np.errstate(over="ignore"):
            data = np.exp(self.data)
        out = Tensor._result(data, (self,), None)

        def backward():
            self._accum_grad(out.grad * out.data)
        out._backward_fn = backward if out.requires_grad else None
        return out

    def log(self):
        out = Tensor._result(np.log(self.data), (self,), None)

        def backward():
            self._accum_grad(out.grad / self.data)
        out._backward_fn = backward if out.requires_grad else None
        return out

    def clamp(self, lo: float, hi: float):
        mask = (self.data >= lo) & (self.data <= hi)
        out = Tensor._result(np.clip(self.data, lo, hi), (self,), None)

        def backward():
            self._accum_grad(out.grad * mask)
        out._backward_fn = backward if out.requires_grad else None
        return out

    def sigmoid(self):
        # Split by sign so neither exponential can overflow.
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        y = y.astype(x.dtype)
        out = Tensor._result(y, (self,), None)

        def backward():
            self._accum_grad(out.grad * out.data * (1.0 - out.data))
        out._backward_fn = backward if out.requires_grad else None
        return out

    def leaky_relu(self, slope: float = 0.2):
        if not 0.0 <= slope < 1.0:
            raise ValueError(f"leaky_relu slope must be in [0, 1), got {slope}")
        scale = np.where(self.data >= 0, 1.0, slope).astype(self.dtype)
        out = Tensor._result(self.data * scale, (self,), None)

        def backward():
            self._accum_grad(out.grad * scale)
        out._backward_fn = backward if out.requires_grad else None
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,), None)

        def backward():
            self._accum_grad(out.grad.reshape(self.shape))
        out._backward_fn = backward if out.requires_grad else None
        return out

    def slice_cols(self, start: int, stop: int):
        """Columns [start:stop] of a 2-D tensor."""
        if self.data.ndim != 2:
            raise ShapeError(f"slice_cols expects 2-D input, got {self.shape}")
        out = Tensor._result(self.data[:, start:stop].copy(), (self,), None)

        def backward():
            g = np.zeros_like(self.data)
            g[:, start:stop] = out.grad
            self._accum_grad(g)
        out._backward_fn = backward if out.requires_grad else None
        return out

    # -- reductions -----------------------------------------------------------

    def sum(self):
        out = Tensor._result(self.data.sum(dtype=np.float64).astype(self.dtype),
                             (self,), None)

        def backward():
            self._accum_grad(np.full(self.shape, out.grad, dtype=self.dtype))
        out._backward_fn = backward if out.requires_grad else None
        return out

    def mean(self):
        return self.sum() / self.size

    # -- backprop ---------------------------------------------------------------

    def backward(self) -> None:
        """Populate .grad of every reachable tensor; self must be scalar."""
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    # Only scalar-vs-array broadcasting is supported by _coerce.
    return grad.sum(dtype=np.float64).reshape(shape).astype(grad.dtype)


# -- layers -----------------------------------------------------------------


def _check_finite(name, arr):
    if _nan_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]            # N,C,Ho,Wo,k,k
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, n, c, h, w, k, stride, pad, ho, wo):
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Strided 2-D cross-correlation with zero padding.

    x: [N,C,H,W], weight: [F,C,k,k], bias: [F] -> [N,F,H',W'] with
    H' = floor((H + 2*pad - k) / stride) + 1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape}/{weight.shape}")
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {k}x{k2}")
    if cw != c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d bias must have shape ({f},), got {bias.shape}")
    if stride < 1 or k < 1 or h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d geometry invalid: k={k} stride={stride} pad={pad} on {h}x{w}")

    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wm = weight.data.reshape(f, c * k * k)
    out_flat = np.matmul(wm, cols) + bias.data[:, None]
    out_data = out_flat.reshape(n, f, ho, wo)
    _check_finite("conv2d", out_data)
    out = Tensor._result(out_data, (x, weight, bias), None)

    def backward():
        g = out.grad.reshape(n, f, ho * wo)
        if weight.requires_grad:
            weight._accum_grad(np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(weight.shape))
        if bias.requires_grad:
            bias._accum_grad(g.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(wm.T, g)
            x._accum_grad(_col2im(dcols, n, c, h, w, k, stride, pad, ho, wo))
    out._backward_fn = backward if out.requires_grad else None
    return out


def conv2d_transpose(x: Tensor, weight: Tensor, bias: Tensor,
                     stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of conv2d's forward map.

    x: [N,C,H,W], weight: [C,F,k,k], bias: [F] -> [N,F,H',W'] with
    H' = (H - 1) * stride - 2*pad + k.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input/weight, got {x.shape}/{weight.shape}")
    n, c, h, w = x.shape
    cw, f, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d_transpose kernel must be square, got {k}x{k2}")
    if cw != c:
        raise ShapeError(f"conv2d_transpose channel mismatch: input has {c}, weight expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d_transpose bias must have shape ({f},), got {bias.shape}")
    ho = (h - 1) * stride - 2 * pad + k
    wo = (w - 1) * stride - 2 * pad + k
    if stride < 1 or ho < 1 or wo < 1:
        raise ShapeError(f"conv2d_transpose geometry invalid: k={k} stride={stride} pad={pad} on {h}x{w}")

    mt = weight.data.reshape(c, f * k * k)
    x_flat = x.data.reshape(n, c, h * w)
    cols_y = np.matmul(mt.T, x_flat)                      # N, F*k*k, H*W
    out_data = _col2im(cols_y, n, f, ho, wo, k, stride, pad, h, w)
    out_data += bias.data[None, :, None, None]
    _check_finite("conv2d_transpose", out_data)
    out = Tensor._result(out_data, (x, weight, bias), None)

    def backward():
        g = out.grad
        cols_g, gh, gw = _im2col(g, k, stride, pad)       # N, F*k*k, H*W
        if x.requires_grad:
            x._accum_grad(np.matmul(mt, cols_g).reshape(n, c, h, w))
        if weight.requires_grad:
            weight._accum_grad(np.tensordot(x_flat, cols_g, axes=([0, 2], [0, 2])).reshape(weight.shape))
        if bias.requires_grad:
            bias._accum_grad(g.sum(axis=(0, 2, 3)))
    out._backward_fn = backward if out.requires_grad else None
    return out


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                train: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over [N,C,H,W].

    Train mode normalizes by batch statistics and updates the running buffers
    in place (keep `momentum` of the old value); eval mode uses the buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ShapeError("batchnorm2d on a zero-size batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d gamma/beta must have shape ({c},)")

    xd = x.data
    if train:
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        running_mean *= momentum
        running_mean += ((1.0 - momentum) * mu).astype(running_mean.dtype)
        running_var *= momentum
        running_var += ((1.0 - momentum) * var).astype(running_var.dtype)
    else:
        mu = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    mu = mu.astype(xd.dtype)
    xhat = (xd - mu[None, :, None, None]) * inv[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    _check_finite("batchnorm2d", out_data)
    out = Tensor._result(out_data, (x, gamma, beta), None)

    def backward():
        g = out.grad
        if gamma.requires_grad:
            gamma._accum_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum_grad(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if train:
                m = n * h * w
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv[None, :, None, None]
            x._accum_grad(dx)
    out._backward_fn = backward if out.requires_grad else None
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: [N,D] @ [D,M] + [M]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense expects 2-D input/weight, got {x.shape}/{weight.shape}")
    n, d = x.shape
    dw, m = weight.shape
    if dw != d:
        raise ShapeError(f"dense dimension mismatch: input {d}, weight expects {dw}")
    if bias.shape != (m,):
        raise ShapeError(f"dense bias must have shape ({m},), got {bias.shape}")
    out_data = x.data @ weight.data + bias.data
    _check_finite("dense", out_data)
    out = Tensor._result(out_data, (x, weight, bias), None)

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accum_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight._accum_grad(x.data.T @ g)
        if bias.requires_grad:
            bias._accum_grad(g.sum(axis=0))
    out._backward_fn = backward if out.requires_grad else None
    return out


# -- gradient checking ---------------------------------------------------------


def finite_difference_check(loss_fn, params, h=1e-3, max_entries=None, rng=None):
    """Max relative error between analytic and central-difference gradients.

    `loss_fn` must be a deterministic closure over `params` (a name -> Tensor
    mapping) returning a scalar Tensor. Parameters with requires_grad=False
    are skipped. When `max_entries` is given, that many elements per parameter
    are sampled (via `rng`) instead of sweeping all of them.
    """
    items = [(name, p) for name, p in params.items() if p.requires_grad]
    for _, p in items:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in items}

    # The numeric sweep only needs forward values: skip graph construction
    # and the NaN scans while it runs.
    for _, p in items:
        p.requires_grad = False
    global _nan_checks
    saved_checks = _nan_checks
    _nan_checks = False

    worst = 0.0
    for name, p in items:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                raise ValueError("max_entries sampling requires an rng")
            idxs = rng.permutation(n)[:max_entries]
        else:
            idxs = range(n)
        a_flat = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = float(a_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    for _, p in items:
        p.requires_grad = True
    _nan_checks = saved_checks
    return worst


def grad_check(model, image, gt_mask, rel_tolerance=1e-3, h=1e-5,
               max_entries=None, rng=None):
    """Finite-difference check of the model's full training loss.

    Runs the graph in float64 (the engine's verification precision) with a
    frozen latent noise draw so both gradient estimates differentiate the same
    deterministic function. Parameters are jittered away from their initial
    values first: freshly initialised biases sit exactly on the leaky-ReLU
    kink, where the piecewise derivative and the central difference disagree
    by construction. Returns the max relative error over parameters.
    """
    from . import model as model_mod
    from .rng import Rng

    check_rng = rng if rng is not None else Rng(0)
    m64 = model.astype(np.float64)
    jitter_rng = check_rng.split("jitter")
    for p in m64.parameters().values():
        p.data = p.data + 0.05 * jitter_rng.normal(p.data.shape)
    img = Tensor(np.asarray(image, dtype=np.float64))
    gt = Tensor(np.asarray(gt_mask, dtype=np.float64))
    noise = model_mod.frozen_latent_noise(m64, img.shape[0], check_rng.split("noise"))

    def loss_fn():
        loss, _, _ = model_mod.elbo_loss(m64, img, gt, rng=None, noise=noise, train=True)
        return loss

    return finite_difference_check(loss_fn, m64.parameters(), h=h,
                                   max_entries=max_entries, rng=check_rng.split("sample"))
