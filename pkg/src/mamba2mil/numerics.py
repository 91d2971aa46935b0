"""Dense float64 kernels with explicit reverse-mode adjoints.

Every ``*_forward`` returns ``(out, tape)``; the matching ``*_backward``
consumes the tape exactly once.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

LAYERNORM_EPS = 1e-5


class Tape:
    """Cached forward inputs for one backward call."""

    __slots__ = ("op", "saved", "_used")

    def __init__(self, op: str, *saved):
        self.op = op
        self.saved = saved
        self._used = False

    def take(self, op: str):
        if self.op != op:
            raise ContractError(f"tape from {self.op!r} passed to {op!r} backward")
        if self._used:
            raise ContractError(f"tape for {op!r} was already consumed")
        self._used = True
        saved = self.saved
        self.saved = ()
        return saved

    @property
    def consumed(self) -> bool:
        return self._used


def _as2d(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    return a


# -- linear -----------------------------------------------------------------

def linear_forward(x, W, b):
    x = _as2d(x, "x")
    W = _as2d(W, "W")
    b = np.asarray(b, dtype=np.float64)
    if x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"linear: x{x.shape} @ W{W.shape} + b{b.shape} do not conform")
    return x @ W + b, Tape("linear", x, W)


def linear_backward(tape: Tape, dout):
    x, W = tape.take("linear")
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(f"linear backward: dout{dout.shape} vs out{(x.shape[0], W.shape[1])}")
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


# -- causal depthwise conv ---------------------------------------------------

def causal_conv1d_forward(x, kernel, bias):
    """Depthwise causal convolution; kernel row k multiplies ``x[t - K + 1 + k]``."""
    x = _as2d(x, "x")
    kernel = _as2d(kernel, "kernel")
    bias = np.asarray(bias, dtype=np.float64)
    K, D = kernel.shape
    if K < 1 or x.shape[1] != D or bias.shape != (D,):
        raise DimensionError(
            f"conv1d: x{x.shape}, kernel{kernel.shape}, bias{bias.shape} do not conform")
    if not np.all(np.isfinite(kernel)):
        raise NumericError("conv1d kernel contains non-finite values")
    L = x.shape[0]
    xp = np.concatenate([np.zeros((K - 1, D)), x], axis=0)
    out = np.broadcast_to(bias, (L, D)).copy()
    for k in range(K):
        out += kernel[k] * xp[k:k + L]
    return out, Tape("conv1d", xp, kernel, L)


def causal_conv1d_backward(tape: Tape, dout):
    xp, kernel, L = tape.take("conv1d")
    K, D = kernel.shape
    dxp = np.zeros_like(xp)
    dk = np.empty_like(kernel)
    for k in range(K):
        dxp[k:k + L] += kernel[k] * dout
        dk[k] = np.einsum("td,td->d", xp[k:k + L], dout)
    return dxp[K - 1:], dk, dout.sum(axis=0)


# -- pointwise activations ----------------------------------------------------

def tanh_forward(x):
    y = np.tanh(x)
    return y, Tape("tanh", y)


def tanh_backward(tape: Tape, dout):
    (y,) = tape.take("tanh")
    return dout * (1.0 - y * y)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def silu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    s = sigmoid(x)
    return x * s, Tape("silu", x, s)


def silu_backward(tape: Tape, dout):
    x, s = tape.take("silu")
    return dout * s * (1.0 + x * (1.0 - s))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return softplus(x), Tape("softplus", x)


def softplus_backward(tape: Tape, dout):
    (x,) = tape.take("softplus")
    return dout * sigmoid(x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] == 0:
        raise ContractError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_forward(x, axis=-1):
    y = softmax(x, axis)
    return y, Tape("softmax", y, axis)


def softmax_backward(tape: Tape, dout):
    y, axis = tape.take("softmax")
    return y * (dout - np.sum(dout * y, axis=axis, keepdims=True))


def layernorm_forward(x, gamma, beta, eps=LAYERNORM_EPS):
    """Normalize each row over the feature axis, then scale and shift."""
    x = _as2d(x, "x")
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"layernorm: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, Tape("layernorm", xhat, rstd, gamma)


def layernorm_backward(tape: Tape, dout):
    xhat, rstd, gamma = tape.take("layernorm")
    dgamma = np.sum(dout * xhat, axis=0)
    dbeta = dout.sum(axis=0)
    g = dout * gamma
    dx = rstd * (g - g.mean(axis=1, keepdims=True)
                 - xhat * np.mean(g * xhat, axis=1, keepdims=True))
    return dx, dgamma, dbeta


def rmsnorm_forward(x, weight, eps=LAYERNORM_EPS):
    """Row-wise ``x / sqrt(mean(x**2) + eps) * weight`` (no centering)."""
    x = _as2d(x, "x")
    if weight.shape != (x.shape[1],):
        raise DimensionError(f"rmsnorm: x{x.shape}, weight{weight.shape}")
    rinv = 1.0 / np.sqrt(np.mean(x * x, axis=1, keepdims=True) + eps)
    xhat = x * rinv
    return xhat * weight, Tape("rmsnorm", xhat, rinv, weight)


def rmsnorm_backward(tape: Tape, dout):
    xhat, rinv, weight = tape.take("rmsnorm")
    g = dout * weight
    dx = rinv * (g - xhat * np.mean(g * xhat, axis=1, keepdims=True))
    return dx, np.sum(dout * xhat, axis=0)


# -- optimizer ----------------------------------------------------------------

def adam_step(params, grads, moments, t, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays; ``moments`` maps names to
    ``(m, v)`` pairs (missing entries start at zero). Returns new
    ``(params, moments)`` dicts and leaves the inputs untouched.
    """
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad{g.shape} vs param{p.shape}")
        m, v = moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_moments[name] = (m, v)
    return new_params, new_moments
