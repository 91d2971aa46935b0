"""Scalar-decay state space layer (SSD) and its three evaluation paths.

The core map, per head, with state ``h_t`` of shape ``(N, P)``::

    h_t = A_t * h_{t-1} + outer(B_t, x_t)
    y_t = C_t @ h_t

Unrolled, ``y = M @ x`` with ``M[t, j] = (C_t . B_j) * prod(A[j+1..t])`` for
``j <= t``. ``ssd_recurrence`` walks the recurrence, ``ssd_dual_quadratic``
materializes ``M``, and ``ssd_chunked_scan`` mixes the two: quadratic inside
chunks of length Q, recurrence across chunk boundaries.

All kernels accept leading batch axes (typically heads): ``x`` is
``(..., T, P)``, ``A`` is ``(..., T)``, ``B`` and ``C`` are ``(..., T, N)``,
broadcasting over the leading axes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, NumericError

DEFAULT_CHUNK = 32


def _check_inputs(x, A, B, C):
    x = np.asarray(x, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if x.ndim < 2 or B.ndim < 2 or C.ndim < 2 or A.ndim < 1:
        raise DimensionError("ssd: x, B, C need (..., T, *) and A needs (..., T)")
    T = x.shape[-2]
    if A.shape[-1] != T or B.shape[-2] != T or C.shape[-2] != T:
        raise DimensionError(
            f"ssd: sequence lengths differ: x{x.shape}, A{A.shape}, B{B.shape}, C{C.shape}")
    if B.shape[-1] != C.shape[-1]:
        raise DimensionError(f"ssd: state dims differ: B{B.shape} vs C{C.shape}")
    for name, arr in (("x", x), ("A", A), ("B", B), ("C", C)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"ssd: non-finite values in {name}")
    if np.any(A < 0.0) or np.any(A > 1.0):
        raise ValueError("ssd: decay A must lie in [0, 1]")
    return x, A, B, C


def _out_shape(x, A, B, C):
    lead = np.broadcast_shapes(x.shape[:-2], A.shape[:-1], B.shape[:-2], C.shape[:-2])
    return lead + (x.shape[-2], x.shape[-1])


def _log_decay(A):
    with np.errstate(divide="ignore"):
        return np.log(A)


def ssd_recurrence(x, A, B, C):
    """Sequential evaluation, one time step at a time (h_0 = 0)."""
    x, A, B, C = _check_inputs(x, A, B, C)
    shape = _out_shape(x, A, B, C)
    y = np.zeros(shape)
    lead, T, P = shape[:-2], shape[-2], shape[-1]
    h = np.zeros(lead + (B.shape[-1], P))
    for t in range(T):
        h = A[..., t, None, None] * h + B[..., t, :, None] * x[..., t, None, :]
        y[..., t, :] = np.einsum("...n,...np->...p", C[..., t, :], h)
    return y


def ssd_dual_quadratic(x, A, B, C, row_block=512):
    """Materialize the masked mixing matrix and apply it, ``row_block`` rows at a time."""
    x, A, B, C = _check_inputs(x, A, B, C)
    return _quadratic(x, _log_decay(A), B, C, row_block)


def ssd_chunked_scan(x, A, B, C, chunk=DEFAULT_CHUNK):
    x, A, B, C = _check_inputs(x, A, B, C)
    if int(chunk) < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")
    return _chunked(x, _log_decay(A), B, C, int(chunk))


# -- log-space kernels ---------------------------------------------------------
# la = log(A) <= 0, possibly -inf. Only sums of la are formed (never
# differences) wherever -inf can occur, so no inf - inf arises.

def _quadratic(x, la, B, C, row_block=512):
    shape = _out_shape(x, la, B, C)
    T = shape[-2]
    y = np.zeros(shape)
    if T == 0:
        return y
    dead = np.isneginf(la)
    zeros_seen = np.cumsum(dead, axis=-1)
    cs = np.cumsum(np.where(dead, 0.0, la), axis=-1)
    t_idx = np.arange(T)
    # every block spans all T columns: the full masked T x T matrix is formed,
    # with row blocking only bounding peak memory
    Bt = np.swapaxes(B, -1, -2)
    for r0 in range(0, T, row_block):
        r1 = min(T, r0 + row_block)
        live = (t_idx[None, :] <= t_idx[r0:r1, None]) & (zeros_seen[..., r0:r1, None] == zeros_seen[..., None, :])
        with np.errstate(over="ignore", invalid="ignore"):
            seg = np.where(live, cs[..., r0:r1, None] - cs[..., None, :], -np.inf)
        gram = C[..., r0:r1, :] @ Bt
        y[..., r0:r1, :] = np.matmul(gram * np.exp(seg), x)
    return y


@lru_cache(maxsize=64)
def _tril_masks(Q):
    return np.tril(np.ones((Q, Q), dtype=bool), -1), np.tril(np.ones((Q, Q), dtype=bool))


def _segsum(la):
    """``out[..., i, j] = sum(la[..., j+1:i+1])`` for j <= i, else -inf."""
    strict, lower = _tril_masks(la.shape[-1])
    ss = np.cumsum(np.where(strict, la[..., :, None], 0.0), axis=-2)
    return np.where(lower, ss, -np.inf)


def _chunked(x, la, B, C, chunk):
    shape = _out_shape(x, la, B, C)
    T, P = shape[-2], shape[-1]
    if T == 0:
        return np.zeros(shape)
    Q = min(chunk, T)
    nc = -(-T // Q)
    pad = nc * Q - T
    if pad:
        # padded tail: x = B = C = 0 and A = 1, so it touches nothing before it
        x = np.concatenate([x, np.zeros(x.shape[:-2] + (pad, x.shape[-1]))], axis=-2)
        B = np.concatenate([B, np.zeros(B.shape[:-2] + (pad, B.shape[-1]))], axis=-2)
        C = np.concatenate([C, np.zeros(C.shape[:-2] + (pad, C.shape[-1]))], axis=-2)
        la = np.concatenate([la, np.zeros(la.shape[:-1] + (pad,))], axis=-1)
    xs = x.reshape(x.shape[:-2] + (nc, Q, x.shape[-1]))
    Bs = B.reshape(B.shape[:-2] + (nc, Q, B.shape[-1]))
    Cs = C.reshape(C.shape[:-2] + (nc, Q, C.shape[-1]))
    las = la.reshape(la.shape[:-1] + (nc, Q))

    into = np.cumsum(las, axis=-1)  # decay from chunk start through t
    if np.all(np.isfinite(las)):
        _, lower = _tril_masks(Q)
        decay = np.exp(np.where(lower, into[..., :, None] - into[..., None, :], -np.inf))
    else:
        decay = np.exp(_segsum(las))
    gram = Cs @ np.swapaxes(Bs, -1, -2)
    y = (gram * decay) @ xs

    incl = np.flip(np.cumsum(np.flip(las, -1), axis=-1), -1)
    outof = np.concatenate([incl[..., 1:], np.zeros(incl.shape[:-1] + (1,))], axis=-1)
    local = np.swapaxes(Bs * np.exp(outof)[..., None], -1, -2) @ xs
    carry = np.exp(into[..., -1])

    lead = np.broadcast_shapes(local.shape[:-3], carry.shape[:-1])
    local = np.broadcast_to(local, lead + local.shape[-3:])
    h = np.zeros(lead + local.shape[-2:])
    h_in = np.empty(local.shape)
    for c in range(nc):
        h_in[..., c, :, :] = h
        h = carry[..., c, None, None] * h + local[..., c, :, :]
    y = y + (Cs * np.exp(into)[..., None]) @ h_in
    y = y.reshape(y.shape[:-3] + (nc * Q, P))
    return y[..., :T, :]


def _flip_t(a):
    return np.flip(a, axis=-2)


def _reverse_decay(la):
    # reversed time sees the decay of the *later* original step
    rev = np.flip(la, axis=-1)
    return np.concatenate([np.zeros(la.shape[:-1] + (1,)), rev[..., :-1]], axis=-1)


def ssd_core_backward(x, la, B, C, y, dy, chunk=DEFAULT_CHUNK):
    """Adjoints of ``y = _chunked(x, la, B, C)``.

    Each adjoint is itself an SSD evaluation: ``dx`` and ``dB`` run backwards
    in time, ``dC`` forwards. Returned ``dB``/``dC`` keep the broadcast batch
    shape; callers sum over axes they broadcast.
    """
    la_r = _reverse_decay(la)
    dx = _flip_t(_chunked(_flip_t(dy), la_r, _flip_t(C), _flip_t(B), chunk))
    dC = _chunked(B, la, x, dy, chunk)
    dB = _flip_t(_chunked(_flip_t(C), la_r, _flip_t(dy), _flip_t(x), chunk))
    ds = np.sum(dy * y, axis=-1) - np.sum(x * dx, axis=-1)
    dla = np.flip(np.cumsum(np.flip(ds, -1), axis=-1), -1)
    return dx, dla, dB, dC


# -- block ---------------------------------------------------------------------

@dataclass(frozen=True)
class SsdBlockConfig:
    depth: int = 2
    use_layernorm: bool = False
    use_residual_wrapping: bool = False
    conv_kernel: int = 4
    heads: int = 4
    head_dim: int | None = None  # None: model dim // heads
    state_dim: int = 64
    gate: bool = True
    chunk: int = DEFAULT_CHUNK

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.conv_kernel < 1 or self.heads < 1 or self.state_dim < 1 or self.chunk < 1:
            raise ValueError(f"invalid SSD block config: {self}")

    def inner_dims(self, d_model: int) -> tuple[int, int]:
        """(heads, head_dim) for a block of width ``d_model``."""
        if self.head_dim is None:
            if d_model % self.heads:
                raise DimensionError(f"model dim {d_model} not divisible by {self.heads} heads")
            return self.heads, d_model // self.heads
        return self.heads, self.head_dim

    def to_dict(self):
        return asdict(self)


def block_param_shapes(d_model: int, cfg: SsdBlockConfig) -> dict[str, tuple]:
    H, P = cfg.inner_dims(d_model)
    di, N = H * P, cfg.state_dim
    xbc = di + 2 * N
    proj = (di if cfg.gate else 0) + xbc + H
    shapes = {
        "in_proj.W": (d_model, proj),
        "in_proj.b": (proj,),
        "conv.w": (cfg.conv_kernel, xbc),
        "conv.b": (xbc,),
        "dt_bias": (H,),
        "a_log": (H,),
        "out_proj.W": (di, d_model),
        "out_proj.b": (d_model,),
    }
    if cfg.gate:
        shapes["gate_norm.w"] = (di,)
    if cfg.use_layernorm:
        shapes["norm.gamma"] = (d_model,)
        shapes["norm.beta"] = (d_model,)
    return shapes


def glorot(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_block_params(d_model: int, cfg: SsdBlockConfig, rng) -> dict[str, np.ndarray]:
    shapes = block_param_shapes(d_model, cfg)
    H = shapes["a_log"][0]
    p = {
        "in_proj.W": glorot(rng, *shapes["in_proj.W"]),
        "in_proj.b": np.zeros(shapes["in_proj.b"]),
        "conv.w": rng.uniform(-1.0, 1.0, size=shapes["conv.w"]) * np.sqrt(3.0 / cfg.conv_kernel),
        "conv.b": np.zeros(shapes["conv.b"]),
        # initial step size log-uniform in [1e-3, 1e-1]; decay rates in [1, 16]
        "dt_bias": nx.inverse_softplus(np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=H))),
        "a_log": np.log(rng.uniform(1.0, 16.0, size=H)),
        "out_proj.W": glorot(rng, *shapes["out_proj.W"]),
        "out_proj.b": np.zeros(shapes["out_proj.b"]),
    }
    if cfg.gate:
        p["gate_norm.w"] = np.ones(shapes["gate_norm.w"])
    if cfg.use_layernorm:
        p["norm.gamma"] = np.ones(d_model)
        p["norm.beta"] = np.zeros(d_model)
    return p


def ssd_block_forward(S, p, cfg: SsdBlockConfig):
    """One block: ``out_proj(SSD(conv(in_proj(S))))``.

    With ``cfg.gate`` the SSD output is gated and RMS-normalized before the
    output projection, ``out_proj(rmsnorm(y * silu(z)) * w)``, which keeps
    stacked blocks at a stable scale.

    With residual wrapping the result is ``S + block(norm(S))``; ``norm`` is
    layer normalization when enabled and the identity otherwise.
    """
    S = np.asarray(S, dtype=np.float64)
    L, Dm = S.shape
    H, P = cfg.inner_dims(Dm)
    di, N = H * P, cfg.state_dim
    if p["in_proj.W"].shape[0] != Dm or p["a_log"].shape != (H,):
        raise DimensionError(
            f"block params expect width {p['in_proj.W'].shape[0]} / {p['a_log'].shape[0]} heads, "
            f"got input {S.shape} with {H} heads")
    t_ln = None
    U = S
    if cfg.use_layernorm:
        U, t_ln = nx.layernorm_forward(S, p["norm.gamma"], p["norm.beta"])
    Z, t_in = nx.linear_forward(U, p["in_proj.W"], p["in_proj.b"])
    g0 = di if cfg.gate else 0
    xbc_raw = Z[:, g0:g0 + di + 2 * N]
    dt_raw = Z[:, g0 + di + 2 * N:] + p["dt_bias"]
    XBC, t_conv = nx.causal_conv1d_forward(xbc_raw, p["conv.w"], p["conv.b"])
    xs, Bm, Cm = XBC[:, :di], XBC[:, di:di + N], XBC[:, di + N:]
    delta = nx.softplus(dt_raw)
    rate = np.exp(p["a_log"])
    la = -(delta * rate).T  # (H, L)
    xh = xs.reshape(L, H, P).transpose(1, 0, 2)
    yh = _chunked(xh, la, Bm[None], Cm[None], cfg.chunk)
    yf = yh.transpose(1, 0, 2).reshape(L, di)
    t_gate = t_norm = g = None
    yg = yf
    if cfg.gate:
        g, t_gate = nx.silu_forward(Z[:, :di])
        yg, t_norm = nx.rmsnorm_forward(yf * g, p["gate_norm.w"])
    out, t_out = nx.linear_forward(yg, p["out_proj.W"], p["out_proj.b"])
    if cfg.use_residual_wrapping:
        out = S + out
    tape = nx.Tape("ssd_block", cfg, (L, Dm, H, P, N), t_ln, t_in, t_conv, dt_raw, delta,
                   rate, la, xh, Bm, Cm, yh, yf, g, t_gate, t_norm, t_out)
    return out, tape


def ssd_block_backward(tape, dF):
    (cfg, dims, t_ln, t_in, t_conv, dt_raw, delta, rate, la, xh, Bm, Cm, yh, yf, g,
     t_gate, t_norm, t_out) = tape.take("ssd_block")
    L, Dm, H, P, N = dims
    di = H * P
    dF = np.asarray(dF, dtype=np.float64)
    grads = {}
    dyg, grads["out_proj.W"], grads["out_proj.b"] = nx.linear_backward(t_out, dF)
    g0 = di if cfg.gate else 0
    dZ = np.zeros((L, g0 + di + 2 * N + H))
    if cfg.gate:
        dprod, grads["gate_norm.w"] = nx.rmsnorm_backward(t_norm, dyg)
        dyf = dprod * g
        dZ[:, :di] = nx.silu_backward(t_gate, dprod * yf)
    else:
        dyf = dyg
    dyh = dyf.reshape(L, H, P).transpose(1, 0, 2)
    dxh, dla, dB, dC = ssd_core_backward(xh, la, Bm[None], Cm[None], yh, dyh, cfg.chunk)
    dXBC = np.concatenate(
        [dxh.transpose(1, 0, 2).reshape(L, di), dB.sum(axis=0), dC.sum(axis=0)], axis=1)
    dxbc_raw, grads["conv.w"], grads["conv.b"] = nx.causal_conv1d_backward(t_conv, dXBC)
    dZ[:, g0:g0 + di + 2 * N] = dxbc_raw
    dla = dla.T  # (L, H)
    grads["a_log"] = -np.sum(dla * delta, axis=0) * rate
    ddt = -dla * rate * nx.sigmoid(dt_raw)
    grads["dt_bias"] = ddt.sum(axis=0)
    dZ[:, g0 + di + 2 * N:] = ddt
    dU, grads["in_proj.W"], grads["in_proj.b"] = nx.linear_backward(t_in, dZ)
    if cfg.use_layernorm:
        dS, grads["norm.gamma"], grads["norm.beta"] = nx.layernorm_backward(t_ln, dU)
    else:
        dS = dU
    if cfg.use_residual_wrapping:
        dS = dS + dF
    return dS, grads


def stack_forward(S, blocks, cfg: SsdBlockConfig):
    """Apply ``len(blocks)`` blocks in sequence; returns output and one tape per block."""
    if len(blocks) != cfg.depth:
        raise ContractError(f"expected {cfg.depth} blocks, got {len(blocks)}")
    tapes = []
    for p in blocks:
        S, t = ssd_block_forward(S, p, cfg)
        tapes.append(t)
    return S, tapes


def stack_backward(tapes, dF):
    grads = [None] * len(tapes)
    for i in range(len(tapes) - 1, -1, -1):
        dF, grads[i] = ssd_block_backward(tapes[i], dF)
    return dF, grads
