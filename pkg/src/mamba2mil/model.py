"""Multi-ordering SSD classifier for bags of instance features.

Pipeline for one bag of ``N`` rows::

    reduce (D -> D') -> square (N -> L rows)
    for each branch ordering: reorder -> SSD stack -> undo reorder
    fuse branches (concatenate or add) -> F_c  (L x W)
    scores = Linear(tanh(Linear(F_c)))         (L x 1, or L x W per-channel)
    alpha = softmax over the L positions
    pooled = sum_t alpha_t * F_c[t]
    logits = Linear(tanh(Linear(pooled)))

Parameters live in a flat ``dict[str, ndarray]``; names are stable and are
what checkpoints store.
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from . import seq_transform as st
from .errors import ContractError, DimensionError, EmptyBagError
from .ssd import (SsdBlockConfig, block_param_shapes, glorot, init_block_params,
                  stack_backward, stack_forward)

AGGREGATIONS = ("concatenate", "add")
SELECTIONS = ("position", "per-channel")
_BLOCK_RE = re.compile(r"(.+\.block\d+)\.")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 1024
    reduced_dim: int = 512
    num_classes: int = 2
    branches: tuple = ("original", "flipped", "transposed")
    aggregation: str = "concatenate"
    ssd: SsdBlockConfig = field(default_factory=SsdBlockConfig)
    selection_hidden: int | None = None  # None: reduced_dim // 4
    mlp_hidden: int | None = None  # None: reduced_dim
    selection: str = "position"
    realign: bool = True
    share_branch_params: bool = False

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(str(b) for b in self.branches))
        if isinstance(self.ssd, dict):
            object.__setattr__(self, "ssd", SsdBlockConfig(**self.ssd))
        if self.selection_hidden is None:
            object.__setattr__(self, "selection_hidden", max(1, self.reduced_dim // 4))
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", self.reduced_dim)
        if not self.branches:
            raise ValueError("at least one branch is required")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError(f"duplicate branches: {self.branches}")
        for b in self.branches:
            st.Ordering.parse(b)
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.num_classes < 2 or self.selection_hidden < 1 or self.mlp_hidden < 1:
            raise ValueError(f"invalid model config: {self}")
        self.ssd.inner_dims(self.reduced_dim)

    @property
    def orderings(self) -> list[st.Ordering]:
        return [st.Ordering.parse(b) for b in self.branches]

    @property
    def fused_dim(self) -> int:
        if self.aggregation == "add":
            return self.reduced_dim
        return self.reduced_dim * len(self.branches)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branches"] = list(self.branches)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ssd"] = SsdBlockConfig(**d["ssd"])
        d["branches"] = tuple(d["branches"])
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _branch_prefix(config: ModelConfig, branch: str) -> str:
    return "shared" if config.share_branch_params else f"branch.{branch}"


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    D, Dr, W = config.input_dim, config.reduced_dim, config.fused_dim
    shapes = {"reduce.W": (D, Dr), "reduce.b": (Dr,)}
    block = block_param_shapes(Dr, config.ssd)
    prefixes = []
    for b in config.branches:
        pre = _branch_prefix(config, b)
        if pre not in prefixes:
            prefixes.append(pre)
    for pre in prefixes:
        for k in range(config.ssd.depth):
            for name, shp in block.items():
                shapes[f"{pre}.block{k}.{name}"] = shp
    sh = config.selection_hidden
    score_width = 1 if config.selection == "position" else W
    shapes.update({
        "select.W1": (W, sh), "select.b1": (sh,),
        # no bias on the score layer: softmax over positions ignores a constant shift
        "select.W2": (sh, score_width),
        "head.W1": (W, config.mlp_hidden), "head.b1": (config.mlp_hidden,),
        "head.W2": (config.mlp_hidden, config.num_classes), "head.b2": (config.num_classes,),
    })
    return shapes


def count_params(config: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    shapes = param_shapes(config)
    params = {}
    for name, shp in shapes.items():
        if name in params:
            continue
        m = _BLOCK_RE.match(name)
        if m:
            block = init_block_params(config.reduced_dim, config.ssd, rng)
            params.update({f"{m.group(1)}.{bn}": arr for bn, arr in block.items()})
        elif len(shp) == 2:
            params[name] = glorot(rng, *shp)
        else:
            params[name] = np.zeros(shp)
    return {name: params[name] for name in shapes}


def _block_params(params, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


@dataclass
class ForwardArtifacts:
    logits: np.ndarray
    attention_weights: np.ndarray
    tape: nx.Tape = field(repr=False)
    pooled: np.ndarray | None = field(default=None, repr=False)


def _features(bag):
    feats = getattr(bag, "features", bag)
    return np.asarray(feats, dtype=np.float64)


def forward(bag, params, config: ModelConfig) -> ForwardArtifacts:
    X = _features(bag)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBagError(f"bag must be a non-empty N x D matrix, got shape {X.shape}")
    if X.shape[1] != config.input_dim:
        raise DimensionError(f"bag feature dim {X.shape[1]} != config input_dim {config.input_dim}")
    if params["reduce.W"].shape != (config.input_dim, config.reduced_dim):
        raise DimensionError("params do not match config (reduce.W shape)")

    Sl, t_red = nx.linear_forward(X, params["reduce.W"], params["reduce.b"])
    n = Sl.shape[0]
    sq_idx = st.square_index(n)
    Sq = Sl[sq_idx]
    L = Sq.shape[0]

    branch_tapes = []
    outs = []
    for b, ordering in zip(config.branches, config.orderings):
        perm = st.ordering_permutation(L, ordering)
        pre = _branch_prefix(config, b)
        blocks = [_block_params(params, f"{pre}.block{k}") for k in range(config.ssd.depth)]
        F, tapes = stack_forward(Sq[perm], blocks, config.ssd)
        if config.realign:
            F = st.inverse_reorder(F, ordering)
        outs.append(F)
        branch_tapes.append((b, pre, perm, tapes))
    Fc = np.concatenate(outs, axis=1) if config.aggregation == "concatenate" else sum(outs)

    Hs, t_s1 = nx.linear_forward(Fc, params["select.W1"], params["select.b1"])
    Ht, t_tanh = nx.tanh_forward(Hs)
    scores, t_s2 = nx.linear_forward(Ht, params["select.W2"], np.zeros(params["select.W2"].shape[1]))
    if config.selection == "position":
        alpha, t_sm = nx.softmax_forward(scores[:, 0], axis=0)
        pooled = alpha @ Fc
    else:
        alpha, t_sm = nx.softmax_forward(scores, axis=0)
        pooled = np.sum(alpha * Fc, axis=0)

    Zh, t_h1 = nx.linear_forward(pooled[None, :], params["head.W1"], params["head.b1"])
    Zt, t_htanh = nx.tanh_forward(Zh)
    logits, t_h2 = nx.linear_forward(Zt, params["head.W2"], params["head.b2"])

    tape = nx.Tape("model", config, n, sq_idx, t_red, branch_tapes, Fc, alpha,
                   t_s1, t_tanh, t_s2, t_sm, t_h1, t_htanh, t_h2)
    return ForwardArtifacts(logits[0], alpha, tape, pooled)


def backward(artifacts: ForwardArtifacts, dlogits, params=None):
    """Gradients for every parameter, plus their L2 norms.

    When ``params`` is given, names the forward pass never touched (for
    instance the blocks of a disabled branch) get zero gradients so the
    result has the same keys as ``params``.
    """
    (config, n, sq_idx, t_red, branch_tapes, Fc, alpha, t_s1, t_tanh, t_s2, t_sm,
     t_h1, t_htanh, t_h2) = artifacts.tape.take("model")
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(1, -1)
    g = {}
    dZt, g["head.W2"], g["head.b2"] = nx.linear_backward(t_h2, dlogits)
    dZh = nx.tanh_backward(t_htanh, dZt)
    dpooled, g["head.W1"], g["head.b1"] = nx.linear_backward(t_h1, dZh)
    dpooled = dpooled[0]

    if config.selection == "position":
        dFc = np.outer(alpha, dpooled)
        dscores = nx.softmax_backward(t_sm, Fc @ dpooled)[:, None]
    else:
        dFc = alpha * dpooled
        dscores = nx.softmax_backward(t_sm, Fc * dpooled)
    dHt, g["select.W2"], _ = nx.linear_backward(t_s2, dscores)
    dHs = nx.tanh_backward(t_tanh, dHt)
    dFc_sel, g["select.W1"], g["select.b1"] = nx.linear_backward(t_s1, dHs)
    dFc = dFc + dFc_sel

    Dr = config.reduced_dim
    dSq = np.zeros((Fc.shape[0], Dr))
    for i, (b, pre, perm, tapes) in enumerate(branch_tapes):
        dF = dFc[:, i * Dr:(i + 1) * Dr] if config.aggregation == "concatenate" else dFc
        if config.realign:
            dF = dF[perm]
        dX, block_grads = stack_backward(tapes, dF)
        dSq[perm] += dX
        for k, bg in enumerate(block_grads):
            for name, arr in bg.items():
                key = f"{pre}.block{k}.{name}"
                g[key] = g[key] + arr if key in g else arr

    dSl = np.zeros((n, Dr))
    np.add.at(dSl, sq_idx, dSq)
    _, g["reduce.W"], g["reduce.b"] = nx.linear_backward(t_red, dSl)

    if params is not None:
        g = {name: g.get(name, np.zeros_like(p)) for name, p in params.items()}
    norms = {name: float(np.linalg.norm(arr)) for name, arr in g.items()}
    return g, norms


def predict_proba(bag, params, config: ModelConfig) -> np.ndarray:
    return nx.softmax(forward(bag, params, config).logits)


# -- checkpoints -----------------------------------------------------------------
# Layout (all integers little-endian):
#   b"M2MIL\0" | u16 version | u32 len | config JSON (utf-8) | u32 tensor count
#   per tensor: u32 name len | name (utf-8) | u32 rows | u32 cols | rows*cols f64
# Vectors are stored as 1 x n.

CHECKPOINT_MAGIC = b"M2MIL\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(config: ModelConfig, params) -> bytes:
    buf = io.BytesIO()
    cfg = _config_bytes(config)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    shapes = param_shapes(config)
    buf.write(struct.pack("<I", len(shapes)))
    for name in shapes:
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shapes[name]:
            raise DimensionError(f"{name}: shape {arr.shape} != expected {shapes[name]}")
        rows, cols = arr.shape if arr.ndim == 2 else (1, arr.shape[0])
        enc = name.encode()
        buf.write(struct.pack("<I", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<II", rows, cols))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def save_checkpoint(path, config: ModelConfig, params) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(config, params))


def load_checkpoint(path):
    """Returns ``(config, params)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return parse_checkpoint(blob, source=str(path))


def parse_checkpoint(blob: bytes, source: str = "<bytes>"):
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic bytes")
    version, cfg_len = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(json.loads(bytes(take(cfg_len)).decode()))
    shapes = param_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        rows, cols = struct.unpack("<II", take(8))
        data = np.frombuffer(take(8 * rows * cols), dtype="<f8").astype(np.float64)
        if name not in shapes or int(np.prod(shapes[name])) != rows * cols:
            raise CheckpointError(f"{source}: tensor {name!r} ({rows}x{cols}) does not fit config")
        params[name] = data.reshape(shapes[name])
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    missing = set(shapes) - set(params)
    if missing:
        raise CheckpointError(f"{source}: missing tensors {sorted(missing)}")
    return config, {name: params[name] for name in shapes}
