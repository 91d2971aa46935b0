"""Self-verification: every kernel checked against an independent oracle.

Each check returns a scalar deviation. A check passes when the deviation is
below its tolerance; checks marked exact require a deviation of zero unless a
tolerance override is given.
"""

from __future__ import annotations

import itertools
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as dt
from . import model as mdl
from . import numerics as nx
from . import seq_transform as st
from . import ssd
from .metrics import roc_auc_binary, roc_auc_multiclass
from .training import TINY_CONFIG, cross_entropy, gradient_check


@dataclass
class VerifyContext:
    length: int = 64
    chunks: tuple = (1, 3, 8, 17)
    seed: int = 0

    def rng(self, salt):
        return np.random.default_rng([self.seed, salt])


@dataclass
class Check:
    name: str
    module: str
    fn: object
    tolerance: float | None  # None: exact
    description: str


@dataclass
class CheckResult:
    name: str
    module: str
    deviation: float
    tolerance: float | None
    passed: bool
    seconds: float
    error: str | None = None


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)
    checklist: dict = field(default_factory=dict)  # module -> list of check names

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def render(self) -> str:
        lines = []
        for r in self.results:
            tol = "exact" if r.tolerance is None else f"< {r.tolerance:g}"
            status = "PASS" if r.passed else "FAIL"
            detail = r.error or f"deviation {r.deviation:.3e} ({tol})"
            lines.append(f"{status}  {r.module:<13} {r.name:<22} {detail}  [{r.seconds:.2f}s]")
        ran = {r.name: r.passed for r in self.results}
        lines.append("")
        lines.append("oracle coverage:")
        for module, names in self.checklist.items():
            marks = " ".join(
                f"[{'x' if ran.get(n) else ('!' if n in ran else ' ')}] {n}" for n in names)
            lines.append(f"  {module:<13} {marks}")
        n_fail = sum(not r.passed for r in self.results)
        lines.append("")
        lines.append(f"{len(self.results) - n_fail}/{len(self.results)} checks passed")
        return "\n".join(lines)


def _maxdiff(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _fd_rel_error(f, x, analytic, step=1e-5):
    """Max relative error of ``analytic`` against central differences of scalar ``f``."""
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        nflat[i] = (up - down) / (2 * step)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(num)), 1e-12)
    return float(np.max(np.abs(analytic - num)) / scale)


def _ssd_inputs(rng, T, P=3, N=4, H=2):
    return (rng.uniform(-1, 1, (H, T, P)), rng.uniform(0.05, 1.0, (H, T)),
            rng.uniform(-1, 1, (H, T, N)), rng.uniform(-1, 1, (H, T, N)))


def _unrolled(x, A, B, C):
    H, T, P = x.shape
    y = np.zeros_like(x)
    for h in range(H):
        for t in range(T):
            for j in range(t + 1):
                decay = np.prod(A[h, j + 1:t + 1])
                y[h, t] += (C[h, t] @ B[h, j]) * decay * x[h, j]
    return y


# -- numerics -------------------------------------------------------------------------

def check_linear(ctx):
    rng = ctx.rng(1)
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    ref = np.array([[sum(x[i, k] * W[k, j] for k in range(4)) + b[j] for j in range(2)]
                    for i in range(3)])
    out, _ = nx.linear_forward(x, W, b)
    return _maxdiff(out, ref)


def check_conv(ctx):
    rng = ctx.rng(2)
    L, D, K = 7, 3, 4
    x, k, b = rng.standard_normal((L, D)), rng.standard_normal((K, D)), rng.standard_normal(D)
    ref = np.zeros((L, D))
    for t in range(L):
        for d in range(D):
            ref[t, d] = b[d] + sum(k[i, d] * x[t - K + 1 + i, d]
                                   for i in range(K) if t - K + 1 + i >= 0)
    out, _ = nx.causal_conv1d_forward(x, k, b)
    return _maxdiff(out, ref)


def check_layer_grads(ctx):
    """Finite differences for every backward in the numerics module."""
    rng = ctx.rng(3)
    worst = 0.0
    x = rng.uniform(-2, 2, (3, 4))

    def run(fwd, bwd, *extra):
        nonlocal worst
        out, tape = fwd(x, *extra)
        proj = rng.standard_normal(out.shape)
        grads = bwd(tape, proj)
        grads = grads if isinstance(grads, tuple) else (grads,)
        for arr, g in zip((x, *extra), grads):
            worst = max(worst, _fd_rel_error(lambda: float(np.sum(fwd(x, *extra)[0] * proj)),
                                             arr, g))

    run(lambda a: nx.tanh_forward(a), nx.tanh_backward)
    run(lambda a: nx.silu_forward(a), nx.silu_backward)
    run(lambda a: nx.softplus_forward(a), nx.softplus_backward)
    run(lambda a: nx.softmax_forward(a, axis=0), nx.softmax_backward)
    run(lambda a: nx.softmax_forward(a, axis=1), nx.softmax_backward)
    run(nx.linear_forward, nx.linear_backward, rng.standard_normal((4, 2)), rng.standard_normal(2))
    run(nx.causal_conv1d_forward, nx.causal_conv1d_backward,
        rng.standard_normal((2, 4)), rng.standard_normal(4))
    run(nx.layernorm_forward, nx.layernorm_backward,
        rng.uniform(0.5, 1.5, 4), rng.standard_normal(4))
    run(nx.rmsnorm_forward, nx.rmsnorm_backward, rng.uniform(0.5, 1.5, 4))
    return worst


def check_softmax_sum(ctx):
    x = ctx.rng(4).uniform(-50, 50, (20, 9))
    y = nx.softmax(x, axis=1)
    return float(np.max(np.abs(y.sum(axis=1) - 1.0))) + float(np.any(y <= 0))


def check_conv_causality(ctx):
    rng = ctx.rng(5)
    x, k, b = rng.standard_normal((10, 2)), rng.standard_normal((4, 2)), np.zeros(2)
    base, _ = nx.causal_conv1d_forward(x, k, b)
    x2 = x.copy()
    x2[6:] += rng.standard_normal((4, 2))
    out, _ = nx.causal_conv1d_forward(x2, k, b)
    return _maxdiff(out[:6], base[:6])


def check_adam(ctx):
    lr, b1, b2, eps = 2e-4, 0.9, 0.999, 1e-8
    p, _ = nx.adam_step({"w": np.array([0.5])}, {"w": np.array([1.0])}, {}, 1, lr, b1, b2, eps)
    # t=1: m = 0.1, v = 0.001, bias-corrected m_hat = v_hat = 1
    return abs(float(p["w"][0]) - (0.5 - lr / (1.0 + eps)))


# -- ssd_core ----------------------------------------------------------------------------

def check_recurrence(ctx):
    rng = ctx.rng(6)
    x, A, B, C = _ssd_inputs(rng, 6)
    return _maxdiff(ssd.ssd_recurrence(x, A, B, C), _unrolled(x, A, B, C))


def check_duality(ctx):
    """Quadratic dual and chunked scan (every requested chunk) vs the recurrence."""
    rng = ctx.rng(7)
    worst = 0.0
    for _ in range(10):
        T = int(rng.integers(1, ctx.length + 1))
        x, A, B, C = _ssd_inputs(rng, T, P=int(rng.integers(1, 9)), N=int(rng.integers(1, 17)))
        ref = ssd.ssd_recurrence(x, A, B, C)
        worst = max(worst, _maxdiff(ssd.ssd_dual_quadratic(x, A, B, C), ref))
        for q in (*ctx.chunks, T):
            worst = max(worst, _maxdiff(ssd.ssd_chunked_scan(x, A, B, C, q), ref))
    return worst


def check_chunked(ctx):
    rng = ctx.rng(8)
    T = ctx.length
    x, A, B, C = _ssd_inputs(rng, T)
    ref = ssd.ssd_recurrence(x, A, B, C)
    return max(_maxdiff(ssd.ssd_chunked_scan(x, A, B, C, q), ref)
               for q in (*ctx.chunks, max(T, 1)))


def check_ssd_causality(ctx):
    rng = ctx.rng(9)
    x, A, B, C = _ssd_inputs(rng, 20)
    base = ssd.ssd_chunked_scan(x, A, B, C, 8)
    for arr in (x, B, C):
        arr[:, 12:] += rng.standard_normal(arr[:, 12:].shape)
    return _maxdiff(ssd.ssd_chunked_scan(x, A, B, C, 8)[:, :12], base[:, :12])


def check_decay(ctx):
    rng = ctx.rng(10)
    T = 16
    A = rng.uniform(0.1, 1.0, (1, T))
    x = np.zeros((1, T, 1))
    x[0, 0, 0] = 1.0
    ones = np.ones((1, T, 1))
    y = ssd.ssd_recurrence(x, A, ones, ones)[0, :, 0]
    expect = np.array([np.prod(A[0, 1:t + 1]) for t in range(T)]) * y[0]
    return _maxdiff(y, expect) + float(np.any(np.diff(np.abs(y)) > 0))


def check_block_grads(ctx):
    rng = ctx.rng(11)
    worst = 0.0
    for cfg in (ssd.SsdBlockConfig(depth=1, heads=2, state_dim=2, conv_kernel=2, chunk=2),
                ssd.SsdBlockConfig(depth=1, heads=1, state_dim=3, conv_kernel=3, gate=False,
                                   use_layernorm=True, use_residual_wrapping=True, chunk=4)):
        p = ssd.init_block_params(4, cfg, rng)
        p = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in p.items()}
        S = rng.uniform(-2, 2, (5, 4))
        proj = rng.standard_normal((5, 4))

        def loss():
            return float(np.sum(ssd.ssd_block_forward(S, p, cfg)[0] * proj))

        out, tape = ssd.ssd_block_forward(S, p, cfg)
        dS, grads = ssd.ssd_block_backward(tape, proj)
        worst = max(worst, _fd_rel_error(loss, S, dS))
        for k in p:
            worst = max(worst, _fd_rel_error(loss, p[k], grads[k]))
    return worst


# -- seq_transform --------------------------------------------------------------------

def check_squaring(ctx):
    bad = 0
    for n in range(1, 2001):
        L = math.ceil(math.sqrt(n)) ** 2
        idx = st.square_index(n)
        M = L - n
        bad += (idx.size != L or not np.array_equal(idx[n:], np.arange(M))
                or not np.array_equal(idx[:n], np.arange(n)) or not L - n < 2 * math.sqrt(n) + 1)
    return float(bad)


def check_orderings(ctx):
    """Involutions, multiset equality and inverse round trips (bit-exact)."""
    rng = ctx.rng(12)
    bad = 0
    kinds = [st.ORIGINAL, st.FLIPPED, st.TRANSPOSED, st.Ordering("random", seed=7),
             st.Ordering("stride", stride=10)]
    for n in (1, 2, 3, 4, 5, 46, 97, 2587):
        sq = st.square(rng.standard_normal((n, 3)))
        for k in kinds:
            r = st.reorder(sq, k)
            bad += not np.array_equal(st.inverse_reorder(r, k), sq.data)
            bad += not np.array_equal(np.sort(r, axis=0), np.sort(sq.data, axis=0))
        for k in (st.FLIPPED, st.TRANSPOSED):
            bad += not np.array_equal(st.reorder(st.reorder(sq, k), k), sq.data)
    return float(bad)


# -- mil_model ---------------------------------------------------------------------------

def check_model_grads(ctx):
    return gradient_check(TINY_CONFIG, tolerance=1e-5, seed=ctx.seed).max_error


def check_attention(ctx):
    rng = ctx.rng(13)
    cfg = TINY_CONFIG
    params = mdl.init_params(cfg, ctx.seed)
    worst = 0.0
    for n in (1, 3, 10):
        a = mdl.forward(rng.standard_normal((n, cfg.input_dim)), params, cfg).attention_weights
        worst = max(worst, abs(float(a.sum()) - 1.0) + float(np.any(a <= 0)))
    return worst


def check_add_symmetry(ctx):
    """A constant bag is a fixed point of every ordering, so three shared
    branches under ``add`` fuse to three times one branch. Branch outputs are
    not constant along the sequence (the scan is causal), so this needs
    realignment off and uniform attention."""
    cfg = mdl.ModelConfig(input_dim=4, reduced_dim=4, aggregation="add", share_branch_params=True,
                          realign=False, ssd=TINY_CONFIG.ssd, selection_hidden=2, mlp_hidden=4)
    one = cfg.replace(branches=("original",))
    params = mdl.init_params(cfg, ctx.seed)
    params["select.W2"][:] = 0.0
    bag = np.tile(ctx.rng(14).standard_normal(4), (7, 1))
    p3 = mdl.forward(bag, params, cfg).pooled
    p1 = mdl.forward(bag, params, one).pooled
    return _maxdiff(p3, 3.0 * p1)


def check_checkpoint(ctx):
    cfg = TINY_CONFIG
    params = mdl.init_params(cfg, ctx.seed)
    blob = mdl.checkpoint_bytes(cfg, params)
    cfg2, p2 = mdl.parse_checkpoint(blob)
    same = cfg2 == cfg and mdl.checkpoint_bytes(cfg2, p2) == blob and all(
        p2[k].tobytes() == params[k].tobytes() for k in params)
    return 0.0 if same else 1.0


# -- training ----------------------------------------------------------------------------

def check_cross_entropy(ctx):
    logits = ctx.rng(15).standard_normal(5)
    _, d = cross_entropy(logits, 2)
    return _fd_rel_error(lambda: cross_entropy(logits, 2)[0], logits, d)


def check_one_step(ctx):
    from .training import train_step

    cfg = TINY_CONFIG
    params = mdl.init_params(cfg, ctx.seed)
    bag = dt.FeatureBag("b", 1, ctx.rng(16).uniform(-2, 2, (5, cfg.input_dim)))
    before = cross_entropy(mdl.forward(bag, params, cfg).logits, 1)[0]
    new, _, _ = train_step(params, {}, 1, bag, cfg, lr=1e-5)
    after = cross_entropy(mdl.forward(bag, new, cfg).logits, 1)[0]
    return 0.0 if after < before else 1.0


# -- data ----------------------------------------------------------------------------------

def check_fbag_roundtrip(ctx):
    bags = dt.generate_synthetic(dt.SyntheticSpec(num_bags=4, dim=5, n_min=2, n_max=6,
                                                  seed=ctx.seed))
    with tempfile.TemporaryDirectory() as tmp:
        m = dt.save_bags(bags, Path(tmp) / "a")
        loaded = dt.load_bags(m)
        m2 = dt.save_bags(loaded, Path(tmp) / "b")
        same = all((Path(tmp) / "a" / "bags" / f"{b.bag_id}.fbag").read_bytes()
                   == (Path(tmp) / "b" / "bags" / f"{b.bag_id}.fbag").read_bytes() for b in bags)
        same &= m.read_bytes() == m2.read_bytes()
    return 0.0 if same else 1.0


def check_synthetic_oracle(ctx):
    spec = dt.SyntheticSpec(num_bags=100, dim=32, seed=ctx.seed)
    return max(0.0, 0.95 - dt.oracle_accuracy(dt.generate_synthetic(spec), spec))


def check_splits(ctx):
    bags = dt.generate_synthetic(dt.SyntheticSpec(num_bags=100, dim=4, n_min=1, n_max=2,
                                                  seed=ctx.seed))
    labels = {b.bag_id: b.label for b in bags}
    bad = 0
    for plan in dt.make_splits(bags, folds=5, seed=ctx.seed):
        parts = [set(plan.train), set(plan.val), set(plan.test)]
        bad += set().union(*parts) != set(labels) or sum(map(len, parts)) != len(labels)
        for c in (0, 1):
            n_c = sum(v == c for v in labels.values())
            for part, frac in zip(parts, (0.8, 0.1, 0.1)):
                bad += abs(sum(labels[i] == c for i in part) - frac * n_c) > 1
    return float(bad)


# -- eval -----------------------------------------------------------------------------------

def _pairwise_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def check_auc(ctx):
    rng = ctx.rng(17)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = (0, 1)
        scores = rng.integers(0, 6, n) / 5.0  # coarse grid forces ties
        worst = max(worst, abs(roc_auc_binary(scores, labels) - _pairwise_auc(scores, labels)))
        worst = max(worst, abs(roc_auc_binary(scores, labels)
                               + roc_auc_binary(scores, 1 - labels) - 1.0))
    return worst


def check_auc_multiclass(ctx):
    rng = ctx.rng(18)
    probas = rng.dirichlet(np.ones(3), 12)
    labels = np.arange(12) % 3
    oracle = np.mean([_pairwise_auc(probas[:, c], (labels == c).astype(int)) for c in range(3)])
    return abs(roc_auc_multiclass(probas, labels) - oracle)


CHECKS = [
    Check("linear", "numerics", check_linear, 1e-12, "linear vs triple loop"),
    Check("conv1d", "numerics", check_conv, 1e-12, "causal conv vs double loop"),
    Check("layer-gradients", "numerics", check_layer_grads, 1e-6, "every backward vs finite differences"),
    Check("softmax", "numerics", check_softmax_sum, 1e-12, "softmax rows sum to one"),
    Check("conv-causality", "numerics", check_conv_causality, None, "conv ignores the future"),
    Check("adam", "numerics", check_adam, 1e-18, "one Adam step vs hand value"),
    Check("recurrence", "ssd_core", check_recurrence, 1e-10, "recurrence vs unrolled double sum"),
    Check("duality", "ssd_core", check_duality, 1e-8, "dual and chunked vs recurrence"),
    Check("chunked", "ssd_core", check_chunked, 1e-10, "chunked scan vs recurrence"),
    Check("ssd-causality", "ssd_core", check_ssd_causality, None, "scan ignores the future"),
    Check("decay", "ssd_core", check_decay, 1e-15, "impulse response is the decay product"),
    Check("block-gradients", "ssd_core", check_block_grads, 1e-5, "block backward vs finite differences"),
    Check("squaring", "seq_transform", check_squaring, None, "squared length and padding rows"),
    Check("orderings", "seq_transform", check_orderings, None, "involutions, permutations, round trips"),
    Check("model-gradients", "mil_model", check_model_grads, 1e-5, "end-to-end gradient check"),
    Check("attention", "mil_model", check_attention, 1e-10, "pooling weights sum to one"),
    Check("add-symmetry", "mil_model", check_add_symmetry, 1e-12, "shared add branches on constant bag"),
    Check("checkpoint", "mil_model", check_checkpoint, None, "checkpoint round trip"),
    Check("cross-entropy", "training", check_cross_entropy, 1e-8, "loss gradient vs finite differences"),
    Check("one-step", "training", check_one_step, None, "one small step lowers the loss"),
    Check("fbag-roundtrip", "data", check_fbag_roundtrip, None, "save/load/save is byte-identical"),
    Check("synthetic-oracle", "data", check_synthetic_oracle, None, "instance-max oracle ACC > 0.95"),
    Check("splits", "data", check_splits, None, "stratified partitions"),
    Check("auc", "eval", check_auc, None, "AUC vs pairwise counting, complement symmetry"),
    Check("auc-multiclass", "eval", check_auc_multiclass, 1e-15, "macro one-vs-rest vs per-class oracle"),
]


def check_names():
    return [c.name for c in CHECKS]


def run_verify(only=None, tolerance=None, length=64, chunks=(1, 3, 8, 17), seed=0) -> VerifyReport:
    """Run the suite (or the ``only`` subset). ``tolerance`` overrides every
    check's own threshold, including the exact ones."""
    known = set(check_names())
    if only:
        unknown = [n for n in only if n not in known]
        if unknown:
            raise ValueError(f"unknown check(s) {unknown}; choose from {sorted(known)}")
    ctx = VerifyContext(length=length, chunks=tuple(chunks), seed=seed)
    report = VerifyReport()
    for c in CHECKS:
        report.checklist.setdefault(c.module, []).append(c.name)
        if only and c.name not in only:
            continue
        tol = c.tolerance if tolerance is None else tolerance
        t0 = time.perf_counter()
        err = None
        try:
            dev = float(c.fn(ctx))
        except Exception as exc:  # a crash is a failure, reported not raised
            dev, err = float("inf"), f"{type(exc).__name__}: {exc}"
        ok = err is None and ((dev == 0.0) if tol is None else (dev < tol))
        report.results.append(CheckResult(c.name, c.module, dev, tol, ok,
                                          time.perf_counter() - t0, err))
    return report
