"""Acceptance criteria, one test each. A PASS/FAIL line per test is printed in
the terminal summary under "acceptance"."""

import csv
import itertools
import json
import math
import re
import time

import numpy as np
import pytest

from mamba2mil import seq_transform as st
from mamba2mil.bench import run_bench
from mamba2mil.cli import main
from mamba2mil.metrics import roc_auc_binary, roc_auc_multiclass
from mamba2mil.ssd import ssd_chunked_scan, ssd_dual_quadratic, ssd_recurrence
from mamba2mil.training import gradient_check


@pytest.fixture
def detail(record_property):
    def note(text):
        record_property("detail", text)
    return note


def test_duality_oracle(detail):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        T, N, P, H = rng.integers(1, 129), rng.integers(1, 65), rng.integers(1, 17), rng.integers(1, 3)
        x = rng.uniform(-1, 1, (H, T, P))
        A = rng.uniform(0.0, 1.0, (H, T))
        B, C = rng.uniform(-1, 1, (2, H, T, N))
        ref = ssd_recurrence(x, A, B, C)
        outs = [ssd_dual_quadratic(x, A, B, C)] + [ssd_chunked_scan(x, A, B, C, q) for q in (1, 3, 8, T)]
        worst = max(worst, *(float(np.max(np.abs(y - ref))) for y in outs))
    elapsed = time.perf_counter() - t0
    detail(f"200 instances, max |dev| {worst:.2e}, {elapsed:.1f} s")
    assert worst < 1e-8
    assert elapsed < 30


def test_gradient_fidelity(detail):
    t0 = time.perf_counter()
    report = gradient_check(tolerance=1e-5)
    elapsed = time.perf_counter() - t0
    detail(f"{len(report.errors)} tensors, max rel error {report.max_error:.2e}, {elapsed:.1f} s")
    assert report.passed and report.max_error < 1e-5
    assert elapsed < 60


def test_transform_algebra(detail):
    rng = np.random.default_rng(7)
    sizes = [1, 2, 3, 4, 5, 46, 2587] + rng.integers(1, 3000, 993).tolist()
    orderings = [st.ORIGINAL, st.FLIPPED, st.TRANSPOSED, st.Ordering("stride", stride=10)]
    for i, n in enumerate(sizes):
        sq = st.square(rng.standard_normal((n, 3)))
        ref = sq.data.tobytes()
        for o in (st.FLIPPED, st.TRANSPOSED):
            assert st.reorder(st.reorder(sq, o), o).tobytes() == ref, (n, o)
        for o in orderings + [st.Ordering("random", seed=i)]:
            r = st.reorder(sq, o)
            assert np.sort(r, axis=0).tobytes() == np.sort(sq.data, axis=0).tobytes(), (n, o)
            assert st.inverse_reorder(r, o).tobytes() == ref, (n, o)
    detail(f"{len(sizes)} sequences, 5 orderings each, bit-exact")


def test_squaring_arithmetic(detail):
    t0 = time.perf_counter()
    for n in range(1, 10001):
        L = math.ceil(math.sqrt(n)) ** 2
        assert st.squared_length(n) == L
        sq = st.square(np.arange(n, dtype=np.float64)[:, None])
        assert sq.length == L and sq.pad_len == L - n
        assert np.array_equal(sq.data[:n, 0], np.arange(n))
        assert np.array_equal(sq.data[n:, 0], np.arange(L - n))
    elapsed = time.perf_counter() - t0
    detail(f"N = 1..10000 exhaustive, {elapsed:.2f} s")
    assert elapsed < 5


@pytest.mark.slow
def test_learnability(detail, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--bags", "200", "--dim", "64", "--rate", "0.05",
                 "--noise", "0.1", "--seed", "0"]) == 0
    desk = ["--reduced-dim", "32", "--heads", "2", "--state", "16", "--epochs", "5", "--patience", "3",
            "--folds", "5", "--seed", "0"]
    aucs = {}
    for name, branches in (("three", "original+flipped+transposed"), ("single", "original")):
        out = tmp_path / name
        assert main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(out),
                     "--branches", branches, *desk]) == 0
        rows = {r["fold"]: r for r in csv.DictReader(open(out / "report.csv"))}
        aucs[name] = float(rows["mean"]["test_auc"])
    elapsed = time.perf_counter() - t0
    detail(f"three-branch AUC {aucs['three']:.4f}, single {aucs['single']:.4f}, {elapsed:.0f} s")
    assert aucs["three"] >= 0.95
    assert aucs["three"] >= aucs["single"] - 0.02
    assert elapsed < 15 * 60


def test_ablation_harness(detail, tmp_path):
    data = tmp_path / "data"
    main(["gen-data", "--out", str(data), "--bags", "30", "--dim", "8", "--n-min", "4", "--n-max", "20",
          "--rate", "0.2", "--seed", "2"])
    out = tmp_path / "ablation.csv"
    assert main(["ablate", "--manifest", str(data / "manifest.csv"), "--out", str(out), "--preset", "full",
                 "--reduced-dim", "8", "--heads", "2", "--epochs", "1", "--folds", "2",
                 "--selection-hidden", "2", "--mlp-hidden", "8"]) == 0
    rows = list(csv.DictReader(open(out)))
    groups = [r["group"] for r in rows]
    comps = [r for r in rows if r["group"] == "components"]
    assert len(comps) == 9
    assert {(r["block"], r["branches"], r["aggregation"]) for r in comps} == {
        ("mamba2", "original+flipped+transposed", "concatenate"), ("mamba2", "original+flipped+transposed", "add"),
        ("mamba", "original+flipped+transposed", "concatenate"), ("mamba2", "original+flipped", "concatenate"),
        ("mamba2", "original+transposed", "concatenate"), ("mamba2", "flipped+transposed", "concatenate"),
        ("mamba2", "original", "-"), ("mamba2", "flipped", "-"), ("mamba2", "transposed", "-")}
    assert sorted(r["depth"] for r in rows if r["group"] == "depth") == ["1", "2", "3"]
    assert {r["state"] for r in rows if r["variant"].startswith("state=")} == {"64", "128"}
    assert any(r["layernorm"] == "on" for r in rows) and any(r["wrapping"] == "on" for r in rows)
    orderings = [r["branches"].split("+")[-1] for r in rows if r["group"] == "ordering"]
    assert orderings == ["transposed", "stride:10", "random:0"]
    cell = r"^\d\.\d{4}±\d\.\d{4}$"
    for r in rows:
        for m in ("test_auc", "test_acc", "val_auc", "val_acc"):
            assert re.match(cell, r[m]), (r["variant"], m, r[m])
    assert json.loads(out.with_suffix(".run.json").read_text())["command"] == "ablate"
    detail(f"{len(rows)} rows in {len(set(groups))} groups, all cells mean±std")


def pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_metric_oracles(detail):
    rng = np.random.default_rng(11)
    done = ties = 0
    while done < 1000:
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        levels = int(rng.integers(2, 8)) if done % 2 else 0
        scores = rng.integers(0, levels, n) / levels if levels else rng.standard_normal(n)
        ties += len(np.unique(scores)) < n
        assert roc_auc_binary(scores, labels) == pairwise_auc(scores, labels)
        done += 1
    for C in (3, 4, 7):
        n = 40
        labels = np.r_[np.arange(C), rng.integers(0, C, n - C)]
        probs = rng.dirichlet(np.ones(C), n)
        oracle = np.mean([pairwise_auc(probs[:, c], (labels == c).astype(int)) for c in range(C)])
        assert abs(roc_auc_multiclass(probs, labels) - oracle) < 1e-15
    detail(f"1000 binary sets ({ties} with ties) exact, multiclass C=3,4,7")
    assert ties >= 400


def test_scaling(detail):
    result = run_bench(lengths=(256, 512, 1024, 2048, 4096, 8192), repeats=3)
    q, c = result.exponents["quadratic"], result.exponents["chunked"]
    detail(f"quadratic exponent {q:.2f}, chunked {c:.2f}, max |dev| {max(result.max_deviation):.1e}")
    assert q >= 1.8
    assert c <= 1.2


def test_determinism(detail, tmp_path):
    data = tmp_path / "data"
    main(["gen-data", "--out", str(data), "--bags", "30", "--dim", "6", "--n-min", "3", "--n-max", "15",
          "--rate", "0.2", "--seed", "5"])
    flags = ["--reduced-dim", "8", "--heads", "2", "--state", "4", "--epochs", "3", "--folds", "3",
             "--seed", "9", "--selection-hidden", "4", "--mlp-hidden", "8"]
    for run in ("a", "b"):
        assert main(["train", "--manifest", str(data / "manifest.csv"), "--out", str(tmp_path / run), *flags]) == 0
    files = [f"fold_{k}/{name}" for k in range(3) for name in ("checkpoint.m2mil", "trainlog.csv")]
    files += ["report.csv", "report.txt"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    detail(f"{len(files)} files byte-identical across two runs")
