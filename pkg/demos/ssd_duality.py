"""Three ways to evaluate the same scalar-decay state space scan."""

import time

import numpy as np

from mamba2mil.ssd import ssd_chunked_scan, ssd_dual_quadratic, ssd_recurrence

rng = np.random.default_rng(0)
H, T, P, N = 2, 200, 8, 16
x = rng.uniform(-1, 1, (H, T, P))
A = rng.uniform(0.7, 1.0, (H, T))      # per-step decay in (0, 1]
B = rng.uniform(-1, 1, (H, T, N))
C = rng.uniform(-1, 1, (H, T, N))

# the recurrence carries an N x P state forward one step at a time
y_rec = ssd_recurrence(x, A, B, C)

# the dual form materialises the T x T decay-masked Gram matrix instead
y_dual = ssd_dual_quadratic(x, A, B, C)
print("quadratic vs recurrence:", np.abs(y_dual - y_rec).max())

# chunking mixes the two: quadratic inside a chunk, recurrence across chunks
for q in (1, 7, 32, T):
    y = ssd_chunked_scan(x, A, B, C, chunk=q)
    print(f"chunk {q:>3} vs recurrence:", np.abs(y - y_rec).max())

# causality: perturbing step 150 leaves every earlier output alone
x2 = x.copy()
x2[:, 150] += 1.0
d = np.abs(ssd_chunked_scan(x2, A, B, C) - ssd_chunked_scan(x, A, B, C)).max(axis=(0, 2))
print("first affected step:", int(np.argmax(d > 0)))

# cost: the quadratic path grows like T^2, the chunked one like T
for L in (512, 1024, 2048, 4096):
    xs, As, Bs, Cs = (rng.uniform(-1, 1, (1, L, 16)), rng.uniform(0.8, 1, (1, L)),
                      rng.uniform(-1, 1, (1, L, 16)), rng.uniform(-1, 1, (1, L, 16)))
    t0 = time.perf_counter()
    ssd_dual_quadratic(xs, As, Bs, Cs)
    t1 = time.perf_counter()
    ssd_chunked_scan(xs, As, Bs, Cs)
    t2 = time.perf_counter()
    print(f"L={L:>5}  quadratic {1e3 * (t1 - t0):7.1f} ms   chunked {1e3 * (t2 - t1):6.1f} ms")
