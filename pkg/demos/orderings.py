"""Squaring a bag and reading it in different orders."""

import numpy as np

from mamba2mil import seq_transform as st

bag = np.arange(7, dtype=float)[:, None]   # 7 instances, one feature each

sq = st.square(bag)
print("N=7 squares to L =", sq.length, "side", sq.side)
print("padded sequence:", sq.data.ravel())   # last two rows repeat the first two

grid = sq.data.reshape(sq.side, sq.side)
print("as a grid:\n", grid)

for o in (st.ORIGINAL, st.FLIPPED, st.TRANSPOSED, st.Ordering("stride", stride=2),
          st.Ordering("random", seed=1)):
    r = st.reorder(sq, o)
    back = st.inverse_reorder(r, o)
    print(f"{str(o):>10}: {r.ravel()}   round trip exact: {np.array_equal(back, sq.data)}")

# transposing twice, or flipping twice, is the identity
t = st.reorder(st.reorder(sq, st.TRANSPOSED), st.TRANSPOSED)
print("transpose twice == original:", np.array_equal(t, sq.data))

# padding cost stays below 2*sqrt(N) + 1
for n in (5, 46, 300, 2587, 10000):
    L = st.squared_length(n)
    print(f"N={n:>5}  L={L:>5}  pad={L - n:>3}  bound={2 * np.sqrt(n) + 1:6.1f}")
