"""One block, two paths.

A Bi-LSTM block split into an online path and an offline path that share
parameters. Run with: python3 demos/01_dual_path_blocks.py
"""
import numpy as np

from dualsep.dualpath import DualBlockParams, dual_block_forward
from dualsep.numcore import Rng

rng = Rng(0)
N, H, K = 6, 4, 12
x = rng.normal((K, N))

# The standard block only has the offline (bidirectional) route.
std = DualBlockParams.init(N, H, "standard", rng)
print("standard params:", std.n_parameters())

# Decomposition adds one FC for the forward-only output.
dec = DualBlockParams("decomposed", std.rnn1, std.rnn2, std.fc_offline, std.norm,
                      fc_online=DualBlockParams.init(N, H, "decomposed", rng).fc_online)
print("decomposed params:", dec.n_parameters(), "(extra:", dec.n_parameters() - std.n_parameters(), ")")

# Reorganization reuses everything: rnn2 simply reads the sequence forwards.
reo = DualBlockParams("reorganized", std.rnn1, std.rnn2, std.fc_offline, std.norm)
print("reorganized params:", reo.n_parameters())

y_std = dual_block_forward(std, x, "offline").data
for name, blk in (("decomposed", dec), ("reorganized", reo)):
    y_off = dual_block_forward(blk, x, "offline").data
    print(f"{name:12s} offline == standard:", np.array_equal(y_off, y_std))

# Online outputs ignore the future. Scramble the last 4 frames and compare.
x2 = x.copy()
x2[8:] = rng.normal((4, N))
for name, blk in (("decomposed", dec), ("reorganized", reo)):
    a = dual_block_forward(blk, x, "online").data
    b = dual_block_forward(blk, x2, "online").data
    print(f"{name:12s} online, past frames changed by {np.abs(a[:8] - b[:8]).max():.1e}, "
          f"future frames by {np.abs(a[8:] - b[8:]).max():.2f}")
