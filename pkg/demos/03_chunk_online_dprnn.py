"""Chunking, merging and the chunk-online DPRNN block."""
import numpy as np

from dualsep.dualpath import DprnnBlockParams, chunk_merge, chunk_split, dprnn_block_forward, latency_frames
from dualsep.numcore import Rng

rng = Rng(2)
for K in (150, 100, 50):
    c = chunk_split(np.zeros((K, 1)), 100, 50)
    print(f"K={K}: padded to {c.padded_len}, {c.n_chunks} chunks")

x = rng.normal((137, 16))
print("merge(split(x)) error:", np.abs(chunk_merge(chunk_split(x, 20, 10)).data - x).max())

# Only the inter-chunk module changes between paths.
blk = DprnnBlockParams.init(16, 8, "reorganized", rng)
chunks = chunk_split(x, 20, 10)
y = dprnn_block_forward(blk, chunks, "online").values.data
v = chunks.values.data.copy()
v[6:] += 1.0
chunks.values.data[:] = v
y2 = dprnn_block_forward(blk, chunks, "online").values.data
print("chunks 0..5 after perturbing chunk 6 onward:", np.abs(y[:6] - y2[:6]).max())

print("latency, chunk 100 @ 1 ms:", latency_frames("dprnn", {"chunk": 100, "hop_ms": 1.0}).ms, "ms")
print("latency, 32 ms STFT frames:", latency_frames("stacked_rnn", {"win_ms": 32, "hop_ms": 8}).ms, "ms")
