"""Global vs cumulative layer normalization, and a streaming version."""
import numpy as np

from dualsep.layers import NormParams, StreamingCLN, cln_forward, gln_forward
from dualsep.numcore import Rng

f = np.array([[1.0, 3.0], [5.0, 7.0]])
p = NormParams.init(2)
print("gLN:\n", gln_forward(p, f).data.round(4))
print("cLN:\n", cln_forward(p, f).data.round(4))
# the first cLN frame only knows about itself: mean 2, var 1

rng = Rng(1)
x = rng.normal((50, 8)) * 3 + 1
c, g = cln_forward(p := NormParams.init(8), x).data, gln_forward(p, x).data
print("last frame cLN vs gLN:", np.abs(c[-1] - g[-1]).max())

stream = StreamingCLN(p)
frames = np.stack([stream.step(frame) for frame in x])
print("streaming vs batch cLN:", np.abs(frames - c).max())
