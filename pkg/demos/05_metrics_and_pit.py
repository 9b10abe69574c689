"""Why training uses negative SNR while reports use SI-SDR."""
import numpy as np

from dualsep.metrics import score_utterance, sdr, si_sdr
from dualsep.numcore import Rng
from dualsep.training import neg_snr_loss, pit_loss

rng = Rng(3)
ref = rng.normal(8000)
est = ref + 0.3 * rng.normal(8000)
for a in (0.1, 1.0, 10.0):
    print(f"scale {a:5}: SI-SDR {si_sdr(a * est, ref):6.2f} dB  SNR-SDR {sdr(a * est, ref):7.2f} dB  "
          f"loss {neg_snr_loss(a * est, ref).item():7.2f}")

refs = rng.normal((2, 8000))
ests = refs[::-1] + 0.2 * rng.normal((2, 8000))
loss, perm = pit_loss(ests, refs)
print("PIT picks", perm, "loss", round(loss.item(), 2))

mix = refs.sum(axis=0)
s = score_utterance(np.stack([mix, mix]), refs, mix)
print("mixture as estimate: SI-SDRi", s.si_sdri)
