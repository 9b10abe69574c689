"""Pretrain offline, then adapt the online path two ways.

Tiny models on four one-second synthetic mixtures; takes about twenty seconds.
"""
from dualsep.datagen import MixtureConfig, generate_split
from dualsep.metrics import evaluate
from dualsep.models import FdModelConfig, build_model, init_from_offline
from dualsep.training import TrainConfig, train_loop

items = generate_split(MixtureConfig(duration_s=1.0), 4, 0, "train")

offline = build_model("fd", FdModelConfig.desk("standard"), seed=0)
ckpt, _ = train_loop(offline, items, items, TrainConfig(max_epochs=60, early_stop_patience=100))
print(f"offline pretrained: SI-SDRi {evaluate(ckpt.to_model(), items, 'offline').mean_si_sdri:.2f} dB")

# strategy 1: copy the Bi-LSTM weights, finetune the online path
for scheme in ("decomposed", "reorganized"):
    model = init_from_offline(ckpt, scheme, seed=1)
    before = evaluate(model, items, "online").mean_si_sdri
    train_loop(model, items, items, TrainConfig(max_epochs=20, strategy="init_from_offline", early_stop_patience=100))
    after = evaluate(model, items, "online").mean_si_sdri
    print(f"init + {scheme:11s} online SI-SDRi {before:6.2f} -> {after:6.2f} dB")

# strategy 2: train both paths at once
model = build_model("fd", FdModelConfig.desk("reorganized"), seed=0)
_, hist = train_loop(model, items, items, TrainConfig(max_epochs=40, strategy="multitask", early_stop_patience=100))
last = hist.records[-1]
print(f"multitask: offline loss {last['train_loss_offline']:.2f}, online loss {last['train_loss_online']:.2f}")
for path in ("offline", "online"):
    print(f"  {path:7s} SI-SDRi {evaluate(model, items, path).mean_si_sdri:.2f} dB")
