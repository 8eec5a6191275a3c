"""
Two-step training on a small pack
=================================

Pretrain each encoder on its own head, then fine-tune the assembled model
with the intermediate-supervision loss and score it on the held-out splits.
Runs in about a minute on one core.
"""

import numpy as np

from laifusion import train as T
from laifusion.dataio import NormStats
from laifusion.lossmetrics import evaluate_split
from laifusion.synthgen import generate_packs

packs = generate_packs(seed=0, tile_size=32, n_train=48, n_eval=8)
stats = NormStats.fit(packs["train"])
cfg = T.with_overrides(T.DESK_CONFIG, epochs=6)
print("model", cfg.model)

enc1, fit1 = T.pretrain_encoder("enc1", packs["train"], cfg, stats=stats)
enc2, fit2 = T.pretrain_encoder("enc2", packs["train"], cfg, stats=stats)
print(f"enc1 last loss {fit1.history[-1]['loss']:.4f}, enc2 last loss {fit2.history[-1]['loss']:.4f}")

full, fit = T.finetune_full(enc1, enc2, packs["train"], cfg, val=packs["non_cloudy"])
first, last = fit.history[0], fit.history[-1]
print("fine-tune terms at start:", {k: round(first[k], 4) for k in ("loss_dec", "loss_enc1", "loss_enc2")})
print("fine-tune terms at end:  ", {k: round(last[k], 4) for k in ("loss_dec", "loss_enc1", "loss_enc2")})
print("best validation epoch", fit.best_epoch)

for split in T.EVAL_SPLITS:
    for name, ckpt in (("enc1", enc1), ("enc2", enc2), ("full", full)):
        row = evaluate_split(T.predictor(ckpt), packs[split], split, name)
        print(f"{split:<13} {name:<5} rmse {row.rmse:.4f}  r2 {row.r2:+.3f}")

# Checkpoints are a directory of manifest.json + params.bin.
path = T.save_checkpoint(full, "/tmp/laifusion_demo_full")
again = T.load_checkpoint(path)
same = all(np.array_equal(again.params[k].data, p.data) for k, p in full.params.items())
print("reloaded checkpoint identical:", same)
