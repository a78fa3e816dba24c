"""Generate a small dataset, train both stages, then score and save one mask.

Runs in under a minute on one core:

    python3 demos/quickstart.py /tmp/smamba-quickstart
"""
import sys
from pathlib import Path

import numpy as np

from smamba.config import GenSpec, ModelConfig, TrainConfig
from smamba.data import gen_synthetic, save_dataset
from smamba.metrics import evaluate_dataset
from smamba.pnm import save_pgm, to_uint8
from smamba.train import Trainer, build_model, predict

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart-out")
train = gen_synthetic(GenSpec(n=64, size=32), 0)
test = gen_synthetic(GenSpec(n=12, size=32, split="test-seen"), 0)
save_dataset(train, out / "train")

model_cfg = ModelConfig(c0=4, dim=16, depth=2, heads=2, adapter_rank=4, mamba_state=4)
train_cfg = TrainConfig(lr=2e-3, epochs_stage1=8, epochs_stage2=10, batch=4)
model = build_model(model_cfg, train_cfg)
trainer = Trainer(model, train, train_cfg)


def show(t):
    stage = t.history[-1].stage
    means = t.epoch_means(stage)
    print(f"stage {stage} epoch {len(means)}: mean loss {means[-1]:.4f}")


trainer.run(on_epoch=show)

images = np.stack([p.image for p in test])
for which in ("pseudo", "decoder"):
    probs = predict(model, images, which)
    report = evaluate_dataset([(p.id, pr, p.mask) for p, pr in zip(test, probs)], f"seen/{which}")
    print(report.to_text())

save_pgm(out / "first_prediction.pgm", to_uint8(predict(model, images[:1], "decoder")[0]))
print(f"wrote {out}")
