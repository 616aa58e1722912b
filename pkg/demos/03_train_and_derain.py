"""Training a small deraining network on synthetic light rain."""

import sys

import numpy as np
import torch

from derain.metrics import mask_metrics, psnr
from derain.network import JointDerainNet, NetworkConfig
from derain.pipeline import derain_once
from derain.synthesis import SynthesisConfig, build_dataset, procedural_backgrounds
from derain.training import CropSampler, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 400
torch.manual_seed(0)

backgrounds = procedural_backgrounds(26, shape=(96, 96), seed=1)
train, _ = build_dataset(backgrounds[:20], SynthesisConfig(seed=3), "light")
test, _ = build_dataset(backgrounds[20:], SynthesisConfig(seed=99), "light")

net = JointDerainNet(NetworkConfig())
trainer = Trainer(net, CropSampler(train, crop=64, batch_size=8, seed=0), lr=1e-3)
history = trainer.run(steps)
for rec in history[:: max(1, steps // 8)]:
    print("step %4d  loss %.4f  (streak %.4f, background %.4f, detection %.3f)" % (
        rec["step"], rec["loss"], rec["streak"], rec["background"], rec["detection"]))

print("\n%-4s %9s %9s %9s" % ("id", "rainy dB", "output dB", "mask acc"))
for i, ex in enumerate(test):
    eps, R, S, B = derain_once(ex.O, net)
    print("%-4d %9.2f %9.2f %9.3f" % (i, psnr(ex.O, ex.B), psnr(np.clip(B, 0, 1), ex.B),
                                      mask_metrics(R, ex.R)["accuracy"]))
