"""Recurrent deraining, then the derain-dehaze-derain sequence on heavy rain.

Pass checkpoints from ``derain train`` to use trained networks:

    python 04_recurrence_and_ordering.py runs/derain/last.pt runs/dehaze/last.pt

Without arguments two small networks are trained for a few hundred steps.
"""

import sys

import numpy as np
import torch

from derain.checkpoint import load_checkpoint
from derain.metrics import psnr
from derain.network import NetworkConfig
from derain.pipeline import (DehazeNet, PipelineConfig, RecurrentDerainer, derain_recurrent,
                             run_sequence)
from derain.synthesis import SynthesisConfig, build_dataset, procedural_backgrounds
from derain.training import CropSampler, Trainer

heavy = dict(num_directions=5, density=1.5)
bgs = procedural_backgrounds(40, shape=(96, 96), seed=5)

if len(sys.argv) > 2:
    derain_net, _ = load_checkpoint(sys.argv[1])
    dehaze_net, _ = load_checkpoint(sys.argv[2])
else:
    torch.manual_seed(0)
    rain, _ = build_dataset(bgs[:12], SynthesisConfig(seed=11, heavy_haze=False, **heavy), "heavy")
    veiled, _ = build_dataset(bgs[12:24], SynthesisConfig(seed=12, **heavy), "heavy")
    haze, _ = build_dataset(bgs[:24], SynthesisConfig(seed=13, alpha_range=(0.6, 1.0)), "haze")
    derain_net = RecurrentDerainer(NetworkConfig(), tau=3)
    Trainer(derain_net, CropSampler(rain + veiled, seed=0)).run(300)
    dehaze_net = DehazeNet(NetworkConfig())
    Trainer(dehaze_net, CropSampler(haze, seed=0, target="dehaze")).run(300)

# each recurrence removes a residue; the residues telescope back to the input
test, _ = build_dataset(bgs[30:36], SynthesisConfig(seed=21, heavy_haze=False, **heavy), "heavy")
ex = test[0]
B, trace = derain_recurrent(ex.O, derain_net, 3)
print("residue norms per recurrence:", [round(float(np.linalg.norm(s["eps"])), 2) for s in trace.steps])
print("|B_3 - (O_0 - sum eps)| =", np.abs(B - (ex.O - trace.total_residue())).max())
by_iter = np.mean([derain_recurrent(e.O, derain_net, 3)[1].psnr_by_iteration(e.B) for e in test], axis=0)
print("PSNR input, B_1, B_2, B_3:", np.round(by_iter, 2))

# stage orderings on heavy rain with an atmospheric veil
hazy, _ = build_dataset(bgs[36:40], SynthesisConfig(seed=22, **heavy), "heavy")
models = {"derain": derain_net, "dehaze": dehaze_net}
print("\n%-26s %8s" % ("sequence", "PSNR dB"))
print("%-26s %8.2f" % ("(input)", np.mean([psnr(e.O, e.B) for e in hazy])))
for seq in [("derain",), ("dehaze", "derain"), ("derain", "dehaze"), ("derain", "dehaze", "derain")]:
    cfg = PipelineConfig(tau=3, stage_sequence=seq)
    score = np.mean([psnr(np.clip(run_sequence(e.O, cfg, models)[0], 0, 1), e.B) for e in hazy])
    print("%-26s %8.2f" % ("-".join(seq), score))
