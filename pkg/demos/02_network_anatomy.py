"""Inside the joint detection and removal network."""

import numpy as np
import torch

from derain.network import DilatedPath, JointDerainNet, NetworkConfig, forward

cfg = NetworkConfig()
torch.manual_seed(0)
net = JointDerainNet(cfg).eval()
print(net.extractor)
print("parameters:", sum(p.numel() for p in net.parameters()))

# each path is two 3x3 convolutions at one dilation
print("path receptive fields:", cfg.path_receptive_fields())
print("extractor radius:", cfg.extractor_radius())

# confirm the 13x13 field empirically: poke one pixel and see what moves
path = DilatedPath(4, dilation=3).double()
with torch.no_grad():
    for p in path.parameters():
        p.uniform_(0.05, 0.25)
x = torch.rand(1, 4, 31, 31, dtype=torch.float64) + 0.5
y = x.clone()
y[0, :, 15, 15] += 1
with torch.no_grad():
    moved = ((path(y) - path(x)).abs().sum(dim=(0, 1)) > 0).numpy()
rows, cols = np.nonzero(moved)
print("dilation-3 footprint: %dx%d" % (np.ptp(rows) + 1, np.ptp(cols) + 1))
print(moved[9:22, 9:22].astype(int))

# the three heads: mask probability, streak layer, background
O = np.random.default_rng(0).random((64, 64, 3))
out = forward(O, net)
for k, v in out.items():
    print("%-10s %s" % (k, v.shape))
# an untrained background head starts close to O - R * S
print("initial |B - O| mean: %.4f" % np.abs(out["background"] - O).mean())
