"""PSNR and SSIM on luminance, mask scores, and single-thread timing."""

import numpy as np
import torch

from derain.metrics import mask_metrics, psnr, ssim, time_inference, to_luminance
from derain.network import NetworkConfig
from derain.pipeline import RecurrentDerainer, derain_recurrent

rng = np.random.default_rng(0)
clean = rng.random((64, 64, 3)) * 0.8

# a uniform 0.1 offset has MSE 0.01 on luminance, i.e. 20 dB
print("offset 0.1: %.6f dB" % psnr(clean, clean + 0.1))
print("identical:", psnr(clean, clean), "dB, SSIM", ssim(clean, clean))

noisy = np.clip(clean + rng.normal(0, 0.05, clean.shape), 0, 1)
print("noise 0.05: %.2f dB, SSIM %.4f" % (psnr(noisy, clean), ssim(noisy, clean)))
# inverting the structure drives SSIM negative
y = to_luminance(clean)
print("inverted SSIM: %.4f" % ssim(1 - y, y))

truth = (rng.random((32, 32)) > 0.7).astype(np.uint8)
guess = np.where(rng.random((32, 32)) < 0.9, truth, 1 - truth).astype(float)
print("mask scores:", {k: round(v, 3) for k, v in mask_metrics(guess, truth).items()})

# timing at two image scales, one torch thread
torch.manual_seed(0)
model = RecurrentDerainer(NetworkConfig(), tau=3).eval()
images = [rng.random((80, 80, 3)), rng.random((250, 250, 3))]
for scale, stats in time_inference(lambda img: derain_recurrent(img, model), images,
                                   warmup=1, repeats=3).items():
    print("%-8s median %.3f s  (min %.3f, max %.3f)" % (scale, stats["median"], stats["min"],
                                                       stats["max"]))
