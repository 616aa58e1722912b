"""Rendering rain: one background under light rain, heavy rain and haze."""

import sys
from pathlib import Path

import numpy as np

from derain.imio import write_png
from derain.synthesis import (SynthesisConfig, build_dataset, procedural_backgrounds,
                              replay_manifest)

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthesis")
out.mkdir(parents=True, exist_ok=True)

backgrounds = procedural_backgrounds(3, shape=(128, 128), seed=0)

# light rain: one streak direction, O = B + S * R
light, manifest = build_dataset(backgrounds, SynthesisConfig(seed=1), "light")
ex = light[0]
print("light rain")
print("  direction %.1f deg, %d streaks" % (ex.params["directions"][0], ex.params["streak_counts"][0]))
print("  mask covers %.1f%% of pixels" % (100 * ex.R.mean()))
print("  max |O - clip(B + S*R)| =", np.abs(ex.O - np.clip(ex.B + (ex.S * ex.R)[..., None], 0, 1)).max())

# heavy rain: five overlapping directions under an atmospheric veil
heavy_cfg = SynthesisConfig(seed=2, num_directions=5, density=1.5)
heavy, _ = build_dataset(backgrounds, heavy_cfg, "heavy")
hx = heavy[0]
print("heavy rain")
print("  directions", [round(d, 1) for d in hx.params["directions"]])
print("  alpha %.3f, airlight %.3f" % (hx.params["alpha"], hx.params["airlight"][0]))
print("  mask covers %.1f%% of pixels" % (100 * hx.R.mean()))

# haze alone, the training data for the dehazing stage
haze, _ = build_dataset(backgrounds, SynthesisConfig(seed=3), "haze")

for name, e in [("light", ex), ("heavy", hx), ("haze", haze[0])]:
    write_png(out / f"{name}_O.png", e.O, 8)
    write_png(out / f"{name}_S.png", np.clip(e.S, 0, 1), 8)
    write_png(out / f"{name}_R.png", e.R.astype(float), 8)
write_png(out / "background.png", ex.B, 8)

# the manifest is enough to rebuild the dataset bit for bit
again, _ = replay_manifest(manifest, backgrounds)
print("replay identical:", all(np.array_equal(a.O, b.O) for a, b in zip(light, again)))
print("images written to", out)
