"""Paired rain data from explicit image-formation models.

Three forward models are provided:

* light rain: ``O = B + S * R``
* heavy rain with accumulation: ``O = a * (B + sum_t S_t * R) + (1 - a) * A``
* haze only: ``O = a * B + (1 - a) * A``

where ``S`` is an additive streak layer, ``R`` the binary mask obtained by
thresholding the streaks, ``a`` the scene transmission and ``A`` the global
atmospheric light. Every composite is clipped to [0, 1].

Streaks are straight segments with a Gaussian cross-section. All sampling
goes through a ``numpy.random.Generator`` seeded from ``(seed, example_index)``
so a dataset can be regenerated exactly from its manifest.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imio import read_png, write_png

MODES = ("light", "heavy", "haze")
MANIFEST_VERSION = 1
MAX_SIDE = 4096


class ConfigError(ValueError):
    """Invalid synthesis configuration or shape."""


class HazeError(ValueError):
    """Transmission or atmospheric light outside [0, 1]."""


class DatasetError(OSError):
    """Dataset could not be read, written or replayed."""


def _check_range(name, rng_pair, lo=None):
    a, b = rng_pair
    if not (math.isfinite(a) and math.isfinite(b)) or a > b:
        raise ConfigError(f"{name} must be a nonempty range, got {rng_pair}")
    if lo is not None and a < lo:
        raise ConfigError(f"{name} must be >= {lo}, got {rng_pair}")


@dataclass
class SynthesisConfig:
    """Parameters of the streak sampler and of the haze sampler.

    ``density`` is in streaks per thousand pixels. ``directions`` pins the
    base angle of each streak family (degrees, 90 is vertical); when it is
    ``None`` base angles are drawn from ``direction_range``.
    """

    num_directions: int = 1
    overlap_count: int = 5
    directions: tuple | None = None
    direction_range: tuple = (50.0, 130.0)
    direction_jitter: float = 4.0
    density: float = 4.0
    length_range: tuple = (10.0, 30.0)
    width_range: tuple = (1.0, 2.0)
    intensity_range: tuple = (0.2, 0.6)
    mask_threshold: float = 0.05
    heavy_haze: bool = True
    alpha_range: tuple = (0.6, 0.95)
    airlight_range: tuple = (0.7, 1.0)
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("directions", "direction_range", "length_range", "width_range",
                     "intensity_range", "alpha_range", "airlight_range"):
            value = getattr(self, name)
            if value is not None:
                setattr(self, name, tuple(float(v) for v in value))
        self.validate()

    def validate(self):
        if self.num_directions < 1:
            raise ConfigError("num_directions must be >= 1")
        if self.overlap_count < 1:
            raise ConfigError("overlap_count must be >= 1")
        if self.num_directions > self.overlap_count:
            raise ConfigError(
                f"num_directions={self.num_directions} exceeds overlap_count={self.overlap_count}")
        if self.directions is not None and len(self.directions) < self.num_directions:
            raise ConfigError("fewer fixed directions than num_directions")
        _check_range("direction_range", self.direction_range)
        _check_range("length_range", self.length_range, lo=0.0)
        _check_range("width_range", self.width_range, lo=1e-3)
        _check_range("intensity_range", self.intensity_range, lo=0.0)
        _check_range("alpha_range", self.alpha_range, lo=0.0)
        _check_range("airlight_range", self.airlight_range, lo=0.0)
        if self.alpha_range[1] > 1.0 or self.airlight_range[1] > 1.0:
            raise ConfigError("haze ranges must lie in [0, 1]")
        if self.direction_jitter < 0 or self.density < 0:
            raise ConfigError("direction_jitter and density must be >= 0")
        if not self.mask_threshold > 0:
            raise ConfigError("mask_threshold must be > 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthesis fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HazeParams:
    """Scene transmission (scalar or H x W) and per-channel atmospheric light."""

    transmission: float | np.ndarray
    atmospheric_light: float | tuple = 1.0

    def validate(self):
        a = np.asarray(self.transmission, dtype=np.float64)
        A = np.asarray(self.atmospheric_light, dtype=np.float64)
        if not (np.all(np.isfinite(a)) and np.all((a >= 0) & (a <= 1))):
            raise HazeError("transmission must lie in [0, 1]")
        if not (np.all(np.isfinite(A)) and np.all((A >= 0) & (A <= 1))):
            raise HazeError("atmospheric light must lie in [0, 1]")
        return a, A

    def to_dict(self):
        a = np.asarray(self.transmission)
        if a.ndim:
            raise DatasetError("only scalar transmission can be recorded in a manifest")
        return {"alpha": float(a), "airlight": np.atleast_1d(self.atmospheric_light).tolist()}


@dataclass
class StreakLayer:
    """Additive intensities of one streak family plus the geometry drawn for it.

    ``streaks`` has one row per streak: ``x, y, angle, length, width, intensity``
    (centre in pixel coordinates, x along columns, y down the rows).
    """

    data: np.ndarray
    direction: float
    direction_jitter: float
    length_range: tuple
    width_range: tuple
    density: float
    streaks: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))


@dataclass
class RainExample:
    O: np.ndarray
    B: np.ndarray
    S: np.ndarray
    R: np.ndarray
    haze: HazeParams | None = None
    params: dict = field(default_factory=dict)


def _layer_data(x):
    return np.asarray(x.data if isinstance(x, StreakLayer) else x, dtype=np.float64)


def _check_shape(shape):
    if len(shape) != 2:
        raise ConfigError(f"shape must be (H, W), got {shape}")
    h, w = shape
    if not (1 <= h <= MAX_SIDE and 1 <= w <= MAX_SIDE):
        raise ConfigError(f"shape {shape} outside supported bounds")


def streak_count(density, shape):
    """Number of streaks for ``density`` per kilopixel, rounded half up."""
    return int(math.floor(density * shape[0] * shape[1] / 1000.0 + 0.5))


def _splat_segment(out, x, y, angle, length, width, intensity):
    # Gaussian cross-section with sigma = width / 2, truncated at distance = width.
    h, w = out.shape
    theta = math.radians(angle)
    dx, dy = math.cos(theta), math.sin(theta)
    half = 0.5 * length
    x0, y0 = x - half * dx, y - half * dy
    x1, y1 = x + half * dx, y + half * dy
    c0 = max(int(math.floor(min(x0, x1) - width)), 0)
    c1 = min(int(math.ceil(max(x0, x1) + width)), w - 1)
    r0 = max(int(math.floor(min(y0, y1) - width)), 0)
    r1 = min(int(math.ceil(max(y0, y1) + width)), h - 1)
    if c0 > c1 or r0 > r1:
        return
    cols = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    rows = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    px, py = cols - x0, rows - y0
    t = np.clip(px * dx + py * dy, 0.0, length)
    d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
    sigma = 0.5 * width
    val = intensity * np.exp(-d2 / (2.0 * sigma * sigma))
    val[d2 > width * width] = 0.0
    out[r0:r1 + 1, c0:c1 + 1] += val


def render_streak_layer(cfg, direction_index, shape, rng, direction=None):
    """Draw one family of nearly parallel streaks.

    The base angle is ``direction`` if given, else ``cfg.directions[direction_index]``,
    else a draw from ``cfg.direction_range``. Each streak consumes exactly six
    uniforms from ``rng``, so raising the density only appends streaks.
    """
    _check_shape(shape)
    if not 0 <= direction_index < cfg.num_directions:
        raise ConfigError(f"direction_index {direction_index} not in [0, {cfg.num_directions})")
    if direction is None:
        if cfg.directions is not None:
            direction = cfg.directions[direction_index]
        else:
            lo, hi = cfg.direction_range
            direction = lo + rng.random() * (hi - lo)
    direction = float(direction)

    h, w = shape
    n = streak_count(cfg.density, shape)
    data = np.zeros(shape, dtype=np.float64)
    streaks = np.empty((n, 6))
    (l0, l1), (w0, w1), (i0, i1) = cfg.length_range, cfg.width_range, cfg.intensity_range
    for k in range(n):
        u = rng.random(6)
        row = (u[0] * w, u[1] * h,
               direction + (2.0 * u[2] - 1.0) * cfg.direction_jitter,
               l0 + u[3] * (l1 - l0), w0 + u[4] * (w1 - w0), i0 + u[5] * (i1 - i0))
        streaks[k] = row
        _splat_segment(data, *row)
    return StreakLayer(data, direction, cfg.direction_jitter, cfg.length_range,
                       cfg.width_range, cfg.density, streaks)


def derive_mask(streaks, threshold):
    """Binary mask where the summed streak intensity exceeds ``threshold``."""
    if not threshold > 0:
        raise ConfigError("threshold must be > 0")
    layers = [_layer_data(s) for s in streaks]
    if not layers:
        raise ConfigError("need at least one streak layer")
    shape = layers[0].shape
    total = np.zeros(shape)
    for layer in layers:
        if layer.shape != shape:
            raise ConfigError(f"streak layer shape {layer.shape} != {shape}")
        total += layer
    return (total > threshold).astype(np.uint8)


def _broadcast(B, *maps):
    """Lift H x W maps to B's channel layout and check spatial agreement."""
    B = np.asarray(B, dtype=np.float64)
    out = []
    for m in maps:
        m = np.asarray(m, dtype=np.float64)
        if m.ndim == 0:
            out.append(m)
            continue
        if m.shape[:2] != B.shape[:2]:
            raise ConfigError(f"shape {m.shape} does not match image {B.shape}")
        if B.ndim == 3 and m.ndim == 2:
            m = m[..., None]
        out.append(m)
    return B, out


def _airlight(A, B):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 1 and B.ndim == 3:
        if A.size not in (1, B.shape[2]):
            raise HazeError(f"atmospheric light has {A.size} values for {B.shape[2]} channels")
        return A.reshape(1, 1, -1)
    return A.reshape(()) if A.size == 1 else A


def compose_light_rain(B, S, R):
    """``clip(B + S * R)``."""
    B, (S, R) = _broadcast(B, _layer_data(S), R)
    return np.clip(B + S * R, 0.0, 1.0)


def compose_heavy_rain(B, streaks, R, haze, overlap_bound=None):
    """``clip(a * (B + sum_t S_t * R) + (1 - a) * A)``."""
    if not streaks:
        raise ConfigError("need at least one streak layer")
    if overlap_bound is not None and len(streaks) > overlap_bound:
        raise ConfigError(f"{len(streaks)} streak layers exceed overlap bound {overlap_bound}")
    alpha, A = haze.validate()
    total = sum(_layer_data(s) for s in streaks)
    B, (S, R, alpha) = _broadcast(B, total, R, alpha)
    return np.clip(alpha * (B + S * R) + (1.0 - alpha) * _airlight(A, B), 0.0, 1.0)


def compose_haze_only(B, haze):
    """``clip(a * B + (1 - a) * A)``."""
    alpha, A = haze.validate()
    B, (alpha,) = _broadcast(B, alpha)
    return np.clip(alpha * B + (1.0 - alpha) * _airlight(A, B), 0.0, 1.0)


def procedural_backgrounds(n, shape=(96, 96), seed=0):
    """Deterministic colour textures standing in for natural photographs.

    Each image mixes a smooth colour field, a few flat-shaded discs and
    rectangles with hard edges, and fine-grained texture; values stay in
    roughly [0.05, 0.85] so added streaks are rarely saturated.
    """
    h, w = shape
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i, 0xB6])
        base = np.stack([gaussian_filter(rng.standard_normal((h, w)), 10.0, mode="wrap")
                         for _ in range(3)], axis=-1)
        base = (base - base.min()) / (np.ptp(base) + 1e-12)
        img = 0.15 + 0.5 * base
        rows, cols = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(3, 7))):
            color = rng.uniform(0.05, 0.8, size=3)
            if rng.random() < 0.5:
                cy, cx = rng.uniform(0, h), rng.uniform(0, w)
                rad = rng.uniform(0.08, 0.3) * min(h, w)
                region = (rows - cy) ** 2 + (cols - cx) ** 2 < rad * rad
            else:
                r0, c0 = rng.integers(0, h - 4), rng.integers(0, w - 4)
                r1 = r0 + rng.integers(4, max(5, h // 2))
                c1 = c0 + rng.integers(4, max(5, w // 2))
                region = (rows >= r0) & (rows < r1) & (cols >= c0) & (cols < c1)
            img[region] = 0.6 * color + 0.4 * img[region]
        texture = gaussian_filter(rng.standard_normal((h, w)), 0.8)
        img = img + 0.06 * texture[..., None] / (texture.std() + 1e-12)
        out.append(np.clip(img, 0.05, 0.85))
    return out


def _hash_array(a):
    return hashlib.sha256(np.ascontiguousarray(a, dtype=np.float64).tobytes()).hexdigest()


def config_hash(d):
    """Stable hash of a JSON-serialisable config."""
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _sample_haze(cfg, rng, channels):
    alpha = cfg.alpha_range[0] + rng.random() * (cfg.alpha_range[1] - cfg.alpha_range[0])
    A = cfg.airlight_range[0] + rng.random() * (cfg.airlight_range[1] - cfg.airlight_range[0])
    return HazeParams(float(alpha), tuple([float(A)] * channels))


def synthesize_example(B, cfg, mode, rng):
    """One paired example from background ``B`` under ``mode``."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 2:
        B = B[..., None]
    shape = B.shape[:2]
    channels = B.shape[2]
    if channels not in (1, 3):
        raise ConfigError(f"images need 1 or 3 channels, got {channels}")
    params = {"mode": mode}

    if mode == "haze":
        haze = _sample_haze(cfg, rng, channels)
        O = compose_haze_only(B, haze)
        zeros = np.zeros(shape)
        params.update(haze.to_dict(), directions=[], streak_counts=[])
        return RainExample(O, B, zeros, zeros.astype(np.uint8), haze, params)

    if mode == "light":
        layers = [render_streak_layer(cfg, 0, shape, rng)]
    else:
        s = cfg.num_directions
        lo, hi = cfg.direction_range
        if cfg.directions is not None:
            bases = list(cfg.directions[:s])
        else:
            # one base angle per equal-width slice of the range keeps families distinct
            bases = [lo + (k + rng.random()) * (hi - lo) / s for k in range(s)]
        layers = [render_streak_layer(cfg, k, shape, rng, direction=bases[k]) for k in range(s)]

    R = derive_mask(layers, cfg.mask_threshold)
    S = sum(layer.data for layer in layers)
    haze = None
    if mode == "light":
        O = compose_light_rain(B, S, R)
    elif cfg.heavy_haze:
        haze = _sample_haze(cfg, rng, channels)
        O = compose_heavy_rain(B, layers, R, haze, cfg.overlap_count)
    else:
        O = compose_heavy_rain(B, layers, R, HazeParams(1.0, 1.0), cfg.overlap_count)
    params.update(directions=[layer.direction for layer in layers],
                  streak_counts=[len(layer.streaks) for layer in layers],
                  mask_fraction=float(R.mean()))
    if haze is not None:
        params.update(haze.to_dict())
    return RainExample(O, B, S, R, haze, params)


def build_dataset(backgrounds, cfg, mode, background_refs=None):
    """Synthesize ``cfg.repeats`` examples per background.

    Returns ``(examples, manifest)``. Example ``i`` draws from a generator
    seeded with ``(cfg.seed, i)``, so examples are independent of each
    other and of evaluation order.
    """
    if not backgrounds:
        raise ConfigError("need at least one background")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "light" and cfg.num_directions != 1:
        cfg = SynthesisConfig.from_dict({**cfg.to_dict(), "num_directions": 1})
    refs = list(background_refs) if background_refs is not None else [
        f"bg{j:04d}" for j in range(len(backgrounds))]
    examples, records = [], []
    for j, B in enumerate(backgrounds):
        for r in range(cfg.repeats):
            idx = j * cfg.repeats + r
            rng = np.random.default_rng([cfg.seed, idx])
            ex = synthesize_example(B, cfg, mode, rng)
            ex.params.update(id=f"{idx:05d}", background=j, repeat=r)
            examples.append(ex)
            records.append(dict(ex.params))
    cfg_dict = cfg.to_dict()
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "mode": mode,
        "config": cfg_dict,
        "config_hash": config_hash({"mode": mode, **cfg_dict}),
        "backgrounds": [{"ref": ref, "sha256": _hash_array(np.asarray(B))}
                        for ref, B in zip(refs, backgrounds)],
        "examples": records,
    }
    return examples, manifest


def replay_manifest(manifest, backgrounds):
    """Regenerate a dataset from its manifest and the same backgrounds."""
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {manifest.get('schema_version')}")
    recorded = manifest["backgrounds"]
    if len(recorded) != len(backgrounds):
        raise DatasetError(f"manifest lists {len(recorded)} backgrounds, got {len(backgrounds)}")
    for rec, B in zip(recorded, backgrounds):
        if rec["sha256"] != _hash_array(np.asarray(B)):
            raise DatasetError(f"background {rec['ref']} differs from the one recorded")
    cfg = SynthesisConfig.from_dict(manifest["config"])
    examples, fresh = build_dataset(backgrounds, cfg, manifest["mode"],
                                    [rec["ref"] for rec in recorded])
    if fresh["examples"] != manifest["examples"]:
        raise DatasetError("replayed example parameters differ from the manifest")
    return examples, fresh


def save_dataset(examples, manifest, root, split="train"):
    """Write ``{root}/{split}/{id}_{O|B|S|R}.png`` plus ``manifest.json``."""
    out = Path(root) / split
    try:
        out.mkdir(parents=True, exist_ok=True)
        for ex in examples:
            stem = out / ex.params["id"]
            write_png(f"{stem}_O.png", ex.O, bits=16)
            write_png(f"{stem}_B.png", ex.B, bits=16)
            write_png(f"{stem}_S.png", ex.S, bits=16)
            write_png(f"{stem}_R.png", ex.R.astype(np.float64), bits=8)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    except OSError as err:
        raise DatasetError(f"failed writing dataset under {out}: {err}") from err
    return out


def load_dataset(split_dir):
    """Read a split written by :func:`save_dataset`."""
    split_dir = Path(split_dir)
    path = split_dir / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, ValueError) as err:
        raise DatasetError(f"cannot read manifest {path}: {err}") from err
    examples = []
    for rec in manifest["examples"]:
        stem = split_dir / rec["id"]
        try:
            O = read_png(f"{stem}_O.png")
            B = read_png(f"{stem}_B.png")
            S = read_png(f"{stem}_S.png", channels=1)
            R = (read_png(f"{stem}_R.png", channels=1) > 0.5).astype(np.uint8)
        except OSError as err:
            raise DatasetError(f"{stem}: {err}") from err
        if O.ndim == 2:
            O, B = O[..., None], B[..., None]
        haze = None
        if "alpha" in rec:
            haze = HazeParams(rec["alpha"], tuple(rec["airlight"]))
        examples.append(RainExample(O, B, S, R, haze, dict(rec)))
    return examples, manifest
