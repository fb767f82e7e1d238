"""
Synthetic bi-temporal building-change pairs and PNG dataset I/O.

Scenes are a noisy background with axis-aligned textured rectangles. The
second epoch keeps, removes or adds buildings, then the whole second raster
is translated (border clamp) and photometrically jittered. The change mask is
the symmetric difference of the two footprint sets in the first epoch's frame,
so it is never affected by the injected shift.

Randomness comes from numpy's PCG64 generator seeded with the sample seed,
which is reproducible bit-for-bit across platforms.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError, GenerationError

MAX_SHIFT = 3
PLACEMENT_ATTEMPTS = 100


@dataclass
class GenSpec:
    image_size: int = 64
    buildings_min: int = 3
    buildings_max: int = 8
    size_min: int = 8
    size_max: int = 14
    p_add: float = 0.25
    p_remove: float = 0.25
    p_none: float = 0.5
    texture_seed: int | None = None
    shift_range: int = 1
    jitter: float = 0.1

    def validate(self) -> None:
        if abs(self.p_add + self.p_remove + self.p_none - 1.0) > 1e-9:
            raise ConfigError("change probabilities must sum to 1")
        if min(self.p_add, self.p_remove, self.p_none) < 0:
            raise ConfigError("change probabilities must be non-negative")
        if not 1 <= self.size_min <= self.size_max <= self.image_size - 2:
            raise ConfigError(f"building sizes {self.size_min}..{self.size_max} do not fit "
                              f"a {self.image_size} px image")
        if not 0 <= self.buildings_min <= self.buildings_max:
            raise ConfigError("building count range is empty")
        if not 0 <= self.shift_range <= MAX_SHIFT:
            raise ConfigError(f"shift_range must be within 0..{MAX_SHIFT}")
        if self.jitter < 0:
            raise ConfigError("jitter must be non-negative")


@dataclass
class ChangeSample:
    t1: np.ndarray  # H x W x 3 uint8
    t2: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8 in {0, 1}
    meta: dict = field(default_factory=dict)


def _footprint(rects, size: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    for y, x, h, w in rects:
        m[y:y + h, x:x + w] = True
    return m


def _place(rng, spec: GenSpec, occupied: np.ndarray) -> tuple:
    s = spec.image_size
    for _ in range(PLACEMENT_ATTEMPTS):
        h, w = rng.integers(spec.size_min, spec.size_max + 1, size=2)
        y = int(rng.integers(0, s - h + 1))
        x = int(rng.integers(0, s - w + 1))
        # keep a one-pixel gap so footprints never touch
        y0, x0 = max(y - 1, 0), max(x - 1, 0)
        if not occupied[y0:y + h + 1, x0:x + w + 1].any():
            occupied[y:y + h, x:x + w] = True
            return y, x, int(h), int(w)
    raise GenerationError(f"could not place a building after {PLACEMENT_ATTEMPTS} attempts")


def _roof(rng, h: int, w: int) -> np.ndarray:
    base = rng.uniform(150, 250, size=3)
    return base + rng.normal(0, 8, size=(h, w, 3))


def translate(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Move content by (dx, dy) pixels, repeating border pixels into the gap."""
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys][:, xs]


def photometric(img: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    out = (img.astype(np.float64) - 127.5) * contrast + 127.5 + brightness
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def generate(spec: GenSpec, seed: int) -> ChangeSample:
    spec.validate()
    rng = np.random.default_rng(seed)
    s = spec.image_size
    tex_rng = rng if spec.texture_seed is None else np.random.default_rng(spec.texture_seed)
    ground = tex_rng.uniform(70, 120, size=3)
    background = ground + tex_rng.normal(0, 10, size=(s, s, 3))

    occupied = np.zeros((s, s), dtype=bool)
    count = int(rng.integers(spec.buildings_min, spec.buildings_max + 1))
    t1_rects = [_place(rng, spec, occupied) for _ in range(count)]
    roofs = [_roof(rng, h, w) for (_, _, h, w) in t1_rects]

    probs = np.array([spec.p_add, spec.p_remove, spec.p_none])
    events = rng.choice(3, size=count, p=probs / probs.sum()) if count else np.array([], int)
    kept, added, removed = [], [], []
    t2_roofs = []
    for rect, roof, ev in zip(t1_rects, roofs, events):
        if ev == 1:
            removed.append(rect)
            continue
        kept.append(rect)
        t2_roofs.append(roof)
    for ev in events:
        if ev == 0:
            rect = _place(rng, spec, occupied)
            added.append(rect)
            t2_roofs.append(_roof(rng, rect[2], rect[3]))
    t2_rects = kept + added

    def paint(rects, patches):
        img = background.copy()
        for (y, x, h, w), patch in zip(rects, patches):
            img[y:y + h, x:x + w] = patch
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)

    t1 = paint(t1_rects, roofs)
    t2 = paint(t2_rects, t2_roofs)
    mask = (_footprint(t1_rects, s) ^ _footprint(t2_rects, s)).astype(np.uint8)

    r = spec.shift_range
    dx, dy = (int(v) for v in rng.integers(-r, r + 1, size=2))
    t2 = translate(t2, dx, dy)
    jit = []
    if spec.jitter > 0:
        out = []
        for img in (t1, t2):
            b = float(rng.uniform(-1, 1) * spec.jitter * 255)
            c = float(1.0 + rng.uniform(-1, 1) * spec.jitter)
            jit.append((b, c))
            out.append(photometric(img, b, c))
        t1, t2 = out
    meta = {"seed": seed, "buildings": count, "shift": (dx, dy), "jitter": jit,
            "t1_rects": t1_rects, "t2_rects": t2_rects, "added": added, "removed": removed}
    return ChangeSample(t1, t2, mask, meta)


def benchmark(seed: int = 7, n_train: int = 200, n_val: int = 50, spec: GenSpec | None = None) -> tuple:
    """Fixed train/val split; sample i uses seed ``seed * 100003 + i``."""
    spec = spec or GenSpec()
    samples = [generate(spec, seed * 100003 + i) for i in range(n_train + n_val)]
    return samples[:n_train], samples[n_train:]


# -- augmentation ------------------------------------------------------------

@dataclass
class AugmentFlags:
    flip: bool = True
    photometric: bool = True
    temporal_swap: bool = True
    strength: float = 0.1


def hflip(s: ChangeSample) -> ChangeSample:
    return ChangeSample(s.t1[:, ::-1].copy(), s.t2[:, ::-1].copy(), s.mask[:, ::-1].copy(), dict(s.meta))


def vflip(s: ChangeSample) -> ChangeSample:
    return ChangeSample(s.t1[::-1].copy(), s.t2[::-1].copy(), s.mask[::-1].copy(), dict(s.meta))


def temporal_swap(s: ChangeSample) -> ChangeSample:
    return ChangeSample(s.t2, s.t1, s.mask, dict(s.meta))


def augment(sample: ChangeSample, flags: AugmentFlags, seed: int) -> ChangeSample:
    rng = np.random.default_rng(seed)
    s = sample
    coins = rng.random(4)
    if flags.flip and coins[0] < 0.5:
        s = hflip(s)
    if flags.flip and coins[1] < 0.5:
        s = vflip(s)
    if flags.temporal_swap and coins[2] < 0.5:
        s = temporal_swap(s)
    if flags.photometric and coins[3] < 0.5:
        k = flags.strength
        b1, b2 = rng.uniform(-1, 1, size=2) * k * 255
        c1, c2 = 1.0 + rng.uniform(-1, 1, size=2) * k
        s = ChangeSample(photometric(s.t1, b1, c1), photometric(s.t2, b2, c2), s.mask, dict(s.meta))
    return s


# -- dataset directory I/O -----------------------------------------------------

def write_dataset(samples, root) -> None:
    """Write root/{A,B,label}/NNNNN.png (labels stored as 0/255)."""
    root = Path(root)
    for sub in ("A", "B", "label"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = f"{i:05d}.png"
        Image.fromarray(s.t1, mode="RGB").save(root / "A" / name)
        Image.fromarray(s.t2, mode="RGB").save(root / "B" / name)
        Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(root / "label" / name)


def _load(path: Path, mode: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != mode:
            raise DatasetError(f"{path}: expected {mode} image, got {im.mode}")
        return np.array(im)


def read_dataset(root) -> list:
    root = Path(root)
    for sub in ("A", "B", "label"):
        if not (root / sub).is_dir():
            raise DatasetError(f"missing directory {root / sub}")
    names = sorted(os.listdir(root / "A"))
    for sub in ("B", "label"):
        extra = sorted(set(os.listdir(root / sub)) - set(names))
        if extra:
            raise DatasetError(f"{root / sub / extra[0]} has no counterpart in A")
    out = []
    for name in names:
        paths = [root / sub / name for sub in ("A", "B", "label")]
        for p in paths[1:]:
            if not p.exists():
                raise DatasetError(f"missing counterpart file {p}")
        a, b = _load(paths[0], "RGB"), _load(paths[1], "RGB")
        lab = _load(paths[2], "L")
        if a.shape != b.shape or a.shape[:2] != lab.shape:
            raise DatasetError(f"size mismatch between A/B/label for {name}: "
                               f"{a.shape[:2]}, {b.shape[:2]}, {lab.shape}")
        if not np.all((lab == 0) | (lab == 255)):
            raise DatasetError(f"{paths[2]}: non-binary label values {sorted(set(np.unique(lab)) - {0, 255})[:3]}")
        out.append(ChangeSample(a, b, (lab // 255).astype(np.uint8), {"name": name}))
    return out


def to_arrays(samples) -> tuple:
    """Stack samples into normalised float32 N x 3 x H x W pairs and an N x 1 x H x W mask."""
    t1 = np.stack([s.t1 for s in samples]).astype(np.float32)
    t2 = np.stack([s.t2 for s in samples]).astype(np.float32)
    mask = np.stack([s.mask for s in samples])[:, None]

    def norm(x):
        return ((x / 255.0 - 0.5) / 0.25).transpose(0, 3, 1, 2).astype(np.float32)

    return norm(t1), norm(t2), mask
