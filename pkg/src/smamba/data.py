"""Deterministic synthetic camouflaged-blob data, dataset directories and scale augmentation.

Randomness comes from a counter-based splitmix64 generator: every draw is a
pure function of ``(master_seed, sample index, attempt, stream, counter)``,
so any sample can be regenerated on its own and results do not depend on
platform RNG implementations.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import GenSpec
from .functional import bilinear_matrix
from .pnm import atomic_write_bytes, load_mask, load_ppm, save_mask, save_ppm

__all__ = [
    "GOLDEN_GAMMA",
    "splitmix64",
    "CounterRng",
    "SamplePair",
    "GenerationError",
    "DatasetError",
    "sample_seed",
    "gen_sample",
    "gen_synthetic",
    "resize_pair",
    "multiscale_augment",
    "AUGMENT_SCALES",
    "save_dataset",
    "load_dir",
    "read_manifest",
]

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
AUGMENT_SCALES = (0.75, 1.0, 1.25)
MAX_RETRIES = 10
FG_RANGE = (0.02, 0.5)


def splitmix64(x):
    """The splitmix64 finalizer on a Python int or a uint64 array."""
    if isinstance(x, (int, np.integer)):
        z = (int(x) + GOLDEN_GAMMA) & MASK64
        z = ((z ^ (z >> 30)) * MIX1) & MASK64
        z = ((z ^ (z >> 27)) * MIX2) & MASK64
        return z ^ (z >> 31)
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def _combine(*parts: int) -> int:
    key = 0
    for part in parts:
        key = splitmix64(key ^ (int(part) & MASK64))
    return key


class CounterRng:
    """Stream of uniforms ``splitmix64(key + counter) >> 11`` scaled to ``[0, 1)``."""

    def __init__(self, *key_parts: int):
        self.key = _combine(*key_parts)
        self.counter = 0

    def uniform(self, low=0.0, high=1.0, size=None):
        n = 1 if size is None else int(np.prod(size))
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            bits = splitmix64(idx + np.uint64(self.key))
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        u = low + (high - low) * u
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        """Box-Muller normals."""
        n = int(np.prod(size))
        u1 = self.uniform(size=n)
        u2 = self.uniform(size=n)
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(size)


@dataclass
class SamplePair:
    image: np.ndarray  # (H, W, 3) in [0, 1], 8-bit quantized
    mask: np.ndarray  # (H, W) in {0, 1}
    id: str
    seed: int
    split: str


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


_SPLIT_CODES = {"train": 1, "test-seen": 2, "test-unseen": 3}

# per-family appearance: base tissue colour, texture correlation length, relative blob radius
_FAMILIES = {
    "seen": dict(base=(0.72, 0.42, 0.38), corr=4.0, radius=(0.16, 0.28)),
    "unseen": dict(base=(0.62, 0.46, 0.44), corr=1.0, radius=(0.10, 0.20)),
}


def sample_seed(master_seed: int, split: str, index: int) -> int:
    return _combine(master_seed, _SPLIT_CODES[split], index)


def _blob(rng: CounterRng, size: int, r0: float, margin: float) -> tuple[np.ndarray, float]:
    """Mask of one star-shaped blob and its minimum radius over a dense angle grid."""
    a = rng.uniform(-0.2, 0.2, size=5)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=5)
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    m = np.arange(1, 6)

    def radius(theta):
        return r0 * (1.0 + np.cos(np.multiply.outer(theta, m) + phase) @ a)

    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    theta = np.arctan2(yy - cy, xx - cx)
    rho = np.hypot(yy - cy, xx - cx)
    r_min = float(radius(np.linspace(0.0, 2.0 * np.pi, 720, endpoint=False)).min())
    return rho <= radius(theta), r_min


def _texture(rng: CounterRng, size: int, corr: float) -> np.ndarray:
    noise = rng.normal((size, size))
    field = gaussian_filter(noise, corr, mode="wrap")
    return field / (field.std() + 1e-12)


def gen_sample(spec: GenSpec, master_seed: int, index: int) -> SamplePair:
    seed = sample_seed(master_seed, spec.split, index)
    family = _FAMILIES[spec.family]
    size = spec.size
    for attempt in range(MAX_RETRIES):
        rng = CounterRng(seed, attempt)
        r0 = rng.uniform(*family["radius"]) * size
        mask, r_min = _blob(rng, size, r0, margin=1.25 * r0)
        ok = r_min >= 0.1 * r0
        for _ in range(spec.max_secondary):
            present = rng.uniform() < spec.secondary_prob
            r1 = rng.uniform(0.3, 0.5) * r0
            extra, r1_min = _blob(rng, size, r1, margin=1.25 * r1)
            if present:
                mask |= extra
                ok &= r1_min >= 0.1 * r1
        frac = mask.mean()
        if ok and FG_RANGE[0] <= frac <= FG_RANGE[1]:
            break
    else:
        raise GenerationError(f"sample {index}: no valid blob after {MAX_RETRIES} attempts")

    tex_rng = CounterRng(seed, 1000)
    shared = _texture(tex_rng, size, family["corr"])[..., None]
    chroma = np.stack([_texture(tex_rng, size, family["corr"]) for _ in range(3)], axis=-1)
    bg = 0.8 * shared + 0.4 * chroma  # mostly luminance, some colour noise
    fg_tex = _texture(tex_rng, size, family["corr"])[..., None]
    base = np.asarray(family["base"]) + tex_rng.uniform(-0.05, 0.05, size=3)
    tint = np.array([1.0, 0.55, 0.5]) * (1.0 if tex_rng.uniform() < 0.5 else -1.0)
    alpha = gaussian_filter(mask.astype(np.float64), spec.blur_sigma) if spec.blur_sigma > 0 else mask.astype(np.float64)
    shading = np.linspace(-0.05, 0.05, size)[None, :, None] * tex_rng.uniform(-1.0, 1.0)
    image = base + spec.texture_amp * bg + shading + alpha[..., None] * (spec.contrast * tint + 0.5 * spec.texture_amp * fg_tex)
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return SamplePair(image, mask.astype(np.float64), f"{spec.split}_{index:05d}", seed, spec.split)


def gen_synthetic(spec: GenSpec, master_seed: int) -> list[SamplePair]:
    return [gen_sample(spec, master_seed, i) for i in range(spec.n)]


# --- resizing -------------------------------------------------------------------------


def _resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = x.shape[:2]
    ry = bilinear_matrix(h, out_h)
    rx = bilinear_matrix(w, out_w)
    flat = x.reshape(h, w, -1).transpose(2, 0, 1)  # (C, H, W)
    out = ry @ flat @ rx.T
    return out.transpose(1, 2, 0).reshape((out_h, out_w) + x.shape[2:])


def resize_pair(pair: SamplePair, scale: float, multiple: int = 1, min_size: int = 7) -> SamplePair:
    """Bilinear resize; the mask is re-binarized at 0.5.

    The target side is ``round(H * scale)`` rounded to a multiple of ``multiple``.
    """
    h, w = pair.mask.shape
    out_h = int(round(h * scale / multiple)) * multiple
    out_w = int(round(w * scale / multiple)) * multiple
    if min(out_h, out_w) < min_size:
        raise ValueError(f"resized size {out_h}x{out_w} smaller than {min_size}")
    if (out_h, out_w) == (h, w):
        return pair
    image = np.clip(_resize_array(pair.image, out_h, out_w), 0.0, 1.0)
    mask = (_resize_array(pair.mask, out_h, out_w) >= 0.5).astype(np.float64)
    return SamplePair(image, mask, pair.id, pair.seed, pair.split)


def check_scales(scales) -> tuple[float, ...]:
    scales = tuple(float(s) for s in scales)
    bad = [s for s in scales if s not in AUGMENT_SCALES]
    if not scales or bad:
        raise ValueError(f"augmentation scales must be drawn from {AUGMENT_SCALES}, got {scales}")
    return scales


def multiscale_augment(pair: SamplePair, rng: np.random.Generator, scales=AUGMENT_SCALES, multiple: int = 1, min_size: int = 7) -> SamplePair:
    scales = check_scales(scales)
    return resize_pair(pair, scales[int(rng.integers(len(scales)))], multiple, min_size)


# --- directories ----------------------------------------------------------------------


def save_dataset(pairs: list[SamplePair], out_dir) -> None:
    """``<id>.ppm`` / ``<id>.pgm`` pairs plus ``manifest.tsv`` (id, split, seed)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["id\tsplit\tseed"]
    for p in pairs:
        save_ppm(out / f"{p.id}.ppm", p.image)
        save_mask(out / f"{p.id}.pgm", p.mask)
        rows.append(f"{p.id}\t{p.split}\t{p.seed}")
    atomic_write_bytes(out / "manifest.tsv", ("\n".join(rows) + "\n").encode("utf-8"))


def read_manifest(path) -> dict[str, tuple[str, int]]:
    out = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if line.strip():
            ident, split, seed = line.split("\t")
            out[ident] = (split, int(seed))
    return out


def load_dir(path) -> list[SamplePair]:
    """Load paired ``<id>.ppm`` / ``<id>.pgm`` files sorted by id; masks binarized at 128."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    images = {p.stem: p for p in root.glob("*.ppm")}
    masks = {p.stem: p for p in root.glob("*.pgm")}
    if not images and not masks:
        raise DatasetError(f"{root}: empty dataset")
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise DatasetError(f"{root}: missing image/mask partner for ids: {', '.join(unpaired)}")
    manifest = read_manifest(root / "manifest.tsv") if (root / "manifest.tsv").exists() else {}
    pairs, mismatched = [], []
    for ident in sorted(images):
        image = load_ppm(images[ident])
        mask = load_mask(masks[ident])
        if image.shape[:2] != mask.shape:
            mismatched.append(f"{ident} ({image.shape[1]}x{image.shape[0]} image, {mask.shape[1]}x{mask.shape[0]} mask)")
            continue
        split, seed = manifest.get(ident, ("external", 0))
        pairs.append(SamplePair(image, mask, ident, seed, split))
    if mismatched:
        raise DatasetError(f"{root}: size mismatch for ids: {', '.join(mismatched)}")
    return pairs
