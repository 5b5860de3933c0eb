"""Synthetic ordered atlas and simulated partial slices with known labels.

Plates are nested smooth blobs whose geometry drifts linearly with plate
index, so visual similarity falls off with index distance and a mean-rank
error is meaningful. Every output is a pure function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagekit import (
    AffineTransform,
    GrayImage,
    IoFailure,
    binomial_blur5,
    make_affine,
    save_pgm,
    warp_affine,
)

MANIFEST_HEADER = "#atlas-match-manifest v1"
SPLITS = ("train", "val1", "val2", "test")


@dataclass(frozen=True)
class AtlasSpec:
    """Parameters of the synthetic reference atlas."""

    num_plates: int = 132
    image_size: int = 128
    seed: int = 0
    morph_rate: float = 1.0

    def __post_init__(self):
        if self.num_plates < 2:
            raise ValueError(f"num_plates must be >= 2, got {self.num_plates}")
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32, got {self.image_size}")
        if not self.morph_rate > 0:
            raise ValueError(f"morph_rate must be > 0, got {self.morph_rate}")


@dataclass(frozen=True)
class SliceAugmentation:
    """One slice's degradation recipe: affine + border crop + pepper + plate mixing."""

    affine: AffineTransform = field(default_factory=AffineTransform.identity)
    crop_fraction: float = 0.0
    pepper_density: float = 0.0
    neighbor_blend: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.crop_fraction <= 0.3:
            raise ValueError(f"crop_fraction must be in [0, 0.3], got {self.crop_fraction}")
        if not 0.0 <= self.pepper_density <= 0.05:
            raise ValueError(f"pepper_density must be in [0, 0.05], got {self.pepper_density}")
        if not 0.0 <= self.neighbor_blend <= 0.5:
            raise ValueError(f"neighbor_blend must be in [0, 0.5], got {self.neighbor_blend}")


@dataclass(frozen=True)
class AugRanges:
    """Uniform sampling bounds for random slice augmentations."""

    rotation_deg: float = 15.0
    scale_min: float = 0.85
    scale_max: float = 1.15
    translation: float = 0.1
    crop_max: float = 0.3
    pepper_max: float = 0.05
    blend_max: float = 0.5


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    plate: int
    split: str
    aug: dict

    def line(self) -> str:
        rec = ";".join(f"{k}={self.aug[k]!r}" for k in sorted(self.aug))
        return f"{self.path}\t{self.plate}\t{self.split}\t{rec}"


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def write(self, path) -> None:
        lines = [MANIFEST_HEADER] + [e.line() for e in self.entries]
        try:
            Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.splitlines()
        if not lines or not lines[0].startswith(MANIFEST_HEADER):
            raise ValueError(f"{path}: missing '{MANIFEST_HEADER}' header")
        entries = []
        for ln in lines[1:]:
            if not ln.strip():
                continue
            rel, plate, split, rec = ln.split("\t")
            aug = {}
            for pair in rec.split(";"):
                k, v = pair.split("=")
                try:
                    aug[k] = int(v)
                except ValueError:
                    aug[k] = float(v)
            entries.append(ManifestEntry(rel, int(plate), split, aug))
        return cls(tuple(entries))


def _mix_seed(*parts: int) -> int:
    """Stable scalar seed from a tuple, for independent per-item RNG streams."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _path(rng, lo, hi, rate):
    """Endpoints of a linear parameter trajectory across the atlas."""
    p0 = rng.uniform(lo, hi)
    p1 = rng.uniform(lo, hi)
    return p0, p0 + (p1 - p0) * min(rate, 1.0)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def generate_atlas(spec: AtlasSpec) -> list[GrayImage]:
    """Ordered plates whose content morphs smoothly and monotonically with index."""
    rng = np.random.default_rng([spec.seed, 11])
    k, n, rate = spec.num_plates, spec.image_size, spec.morph_rate

    ax = _path(rng, 0.62, 0.82, rate)
    ay = _path(rng, 0.62, 0.82, rate)
    body = _path(rng, 0.38, 0.5, rate)
    wobble = [(_path(rng, 0.0, 0.07, rate), _path(rng, 0.0, 2 * np.pi, rate), m)
              for m in (2, 3)]

    blobs = []
    for _ in range(5):
        r0, a0 = 0.45 * np.sqrt(rng.random()), rng.uniform(0, 2 * np.pi)
        r1, a1 = 0.45 * np.sqrt(rng.random()), rng.uniform(0, 2 * np.pi)
        c0 = (r0 * np.cos(a0), r0 * np.sin(a0))
        c1 = (r1 * np.cos(a1), r1 * np.sin(a1))
        cx = (c0[0], c0[0] + (c1[0] - c0[0]) * min(rate, 1.0))
        cy = (c0[1], c0[1] + (c1[1] - c0[1]) * min(rate, 1.0))
        blobs.append({
            "cx": cx, "cy": cy,
            "sigma": _path(rng, 0.09, 0.24, rate),
            "amp": _path(rng, 0.3, 0.6, rate),
            "sign": 1.0 if rng.random() < 0.5 else -1.0,
        })
    ring = {
        "cx": _path(rng, -0.25, 0.25, rate),
        "cy": _path(rng, -0.25, 0.25, rate),
        "radius": _path(rng, 0.22, 0.48, rate),
        "amp": _path(rng, 0.15, 0.35, rate),
    }

    coords = np.linspace(-1.0, 1.0, n)
    gx = coords[None, :]
    gy = coords[:, None]
    theta = np.arctan2(gy, gx)

    def lerp(pair, t):
        return pair[0] + (pair[1] - pair[0]) * t

    plates = []
    for i in range(k):
        t = i / (k - 1)
        level = 1.0 - (gx / lerp(ax, t)) ** 2 - (gy / lerp(ay, t)) ** 2
        for amp, phase, m in wobble:
            level = level + lerp(amp, t) * np.cos(m * theta + lerp(phase, t))
        mask = _smoothstep((level + 0.15) / 0.3)

        img = lerp(body, t) * np.ones_like(mask)
        for b in blobs:
            d2 = (gx - lerp(b["cx"], t)) ** 2 + (gy - lerp(b["cy"], t)) ** 2
            img = img + b["sign"] * lerp(b["amp"], t) * np.exp(
                -d2 / (2.0 * lerp(b["sigma"], t) ** 2))
        rd = np.sqrt((gx - lerp(ring["cx"], t)) ** 2 + (gy - lerp(ring["cy"], t)) ** 2)
        img = img + lerp(ring["amp"], t) * np.exp(
            -((rd - lerp(ring["radius"], t)) ** 2) / (2 * 0.05 ** 2))

        trng = np.random.default_rng([spec.seed, 12, i])
        tex = binomial_blur5(binomial_blur5(trng.standard_normal((n, n))))
        tex = tex / max(tex.std(), 1e-12)

        plates.append(GrayImage(np.clip((img + 0.03 * tex) * mask, 0.0, 1.0)))
    return plates


def synthesize_slice(atlas: list[GrayImage], plate_idx: int,
                     aug: SliceAugmentation, seed: int) -> GrayImage:
    """Degraded view of a plate: neighbor blend, affine warp, crop+pad, pepper."""
    if not 0 <= plate_idx < len(atlas):
        raise IndexError(f"plate index {plate_idx} out of range [0, {len(atlas)})")
    px = atlas[plate_idx].pixels
    if aug.neighbor_blend > 0:
        nb = plate_idx + 1 if plate_idx + 1 < len(atlas) else plate_idx - 1
        px = (1.0 - aug.neighbor_blend) * px + aug.neighbor_blend * atlas[nb].pixels

    out = warp_affine(GrayImage(px), aug.affine).pixels.copy()

    h, w = out.shape
    bh = int(round(aug.crop_fraction * h))
    bw = int(round(aug.crop_fraction * w))
    if bh > 0:
        out[:bh] = 0.0
        out[-bh:] = 0.0
    if bw > 0:
        out[:, :bw] = 0.0
        out[:, -bw:] = 0.0

    if aug.pepper_density > 0:
        rng = np.random.default_rng(seed)
        out[rng.random(out.shape) < aug.pepper_density] = 0.0
    return GrayImage(out)


def sample_augmentation(rng: np.random.Generator, ranges: AugRanges) -> SliceAugmentation:
    return SliceAugmentation(
        affine=make_affine(
            rotation_deg=rng.uniform(-ranges.rotation_deg, ranges.rotation_deg),
            scale=rng.uniform(ranges.scale_min, ranges.scale_max),
            tx=rng.uniform(-ranges.translation, ranges.translation),
            ty=rng.uniform(-ranges.translation, ranges.translation),
        ),
        crop_fraction=rng.uniform(0.0, ranges.crop_max),
        pepper_density=rng.uniform(0.0, ranges.pepper_max),
        neighbor_blend=rng.uniform(0.0, ranges.blend_max),
    )


def build_dataset(spec: AtlasSpec, counts: dict[str, int], out_dir,
                  ranges: AugRanges = AugRanges(), seed: int = 0) -> DatasetManifest:
    """Write atlas plates, slice images and the manifest under out_dir.

    counts maps split name to slice count; zero or missing splits are omitted.
    Plate labels cycle through a per-split shuffled order so every plate is
    covered before any repeats.
    """
    for name, cnt in counts.items():
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}, expected one of {SPLITS}")
        if cnt < 0:
            raise ValueError(f"split {name!r} count must be >= 0, got {cnt}")

    out_dir = Path(out_dir)
    atlas_dir = out_dir / "atlas"
    slice_dir = out_dir / "slices"
    try:
        atlas_dir.mkdir(parents=True, exist_ok=True)
        slice_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create dataset tree under {out_dir}: {exc}") from exc

    atlas = generate_atlas(spec)
    k = spec.num_plates
    digits = max(3, len(str(k - 1)))
    for i, plate in enumerate(atlas):
        save_pgm(plate, atlas_dir / f"plate_{i:0{digits}d}.pgm")

    entries = []
    stream = 0
    for split_idx, split in enumerate(SPLITS):
        cnt = counts.get(split, 0)
        if cnt == 0:
            continue
        rng = np.random.default_rng([seed, 20 + split_idx])
        order = rng.permutation(k)
        for j in range(cnt):
            if j % k == 0 and j > 0:
                order = rng.permutation(k)
            plate = int(order[j % k])
            aug = sample_augmentation(rng, ranges)
            slice_seed = _mix_seed(seed, split_idx, stream)
            img = synthesize_slice(atlas, plate, aug, slice_seed)
            rel = f"slices/{split}_{j:04d}.pgm"
            save_pgm(img, out_dir / rel)
            entries.append(ManifestEntry(rel, plate, split, {
                "a11": aug.affine.a11, "a12": aug.affine.a12,
                "a21": aug.affine.a21, "a22": aug.affine.a22,
                "tx": aug.affine.tx, "ty": aug.affine.ty,
                "crop": aug.crop_fraction, "pepper": aug.pepper_density,
                "blend": aug.neighbor_blend, "seed": slice_seed,
            }))
            stream += 1

    manifest = DatasetManifest(tuple(entries))
    manifest.write(out_dir / "manifest.tsv")
    return manifest
