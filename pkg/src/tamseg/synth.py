"""Synthetic contracting-cavity sequences with exact reference masks.

Each sequence shows an elliptical cavity (class 1) wrapped in a bright wall
(class 2) on a darker background (class 0), contracting monotonically from
the first frame (largest) to the last (smallest). Masks come straight from
the generating geometry, so they are exact by construction. Only the first
and last frames are annotated, mirroring data where intermediate frames
carry no labels. Degradations: multiplicative speckle noise and rectangular
signal-dropout patches, with presets from mild to severe.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .metrics import SegmentationMask, read_mask, write_mask
from .tnsr import read_array, read_json, write_array, write_json

BACKGROUND, CAVITY, WALL = 0, 1, 2
NUM_CLASSES = 3

# intensity levels before degradation
_BG_LEVEL = 0.15
_CAVITY_LEVEL = 0.05
_WALL_LEVEL = 0.85

QUALITY_TIERS = {
    "good": {"noise_sigma": 0.05, "dropout_patches": 0},
    "medium": {"noise_sigma": 0.15, "dropout_patches": 2},
    "poor": {"noise_sigma": 0.3, "dropout_patches": 4},
}

DROPOUT_TARGETS = ("unannotated", "annotated", "all", "none")


@dataclass(frozen=True)
class SequenceSpec:
    """Everything needed to regenerate one sequence bit for bit."""

    seed: int = 0
    extents: tuple[int, ...] = (64, 64)
    frames: int = 3
    contraction: float = 0.35
    noise_sigma: float = 0.15
    dropout_patches: int = 0
    dropout_size: int | None = None
    dropout_target: str = "unannotated"
    spacing: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.extents) not in (2, 3):
            raise ValidationError(f"extents must be 2D or 3D, got {self.extents}")
        if any(n < 32 for n in self.extents):
            raise ValidationError(f"extents {self.extents} too small; need >= 32")
        if not 2 <= self.frames <= 16:
            raise ValidationError(f"frame count must be in [2, 16], got {self.frames}")
        if not 0.0 < self.contraction < 1.0:
            raise ValidationError(f"contraction must be in (0, 1), "
                                  f"got {self.contraction}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.dropout_patches < 0:
            raise ValidationError("dropout_patches must be >= 0")
        if self.dropout_target not in DROPOUT_TARGETS:
            raise ValidationError(f"dropout_target {self.dropout_target!r} not in "
                                  f"{DROPOUT_TARGETS}")
        if self.spacing is None:
            object.__setattr__(self, "spacing", (1.0,) * len(self.extents))
        elif len(self.spacing) != len(self.extents):
            raise ValidationError("spacing must give one value per axis")

    @staticmethod
    def for_tier(tier: str, **overrides) -> "SequenceSpec":
        if tier not in QUALITY_TIERS:
            raise ValidationError(f"unknown quality tier {tier!r}; "
                                  f"choose from {sorted(QUALITY_TIERS)}")
        merged = dict(QUALITY_TIERS[tier])
        merged.update(overrides)
        return SequenceSpec(**merged)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["extents"] = list(self.extents)
        d["spacing"] = list(self.spacing)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "SequenceSpec":
        d = dict(d)
        d["extents"] = tuple(d["extents"])
        if d.get("spacing") is not None:
            d["spacing"] = tuple(d["spacing"])
        return SequenceSpec(**d)


@dataclass
class SequenceSample:
    """One generated sequence: images, exact masks, and the annotated frame ids."""

    spec: SequenceSpec
    images: list[np.ndarray]
    masks: list[SegmentationMask]
    annotated: tuple[int, ...]

    @property
    def frames(self) -> int:
        return len(self.images)


def _ellipse_labels(extents, center, radii, wall_width) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents],
                        indexing="ij")
    inner = np.zeros(extents, dtype=np.float64)
    outer = np.zeros(extents, dtype=np.float64)
    for g, c, r in zip(grids, center, radii):
        inner += ((g - c) / r) ** 2
        outer += ((g - c) / (r + wall_width)) ** 2
    labels = np.full(extents, BACKGROUND, dtype=np.uint8)
    labels[outer <= 1.0] = WALL
    labels[inner <= 1.0] = CAVITY
    return labels


def generate(spec: SequenceSpec) -> SequenceSample:
    """Deterministically build one sequence from its spec."""
    rng = np.random.default_rng(spec.seed)
    rank = len(spec.extents)
    ext = np.asarray(spec.extents, dtype=np.float64)

    # cavity geometry at full expansion; wall width >= 2 voxels keeps the
    # ring face-connected so no cavity voxel ever touches background
    base_radii = ext * rng.uniform(0.18, 0.24, size=rank)
    wall_width = max(2.0, 0.06 * float(ext.min()))
    center0 = ext / 2.0 + rng.uniform(-0.05, 0.05, size=rank) * ext
    drift = rng.uniform(-0.03, 0.03, size=rank) * ext

    images: list[np.ndarray] = []
    masks: list[SegmentationMask] = []
    annotated = (0, spec.frames - 1)
    dropout_size = spec.dropout_size or max(4, int(ext.min()) // 8)

    for t in range(spec.frames):
        phase = t / (spec.frames - 1)
        scale = (1.0 - spec.contraction * phase) ** (1.0 / rank)
        radii = base_radii * scale
        center = center0 + drift * phase
        labels = _ellipse_labels(spec.extents, center, radii, wall_width)
        masks.append(SegmentationMask(labels=labels, spacing=spec.spacing))

        img = np.full(spec.extents, _BG_LEVEL, dtype=np.float64)
        img[labels == CAVITY] = _CAVITY_LEVEL
        img[labels == WALL] = _WALL_LEVEL
        if spec.noise_sigma > 0:
            speckle = np.clip(rng.standard_normal(spec.extents), -3.0, 3.0)
            img = img * (1.0 + spec.noise_sigma * speckle)
        affected = (spec.dropout_target == "all"
                    or (spec.dropout_target == "annotated" and t in annotated)
                    or (spec.dropout_target == "unannotated" and t not in annotated))
        # draw patch positions even on unaffected frames so the image stream
        # of one frame does not depend on which frames are targeted; patches
        # land in the central half, where the object sits
        for _ in range(spec.dropout_patches):
            corner = []
            for n in spec.extents:
                lo = n // 4
                hi = max(lo + 1, 3 * n // 4 - dropout_size)
                corner.append(int(rng.integers(lo, hi)))
            if affected:
                sl = tuple(slice(c, c + dropout_size) for c in corner)
                img[sl] = 0.0
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))

    return SequenceSample(spec=spec, images=images, masks=masks,
                          annotated=annotated)


def cavity_measure(mask: SegmentationMask) -> int:
    """Cavity voxel count: area in 2D, volume in 3D."""
    return int(mask.region(CAVITY).sum())


# -- dataset on disk ------------------------------------------------------------


def write_dataset(root, splits: dict[str, list[SequenceSpec]]) -> None:
    """Write a dataset directory: one subdirectory per case plus a manifest.

    ``splits`` maps split names (train/val/test) to the specs of their cases.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"format": "synth-dataset", "version": 1, "splits": {}}
    for split, specs in splits.items():
        cases = []
        for i, spec in enumerate(specs):
            case_id = f"{split}_{i:03d}"
            case_dir = root / case_id
            case_dir.mkdir(exist_ok=True)
            sample = generate(spec)
            frame_files, mask_files = [], []
            for t in range(sample.frames):
                f_name = f"frame_{t:02d}.tnsr"
                m_name = f"mask_{t:02d}.tnsr"
                write_array(case_dir / f_name, sample.images[t])
                write_mask(case_dir / m_name, sample.masks[t])
                frame_files.append(f"{case_id}/{f_name}")
                mask_files.append(f"{case_id}/{m_name}")
            cases.append({
                "id": case_id,
                "spec": spec.to_json_dict(),
                "frames": frame_files,
                "masks": mask_files,
                "annotated": list(sample.annotated),
                "spacing": list(spec.spacing),
            })
        manifest["splits"][split] = cases
    write_json(root / "manifest.json", manifest)


def load_dataset(root) -> dict[str, list[SequenceSample]]:
    """Read a dataset directory back into memory."""
    root = Path(root)
    manifest = read_json(root / "manifest.json")
    if manifest.get("format") != "synth-dataset":
        raise ValidationError(f"{root} does not hold a synth dataset manifest")
    out: dict[str, list[SequenceSample]] = {}
    for split, cases in manifest["splits"].items():
        samples = []
        for case in cases:
            spec = SequenceSpec.from_json_dict(case["spec"])
            images = [read_array(root / f).astype(np.float32)
                      for f in case["frames"]]
            masks = [read_mask(root / f) for f in case["masks"]]
            samples.append(SequenceSample(spec=spec, images=images, masks=masks,
                                          annotated=tuple(case["annotated"])))
        out[split] = samples
    return out
