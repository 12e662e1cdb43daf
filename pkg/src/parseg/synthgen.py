"""Seeded synthetic stand-in for a collection of partially labeled CT datasets.

Every sample contains all K organs as separated shapes. Organ ``k`` has its own
size, aspect ratio and intensity band, so a small network can tell them apart.
Each dataset only keeps the labels of its own organ subset.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import OrganPartition, PartiallyLabeledDataset, restrict_labels

SHAPE_FAMILIES = ("ellipse", "rectangle", "blob")
MAX_RETRIES = 100


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    image_size: tuple[int, int] = (64, 64)
    num_organs: int = 4
    num_datasets: int = 2
    samples_per_dataset: int = 200
    val_fraction: float = 0.25
    noise_sigma: float = 0.35
    intensity_contrast: float = 1.0
    shape_family: str = "ellipse"
    seed: int = 0
    # explicit organ-to-dataset lists (1-based organ indices); round-robin when None
    assignment: Optional[list[list[int]]] = None
    organ_names: Optional[list[str]] = None

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)

    def validate(self) -> None:
        H, W = self.image_size
        if H <= 0 or W <= 0:
            raise ValueError("image_size must be positive")
        if self.num_organs < 2:
            raise ValueError("num_organs must be >= 2")
        if self.num_datasets < 2:
            raise ValueError("num_datasets must be >= 2")
        if self.num_organs < self.num_datasets:
            raise ValueError(f"num_organs ({self.num_organs}) must be >= num_datasets ({self.num_datasets})")
        if self.samples_per_dataset < 2:
            raise ValueError("samples_per_dataset must be >= 2")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.num_val < 1 or self.num_val >= self.samples_per_dataset:
            raise ValueError("val_fraction must leave at least one train and one val sample")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.intensity_contrast <= 0:
            raise ValueError("intensity_contrast must be > 0")
        if self.shape_family not in SHAPE_FAMILIES:
            raise ValueError(f"shape_family must be one of {SHAPE_FAMILIES}")
        if self.organ_names is not None and len(self.organ_names) != self.num_organs:
            raise ValueError("organ_names length must equal num_organs")
        if self.assignment is not None and len(self.assignment) != self.num_datasets:
            raise ValueError("assignment must list one organ set per dataset")

    @property
    def num_val(self) -> int:
        return max(1, int(round(self.samples_per_dataset * self.val_fraction)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**known)


def make_partition(cfg: SynthConfig) -> OrganPartition:
    names = cfg.organ_names or [f"organ{k}" for k in range(1, cfg.num_organs + 1)]
    if cfg.assignment is None:
        return OrganPartition.round_robin(cfg.num_organs, cfg.num_datasets, names)
    return OrganPartition(tuple(names), tuple(tuple(s) for s in cfg.assignment))


def _organ_geometry(organ: int, K: int, H: int, W: int) -> tuple[float, float]:
    """Characteristic mean radius (pixels) and aspect ratio of an organ."""
    t = (organ - 1) / max(K - 1, 1)
    radius = min(H, W) * (0.075 + 0.06 * t)
    aspect = 1.0 + 0.45 * ((organ - 1) % 3)
    return radius, aspect


def _draw_shape(rng: np.random.Generator, family: str, organ: int, K: int, H: int, W: int) -> np.ndarray:
    radius, aspect = _organ_geometry(organ, K, H, W)
    r = radius * rng.uniform(0.85, 1.15)
    a = max(r * np.sqrt(aspect), 2.5)
    b = max(r / np.sqrt(aspect), 2.5)
    half = int(np.ceil(max(a, b))) + 1
    if 2 * half + 2 >= min(H, W):
        raise GenerationError(f"organ {organ} does not fit in {H}x{W}; increase image_size")
    cy = rng.uniform(half + 1, H - half - 1)
    cx = rng.uniform(half + 1, W - half - 1)
    theta = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if family == "rectangle":
        # axis-aligned in the rotated frame
        mask = (np.abs(u) <= a * 0.85) & (np.abs(v) <= b * 0.85)
    elif family == "blob":
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.uniform(0.0, 0.15, size=3)
        ang = np.arctan2(v / b, u / a)
        wobble = 1.0 + sum(amp[k] * np.cos((k + 2) * ang + phase[k]) for k in range(3))
        mask = (u / a) ** 2 + (v / b) ** 2 <= wobble**2
    else:
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def _generate_sample(cfg: SynthConfig, dataset_index: int, sample_index: int) -> tuple[np.ndarray, np.ndarray]:
    H, W = cfg.image_size
    K = cfg.num_organs
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, dataset_index, sample_index])
    gt = np.zeros((H, W), dtype=np.uint8)
    # one-pixel gap keeps organs separate under 4-connectivity
    occupied = np.zeros((H, W), dtype=bool)
    for organ in rng.permutation(np.arange(1, K + 1)):
        for _ in range(MAX_RETRIES):
            mask = _draw_shape(rng, cfg.shape_family, int(organ), K, H, W)
            if mask.any() and not (mask & occupied).any():
                break
        else:
            raise GenerationError(
                f"could not place organ {organ} without overlap after {MAX_RETRIES} tries; use a larger image_size"
            )
        gt[mask] = organ
        occupied |= ndimage.binary_dilation(mask, iterations=1)
    means = np.arange(K + 1, dtype=np.float64) * cfg.intensity_contrast
    image = means[gt] + rng.normal(0.0, cfg.noise_sigma, size=(H, W)) if cfg.noise_sigma > 0 else means[gt]
    return image.astype(np.float32), gt


def generate_corpus(cfg: SynthConfig) -> tuple[OrganPartition, list[PartiallyLabeledDataset]]:
    cfg.validate()
    part = make_partition(cfg)
    S = cfg.samples_per_dataset
    datasets = []
    for i in range(cfg.num_datasets):
        pairs = [_generate_sample(cfg, i, s) for s in range(S)]
        images = np.stack([p[0] for p in pairs])
        gt = np.stack([p[1] for p in pairs])
        labels = np.stack([restrict_labels(g, part.subsets[i]) for g in gt])
        split_rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, i, 1 << 30])
        val_idx = set(split_rng.permutation(S)[: cfg.num_val].tolist())
        split = ["val" if s in val_idx else "train" for s in range(S)]
        datasets.append(
            PartiallyLabeledDataset(
                dataset_id=f"D{i + 1}",
                organ_names=part.organs,
                organ_subset=part.subsets[i],
                sample_ids=[f"d{i + 1}_{s:04d}" for s in range(S)],
                images=images,
                labels=labels,
                split=split,
                full_gt=gt,
                extra={"synthetic": True, "seed": cfg.seed},
            )
        )
    return part, datasets


def corpus_statistics(partition: OrganPartition, datasets: Sequence[PartiallyLabeledDataset]) -> dict:
    """Per-organ pixel fractions and intensity moments, per-dataset sample counts."""
    if not datasets:
        raise ValueError("corpus_statistics needs at least one dataset")
    K = partition.num_organs
    organs = {}
    for organ in range(1, K + 1):
        fractions, values = [], []
        for ds in datasets:
            ref = ds.full_gt if ds.full_gt is not None else ds.labels
            m = ref == organ
            fractions.extend(m.reshape(len(ds), -1).mean(axis=1).tolist())
            values.append(ds.images[m].astype(np.float64))
        vals = np.concatenate(values) if values else np.zeros(0)
        organs[partition.organs[organ - 1]] = {
            "index": organ,
            "mean_pixel_fraction": float(np.mean(fractions)),
            "pixel_count": int(vals.size),
            "mean_intensity": float(vals.mean()) if vals.size else float("nan"),
            "intensity_var": float(vals.var()) if vals.size else float("nan"),
        }
    per_ds = {
        ds.dataset_id: {
            "samples": len(ds),
            "train": int(len(ds.indices("train"))),
            "val": int(len(ds.indices("val"))),
            "organ_subset": list(ds.organ_subset),
        }
        for ds in datasets
    }
    return {"organs": organs, "datasets": per_ds}


def format_statistics(stats: dict) -> str:
    lines = [f"{'organ':<12}{'idx':>4}{'frac':>9}{'mean':>9}{'var':>9}"]
    for name, o in stats["organs"].items():
        lines.append(
            f"{name:<12}{o['index']:>4}{o['mean_pixel_fraction']:>9.4f}{o['mean_intensity']:>9.3f}{o['intensity_var']:>9.4f}"
        )
    for did, d in stats["datasets"].items():
        lines.append(f"{did}: {d['samples']} samples ({d['train']} train / {d['val']} val), organs {d['organ_subset']}")
    return "\n".join(lines)
