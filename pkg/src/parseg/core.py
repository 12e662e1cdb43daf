"""Domain types for partially labeled segmentation corpora and their on-disk format.

A corpus is a list of datasets that share one global organ alphabet
(indices ``1..K``, ``0`` is background). Each dataset annotates a disjoint
subset of the organs; everything else is background in its label maps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

FORMAT_VERSION = 1

PROV_BACKGROUND = 0
PROV_TRUE = 1
PROV_PSEUDO = 2


class DatasetError(ValueError):
    """Invalid dataset content or layout. ``sample`` names the offending sample if known."""

    def __init__(self, message: str, sample: Optional[str] = None):
        self.sample = sample
        if sample is not None:
            message = f"{message} (sample {sample!r})"
        super().__init__(message)


@dataclass(frozen=True)
class OrganPartition:
    organs: tuple[str, ...]
    subsets: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        object.__setattr__(self, "organs", tuple(self.organs))
        object.__setattr__(self, "subsets", tuple(tuple(sorted(int(o) for o in s)) for s in self.subsets))
        K = len(self.organs)
        if len(self.subsets) < 2:
            raise ValueError("need at least 2 datasets")
        seen: set[int] = set()
        for s in self.subsets:
            if not s:
                raise ValueError("every organ subset must be non-empty")
            overlap = seen.intersection(s)
            if overlap:
                raise ValueError(f"organ subsets overlap on {sorted(overlap)}")
            seen.update(s)
        if seen != set(range(1, K + 1)):
            raise ValueError(f"organ subsets must tile 1..{K}, got {sorted(seen)}")

    @property
    def num_organs(self) -> int:
        return len(self.organs)

    @property
    def num_datasets(self) -> int:
        return len(self.subsets)

    def complement(self, i: int) -> tuple[int, ...]:
        """Organs not annotated in dataset ``i``."""
        own = set(self.subsets[i])
        return tuple(o for o in range(1, self.num_organs + 1) if o not in own)

    def owner(self, organ: int) -> int:
        for i, s in enumerate(self.subsets):
            if organ in s:
                return i
        raise KeyError(organ)

    def to_dict(self) -> dict:
        return {"organs": list(self.organs), "subsets": [list(s) for s in self.subsets]}

    @classmethod
    def from_dict(cls, d: dict) -> "OrganPartition":
        return cls(tuple(d["organs"]), tuple(tuple(s) for s in d["subsets"]))

    @classmethod
    def round_robin(cls, num_organs: int, num_datasets: int, organs: Optional[Sequence[str]] = None):
        if organs is None:
            organs = [f"organ{k}" for k in range(1, num_organs + 1)]
        subsets = [tuple(range(i + 1, num_organs + 1, num_datasets)) for i in range(num_datasets)]
        return cls(tuple(organs), tuple(subsets))


def restrict_labels(values: np.ndarray, subset: Iterable[int]) -> np.ndarray:
    """Keep label entries in ``subset`` and zero everything else."""
    values = np.asarray(values)
    keep = np.isin(values, np.fromiter(subset, dtype=np.int64))
    return np.where(keep, values, 0).astype(values.dtype, copy=False)


@dataclass
class CombinedLabelMap:
    """Merged true + pseudo labels for one sample, with per-pixel provenance."""

    values: np.ndarray
    provenance: np.ndarray


@dataclass
class PartiallyLabeledDataset:
    """Images with labels for ``organ_subset`` only.

    ``images`` is ``(S, H, W)`` float32, ``labels`` and ``full_gt`` are ``(S, H, W)``
    uint8. When ``provenance`` is set the dataset is a combined one: labels may also
    carry pseudo labels for organs outside ``organ_subset``, marked with provenance 2.
    """

    dataset_id: str
    organ_names: tuple[str, ...]
    organ_subset: tuple[int, ...]
    sample_ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    split: list[str]
    full_gt: Optional[np.ndarray] = None
    provenance: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.organ_names = tuple(self.organ_names)
        self.organ_subset = tuple(sorted(int(o) for o in self.organ_subset))
        self.sample_ids = list(self.sample_ids)
        self.split = list(self.split)
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.full_gt is not None:
            self.full_gt = np.asarray(self.full_gt, dtype=np.uint8)
        if self.provenance is not None:
            self.provenance = np.asarray(self.provenance, dtype=np.uint8)
        self.validate()

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_organs(self) -> int:
        return len(self.organ_names)

    @property
    def is_combined(self) -> bool:
        return self.provenance is not None

    def validate(self) -> None:
        S = len(self.sample_ids)
        if S == 0:
            raise DatasetError("dataset must contain at least one sample")
        if len(set(self.sample_ids)) != S:
            raise DatasetError("duplicate sample ids")
        if self.images.ndim != 3 or self.images.shape[0] != S:
            raise DatasetError(f"images must be (S, H, W) with S={S}, got {self.images.shape}")
        if self.labels.shape != self.images.shape:
            raise DatasetError(f"labels shape {self.labels.shape} != images shape {self.images.shape}")
        if len(self.split) != S or any(s not in ("train", "val") for s in self.split):
            raise DatasetError("split must assign 'train' or 'val' to every sample")
        K = self.num_organs
        if not self.organ_subset or not all(1 <= o <= K for o in self.organ_subset):
            raise DatasetError(f"organ_subset {self.organ_subset} must be a non-empty subset of 1..{K}")
        allowed = np.zeros(256, dtype=bool)
        allowed[0] = True
        if self.provenance is None:
            allowed[list(self.organ_subset)] = True
        else:
            allowed[1 : K + 1] = True
        for idx in range(S):
            bad = ~allowed[self.labels[idx]]
            if bad.any():
                raise DatasetError("label outside organ subset", self.sample_ids[idx])
        if self.full_gt is not None:
            if self.full_gt.shape != self.images.shape:
                raise DatasetError("full_gt shape mismatch")
            if self.full_gt.max(initial=0) > K:
                raise DatasetError("full_gt value outside 0..K")
            if self.provenance is None:
                for idx in range(S):
                    if not np.array_equal(restrict_labels(self.full_gt[idx], self.organ_subset), self.labels[idx]):
                        raise DatasetError("full_gt restricted to organ_subset differs from labels", self.sample_ids[idx])
        if self.provenance is not None:
            if self.provenance.shape != self.images.shape:
                raise DatasetError("provenance shape mismatch")
            own = np.isin(self.labels, self.organ_subset)
            if not np.array_equal(own, self.provenance == PROV_TRUE):
                raise DatasetError("provenance 1 must mark exactly the true-labeled pixels")
            pseudo = self.provenance == PROV_PSEUDO
            if np.any(pseudo & ((self.labels == 0) | own)):
                raise DatasetError("provenance 2 must mark pseudo organs only")
            if np.any((self.provenance == PROV_BACKGROUND) & (self.labels != 0)):
                raise DatasetError("provenance 0 must mark background only")
            if self.provenance.max(initial=0) > PROV_PSEUDO:
                raise DatasetError("provenance value outside {0, 1, 2}")

    def true_labels(self) -> np.ndarray:
        """Labels restricted to the annotated organs (drops pseudo labels)."""
        return restrict_labels(self.labels, self.organ_subset)

    def indices(self, split: str) -> np.ndarray:
        return np.array([k for k, s in enumerate(self.split) if s == split], dtype=np.int64)

    def training_view(self) -> "PartiallyLabeledDataset":
        """Copy without the evaluation-only ground truth."""
        return replace(self, full_gt=None)

    def combined_map(self, idx: int) -> CombinedLabelMap:
        if self.provenance is None:
            raise DatasetError("not a combined dataset")
        return CombinedLabelMap(self.labels[idx], self.provenance[idx])


def _read_raw(path: Path, dtype: str, shape: tuple[int, int], sample: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"missing sample file {path.name}", sample)
    arr = np.fromfile(path, dtype=dtype)
    if arr.size != shape[0] * shape[1]:
        raise DatasetError(f"shape mismatch in {path.name}: {arr.size} values, expected {shape[0] * shape[1]}", sample)
    return arr.reshape(shape)


def save_dataset(ds: PartiallyLabeledDataset, path) -> None:
    path = Path(path)
    if len(ds) == 0:
        raise DatasetError("dataset must contain at least one sample")
    try:
        path.mkdir(parents=True, exist_ok=True)
        subdirs = ["images", "labels"]
        if ds.full_gt is not None:
            subdirs.append("gt")
        if ds.provenance is not None:
            subdirs.append("prov")
        for sub in subdirs:
            (path / sub).mkdir(exist_ok=True)
        for idx, sid in enumerate(ds.sample_ids):
            ds.images[idx].astype("<f4").tofile(path / "images" / f"{sid}.f32")
            ds.labels[idx].astype("u1").tofile(path / "labels" / f"{sid}.u8")
            if ds.full_gt is not None:
                ds.full_gt[idx].astype("u1").tofile(path / "gt" / f"{sid}.u8")
            if ds.provenance is not None:
                ds.provenance[idx].astype("u1").tofile(path / "prov" / f"{sid}.u8")
        manifest = {
            "format_version": FORMAT_VERSION,
            "dataset_id": ds.dataset_id,
            "organs": list(ds.organ_names),
            "organ_subset": list(ds.organ_subset),
            "shape": list(ds.shape),
            "samples": list(ds.sample_ids),
            "split": list(ds.split),
            "has_gt": ds.full_gt is not None,
            "gt_eval_only": ds.full_gt is not None,
            "combined": ds.provenance is not None,
            "extra": ds.extra,
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {path}: {e}") from e


def load_dataset(path) -> PartiallyLabeledDataset:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"missing manifest.json in {path}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest.json: {e}") from e
    try:
        shape = tuple(int(x) for x in m["shape"])
        ids = list(m["samples"])
        subset = tuple(m["organ_subset"])
        organs = tuple(m["organs"])
        split = list(m["split"])
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"manifest field missing or invalid: {e}") from e
    if not ids:
        raise DatasetError("dataset must contain at least one sample")
    images = np.stack([_read_raw(path / "images" / f"{s}.f32", "<f4", shape, s) for s in ids])
    labels = np.stack([_read_raw(path / "labels" / f"{s}.u8", "u1", shape, s) for s in ids])
    gt = prov = None
    if m.get("has_gt"):
        gt = np.stack([_read_raw(path / "gt" / f"{s}.u8", "u1", shape, s) for s in ids])
    if m.get("combined"):
        prov = np.stack([_read_raw(path / "prov" / f"{s}.u8", "u1", shape, s) for s in ids])
    return PartiallyLabeledDataset(
        dataset_id=m["dataset_id"],
        organ_names=organs,
        organ_subset=subset,
        sample_ids=ids,
        images=images,
        labels=labels,
        split=split,
        full_gt=gt,
        provenance=prov,
        extra=m.get("extra", {}),
    )


def partition_of(datasets: Sequence[PartiallyLabeledDataset]) -> OrganPartition:
    """Recover the organ partition from a list of datasets, checking they agree."""
    if not datasets:
        raise DatasetError("no datasets given")
    names = datasets[0].organ_names
    for ds in datasets[1:]:
        if ds.organ_names != names:
            raise DatasetError(f"dataset {ds.dataset_id} uses a different organ alphabet")
    return OrganPartition(names, tuple(ds.organ_subset for ds in datasets))


def save_partition(part: OrganPartition, path) -> None:
    Path(path).write_text(json.dumps(part.to_dict(), indent=2) + "\n")


def load_partition(path) -> OrganPartition:
    return OrganPartition.from_dict(json.loads(Path(path).read_text()))
