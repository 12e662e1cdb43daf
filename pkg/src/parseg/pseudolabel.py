"""Pseudo labels from stage-1 partial models, merged with true labels (true labels win)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PROV_BACKGROUND, PROV_PSEUDO, PROV_TRUE, CombinedLabelMap, PartiallyLabeledDataset
from .segnet import ModelHandle, predict_labels


@dataclass
class PseudoLabels:
    values: np.ndarray  # global organ indices, 0 = background
    confidence: np.ndarray
    organs: tuple[int, ...]  # organ set of the producing model


def generate_pseudo_labels(model: ModelHandle, ds: PartiallyLabeledDataset, dataset_index: int) -> PseudoLabels:
    if model.role != "partial":
        raise ValueError("pseudo labels come from partial (stage-1) models")
    if model.dataset_index == dataset_index or set(model.organs) & set(ds.organ_subset):
        raise ValueError(f"model {model.name} shares organs with dataset {ds.dataset_id}")
    values, conf = predict_labels(model, ds.images)
    return PseudoLabels(values, conf, tuple(model.organs))


def merge_labels(
    true_labels: np.ndarray,
    organ_subset: Sequence[int],
    pseudo_sets: Sequence[PseudoLabels],
    min_confidence: float = 0.0,
) -> CombinedLabelMap:
    """Per-pixel merge: true organ label, else the most confident pseudo organ, else background.

    Confidence ties go to the lower organ index, so the result does not depend on
    the order of ``pseudo_sets``. Works on single grids or stacks of grids.
    """
    true_labels = np.asarray(true_labels)
    own = set(int(o) for o in organ_subset)
    seen = set(own)
    for ps in pseudo_sets:
        if seen & set(ps.organs):
            raise ValueError(f"pseudo organ set {ps.organs} overlaps true or other pseudo organs")
        seen |= set(ps.organs)
        present = set(np.unique(ps.values).tolist()) - {0}
        if not present <= set(ps.organs):
            raise ValueError(f"pseudo grid carries organs {sorted(present - set(ps.organs))} outside its model's set")
    if not set(np.unique(true_labels).tolist()) - {0} <= own:
        raise ValueError("true labels carry organs outside the organ subset")

    best_organ = np.zeros(true_labels.shape, dtype=np.int64)
    best_conf = np.full(true_labels.shape, -np.inf)
    for ps in pseudo_sets:
        claim = (ps.values != 0) & (ps.confidence >= min_confidence)
        conf = np.where(claim, ps.confidence.astype(np.float64), -np.inf)
        organ = ps.values.astype(np.int64)
        better = claim & ((conf > best_conf) | ((conf == best_conf) & (organ < best_organ)))
        best_organ = np.where(better, organ, best_organ)
        best_conf = np.where(better, conf, best_conf)

    is_true = true_labels != 0
    values = np.where(is_true, true_labels, best_organ).astype(np.uint8)
    prov = np.full(true_labels.shape, PROV_BACKGROUND, dtype=np.uint8)
    prov[is_true] = PROV_TRUE
    prov[~is_true & (best_organ != 0)] = PROV_PSEUDO
    return CombinedLabelMap(values, prov)


def build_combined_corpus(
    models: Sequence[ModelHandle], corpora: Sequence[PartiallyLabeledDataset], min_confidence: float = 0.0
) -> list[PartiallyLabeledDataset]:
    """For each dataset, add pseudo labels from every other dataset's partial model."""
    by_index = {m.dataset_index: m for m in models}
    missing = [i for i in range(len(corpora)) if i not in by_index]
    if missing:
        raise ValueError(f"missing stage-1 model for dataset index {missing}")
    combined = []
    for i, ds in enumerate(corpora):
        if ds.is_combined:
            raise ValueError(f"dataset {ds.dataset_id} is already combined")
        sets = [generate_pseudo_labels(by_index[j], ds, i) for j in range(len(corpora)) if j != i]
        merged = merge_labels(ds.labels, ds.organ_subset, sets, min_confidence)
        combined.append(
            PartiallyLabeledDataset(
                dataset_id=ds.dataset_id,
                organ_names=ds.organ_names,
                organ_subset=ds.organ_subset,
                sample_ids=ds.sample_ids,
                images=ds.images,
                labels=merged.values,
                split=ds.split,
                full_gt=ds.full_gt,
                provenance=merged.provenance,
                extra={**ds.extra, "min_confidence": min_confidence},
            )
        )
    return combined
