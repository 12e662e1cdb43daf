"""DSC / ASSD, labeled-dataset-only aggregation, pseudo-label quality and feature export."""

from __future__ import annotations

import csv
import json
import math
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import PROV_PSEUDO, OrganPartition, PartiallyLabeledDataset
from .segnet import ModelHandle, extract_features, predict_labels

_CROSS = ndimage.generate_binary_structure(2, 1)


def dsc(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (na + nb)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask; the grid border counts as outside."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(np.pad(m, 1), structure=_CROSS)[1:-1, 1:-1]
    return m & ~inner


def assd(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing: Optional[Sequence[float]] = None) -> float:
    """Average symmetric surface distance in pixels (or ``spacing`` units).

    Undefined when either mask is empty; returns NaN so aggregations can drop it.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return math.nan
    ba, bb = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    total = float(to_b[ba].sum()) + float(to_a[bb].sum())
    return total / (int(ba.sum()) + int(bb.sum()))


def _mean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate_model(
    model: ModelHandle,
    corpora: Sequence[PartiallyLabeledDataset],
    partition: Optional[OrganPartition] = None,
    split: Optional[str] = "val",
    with_assd: bool = True,
    spacing: Optional[Sequence[float]] = None,
) -> dict:
    """Per-organ DSC/ASSD, each organ scored only on datasets that label it.

    ``split=None`` uses every sample. Per-organ values are means over samples
    (sorted by sample id); the overall mean is unweighted over organs.
    """
    per_sample: dict[int, list[tuple[str, float, float]]] = {o: [] for o in model.organs}
    for ds in corpora:
        organs_here = [o for o in model.organs if o in ds.organ_subset]
        if not organs_here:
            continue
        idx = np.arange(len(ds)) if split is None else ds.indices(split)
        if len(idx) == 0:
            continue
        pred, _ = predict_labels(model, ds.images[idx])
        truth = ds.true_labels()[idx]
        for k, s in enumerate(idx):
            sid = ds.sample_ids[s]
            for o in organs_here:
                p, g = pred[k] == o, truth[k] == o
                d = dsc(p, g)
                a = assd(p, g, spacing) if with_assd else math.nan
                per_sample[o].append((sid, d, a))
    if partition is not None:
        names = partition.organs
    elif corpora:
        names = corpora[0].organ_names
    else:
        names = tuple(f"organ{k}" for k in range(1, model.num_organs + 1))
    organs, absent = {}, []
    for o in model.organs:
        rows = sorted(per_sample[o])
        if not rows:
            absent.append(o)
            warnings.warn(f"organ {o} has no labeled samples in the evaluation split; excluded from the mean")
            continue
        organs[names[o - 1]] = {
            "index": o,
            "dsc": _mean([r[1] for r in rows]),
            "assd": _mean([r[2] for r in rows]) if with_assd else None,
            "n_samples": len(rows),
            "n_assd_undefined": sum(math.isnan(r[2]) for r in rows) if with_assd else None,
        }
    report = {
        "model": model.name,
        "role": model.role,
        "split": split or "all",
        "organs": organs,
        "absent_organs": absent,
        "mean_dsc": _mean([v["dsc"] for v in organs.values()]),
        "mean_assd": _mean([v["assd"] for v in organs.values()]) if with_assd else None,
    }
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["model", "role", "split", "organs", "absent_organs", "mean_dsc", "mean_assd"],
    "properties": {
        "model": {"type": "string"},
        "role": {"enum": ["partial", "full"]},
        "split": {"type": "string"},
        "organs": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["index", "dsc", "assd", "n_samples"],
                "properties": {
                    "index": {"type": "integer", "minimum": 1},
                    "dsc": {"type": "number", "minimum": 0, "maximum": 1},
                    "assd": {"type": ["number", "null"]},
                    "n_samples": {"type": "integer", "minimum": 1},
                },
            },
        },
        "absent_organs": {"type": "array", "items": {"type": "integer"}},
        "mean_dsc": {"type": "number"},
        "mean_assd": {"type": ["number", "null"]},
    },
}


def format_report(report: dict) -> str:
    lines = [f"model {report['model']} ({report['role']}), split {report['split']}"]
    lines.append(f"{'organ':<14}{'DSC':>8}{'ASSD':>9}{'n':>6}")
    for name, r in report["organs"].items():
        a = "n/a" if r["assd"] is None or math.isnan(r["assd"]) else f"{r['assd']:.3f}"
        lines.append(f"{name:<14}{r['dsc']:>8.4f}{a:>9}{r['n_samples']:>6}")
    ma = report["mean_assd"]
    ma = "n/a" if ma is None or math.isnan(ma) else f"{ma:.3f}"
    lines.append(f"{'mean':<14}{report['mean_dsc']:>8.4f}{ma:>9}")
    return "\n".join(lines)


def write_report(report: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # NaN is not valid JSON
    clean = json.loads(json.dumps(report, default=float).replace("NaN", "null"))
    path.write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n")
    path.with_suffix(".txt").write_text(format_report(report) + "\n")


def pseudo_label_quality(combined: Sequence[PartiallyLabeledDataset], partition: Optional[OrganPartition] = None) -> dict:
    """Per-organ DSC of provenance-2 regions against the hidden full ground truth."""
    rows = []
    for ds in combined:
        if ds.full_gt is None:
            raise ValueError(f"dataset {ds.dataset_id} has no full ground truth")
        if ds.provenance is None:
            raise ValueError(f"dataset {ds.dataset_id} is not a combined dataset")
        pseudo_organs = [o for o in range(1, ds.num_organs + 1) if o not in ds.organ_subset]
        for o in pseudo_organs:
            scores = [
                dsc((ds.labels[k] == o) & (ds.provenance[k] == PROV_PSEUDO), ds.full_gt[k] == o) for k in range(len(ds))
            ]
            name = partition.organs[o - 1] if partition is not None else ds.organ_names[o - 1]
            rows.append({"dataset": ds.dataset_id, "organ": name, "index": o, "dsc": float(np.mean(scores)), "n": len(scores)})
    per_dataset = {}
    for ds in combined:
        vals = [r["dsc"] for r in rows if r["dataset"] == ds.dataset_id]
        per_dataset[ds.dataset_id] = float(np.mean(vals)) if vals else math.nan
    return {"rows": rows, "per_dataset": per_dataset, "mean_dsc": float(np.mean([r["dsc"] for r in rows])) if rows else math.nan}


def format_quality(q: dict) -> str:
    lines = [f"{'dataset':<10}{'organ':<14}{'DSC':>8}{'n':>6}"]
    for r in q["rows"]:
        lines.append(f"{r['dataset']:<10}{r['organ']:<14}{r['dsc']:>8.4f}{r['n']:>6}")
    lines.append(f"{'mean':<24}{q['mean_dsc']:>8.4f}")
    return "\n".join(lines)


def export_features(model: ModelHandle, corpus: PartiallyLabeledDataset, out) -> None:
    """CSV of bottleneck vectors, one row per sample, tagged with the dominant GT organ."""
    feats = extract_features(model, corpus.images)
    ref = corpus.full_gt if corpus.full_gt is not None else corpus.labels
    out = Path(out)
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "dominant_organ", *[f"f{k}" for k in range(feats.shape[1])]])
            for k, sid in enumerate(corpus.sample_ids):
                counts = np.bincount(ref[k].ravel(), minlength=corpus.num_organs + 1)[1:]
                dominant = int(np.argmax(counts)) + 1 if counts.any() else 0
                w.writerow([sid, dominant, *[repr(float(v)) for v in feats[k]]])
    except OSError as e:
        raise OSError(f"cannot write features to {out}: {e}") from e
