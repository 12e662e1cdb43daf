"""Stage-1 (difference) and stage-2 (similarity) mutual training loops.

Each step draws one batch per dataset. With any mutual term enabled every model
runs on the concatenation of all N batches, so model i sees its own images, the
other datasets' images (prediction terms) and every peer sees dataset i's images
(feature terms). Mutual terms always detach the peer side; each model's
parameters are updated from its own loss row only.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .core import OrganPartition, PartiallyLabeledDataset, partition_of
from .losses import (
    StageHyperParams,
    Stage1Terms,
    Stage2Terms,
    dice_loss,
    dynamic_feature_similarity_loss,
    feature_difference_loss,
    masked_cross_entropy,
    prediction_difference_loss,
    prediction_similarity_loss,
    stage1_total_loss,
    stage2_total_loss,
    transfer_direction_mask,
    cosine_distance,
)
from .metrics import evaluate_model
from .segnet import BackboneConfig, ModelHandle, forward, init_model, save_model, to_global

log = logging.getLogger(__name__)

STAGE1, STAGE2 = 1, 2


@dataclass
class Toggles:
    pd: bool = True
    fd: bool = True
    ps: bool = True
    fs_static: bool = False
    dfs: bool = True


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.001
    momentum: float = 0.999
    nesterov: bool = True
    lr_decay: float = 0.9
    hp: StageHyperParams = field(default_factory=StageHyperParams)
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0
    val_every: int = 5
    mask_granularity: str = "batch"
    depth: int = 3
    base_width: int = 16
    feature_dim: int = 64
    spatial_features: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.nesterov and self.momentum == 0:
            raise ValueError("nesterov needs momentum > 0")
        if self.lr_decay < 0:
            raise ValueError("lr_decay must be >= 0")
        if self.toggles.fs_static and self.toggles.dfs:
            raise ValueError("fs_static and dfs are mutually exclusive")
        if self.mask_granularity not in ("batch", "epoch"):
            raise ValueError("mask_granularity must be 'batch' or 'epoch'")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        self.hp.validate()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        hp = d.pop("hp", {})
        tg = d.pop("toggles", {})
        return cls(
            hp=hp if isinstance(hp, StageHyperParams) else StageHyperParams(**hp),
            toggles=tg if isinstance(tg, Toggles) else Toggles(**tg),
            **d,
        )

    def backbone(self, num_classes: int, seed: int) -> BackboneConfig:
        return BackboneConfig(
            num_classes=num_classes,
            depth=self.depth,
            base_width=self.base_width,
            feature_dim=self.feature_dim,
            seed=seed,
            spatial_features=self.spatial_features,
        )


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    stage: int
    config: dict
    config_hash: str
    seeds: dict
    datasets: list
    epoch_losses: list = field(default_factory=list)  # {epoch, model, term, value}
    val_dsc: list = field(default_factory=list)  # {epoch, model, dsc}
    step_losses: dict = field(default_factory=dict)  # model -> per-step total row loss
    lr_trace: list = field(default_factory=list)
    pair_log: list = field(default_factory=list)
    selected_model: Optional[str] = None
    final_val: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    version: str = __version__

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        with (out / "losses.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "model", "term", "value"])
            for r in self.epoch_losses:
                w.writerow([r["epoch"], r["model"], r["term"], repr(r["value"])])
        if self.pair_log:
            with (out / "pairs.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                keys = list(self.pair_log[0])
                w.writerow(keys)
                for r in self.pair_log:
                    w.writerow([r[k] for k in keys])


def poly_lr(lr0: float, step: int, total: int, power: float = 0.9) -> float:
    return lr0 * (1 - step / total) ** power


def _sub_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, *parts]).generate_state(1)[0])


class BatchSampler:
    """Endless shuffled stream over one dataset's train split, ``steps`` full batches per epoch."""

    def __init__(self, ds: PartiallyLabeledDataset, batch_size: int, seed: int):
        self.idx = ds.indices("train")
        if len(self.idx) == 0:
            raise ValueError(f"dataset {ds.dataset_id} has an empty training split")
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def epoch(self, steps: int) -> list[np.ndarray]:
        need = steps * self.batch_size
        order = []
        while sum(len(o) for o in order) < need:
            order.append(self.rng.permutation(self.idx))
        flat = np.concatenate(order)[:need]
        return [flat[k * self.batch_size : (k + 1) * self.batch_size] for k in range(steps)]


class _Worker:
    def __init__(self, handle: ModelHandle, ds: PartiallyLabeledDataset, cfg: TrainConfig, sampler_seed: int):
        self.handle = handle
        self.ds = ds
        self.sampler = BatchSampler(ds, cfg.batch_size, sampler_seed)
        self.opt = torch.optim.SGD(handle.parameters(), lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov)
        self.images = torch.from_numpy(ds.images)
        self.labels = torch.from_numpy(ds.labels.astype(np.int64))
        self.true = torch.from_numpy(ds.true_labels().astype(np.int64))

    def set_lr(self, lr: float) -> None:
        for g in self.opt.param_groups:
            g["lr"] = lr


def steps_per_epoch(corpora: Sequence[PartiallyLabeledDataset], batch_size: int) -> int:
    return max(math.ceil(len(ds.indices("train")) / batch_size) for ds in corpora)


def _check_corpora(corpora: Sequence[PartiallyLabeledDataset]) -> OrganPartition:
    if len(corpora) < 2:
        raise ValueError("need at least 2 datasets")
    part = partition_of(corpora)  # raises on overlapping organ subsets
    shapes = {ds.shape for ds in corpora}
    if len(shapes) != 1:
        raise ValueError(f"datasets disagree on image shape: {sorted(shapes)}")
    return part


def _make_manifest(stage: int, cfg: TrainConfig, corpora, seeds: dict) -> RunManifest:
    snap = {"stage": stage, **cfg.to_dict()}
    return RunManifest(
        stage=stage,
        config=snap,
        config_hash=config_hash(snap),
        seeds=seeds,
        datasets=[ds.dataset_id for ds in corpora],
    )


class _EpochMeter:
    def __init__(self):
        self.sums: dict[tuple[str, str], float] = {}
        self.counts: dict[tuple[str, str], int] = {}

    def add(self, model: str, term: str, value: float) -> None:
        key = (model, term)
        self.sums[key] = self.sums.get(key, 0.0) + value
        self.counts[key] = self.counts.get(key, 0) + 1

    def flush(self, epoch: int, sink: list) -> None:
        for key in sorted(self.sums):
            sink.append({"epoch": epoch, "model": key[0], "term": key[1], "value": self.sums[key] / self.counts[key]})
        self.sums.clear()
        self.counts.clear()


def _validate(workers, corpora, part, epoch, manifest, stage):
    for w in workers:
        rep = evaluate_model(w.handle, corpora, part, split="val", with_assd=False)
        manifest.val_dsc.append({"epoch": epoch, "model": w.handle.name, "dsc": rep["mean_dsc"]})


def _checkpoint(workers, out_dir, epoch: Optional[int] = None) -> None:
    if out_dir is None:
        return
    base = Path(out_dir) if epoch is None else Path(out_dir) / "checkpoints" / f"epoch_{epoch:03d}"
    for w in workers:
        save_model(w.handle, base / f"{w.handle.name}.pt")


def train_stage1(
    corpora: Sequence[PartiallyLabeledDataset],
    cfg: TrainConfig,
    out_dir=None,
    only: Optional[int] = None,
) -> tuple[list[ModelHandle], RunManifest]:
    """Train one partial model per dataset with optional PD / FD mutual terms.

    ``only`` trains a single model in isolation (mutual terms need peers, so they
    must be off); it is the independent reference for the ablation-off identity.
    """
    cfg.validate()
    part = _check_corpora(corpora)
    views = [ds.training_view() for ds in corpora]
    N, K = len(views), part.num_organs
    pd_on, fd_on = cfg.toggles.pd, cfg.toggles.fd
    mutual = pd_on or fd_on
    if only is not None and mutual:
        raise ValueError("isolated training requires pd and fd off")
    members = range(N) if only is None else [only]
    seeds = {f"P{i + 1}": {"init": _sub_seed(cfg.seed, STAGE1, i, 0), "data": _sub_seed(cfg.seed, STAGE1, i, 1)} for i in members}
    workers = []
    for i in members:
        ds = views[i]
        bb = cfg.backbone(len(ds.organ_subset) + 1, seeds[f"P{i + 1}"]["init"])
        handle = init_model(bb, "partial", i, ds.organ_subset, K)
        workers.append(_Worker(handle, ds, cfg, seeds[f"P{i + 1}"]["data"]))
    manifest = _make_manifest(STAGE1, cfg, corpora, seeds)
    for w in workers:
        manifest.step_losses[w.handle.name] = []
    steps = steps_per_epoch(views, cfg.batch_size)
    total_steps = cfg.epochs * steps
    t0 = time.perf_counter()
    global_step = 0
    for epoch in range(cfg.epochs):
        meter = _EpochMeter()
        plans = [w.sampler.epoch(steps) for w in workers]
        for s in range(steps):
            lr = poly_lr(cfg.lr, global_step, total_steps, cfg.lr_decay)
            manifest.lr_trace.append(lr)
            batch_idx = [p[s] for p in plans]
            imgs = [w.images[b] for w, b in zip(workers, batch_idx)]
            labs = [w.labels[b] for w, b in zip(workers, batch_idx)]
            B = cfg.batch_size
            if mutual:
                x = torch.cat(imgs)
                outs = [forward(w.handle, x) for w in workers]
            else:
                outs = [forward(w.handle, im) for w, im in zip(workers, imgs)]
            terms = []
            for a, w in enumerate(workers):
                prob = to_global(outs[a].probabilities, w.handle.organs, K)
                own = slice(a * B, (a + 1) * B) if mutual else slice(None)
                oi = w.ds.organ_subset
                t = Stage1Terms(dice=dice_loss(prob[own], labs[a], oi))
                peers = [c for c in range(len(workers)) if c != a]
                if pd_on:
                    t.pd = torch.stack(
                        [
                            prediction_difference_loss(prob[c * B : (c + 1) * B], labs[c], oi, workers[c].ds.organ_subset)
                            for c in peers
                        ]
                    ).mean()
                if fd_on:
                    t.fd = feature_difference_loss(
                        outs[a].bottleneck[own], [outs[c].bottleneck[own] for c in peers], cfg.hp.cosine_semantics
                    )
                terms.append(t)
            rows = []
            for a, (w, t) in enumerate(zip(workers, terms)):
                row = t.dice
                if t.pd is not None and cfg.hp.lambda_l != 0:
                    row = row + cfg.hp.lambda_l * t.pd
                if t.fd is not None and cfg.hp.lambda_f != 0:
                    row = row - cfg.hp.lambda_f * t.fd
                rows.append(row)
            if len(terms) >= 2:
                total = stage1_total_loss(terms, cfg.hp)
                meter.add("all", "total", total.item())
            for w, t, row in zip(workers, terms, rows):
                w.opt.zero_grad(set_to_none=True)
                row.backward()
                w.set_lr(lr)
                w.opt.step()
                name = w.handle.name
                manifest.step_losses[name].append(row.item())
                meter.add(name, "dice", t.dice.item())
                if t.pd is not None:
                    meter.add(name, "pd", t.pd.item())
                if t.fd is not None:
                    meter.add(name, "fd", t.fd.item())
                meter.add(name, "row", row.item())
            global_step += 1
        meter.flush(epoch, manifest.epoch_losses)
        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            _validate(workers, views, part, epoch, manifest, STAGE1)
            if epoch + 1 < cfg.epochs:
                _checkpoint(workers, out_dir, epoch)
        log.info("stage1 epoch %d/%d done (%.1fs)", epoch + 1, cfg.epochs, time.perf_counter() - t0)
    manifest.wall_clock = time.perf_counter() - t0
    handles = [w.handle for w in workers]
    if out_dir is not None:
        _checkpoint(workers, out_dir)
        manifest.write(out_dir)
    return handles, manifest


def train_stage2(
    combined: Sequence[PartiallyLabeledDataset],
    cfg: TrainConfig,
    out_dir=None,
    only: Optional[int] = None,
) -> tuple[list[ModelHandle], RunManifest]:
    """Train one full-organ model per combined dataset with optional PS / DFS (or static FS)."""
    cfg.validate()
    part = _check_corpora(combined)
    K = part.num_organs
    for ds in combined:
        # true organs plus the other datasets' organs as pseudo labels span 1..K
        if not ds.is_combined:
            raise ValueError(f"dataset {ds.dataset_id} does not cover all {K} organs: it carries no pseudo labels")
        missing = set(range(1, K + 1)) - set(np.unique(ds.labels).tolist())
        if missing:
            log.warning("dataset %s has no pixels of organs %s", ds.dataset_id, sorted(missing))
    views = [ds.training_view() for ds in combined]
    N = len(views)
    tg = cfg.toggles
    ps_on, feat_on = tg.ps, tg.dfs or tg.fs_static
    mutual = ps_on or feat_on
    if only is not None and mutual:
        raise ValueError("isolated training requires ps, dfs and fs_static off")
    members = range(N) if only is None else [only]
    all_organs = tuple(range(1, K + 1))
    seeds = {f"F{i + 1}": {"init": _sub_seed(cfg.seed, STAGE2, i, 0), "data": _sub_seed(cfg.seed, STAGE2, i, 1)} for i in members}
    workers = []
    for i in members:
        bb = cfg.backbone(K + 1, seeds[f"F{i + 1}"]["init"])
        workers.append(_Worker(init_model(bb, "full", i, all_organs, K), views[i], cfg, seeds[f"F{i + 1}"]["data"]))
    manifest = _make_manifest(STAGE2, cfg, combined, seeds)
    for w in workers:
        manifest.step_losses[w.handle.name] = []
    steps = steps_per_epoch(views, cfg.batch_size)
    total_steps = cfg.epochs * steps
    # per-epoch mask mode: decisions come from the previous epoch's mean cross-entropies
    ce_acc: dict[tuple[int, int], list[float]] = {}
    epoch_masks: dict[tuple[int, int], int] = {}
    t0 = time.perf_counter()
    global_step = 0
    for epoch in range(cfg.epochs):
        meter = _EpochMeter()
        plans = [w.sampler.epoch(steps) for w in workers]
        for s in range(steps):
            lr = poly_lr(cfg.lr, global_step, total_steps, cfg.lr_decay)
            manifest.lr_trace.append(lr)
            batch_idx = [p[s] for p in plans]
            imgs = [w.images[b] for w, b in zip(workers, batch_idx)]
            labs = [w.labels[b] for w, b in zip(workers, batch_idx)]
            trues = [w.true[b] for w, b in zip(workers, batch_idx)]
            B = cfg.batch_size
            if mutual:
                x = torch.cat(imgs)
                outs = [forward(w.handle, x) for w in workers]
            else:
                outs = [forward(w.handle, im) for w, im in zip(workers, imgs)]
            terms = []
            for a, w in enumerate(workers):
                prob = outs[a].probabilities
                own = slice(a * B, (a + 1) * B) if mutual else slice(None)
                t = Stage2Terms(dice=dice_loss(prob[own], labs[a], all_organs))
                peers = [c for c in range(len(workers)) if c != a]
                if ps_on:
                    t.ps = torch.stack(
                        [
                            prediction_similarity_loss(prob[c * B : (c + 1) * B], trues[c], workers[c].ds.organ_subset)
                            for c in peers
                        ]
                    ).mean()
                if feat_on:
                    oi = w.ds.organ_subset
                    with torch.no_grad():
                        ce_own = float(masked_cross_entropy(prob[own], trues[a], oi))
                    pair_terms = []
                    for c in peers:
                        with torch.no_grad():
                            ce_peer = float(masked_cross_entropy(outs[c].probabilities[own], trues[a], oi))
                        batch_m = transfer_direction_mask(ce_own, ce_peer)
                        m = batch_m
                        if cfg.mask_granularity == "epoch":
                            ce_acc.setdefault((a, c), []).append(ce_own - ce_peer)
                            m = epoch_masks.get((a, c), batch_m)
                        gate = 0 if tg.fs_static else m
                        f_own, f_peer = outs[a].bottleneck[own], outs[c].bottleneck[own]
                        term = dynamic_feature_similarity_loss(f_own, f_peer, gate, cfg.hp.cosine_semantics)
                        pair_terms.append(term)
                        manifest.pair_log.append(
                            {
                                "epoch": epoch,
                                "step": global_step,
                                "model": w.handle.name,
                                "peer": workers[c].handle.name,
                                "ce_own": repr(ce_own),
                                "ce_peer": repr(ce_peer),
                                "mask": m,
                                "gate": gate,
                                "similarity": repr(cosine_distance(f_own, f_peer.detach()).mean().item()),
                                "term": repr(term.item()),
                            }
                        )
                    t.dfs = torch.stack(pair_terms).mean()
                terms.append(t)
            rows = []
            for t in terms:
                row = t.dice
                if t.ps is not None and cfg.hp.beta_l != 0:
                    row = row + cfg.hp.beta_l * t.ps
                if t.dfs is not None and cfg.hp.beta_f != 0:
                    row = row + cfg.hp.beta_f * t.dfs
                rows.append(row)
            if len(terms) >= 2:
                meter.add("all", "total", stage2_total_loss(terms, cfg.hp).item())
            for w, t, row in zip(workers, terms, rows):
                w.opt.zero_grad(set_to_none=True)
                row.backward()
                w.set_lr(lr)
                w.opt.step()
                name = w.handle.name
                manifest.step_losses[name].append(row.item())
                meter.add(name, "dice", t.dice.item())
                if t.ps is not None:
                    meter.add(name, "ps", t.ps.item())
                if t.dfs is not None:
                    meter.add(name, "dfs", t.dfs.item())
                meter.add(name, "row", row.item())
            global_step += 1
        meter.flush(epoch, manifest.epoch_losses)
        if cfg.mask_granularity == "epoch":
            epoch_masks = {k: (0 if np.mean(v) > 0 else 1) for k, v in ce_acc.items()}
            ce_acc = {}
        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            _validate(workers, views, part, epoch, manifest, STAGE2)
            if epoch + 1 < cfg.epochs:
                _checkpoint(workers, out_dir, epoch)
        log.info("stage2 epoch %d/%d done (%.1fs)", epoch + 1, cfg.epochs, time.perf_counter() - t0)
    manifest.wall_clock = time.perf_counter() - t0
    handles = [w.handle for w in workers]
    if only is None:
        final = select_final_model(handles, combined, part)
        manifest.selected_model = final.name
        manifest.final_val = {h.name: evaluate_model(h, combined, part, with_assd=False)["mean_dsc"] for h in handles}
    if out_dir is not None:
        _checkpoint(workers, out_dir)
        manifest.write(out_dir)
    return handles, manifest


def rank_models(models: Sequence[ModelHandle], val_corpora, partition=None) -> list[float]:
    return [evaluate_model(m, val_corpora, partition, split="val", with_assd=False)["mean_dsc"] for m in models]


def select_final_model(models: Sequence[ModelHandle], val_corpora, partition=None) -> ModelHandle:
    """The model with the highest labeled-only mean validation DSC; ties go to the lower index."""
    if not models:
        raise ValueError("no models to select from")
    if not any(len(ds.indices("val")) for ds in val_corpora):
        raise ValueError("empty validation set")
    scores = rank_models(models, val_corpora, partition)
    best = 0
    for k, s in enumerate(scores):
        if s > scores[best]:
            best = k
    return models[best]
