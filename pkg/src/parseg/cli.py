"""``parseg`` command line: data generation, both training stages, pseudo labels, evaluation, ablation.

Config files are JSON with optional sections ``synth``, ``stage1`` and ``stage2``;
command-line flags override file values. Exit codes: 0 ok, 2 usage/config, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .core import DatasetError, load_dataset, partition_of, save_dataset, save_partition
from .metrics import evaluate_model, export_features, format_quality, format_report, pseudo_label_quality, write_report
from .pseudolabel import build_combined_corpus
from .segnet import ModelFileError, load_model
from .synthgen import GenerationError, SynthConfig, corpus_statistics, format_statistics, generate_corpus
from .trainer import TrainConfig, train_stage1, train_stage2

log = logging.getLogger("parseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
SECTIONS = ("synth", "stage1", "stage2")

STAGE1_ROWS = (
    ("off", {"pd": False, "fd": False}),
    ("pd", {"pd": True, "fd": False}),
    ("pd+fd", {"pd": True, "fd": True}),
)
STAGE2_ROWS = (
    ("baseline", {"ps": False, "fs_static": False, "dfs": False}),
    ("ps", {"ps": True, "fs_static": False, "dfs": False}),
    ("ps+fs", {"ps": True, "fs_static": True, "dfs": False}),
    ("ps+dfs", {"ps": True, "fs_static": False, "dfs": True}),
)
# stage-2 rows consume pseudo labels from this stage-1 row
PSEUDO_SOURCE_ROW = "pd+fd"


class UsageError(ValueError):
    pass


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return raw


def _default_seed(cli_seed: Optional[int]) -> Optional[int]:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("PARSEG_SEED")
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"PARSEG_SEED must be an integer, got {env!r}") from None


def synth_config(cfg: dict, seed: Optional[int] = None) -> SynthConfig:
    sc = SynthConfig.from_dict(cfg.get("synth", {}))
    if seed is not None:
        sc = replace(sc, seed=seed)
    sc.validate()
    return sc


def train_config(cfg: dict, stage: str, seed: Optional[int] = None, **toggles: bool) -> TrainConfig:
    tc = TrainConfig.from_dict(cfg.get(stage, {}))
    if seed is not None:
        tc.seed = seed
    for k, v in toggles.items():
        setattr(tc.toggles, k, v)
    tc.validate()
    return tc


def _load_corpora(dirs: Sequence[str]):
    out = []
    for d in dirs:
        if not Path(d).is_dir():
            raise UsageError(f"dataset directory not found: {d}")
        out.append(load_dataset(d))
    return out


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    sc = synth_config(cfg, _default_seed(args.seed))
    part, corpora = generate_corpus(sc)
    out = Path(args.out)
    for ds in corpora:
        save_dataset(ds, out / ds.dataset_id)
    save_partition(part, out / "partition.json")
    _write_json(out / "synth_config.json", sc.to_dict())
    print(format_statistics(corpus_statistics(part, corpora)))
    return EXIT_OK


def cmd_train_stage1(args) -> int:
    cfg = load_config(args.config)
    toggles = {}
    if args.no_pd:
        toggles["pd"] = False
    if args.no_fd:
        toggles["fd"] = False
    tc = train_config(cfg, "stage1", _default_seed(args.seed), **toggles)
    corpora = _load_corpora(args.data)
    _, manifest = train_stage1(corpora, tc, out_dir=args.out)
    print(f"stage 1 done in {manifest.wall_clock:.1f}s; artifacts in {args.out}")
    return EXIT_OK


def cmd_gen_pseudo(args) -> int:
    corpora = _load_corpora(args.data)
    models = []
    for i in range(len(corpora)):
        path = Path(args.models) / f"P{i + 1}.pt"
        if not path.exists():
            raise UsageError(f"missing stage-1 model for dataset {corpora[i].dataset_id}: {path}")
        models.append(load_model(path))
    for i, (m, ds) in enumerate(zip(models, corpora)):
        if m.role != "partial" or tuple(m.organs) != tuple(ds.organ_subset):
            raise UsageError(f"model P{i + 1}.pt does not match dataset {ds.dataset_id}")
    combined = build_combined_corpus(models, corpora, min_confidence=args.min_confidence)
    out = Path(args.out)
    for ds in combined:
        save_dataset(ds, out / ds.dataset_id)
    save_partition(partition_of(combined), out / "partition.json")
    if all(ds.full_gt is not None for ds in combined):
        q = pseudo_label_quality(combined, partition_of(corpora))
        _write_json(out / "pseudo_quality.json", q)
        (out / "pseudo_quality.txt").write_text(format_quality(q) + "\n")
        print(format_quality(q))
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    if args.fs_static and args.no_fs:
        raise UsageError("--fs-static and --no-fs are mutually exclusive")
    cfg = load_config(args.config)
    toggles = {}
    if args.no_ps:
        toggles["ps"] = False
    if args.fs_static:
        toggles.update(fs_static=True, dfs=False)
    if args.no_fs:
        toggles.update(fs_static=False, dfs=False)
    tc = train_config(cfg, "stage2", _default_seed(args.seed), **toggles)
    combined = _load_corpora(args.data)
    _, manifest = train_stage2(combined, tc, out_dir=args.out)
    print(f"stage 2 done in {manifest.wall_clock:.1f}s; selected model {manifest.selected_model}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        model = load_model(args.model)
    except ModelFileError as e:
        raise UsageError(str(e)) from None
    corpora = _load_corpora(args.data)
    part = partition_of(corpora)
    split = None if args.split == "all" else args.split
    report = evaluate_model(model, corpora, part, split=split)
    write_report(report, args.out)
    print(format_report(report))
    return EXIT_OK


def cmd_export_features(args) -> int:
    try:
        model = load_model(args.model)
    except ModelFileError as e:
        raise UsageError(str(e)) from None
    (ds,) = _load_corpora([args.data])
    export_features(model, ds, args.out)
    return EXIT_OK


def run_ablation(cfg: dict, seeds: Sequence[int], out_dir=None) -> dict:
    """Full pipeline for every toggle row and seed.

    Stage-1 rows are scored by mean pseudo-label DSC, stage-2 rows by the mean
    validation DSC of the selected final model. Returns ``{"stage1": {row:
    {seed: value}}, "stage2": {...}, "log": [...]}``.
    """
    results: dict = {"stage1": {r: {} for r, _ in STAGE1_ROWS}, "stage2": {r: {} for r, _ in STAGE2_ROWS}, "log": []}
    root = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        part, corpora = generate_corpus(synth_config(cfg, seed))
        sub = (lambda name: root / f"seed_{seed}" / name) if root is not None else (lambda name: None)
        source = None
        for row, tg in STAGE1_ROWS:
            tc = train_config(cfg, "stage1", seed, **tg)
            t0 = time.perf_counter()
            models, _ = train_stage1(corpora, tc, out_dir=sub(f"stage1_{row}"))
            combined = build_combined_corpus(models, corpora)
            q = pseudo_label_quality(combined, part)
            results["stage1"][row][seed] = q["mean_dsc"]
            results["log"].append(
                {"stage": 1, "row": row, "seed": seed, "value": q["mean_dsc"], "wall_clock": time.perf_counter() - t0}
            )
            log.info("seed %d stage1 %s: pseudo DSC %.4f", seed, row, q["mean_dsc"])
            if row == PSEUDO_SOURCE_ROW:
                source = combined
        for row, tg in STAGE2_ROWS:
            tc = train_config(cfg, "stage2", seed, **tg)
            t0 = time.perf_counter()
            _, manifest = train_stage2(source, tc, out_dir=sub(f"stage2_{row}"))
            value = manifest.final_val[manifest.selected_model]
            results["stage2"][row][seed] = value
            results["log"].append(
                {
                    "stage": 2,
                    "row": row,
                    "seed": seed,
                    "value": value,
                    "selected_model": manifest.selected_model,
                    "wall_clock": time.perf_counter() - t0,
                }
            )
            log.info("seed %d stage2 %s: val DSC %.4f", seed, row, value)
    return results


def ablation_csv(results: dict, seeds: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "row", *[f"seed_{s}" for s in seeds], "mean"])
    for stage in ("stage1", "stage2"):
        for row, per_seed in results[stage].items():
            vals = [per_seed[s] for s in seeds]
            w.writerow([stage, row, *[f"{v:.6f}" for v in vals], f"{sum(vals) / len(vals):.6f}"])
    return buf.getvalue()


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be a comma-separated list of integers, got {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError("--seeds needs at least one seed and no duplicates")
    return seeds


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seeds is not None:
        seeds = _parse_seeds(args.seeds)
    else:
        base = _default_seed(None)
        seeds = [0, 1, 2] if base is None else [base, base + 1, base + 2]
    # validate every row's config before any training starts
    synth_config(cfg)
    for _, tg in STAGE1_ROWS:
        train_config(cfg, "stage1", **tg)
    for _, tg in STAGE2_ROWS:
        train_config(cfg, "stage2", **tg)
    out = Path(args.out)
    results = run_ablation(cfg, seeds, out)
    (out / "ablation.csv").write_text(ablation_csv(results, seeds))
    with (out / "ablation_log.jsonl").open("w") as fh:
        for r in results["log"]:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print((out / "ablation.csv").read_text(), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parseg", description="Two-stage mutual learning for partially labeled segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic partially labeled corpus")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    s1 = sub.add_parser("train-stage1", help="train partial models with PD / FD")
    s1.add_argument("--data", nargs="+", required=True)
    s1.add_argument("--config")
    s1.add_argument("--out", required=True)
    s1.add_argument("--seed", type=int)
    s1.add_argument("--no-pd", action="store_true")
    s1.add_argument("--no-fd", action="store_true")
    s1.set_defaults(func=cmd_train_stage1)

    gp = sub.add_parser("gen-pseudo", help="pseudo-label every dataset with the other datasets' models")
    gp.add_argument("--models", required=True)
    gp.add_argument("--data", nargs="+", required=True)
    gp.add_argument("--out", required=True)
    gp.add_argument("--min-confidence", type=float, default=0.0)
    gp.set_defaults(func=cmd_gen_pseudo)

    s2 = sub.add_parser("train-stage2", help="train full models with PS / DFS on combined labels")
    s2.add_argument("--data", nargs="+", required=True)
    s2.add_argument("--config")
    s2.add_argument("--out", required=True)
    s2.add_argument("--seed", type=int)
    s2.add_argument("--no-ps", action="store_true")
    s2.add_argument("--fs-static", action="store_true", help="ungated feature similarity instead of DFS")
    s2.add_argument("--no-fs", action="store_true", help="no feature similarity term at all")
    s2.set_defaults(func=cmd_train_stage2)

    ev = sub.add_parser("evaluate", help="per-organ DSC / ASSD report")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", nargs="+", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", choices=["val", "train", "all"], default="val")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="toggle-row sweep over seeds")
    ab.add_argument("--config")
    ab.add_argument("--out", required=True)
    ab.add_argument("--seeds")
    ab.set_defaults(func=cmd_ablate)

    ex = sub.add_parser("export-features", help="bottleneck features as CSV")
    ex.add_argument("--model", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_features)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except GenerationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (UsageError, DatasetError, ModelFileError, ValueError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
