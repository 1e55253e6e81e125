"""Experiment runner.

    crl run --config exp.yaml [--seeds 1,2] [--memory-size 5] [--variant no_kd] [--out dir]
    crl export-embeddings --config exp.yaml --task 4 --out emb.tsv

The config is a YAML mapping of flat fields plus an optional ``synthetic``
block; see ``configs/default.yaml`` in the repository.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .continual import AccuracyMatrix, ContinualLearner, TrainConfig, run_sequence
from .data import (Dataset, TaskStream, imbalanced_counts, load_jsonl, split_tasks,
                   synth_stream, total_for_train)
from .prototypes import compute_prototypes, ncm_predict

log = logging.getLogger("crl")

VARIANTS = ("full", "no_kd", "no_cr", "no_replay")
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)} - {"seed", "ablate_kd", "ablate_cr"}


class ConfigError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    classes: int = 40
    dim: int = 32
    train_per_class: int = 100
    # [low, high] training counts per class; overrides train_per_class
    imbalanced: Optional[List[int]] = None
    sigma: float = 1.0
    center_scale: float = 1.0


@dataclass
class ExperimentConfig:
    tasks: int = 10
    seeds: List[int] = field(default_factory=lambda: [1])
    variants: List[str] = field(default_factory=lambda: ["full"])
    memory_sizes: List[int] = field(default_factory=lambda: [10])
    out: str = "runs"
    path: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    data_seed: Optional[int] = None
    train: Dict = field(default_factory=dict)

    def validate(self) -> None:
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError("exactly one of 'path' or 'synthetic' must be given")
        if not self.seeds:
            raise ConfigError("seeds: must be a non-empty list")
        if self.tasks < 1:
            raise ConfigError("tasks: must be >= 1")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"variants: unknown variant {v!r}, expected one of {VARIANTS}")
        if not self.memory_sizes or any(int(m) < 1 for m in self.memory_sizes):
            raise ConfigError("memory_size: must be >= 1")
        try:
            self.train_config(self.seeds[0], self.variants[0], self.memory_sizes[0])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train settings: {exc}") from None

    def train_config(self, seed: int, variant: str, memory_size: int) -> TrainConfig:
        kw = dict(self.train)
        kw["memory_size"] = int(memory_size)
        kw["seed"] = int(seed)
        if variant == "no_kd":
            kw["ablate_kd"] = True
        elif variant == "no_cr":
            kw["ablate_cr"] = True
        elif variant == "no_replay":
            kw["epochs_replay"] = 0
        return TrainConfig(**kw)

    def echo(self) -> Dict:
        d = {k: getattr(self, k) for k in
             ("tasks", "seeds", "variants", "memory_sizes", "out", "path", "data_seed")}
        d["synthetic"] = None if self.synthetic is None else vars(self.synthetic).copy()
        d["train"] = TrainConfig(**self.train).as_dict()
        return d


def _as_list(value, name, cast=int):
    if isinstance(value, (list, tuple)):
        items = value
    elif isinstance(value, str):
        items = [v for v in value.split(",") if v.strip()]
    else:
        items = [value]
    try:
        return [cast(v) for v in items]
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def parse_config(raw: Dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of named fields")
    raw = dict(raw)
    cfg = ExperimentConfig()
    if "synthetic" in raw:
        block = raw.pop("synthetic") or {}
        unknown = set(block) - {f.name for f in fields(SyntheticSpec)}
        if unknown:
            raise ConfigError(f"synthetic: unknown field(s) {sorted(unknown)}")
        cfg.synthetic = SyntheticSpec(**block)
    if "path" in raw:
        cfg.path = raw.pop("path")
    for key in ("tasks", "K"):
        if key in raw:
            try:
                cfg.tasks = int(raw.pop(key))
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: must be an integer") from None
    if "seeds" in raw:
        cfg.seeds = _as_list(raw.pop("seeds"), "seeds")
    if "variant" in raw:
        raw["variants"] = raw.pop("variant")
    if "variants" in raw:
        cfg.variants = _as_list(raw.pop("variants"), "variants", str)
    if "memory_size" in raw:
        raw["memory_sizes"] = raw.pop("memory_size")
    if "memory_sizes" in raw:
        cfg.memory_sizes = _as_list(raw.pop("memory_sizes"), "memory_size")
    if "out" in raw:
        cfg.out = str(raw.pop("out"))
    if "data_seed" in raw:
        cfg.data_seed = raw.pop("data_seed")
    for key in list(raw):
        if key in TRAIN_FIELDS:
            cfg.train[key] = raw.pop(key)
    if raw:
        raise ConfigError(f"unknown field(s): {sorted(raw)}")
    cfg.validate()
    return cfg


def load_config(path, overrides: Optional[Dict] = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if isinstance(raw, dict):
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return parse_config(raw)


def build_stream(cfg: ExperimentConfig, seed: int) -> TaskStream:
    """Task stream for one seed. The seed also drives synthesis unless data_seed is set."""
    data_seed = seed if cfg.data_seed is None else cfg.data_seed
    if cfg.path is not None:
        dataset = load_jsonl(cfg.path)
    else:
        spec = cfg.synthetic
        if spec.imbalanced:
            low, high = spec.imbalanced
            train_counts = imbalanced_counts(spec.classes, low, high, seed=data_seed)
        else:
            train_counts = np.full(spec.classes, spec.train_per_class)
        counts = [total_for_train(int(c)) for c in train_counts]
        dataset = synth_stream(spec.classes, spec.dim, counts, spec.sigma,
                               spec.center_scale, seed=data_seed)
    return split_tasks(dataset, cfg.tasks, seed)


def write_atomic(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def row_name(variant: str, memory_size: int, sweep: bool) -> str:
    return f"{variant}@O={memory_size}" if sweep else variant


@dataclass
class Report:
    config: Dict
    matrices: Dict[str, Dict[int, AccuracyMatrix]]
    wall_time: float = 0.0

    def final_accuracies(self, row: str) -> np.ndarray:
        return np.array([m.overall[-1] for m in self.matrices[row].values()])

    def aggregate(self, row: str):
        """Mean and population std of the overall accuracy per step over seeds."""
        stack = np.array([m.overall for m in self.matrices[row].values()])
        return stack.mean(axis=0), stack.std(axis=0)

    def summary_csv(self) -> str:
        K = self.config["tasks"]
        lines = [",".join(["variant"] + [f"T{k + 1}" for k in range(K)])]
        for row in self.matrices:
            mean, _ = self.aggregate(row)
            lines.append(",".join([row] + [f"{100 * v:.2f}" for v in mean]))
        return "\n".join(lines) + "\n"

    def summary_table(self) -> str:
        K = self.config["tasks"]
        width = max(len(r) for r in self.matrices) + 2
        head = "Variant".ljust(width) + "".join(f"{'T' + str(k + 1):>14}" for k in range(K))
        out = [head]
        for row in self.matrices:
            mean, std = self.aggregate(row)
            cells = "".join(f"{100 * m:>8.1f} ±{100 * s:>4.1f}" for m, s in zip(mean, std))
            out.append(row.ljust(width) + cells)
        return "\n".join(out) + "\n"

    def summary_json(self) -> str:
        doc = {"config": self.config, "wall_time_s": round(self.wall_time, 3), "rows": {}}
        for row, per_seed in self.matrices.items():
            mean, std = self.aggregate(row)
            doc["rows"][row] = {
                "seeds": list(per_seed),
                "mean": mean.tolist(),
                "std": std.tolist(),
                "per_seed_overall": {str(s): m.overall.tolist() for s, m in per_seed.items()},
            }
        return json.dumps(doc, indent=2, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[Path] = None) -> Report:
    """Run every variant x memory size x seed with a fresh learner each time.

    Matrix files are written as each run finishes, so a failure part-way keeps
    the completed ones.
    """
    start = time.perf_counter()
    sweep = len(cfg.memory_sizes) > 1
    report = Report(cfg.echo(), {})
    for variant in cfg.variants:
        for O in cfg.memory_sizes:
            row = row_name(variant, O, sweep)
            report.matrices[row] = {}
            for seed in cfg.seeds:
                stream = build_stream(cfg, seed)
                matrix, _ = run_sequence(stream, cfg.train_config(seed, variant, O))
                report.matrices[row][seed] = matrix
                if out_dir is not None:
                    name = f"matrix_{row.replace('@O=', '_O')}_seed{seed}.csv"
                    write_atomic(Path(out_dir) / name, matrix.to_csv())
                log.info("%s seed %d: final accuracy %.4f", row, seed, matrix.overall[-1])
    report.wall_time = time.perf_counter() - start
    if out_dir is not None:
        out_dir = Path(out_dir)
        write_atomic(out_dir / "summary.csv", report.summary_csv())
        write_atomic(out_dir / "summary.txt", report.summary_table())
        write_atomic(out_dir / "summary.json", report.summary_json())
    return report


def export_embeddings(learner: ContinualLearner, dataset: Dataset, path) -> None:
    """Tab-separated rows: id, true label, NCM-predicted label, embedding coordinates."""
    Z = learner.embed(dataset.features)
    _, labels, feats = learner.memory.contents()
    Zm = learner.embed(feats)
    protos = compute_prototypes({c: Zm[labels == c] for c in learner.memory.observed})
    pred = ncm_predict(Z, protos)
    lines = []
    for i, y, p, z in zip(dataset.ids, dataset.labels, pred, Z):
        cells = [str(int(i)), dataset.vocab[y], dataset.vocab[p]] + [repr(float(v)) for v in z]
        lines.append("\t".join(cells))
    write_atomic(Path(path), "\n".join(lines) + "\n")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the continual-learning experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seeds", help="comma-separated seeds")
    r.add_argument("--memory-size", help="memory size, or comma-separated sweep")
    r.add_argument("--variant", help="one or more of " + ",".join(VARIANTS))
    r.add_argument("--out", help="output directory")

    e = sub.add_parser("export-embeddings", help="train through a task and dump embeddings")
    e.add_argument("--config", required=True)
    e.add_argument("--task", type=int, required=True, help="train through this task")
    e.add_argument("--of-task", type=int, default=1,
                   help="whose test set to export (default: task 1)")
    e.add_argument("--seed", type=int, help="defaults to the first configured seed")
    e.add_argument("--out", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        overrides = {"seeds": args.seeds, "memory_size": args.memory_size,
                     "variant": args.variant, "out": args.out}
    else:
        overrides = {}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "run":
            report = run_experiment(cfg, Path(cfg.out))
            sys.stdout.write(report.summary_table())
            return 0
        seed = cfg.seeds[0] if args.seed is None else args.seed
        stream = build_stream(cfg, seed)
        if not 1 <= args.of_task <= args.task <= len(stream):
            print(f"error: need 1 <= --of-task <= --task <= {len(stream)}", file=sys.stderr)
            return 2
        tc = cfg.train_config(seed, cfg.variants[0], cfg.memory_sizes[0])
        _, learner = run_sequence(stream, tc, stop_after=args.task)
        export_embeddings(learner, stream.tasks[args.of_task - 1].test, args.out)
        return 0
    except Exception as exc:  # report and keep whatever was already written
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
