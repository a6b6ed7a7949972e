"""Command-line pipeline: synth, discover, cf, train, eval, pipeline.

Every artifact lives under ``<out>/seed_<n>/`` and carries the seed, the
config hash, the producing stage and the artifact version. Detector variants
go into ``ae/`` (pre-trained only) and ``cfad/`` (adversarially fine-tuned).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .counterfactual import counterfactual_dataset
from .datasets import (DatasetSchema, ParseError, SchemaError, SizingError, load_csv,
                       read_dataset_csv, write_dataset_csv)
from .detector import (SWEEP_QUANTILES, DetectorConfig, DetectorParams, fit_threshold,
                       finetune_adversarial, pretrain)
from .evaluation import EvalReport, config_hash, evaluate, mean_reports
from .numerics import ContractError
from .scm import (BenchmarkParams, GenerationError, build_benchmark, ground_truth_counterfactual)
from .structure import GaeConfig, NonConvergenceError, ScmEstimate, TrainingError, learn_scm
from .detector import TrainingError as DetectorTrainingError

log = logging.getLogger("cfad")

OUT_ENV = "CFAD_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_MISSING = 0, 2, 3, 4
VARIANTS = ("ae", "cfad")


class ConfigError(ValueError):
    pass


class MissingArtifactError(RuntimeError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"{stage}: missing upstream artifact {path}")
        self.path = path


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def _section(prefix: str, obj) -> dict:
    return {f"{prefix}.{f.name}": getattr(obj, f.name) for f in fields(obj)
            if f.name != "seed"}


def default_config() -> dict:
    cfg = {
        "seed": 0,
        "data.source": "synthetic",
        "data.schema": "adult",
        "finetune": True,
        "cf.path": "refit",
        "eval.quantile": 0.95,
        "eval.sweep": list(SWEEP_QUANTILES),
        "eval.reference": "auto",
    }
    cfg.update(_section("synth", BenchmarkParams()))
    cfg.update(_section("gae", GaeConfig()))
    cfg.update(_section("detector", DetectorConfig()))
    return cfg


def _coerce(key: str, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        return [float(v) for v in value]
    return value


def merge_config(file_cfg: dict | None, overrides: dict | None) -> dict:
    """defaults < file < flags; unknown keys are rejected."""
    cfg = default_config()
    for layer in (file_cfg or {}, overrides or {}):
        for key, value in layer.items():
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, cfg[key])
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)
    need(0.0 < cfg["synth.edge_prob"] <= 1.0, f"synth.edge_prob must lie in (0, 1], got {cfg['synth.edge_prob']}")
    need(cfg["synth.nodes"] >= 2, "synth.nodes must be at least 2")
    need(0 < cfg["synth.weight_low"] <= cfg["synth.weight_high"], "need 0 < weight_low <= weight_high")
    need(0.0 <= cfg["synth.flip_fraction"] <= 1.0, "synth.flip_fraction must lie in [0, 1]")
    need(0.0 <= cfg["eval.quantile"] <= 1.0, "eval.quantile must lie in [0, 1]")
    need(all(0.0 <= q <= 1.0 for q in cfg["eval.sweep"]), "sweep quantiles must lie in [0, 1]")
    need(cfg["cf.path"] in ("refit", "gae"), "cf.path must be refit or gae")
    need(cfg["eval.reference"] in ("auto", "truth", "estimated"), "eval.reference must be auto, truth or estimated")
    need(cfg["gae.prune_eps"] >= 0.0, "gae.prune_eps must be non-negative")
    for key in ("detector.pretrain_epochs", "detector.finetune_epochs", "gae.inner_steps", "gae.max_outer"):
        need(cfg[key] >= 0, f"{key} must be non-negative")
    for key in ("detector.lr_pretrain", "detector.lr_finetune", "detector.lr_disc", "gae.lr"):
        need(cfg[key] > 0, f"{key} must be positive")
    need(cfg["detector.batch_size"] >= 1, "detector.batch_size must be positive")
    need(cfg["gae.restarts"] >= 1, "gae.restarts must be at least 1")


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object of dotted keys")
    return doc


def _hashable(cfg: dict) -> dict:
    return {k: v for k, v in cfg.items() if k != "seed"}


def _build(cls, cfg: dict, prefix: str, **extra):
    kw = {f.name: cfg[f"{prefix}.{f.name}"] for f in fields(cls) if f"{prefix}.{f.name}" in cfg}
    kw.update(extra)
    return cls(**kw)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

class Run:
    """Paths and provenance for one seed."""

    def __init__(self, cfg: dict, out: Path, seed: int):
        self.cfg = dict(cfg, seed=seed)
        self.seed = seed
        self.hash = config_hash(_hashable(self.cfg))
        self.root = Path(out) / f"seed_{seed}"

    def path(self, name: str) -> Path:
        return self.root / name

    def meta(self, stage: str) -> dict:
        return {"seed": self.seed, "config_hash": self.hash, "stage": stage,
                "artifact_version": __version__}

    def comment(self, stage: str) -> str:
        m = self.meta(stage)
        return " ".join(f"{k}={v}" for k, v in m.items())

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise MissingArtifactError(p, stage)
        return p

    def write_json(self, name: str, stage: str, payload: dict) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        doc = {"meta": self.meta(stage), **payload}
        p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return p

    def read_json(self, name: str, stage: str) -> dict:
        return json.loads(self.require(name, stage).read_text(encoding="utf-8"))

    def write_rows(self, name: str, stage: str, header: list[str], rows) -> Path:
        p = self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# {self.comment(stage)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        return p


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def cmd_synth(run: Run) -> list[Path]:
    cfg = run.cfg
    if cfg["data.source"] != "synthetic":
        return cmd_ingest(run)
    params = _build(BenchmarkParams, cfg, "synth")
    bench = build_benchmark(params, seed=run.seed)
    out = []
    for split, data in (("train", bench.train), ("test", bench.test)):
        p = run.path(f"{split}.csv")
        write_dataset_csv(p, data, header_comment=run.comment("synth"))
        cf = ground_truth_counterfactual(bench.spec, data)
        cf.y = None
        pc = run.path(f"{split}_cf_true.csv")
        write_dataset_csv(pc, cf, cf_of=data.ids, header_comment=run.comment("synth"))
        out += [p, pc]
    out.append(run.write_json("benchmark.json", "synth", {
        "source": "synthetic",
        "dag": bench.spec.to_dict(),
        "bands": asdict(bench.bands),
        "params": asdict(params),
        "nodes": list(bench.train.nodes) if bench.train.nodes is not None else None,
        "train_cf_label": bench.train_cf_label.tolist(),
        "test_cf_label": bench.test_cf_label.tolist(),
    }))
    return out


def cmd_ingest(run: Run) -> list[Path]:
    cfg = run.cfg
    schema_ref = cfg["data.schema"]
    schema = (DatasetSchema.load(schema_ref) if Path(schema_ref).suffix == ".json"
              else DatasetSchema.builtin(schema_ref))
    src = Path(cfg["data.source"])
    if not src.exists():
        raise MissingArtifactError(src, "synth")
    train, test, enc = load_csv(src, schema, seed=run.seed)
    paths = []
    for split, data in (("train", train), ("test", test)):
        p = run.path(f"{split}.csv")
        write_dataset_csv(p, data, header_comment=run.comment("synth"))
        paths.append(p)
    paths.append(run.write_json("benchmark.json", "synth", {
        "source": str(src), "schema": schema.name, "encoder": enc.to_dict(),
        "features": enc.feature_names(schema), "dropped_rows": train.meta["dropped_rows"]}))
    return paths


def cmd_discover(run: Run) -> list[Path]:
    train, _ = read_dataset_csv(run.require("train.csv", "discover"))
    config = _build(GaeConfig, run.cfg, "gae", seed=run.seed)
    est, gae = learn_scm(train, config)
    return [run.write_json("scm.json", "discover", {
        "estimate": est.to_dict(), "history": gae.history})]


def cmd_cf(run: Run) -> list[Path]:
    est = ScmEstimate.from_dict(run.read_json("scm.json", "cf")["estimate"])
    out = []
    for split in ("train", "test"):
        data, _ = read_dataset_csv(run.require(f"{split}.csv", "cf"))
        cf = counterfactual_dataset(est, data, run.cfg["cf.path"])
        p = run.path(f"{split}_cf.csv")
        write_dataset_csv(p, cf, cf_of=data.ids, header_comment=run.comment("cf"))
        out.append(p)
    return out


def cmd_train(run: Run) -> list[Path]:
    cfg = run.cfg
    train, _ = read_dataset_csv(run.require("train.csv", "train"))
    config = _build(DetectorConfig, cfg, "detector", seed=run.seed)
    ae = pretrain(train, config)
    out = [_save_detector(run, "ae", ae, train, cfg["eval.quantile"])]
    if cfg["finetune"]:
        train_cf, _ = read_dataset_csv(run.require("train_cf.csv", "train"))
        fair, disc = finetune_adversarial(ae, train, train_cf, config=config)
        out.append(_save_detector(run, "cfad", fair, train, cfg["eval.quantile"],
                                  {"discriminator": disc.to_dict()}))
    return out


def _save_detector(run: Run, variant: str, params: DetectorParams, train, q: float,
                   extra: dict | None = None) -> Path:
    thr = fit_threshold(params, train, q)
    payload = {"variant": variant, "detector": params.to_dict(), "threshold": thr.to_dict(),
               "history": params.history}
    payload.update(extra or {})
    return run.write_json(f"{variant}/detector.json", "train", payload)


def _reference(run: Run) -> tuple[Path, str]:
    mode = run.cfg["eval.reference"]
    truth = run.path("test_cf_true.csv")
    if mode == "truth" or (mode == "auto" and truth.exists()):
        return run.require("test_cf_true.csv", "eval"), "truth"
    return run.require("test_cf.csv", "eval"), "estimated"


def cmd_eval(run: Run, sweep: bool = True) -> dict[str, EvalReport]:
    cfg = run.cfg
    train, _ = read_dataset_csv(run.require("train.csv", "eval"))
    test, _ = read_dataset_csv(run.require("test.csv", "eval"))
    ref_path, ref_kind = _reference(run)
    test_cf, cf_of = read_dataset_csv(ref_path)
    if cf_of is not None and not np.array_equal(cf_of, test.ids):
        raise ContractError(f"{ref_path} rows are not aligned with test.csv")
    variants = [v for v in VARIANTS if run.path(f"{v}/detector.json").exists()]
    if not variants:
        raise MissingArtifactError(run.path("ae/detector.json"), "eval")
    reports = {}
    for v in variants:
        params = DetectorParams.from_dict(run.read_json(f"{v}/detector.json", "eval")["detector"])
        rep = evaluate(params, train.x, test.x, test_cf.x, test.y, cfg["eval.quantile"],
                       groups=test.s, ids=test.ids, sweep=False,
                       meta=dict(run.meta("eval"), variant=v, reference=ref_kind))
        if sweep:
            from .evaluation import tradeoff_sweep
            rep.sweep = tradeoff_sweep(params, train.x, test.x, test_cf.x, test.y, cfg["eval.sweep"])
        _write_report(run, v, rep)
        reports[v] = rep
    return reports


def _write_report(run: Run, variant: str, rep: EvalReport) -> None:
    run.write_json(f"{variant}/report.json", "eval", {k: v for k, v in rep.to_dict().items() if k != "meta"}
                   | {"variant": variant, "reference": rep.meta.get("reference")})
    s = rep.summary()
    run.write_rows(f"{variant}/summary.csv", "eval", list(s), [[_fmt(v) for v in s.values()]])
    run.write_rows(f"{variant}/sweep.csv", "eval", ["q", "tau", "macro_f1", "changing_ratio"],
                   [[_fmt(r.q), _fmt(r.tau), _fmt(r.macro_f1), _fmt(r.changing_ratio)] for r in rep.sweep])
    run.write_rows(f"{variant}/scores.csv", "eval",
                   ["sample_id", "group", "score", "score_cf", "pred", "pred_cf"],
                   [[int(i), int(g), _fmt(a), _fmt(b), int(p), int(pc)] for i, g, a, b, p, pc in
                    zip(rep.ids, rep.groups, rep.scores, rep.scores_cf, rep.preds, rep.preds_cf)])


STAGES = {"synth": cmd_synth, "discover": cmd_discover, "cf": cmd_cf, "train": cmd_train}


def cmd_pipeline(run: Run, sweep: bool = True) -> dict[str, EvalReport]:
    artifacts: list[str] = []
    for name in ("synth", "discover", "cf", "train"):
        log.info("seed %d: %s", run.seed, name)
        artifacts += [str(p.relative_to(run.root)) for p in STAGES[name](run)]
    reports = cmd_eval(run, sweep)
    for v in reports:
        artifacts += [f"{v}/{n}" for n in ("report.json", "summary.csv", "sweep.csv", "scores.csv")]
    run.write_json("manifest.json", "pipeline", {
        "config": run.cfg, "artifacts": {a: run.hash for a in artifacts}})
    return reports


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfad", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["synth", "discover", "cf", "train", "eval", "pipeline"])
    parser.add_argument("--config", type=Path, help="JSON file of dotted config keys")
    parser.add_argument("--seed", type=int, help="run seed (first seed with --runs)")
    parser.add_argument("--out", type=Path, help=f"output root (default ${OUT_ENV} or ./runs)")
    parser.add_argument("--runs", type=int, default=1, help="number of consecutive seeds")
    parser.add_argument("--no-finetune", action="store_true", help="train the vanilla AE baseline only")
    parser.add_argument("--quantile", type=float, help="threshold quantile q")
    parser.add_argument("--sweep", action="store_true", help="write the quantile sweep table")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any dotted config key (JSON value)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    if args.seed is not None:
        out["seed"] = args.seed
    if args.no_finetune:
        out["finetune"] = False
    if args.quantile is not None:
        out["eval.quantile"] = args.quantile
    return out


def _write_mean(out: Path, cfg: dict, reports: dict[str, list[EvalReport]]) -> None:
    doc = {"config_hash": config_hash(_hashable(cfg)), "stage": "aggregate",
           "artifact_version": __version__,
           "variants": {v: mean_reports(r) for v, r in reports.items()}}
    out.mkdir(parents=True, exist_ok=True)
    (out / "mean_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = load_config_file(args.config) if args.config else None
        cfg = merge_config(file_cfg, _overrides(args))
        if args.runs < 1:
            raise ConfigError("--runs must be at least 1")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(os.environ.get(OUT_ENV, "runs"))
    collected: dict[str, list[EvalReport]] = {}
    try:
        for k in range(args.runs):
            run = Run(cfg, out, cfg["seed"] + k)
            if args.command == "pipeline":
                reports = cmd_pipeline(run, sweep=args.sweep)
            elif args.command == "eval":
                reports = cmd_eval(run, sweep=args.sweep)
            else:
                STAGES[args.command](run)
                continue
            for v, rep in reports.items():
                collected.setdefault(v, []).append(rep)
                print(json.dumps({"seed": run.seed, "variant": v, **rep.summary()}))
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (SchemaError, ParseError, SizingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, NonConvergenceError, TrainingError, DetectorTrainingError,
            ContractError, ValueError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if collected and args.runs > 1:
        _write_mean(out, cfg, collected)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
