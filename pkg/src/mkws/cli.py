"""Command-line entry point.

Every subcommand takes its parameters from built-in defaults, then an
optional YAML file (``--config``; flat keys or a section named after the
subcommand), then explicit flags.  The merged values are written to
``resolved_config.yaml`` in the output directory.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 constraint violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import yaml

from .errors import ConfigError, ConstraintViolation, DataError, MkwsError

log = logging.getLogger("mkws")

COMMON = {"seed": 0, "scale": "desk"}

# subcommand -> (defaults, help); every default key becomes a --flag
COMMANDS = {
    "gen-lab": ({"out": "runs/lab", "records": 900, "write_audio": False},
                "simulate the lab recording protocol and extract features"),
    "gen-train": ({"out": "runs/corpora", "splits": "train,dev,test", "train": None, "dev": None, "test": None},
                  "simulate train/dev/test keyword corpora"),
    "train-base": ({"data": "runs/corpora/train", "out": "runs/models", "name": "base", "preset": "base",
                    "channel": "omni", "epochs": 20, "train_config": None},
                   "train a base detector from scratch"),
    "finetune": ({"data": "runs/corpora/train", "base": "runs/models/base.ckpt", "out": "runs/models",
                  "name": "base_anc", "channel": "anc", "epochs": 8, "train_config": None},
                 "fine-tune a base detector on another channel"),
    "train-attention": ({"data": "runs/corpora/train", "base": "runs/models/base.ckpt", "out": "runs/models",
                         "name": None, "mode": "omni+anc", "epochs": 8, "freeze_epochs": 0, "train_config": None},
                        "add the attention keys network and fine-tune"),
    "calibrate": ({"model": "runs/models/base.ckpt", "approach": None, "dev": "runs/corpora/dev",
                   "out": "runs/calibration", "target_fah": 0.1, "grid_step": 0.001},
                  "calibrate thresholds on the dev split"),
    "evaluate": ({"model": "runs/models/base.ckpt", "approach": "base", "dev": "runs/corpora/dev", "test": None,
                  "out": "runs/eval", "target_fah": 0.1},
                 "calibrate one approach on dev and report FRR and FA/h"),
    "snr-curves": ({"base": "runs/models/base.ckpt", "dev": "runs/corpora/dev", "lab": "runs/lab",
                    "out": "runs/curves", "target_fah": 0.1, "frr_level": 0.5},
                   "FRR-vs-SNR curves on the lab set and SNR gains"),
    "compare": ({"models": "runs/models", "dev": "runs/corpora/dev", "test": "runs/corpora/test",
                 "out": "runs/compare", "target_fah": 0.1},
                "calibrate and score all six approaches"),
    "bench": ({"out": "runs/bench", "duration": 10.0, "repeats": 5, "components": "bf6,anc," +
               "base,base_anc,base_x2,ensemble_anc,attention_bf,attention_anc"},
              "real-time factor and model size"),
    "export-plots": ({"run": "runs", "out": "runs/plots"}, "collect plot-ready CSV files from a run"),
    "recipe": ({"out": "runs/recipe", "pipeline": None, "skip_lab": False}, "run the whole pipeline"),
}


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mkws", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, (defaults, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="YAML file with parameters (flags override it)")
        sp.add_argument("--log-level", default="INFO")
        for key, value in {**COMMON, **defaults}.items():
            if isinstance(value, bool):
                sp.add_argument(_flag(key), dest=key, action=argparse.BooleanOptionalAction, default=None,
                                help=f"default {value}")
            elif isinstance(value, (int, float, str)):
                sp.add_argument(_flag(key), dest=key, type=type(value), default=None, help=f"default {value}")
            else:
                sp.add_argument(_flag(key), dest=key, type=yaml.safe_load, default=None,
                                help="YAML/JSON mapping (usually set in the config file)")
    return p


def resolve(command, args) -> dict:
    defaults = {**COMMON, **COMMANDS[command][0]}
    cfg = dict(defaults)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        doc = yaml.safe_load(path.read_text()) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        section = doc.get(command, {})
        flat = {k: v for k, v in doc.items() if k in defaults}
        unknown = set(section) - set(defaults)
        if unknown:
            raise ConfigError(f"{path}: unknown keys for {command}: {sorted(unknown)}")
        cfg.update(flat)
        cfg.update(section)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _write_resolved(out_dir, command, cfg):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(yaml.safe_dump({"command": command, **cfg}, sort_keys=True))
    return out


def _train_config(cfg, epochs_key="epochs", **extra):
    from .training import TrainConfig

    d = dict(cfg.get("train_config") or {})
    d.update(epochs=cfg[epochs_key], seed=cfg["seed"], **extra)
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad train_config: {exc}") from None


def _corpus(path):
    from .corpus import FeatureCorpus

    return FeatureCorpus(path)


# -- commands ----------------------------------------------------------------

def cmd_gen_lab(cfg):
    from .pipeline import generate_lab

    out = _write_resolved(cfg["out"], "gen-lab", cfg)
    fc = generate_lab(out, cfg["records"], cfg["seed"], cfg["write_audio"])
    log.info("wrote %d lab records to %s", len(fc), out / "manifest.jsonl")


def cmd_gen_train(cfg):
    from .pipeline import PipelineConfig, generate_corpora

    pc = PipelineConfig(seed=cfg["seed"])
    for split in ("train", "dev", "test"):
        if cfg.get(split):
            setattr(pc, split, {**getattr(pc, split), **cfg[split]})
    splits = [s.strip() for s in cfg["splits"].split(",") if s.strip()]
    bad = set(splits) - {"train", "dev", "test"}
    if bad:
        raise ConfigError(f"unknown splits {sorted(bad)}")
    out = _write_resolved(cfg["out"], "gen-train", cfg)
    generate_corpora(pc, out, splits)


def cmd_train_base(cfg):
    from .net import build_base, save_checkpoint
    from .training import train_base

    model = build_base(cfg["scale"], cfg["seed"] + 101, cfg["preset"], cfg["channel"])
    data, tc = _corpus(cfg["data"]), _train_config(cfg)
    out = _write_resolved(cfg["out"], "train-base", cfg)
    model, tlog = train_base(data, tc, model, cfg["channel"])
    save_checkpoint(out / f"{cfg['name']}.ckpt", model, {"approach": cfg["name"], "channel": cfg["channel"]})
    tlog.write_csv(out / f"{cfg['name']}_train_log.csv")


def cmd_finetune(cfg):
    from .net import save_checkpoint
    from .training import finetune_channel

    data, tc = _corpus(cfg["data"]), _train_config(cfg)
    out = _write_resolved(cfg["out"], "finetune", cfg)
    model, tlog = finetune_channel(cfg["base"], data, cfg["channel"], tc)
    save_checkpoint(out / f"{cfg['name']}.ckpt", model, {"approach": cfg["name"], "channel": cfg["channel"]})
    tlog.write_csv(out / f"{cfg['name']}_train_log.csv")


def cmd_train_attention(cfg):
    from .frontend import bank_tags
    from .net import save_checkpoint
    from .training import finetune_attention

    tags = bank_tags(cfg["mode"])
    name = cfg["name"] or ("attention_anc" if cfg["mode"] == "omni+anc" else "attention_bf")
    data, tc = _corpus(cfg["data"]), _train_config(cfg, freeze_epochs=cfg["freeze_epochs"])
    out = _write_resolved(cfg["out"], "train-attention", cfg)
    model, tlog = finetune_attention(cfg["base"], data, tags, tc, cfg["scale"], cfg["seed"] + 104)
    save_checkpoint(out / f"{name}.ckpt", model, {"approach": name})
    tlog.write_csv(out / f"{name}_train_log.csv")


def _approach_for(path, name=None):
    from .net import load_checkpoint
    from .pipeline import load_approach

    if not Path(path).exists():
        raise DataError(f"checkpoint {path} not found")
    if name is None:
        _, meta = load_checkpoint(path)
        name = meta.get("approach") or Path(path).stem
    return load_approach(name, path)


def cmd_calibrate(cfg):
    from .evaluation import EvalCorpus, confidence_table, calibrate_threshold, run_detector
    from .training import grid_search_thresholds

    a = _approach_for(cfg["model"], cfg["approach"])
    dev_fc = _corpus(cfg["dev"])
    dev = EvalCorpus.from_features(dev_fc, "dev")
    out = _write_resolved(cfg["out"], "calibrate", cfg)
    tags = a.tags if a.mode == "ensemble" else (a.name,)
    table = confidence_table(run_detector(a.model, dev_fc, a.mode, a.tags), dev, tags)
    table.write_jsonl(out / f"{a.name}_confidences.jsonl")
    if a.mode == "ensemble":
        tv = grid_search_thresholds(table, cfg["target_fah"], cfg["grid_step"])
        result = {"approach": a.name, **tv.to_dict()}
        violated = tv.violated
    else:
        cal = calibrate_threshold(table, cfg["target_fah"], cfg["grid_step"])
        result = {"approach": a.name, "thresholds": [cal.threshold], "frr": cal.frr,
                  "fa_per_hour": cal.fa_per_hour, "violated": cal.violated}
        violated = cal.violated
    (out / f"{a.name}_thresholds.json").write_text(json.dumps(result, indent=1, default=list))
    if violated:
        raise ConstraintViolation(f"{a.name}: FA/h target {cfg['target_fah']} unreachable on the threshold grid")


def cmd_evaluate(cfg):
    from .evaluation import EvalCorpus, calibrate_approach, run_detector, score_tracks, write_report_csv

    a = _approach_for(cfg["model"], cfg["approach"])
    dev_fc = _corpus(cfg["dev"])
    out = _write_resolved(cfg["out"], "evaluate", cfg)
    thr, violated = calibrate_approach(run_detector(a.model, dev_fc, a.mode, a.tags),
                                       EvalCorpus.from_features(dev_fc, "dev"), a, cfg["target_fah"])
    target_fc = _corpus(cfg["test"]) if cfg["test"] else dev_fc
    report = score_tracks(run_detector(a.model, target_fc, a.mode, a.tags),
                          EvalCorpus.from_features(target_fc, "test" if cfg["test"] else "dev"), thr, a.name)
    report.violated = violated
    write_report_csv(out / f"{a.name}_report.csv", [report])
    print(json.dumps(report.row()))
    if violated:
        raise ConstraintViolation(f"{a.name}: FA/h target {cfg['target_fah']} unreachable on the threshold grid")


def cmd_snr_curves(cfg):
    from .pipeline import lab_curves

    out = _write_resolved(cfg["out"], "snr-curves", cfg)
    res = lab_curves(cfg["base"], _corpus(cfg["dev"]), _corpus(cfg["lab"]), out, cfg["target_fah"],
                     cfg["frr_level"])
    print(json.dumps({"threshold": res.threshold, "gains_db": res.gains}))


def cmd_compare(cfg):
    from .pipeline import APPROACHES, PipelineConfig, compare

    models = Path(cfg["models"])
    ckpts = {n: models / f"{n}.ckpt" for n in APPROACHES if (models / f"{n}.ckpt").exists()}
    if not ckpts:
        raise DataError(f"no checkpoints in {models}")
    out = _write_resolved(cfg["out"], "compare", cfg)
    reports = compare(PipelineConfig(target_fah=cfg["target_fah"]), _corpus(cfg["dev"]), _corpus(cfg["test"]),
                      ckpts, out)
    for r in reports:
        print(json.dumps(r.row()))
    if any(r.violated for r in reports):
        raise ConstraintViolation("some approaches could not reach the FA/h target on dev")


def cmd_bench(cfg):
    from .bench import FRONTENDS, VARIANTS, bench_detector, bench_frontend, write_bench_csv

    out = _write_resolved(cfg["out"], "bench", cfg)
    results = []
    for comp in [c.strip() for c in cfg["components"].split(",") if c.strip()]:
        if comp in FRONTENDS:
            r = bench_frontend(comp, cfg["duration"], cfg["repeats"], cfg["seed"])
        elif comp in VARIANTS:
            r = bench_detector(comp, cfg["duration"], cfg["repeats"], "paper", cfg["seed"])
        else:
            raise ConfigError(f"unknown bench component {comp!r}")
        log.info("%s: RTF %.4f (cv %.3f), %d bytes", comp, r.rtf, r.rtf_cv, r.model_size_bytes)
        results.append(r)
    write_bench_csv(out / "bench.csv", results)


def cmd_export_plots(cfg):
    run = Path(cfg["run"])
    if not run.exists():
        raise DataError(f"run directory {run} not found")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    found = {}
    for pattern in ("report.csv", "curves.csv", "bench.csv", "gains.json", "*train_log.csv", "logs/*.csv"):
        for f in sorted(run.rglob(pattern)):
            if out in f.parents:
                continue
            dest = out / "__".join(f.relative_to(run).parts)
            shutil.copyfile(f, dest)
            found[dest.name] = str(f)
    if not found:
        raise DataError(f"no plot data under {run}")
    (out / "index.json").write_text(json.dumps(found, indent=1, sort_keys=True))
    _write_resolved(out, "export-plots", cfg)


def cmd_recipe(cfg):
    from .pipeline import PipelineConfig, run_pipeline

    try:
        pc = PipelineConfig(seed=cfg["seed"], scale=cfg["scale"], **(cfg["pipeline"] or {}))
    except TypeError as exc:
        raise ConfigError(f"bad pipeline settings: {exc}") from None
    out = _write_resolved(cfg["out"], "recipe", cfg)
    res = run_pipeline(pc, out, with_lab=not cfg["skip_lab"])
    for r in res["reports"]:
        print(json.dumps(r.row()))


HANDLERS = {
    "gen-lab": cmd_gen_lab, "gen-train": cmd_gen_train, "train-base": cmd_train_base, "finetune": cmd_finetune,
    "train-attention": cmd_train_attention, "calibrate": cmd_calibrate, "evaluate": cmd_evaluate,
    "snr-curves": cmd_snr_curves, "compare": cmd_compare, "bench": cmd_bench, "export-plots": cmd_export_plots,
    "recipe": cmd_recipe,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        HANDLERS[args.command](cfg)
    except MkwsError as exc:
        print(f"mkws {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"mkws {args.command}: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
