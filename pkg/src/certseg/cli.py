"""Command-line surface: data generation, training, evaluation, sweeps,
threshold protocols, and ablation runs."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .data import DomainSpec, default_curriculum_specs, generate_domain, load_dataset, save_dataset
from .model import load_checkpoint
from .training import ABLATIONS, TrainConfig, evaluate_records, eval_prototypes, train


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"n_images": 12, "extent": 32, "seed": 0},
    "train": {
        "steps_pretrain": 200,
        "steps_ssl": 100,
        "batch_source": 4,
        "batch_target": 4,
        "prototype_batch": 8,
        "learning_rate": 0.05,
        "momentum": 0.9,
        "weights": [0.3, 0.001, 0.05, 1.0],
        "ablation": "none",
        "curriculum": ["B", "C"],
        "dropout_p": 0.2,
        "k": 4,
        "f": 32,
    },
    "eval": {"domain": "C", "beta": 0.5},
    "protocols": {"validation_sizes": [1, 2, 4, 8], "trials": 20, "seed": 0},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_images": {"type": "integer", "minimum": 1},
                "extent": {"type": "integer", "minimum": 16},
                "seed": {"type": "integer"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps_pretrain": {"type": "integer", "minimum": 0},
                "steps_ssl": {"type": "integer", "minimum": 0},
                "batch_source": {"type": "integer", "minimum": 1},
                "batch_target": {"type": "integer", "minimum": 1},
                "prototype_batch": {"type": "integer", "minimum": 1},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "maximum": 1},
                "weights": {
                    "type": "array", "items": {"type": "number"},
                    "minItems": 4, "maxItems": 4,
                },
                "ablation": {"enum": list(ABLATIONS)},
                "curriculum": {
                    "type": "array", "items": {"enum": ["A", "B", "C"]}, "minItems": 1,
                },
                "dropout_p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "k": {"type": "integer", "minimum": 2},
                "f": {"type": "integer", "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "domain": {"enum": ["A", "B", "C"]},
                "beta": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "protocols": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "validation_sizes": {
                    "type": "array", "items": {"type": "integer", "minimum": 1},
                    "minItems": 1,
                },
                "trials": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
    },
}


def _deep_update(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value


def _apply_override(cfg, dotted, raw):
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"override path {dotted!r}: no section {part!r}")
        node = node[part]
    node[parts[-1]] = value


def resolve_config(config_path, overrides):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path:
        try:
            with open(config_path) as fh:
                _deep_update(cfg, json.load(fh))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        _apply_override(cfg, key, raw)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}")
    return cfg


def _out_dir(args, default_name):
    root = Path(os.environ.get("CERTSEG_OUTPUT_ROOT", "runs"))
    out = Path(args.out) if args.out else root / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg, out_dir):
    with open(Path(out_dir) / "resolved_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _make_datasets(cfg, data_root=None):
    if data_root:
        root = Path(data_root)
        datasets = {}
        for name in ("A", "B", "C"):
            path = root / name
            if not path.is_dir():
                raise ConfigError(f"dataset directory missing: {path}")
            datasets[name] = load_dataset(path)
        return datasets
    d = cfg["data"]
    specs = default_curriculum_specs(seed=d["seed"], n_images=d["n_images"], extent=d["extent"])
    return {name: generate_domain(spec) for name, spec in specs.items()}


def _train_config(cfg, ablation=None, steps_ssl=None):
    from .augment import AugmentConfig

    t = cfg["train"]
    extent = cfg["data"]["extent"]
    return TrainConfig(
        augment=AugmentConfig(view_extent=(extent, extent)),
        seed=cfg["seed"],
        steps_pretrain=t["steps_pretrain"],
        steps_ssl=t["steps_ssl"] if steps_ssl is None else steps_ssl,
        batch_source=t["batch_source"],
        batch_target=t["batch_target"],
        prototype_batch=t["prototype_batch"],
        learning_rate=t["learning_rate"],
        momentum=t["momentum"],
        weights=tuple(t["weights"]),
        ablation=t["ablation"] if ablation is None else ablation,
        curriculum=list(t["curriculum"]),
        dropout_p=t["dropout_p"],
        k=t["k"],
        f=t["f"],
    )


# ---------------------------------------------------------------------------
# verbs


def cmd_generate_data(args):
    cfg = resolve_config(args.config, args.set)
    out = _out_dir(args, "data")
    _snapshot(cfg, out)
    datasets = _make_datasets(cfg)
    for name, ds in datasets.items():
        save_dataset(ds, out / name)
    print(f"wrote domains {sorted(datasets)} under {out}")
    return 0


def cmd_pretrain(args):
    cfg = resolve_config(args.config, args.set)
    out = _out_dir(args, "pretrain")
    _snapshot(cfg, out)
    datasets = _make_datasets(cfg, args.data_root)
    m, _, _ = train(_train_config(cfg, steps_ssl=0), datasets, out)
    print(f"pretrained {m.step} steps; artifacts in {out}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args.config, args.set)
    out = _out_dir(args, "train")
    _snapshot(cfg, out)
    datasets = _make_datasets(cfg, args.data_root)
    m, _, rows = train(_train_config(cfg), datasets, out)
    from .report import plot_training_log

    plot_training_log(rows, out)
    print(f"trained {m.step} steps; gamma={m.gamma}; artifacts in {out}")
    return 0


def _eval_once(cfg, checkpoint, datasets, out, use_trained_threshold):
    from . import metrics as M
    from .report import export_curves, save_records, write_json

    m, bank, meta = load_checkpoint(checkpoint)
    bank = eval_prototypes(m, datasets["A"], bank)
    records = evaluate_records(m, bank, datasets[cfg["eval"]["domain"]])
    save_records(records, Path(out) / "records")
    gamma = m.gamma if (use_trained_threshold or m.gamma is not None) else None
    if use_trained_threshold and m.gamma is None:
        raise ConfigError("--use-trained-threshold: checkpoint stores no gamma")
    summary = export_curves(records, out, beta=cfg["eval"]["beta"], trained_gamma=gamma)
    if use_trained_threshold:
        row = M.metrics_at_threshold(
            records, M.gamma_to_score_threshold(m.gamma), cfg["eval"]["beta"]
        )
        write_json(row, Path(out) / "trained_threshold.json")
        print(f"F_{cfg['eval']['beta']:g} at trained gamma: {row['f_beta']:.5f}")
    print(f"auroc={summary.auroc:.5f} aupr={summary.aupr:.5f} max_f={summary.max_f:.5f}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args.config, args.set)
    out = _out_dir(args, "eval")
    _snapshot(cfg, out)
    datasets = _make_datasets(cfg, args.data_root)
    return _eval_once(cfg, args.checkpoint, datasets, out, args.use_trained_threshold)


def cmd_sweep(args):
    cfg = resolve_config(args.config, args.set)
    from .report import export_curves, load_records

    out = _out_dir(args, "sweep")
    _snapshot(cfg, out)
    records = load_records(args.records)
    summary = export_curves(records, out, beta=cfg["eval"]["beta"])
    print(f"auroc={summary.auroc:.5f} aupr={summary.aupr:.5f}")
    return 0


def cmd_protocols(args):
    cfg = resolve_config(args.config, args.set)
    from . import metrics as M
    from .report import load_records, plot_validation_study, write_json

    out = _out_dir(args, "protocols")
    _snapshot(cfg, out)
    named = {}
    for spec in args.records:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).name, spec
        named[name] = load_records(path)
    first = next(iter(named.values()))
    p = cfg["protocols"]
    gamma = args.trained_gamma
    rep = M.threshold_protocols(
        first, gamma, p["validation_sizes"], p["trials"], p["seed"], cfg["eval"]["beta"]
    )
    write_json(rep, out / "validation_protocols.json")
    plot_validation_study(rep, out)
    if len(named) > 1:
        cross = M.cross_domain_report(named, cfg["eval"]["beta"])
        write_json(cross, out / "cross_domain.json")
    print(f"protocol reports in {out}")
    return 0


def cmd_ablate(args):
    cfg = resolve_config(args.config, args.set)
    out = _out_dir(args, f"ablate_{args.name}")
    _snapshot(cfg, out)
    datasets = _make_datasets(cfg, args.data_root)
    m, _, rows = train(_train_config(cfg, ablation=args.name), datasets, out / "train")
    from .report import plot_training_log

    plot_training_log(rows, out / "train")
    return _eval_once(cfg, out / "train" / "checkpoint_final", datasets, out / "eval", False)


def cmd_export_curves(args):
    cfg = resolve_config(args.config, args.set)
    from .report import export_curves, load_records

    out = _out_dir(args, "curves")
    _snapshot(cfg, out)
    records = load_records(args.records)
    export_curves(records, out, beta=cfg["eval"]["beta"], figures=not args.no_figures)
    print(f"curves in {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="certseg",
        description="Certainty-masked semi-supervised segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, data_root=False):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, e.g. train.steps_ssl=50")
        p.add_argument("--out", help="output directory (default under CERTSEG_OUTPUT_ROOT)")
        if data_root:
            p.add_argument("--data-root", help="directory with saved A/B/C datasets")

    p = sub.add_parser("generate-data", help="render the synthetic domains to disk")
    common(p)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="supervised + uniformity pretraining only")
    common(p, data_root=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="full pretraining + SSL curriculum")
    common(p, data_root=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; dump records + summary")
    common(p, data_root=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--use-trained-threshold", action="store_true",
                   help="report metrics at the stored feature-space threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="threshold sweep over a record dump")
    common(p)
    p.add_argument("--records", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("protocols", help="validation-size and cross-domain protocols")
    common(p)
    p.add_argument("--records", action="append", required=True,
                   metavar="[NAME=]DIR", help="record dump; repeat for cross-domain")
    p.add_argument("--trained-gamma", type=float)
    p.set_defaults(func=cmd_protocols)

    p = sub.add_parser("ablate", help="run a named ablation end to end")
    common(p, data_root=True)
    p.add_argument("name", choices=list(ABLATIONS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-curves", help="curve CSVs from a record dump")
    common(p)
    p.add_argument("--records", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_export_curves)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
