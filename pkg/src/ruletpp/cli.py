"""Command-line pipeline driver: generate, fit, evaluate, explain.

Every run writes exactly one manifest (``<command>_manifest.json``)
next to its outputs, recording input/output hashes, the seed and the
wall-clock duration.  Exit codes: 0 success, 2 config errors, 3 data /
IO errors, 4 numerical failures, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_generator_config, load_train_config, load_truth_config
from .errors import ConfigError, CorpusFormatError, NumericsError, ValidationError
from .events import (
    PredicateCatalog,
    load_catalog,
    load_sequences,
    save_sequences,
)
from .metrics import (
    EvalReport,
    assignment_cosine,
    baseline_event_time_mae,
    event_time_mae,
    jaccard,
    parameter_mae,
)
from .rules import HardParams, RuleSet, rule_from_dict, rule_to_dict
from .simulate import load_labels, save_labels, simulate_corpus
from .trainer import FitResult, fit, ranked_component_posteriors

log = logging.getLogger("ruletpp")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, args, inputs: dict, outputs: dict,
                    seed, started: float) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config": str(getattr(args, "config", "") or ""),
        "seed": seed,
        "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in outputs.items()},
        "duration_seconds": time.monotonic() - started,
    }
    path = out_dir / f"{command}_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CorpusFormatError(f"cannot create output directory: {exc}") from exc
    return out


def _limit_threads(n):
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=int(n))
    except ImportError:
        log.info("threadpoolctl not installed; --threads has no effect")


# --- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.monotonic()
    gt, count, cfg_seed = load_generator_config(args.config)
    if count is None:
        raise ConfigError(f"{args.config}: missing required field 'count'")
    seed = args.seed if args.seed is not None else cfg_seed
    out = _out_dir(args)
    sequences, labels, resamples = simulate_corpus(gt, count, seed)
    corpus_path = out / "corpus.jsonl"
    labels_path = out / "labels.jsonl"
    catalog_path = out / "catalog.json"
    save_sequences(corpus_path, sequences, gt.catalog)
    save_labels(labels_path, labels)
    catalog_path.write_text(json.dumps(gt.catalog.to_dict(), indent=2) + "\n")
    log.info("generated %d sequences (%d resampled for empty targets)", count, resamples)
    _write_manifest(
        out, "generate", args,
        inputs={"config": args.config},
        outputs={"corpus": corpus_path, "labels": labels_path, "catalog": catalog_path},
        seed=seed, started=started,
    )
    return EXIT_OK


def fit_report(result: FitResult, seed) -> dict:
    explanations = []
    offsets = result.posteriors.event_offsets
    for s in range(len(offsets) - 1):
        rows = result.posteriors.q[offsets[s]:offsets[s + 1]]
        seq_expl = []
        for row in rows:
            order = sorted(range(row.size), key=lambda z: (-row[z], z))
            seq_expl.append([[int(z), float(row[z])] for z in order])
        explanations.append(seq_expl)
    cfg = result.config
    return {
        "seed": seed,
        "config": {f: getattr(cfg, f) for f in (
            "num_rules", "max_rule_length", "num_dummies", "time_tolerance",
            "lr_selection", "lr_relations", "lr_params", "tau_max", "tau_min",
            "em_max_iters", "elbo_tol", "w_phase_steps", "alpha_phase_steps",
            "param_steps", "gumbel_samples", "kernel_bandwidth",
            "softmin_sharpness", "init_jitter",
        )},
        "catalog": result.catalog.to_dict(),
        "rules": [rule_to_dict(r, result.catalog) for r in result.rule_set],
        "params": {
            "base_rate": float(result.params.base_rate),
            "rule_weights": [float(w) for w in result.params.rule_weights],
            "prior": [float(p) for p in result.params.prior],
        },
        "elbo_trace": [float(v) for v in result.elbo_trace],
        "explanations": explanations,
        "diagnostics": _json_ready(result.diagnostics),
        "soft_state": {
            "selection_weights": result.selection_weights.tolist(),
            "relation_simplices": result.relation_simplices.tolist(),
        },
    }


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def cmd_fit(args) -> int:
    started = time.monotonic()
    cfg, catalog_path, extras = load_train_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if catalog_path is None:
        raise ConfigError(f"{args.config}: missing required field 'catalog'")
    if args.corpus is None:
        raise ConfigError("fit requires --corpus")
    corpus_path = Path(args.corpus)
    strict = bool(extras.get("strict", True)) or args.strict
    catalog = load_catalog(catalog_path)
    sequences = load_sequences(corpus_path, catalog, strict=strict)
    sidecar = corpus_path.parent / "labels.jsonl"
    if sidecar.exists():
        log.info("labels sidecar %s present; ignored by training", sidecar)
    out = _out_dir(args)
    result = fit(sequences, catalog, cfg)
    report = fit_report(result, cfg.seed)
    model_path = out / "model.json"
    model_path.write_text(json.dumps(report, indent=2) + "\n")
    log.info(
        "fit finished: %d iterations, log-likelihood %.6f",
        result.diagnostics["iterations"], result.elbo_trace[-1],
    )
    for h, rule in enumerate(result.rule_set, start=1):
        log.info("rule %d: %s", h, rule.describe(result.catalog))
    _write_manifest(
        out, "fit", args,
        inputs={"config": args.config, "corpus": corpus_path, "catalog": catalog_path},
        outputs={"model": model_path},
        seed=cfg.seed, started=started,
    )
    return EXIT_OK


def _load_model(path):
    try:
        report = json.loads(Path(path).read_text())
    except OSError as exc:
        raise CorpusFormatError(str(exc), path=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"invalid JSON: {exc}", path=str(path)) from exc
    catalog = PredicateCatalog.from_dict(report["catalog"])
    rules = RuleSet(tuple(rule_from_dict(r, catalog) for r in report["rules"]))
    p = report["params"]
    params = HardParams(
        base_rate=float(p["base_rate"]),
        rule_weights=np.asarray(p["rule_weights"], dtype=np.float64),
        prior=np.asarray(p["prior"], dtype=np.float64),
    )
    return report, catalog, rules, params


def cmd_evaluate(args) -> int:
    started = time.monotonic()
    truth = load_truth_config(args.config)
    report, catalog, rules, params = _load_model(args.model)
    if catalog.names != truth.catalog.names or catalog.target_index != truth.catalog.target_index:
        missing = set(truth.catalog.names) - set(catalog.names)
        extra = set(catalog.names) - set(truth.catalog.names)
        raise ValidationError(
            f"catalog mismatch: missing from model {sorted(missing)}, "
            f"unknown to truth {sorted(extra)}"
        )
    tolerance = truth.time_tolerance
    weight_mae, prior_mae = parameter_mae(rules, params, truth.rule_set, truth.params)
    eval_report = EvalReport(
        jaccard=jaccard(rules, truth.rule_set),
        weight_mae=weight_mae,
        prior_mae=prior_mae,
    )
    inputs = {"config": args.config, "model": args.model}
    if args.labels is not None:
        labels = load_labels(args.labels)
        inferred = [
            [entry[0][0] for entry in seq_expl] for seq_expl in report["explanations"]
        ]
        if len(inferred) != len(labels):
            raise ValidationError(
                f"label file covers {len(labels)} sequences but the model "
                f"report has explanations for {len(inferred)}"
            )
        overall, per_seq = assignment_cosine(
            inferred, labels, rules, truth.rule_set, catalog
        )
        eval_report.assignment_cosine = overall
        eval_report.details["per_sequence_cosine"] = per_seq
        inputs["labels"] = args.labels
    else:
        log.info("labels file absent; assignment cosine omitted")
    if args.corpus is not None:
        sequences = load_sequences(args.corpus, catalog, strict=True)
        mean_dt = float(np.mean(np.concatenate(
            [np.diff(s.target_times, prepend=0.0) for s in sequences]
        )))
        cap = 10.0 * mean_dt
        eval_report.event_time_mae = event_time_mae(params, rules, sequences, tolerance, cap)
        train_mean = report.get("diagnostics", {}).get("mean_interarrival", mean_dt)
        eval_report.baseline_event_time_mae = baseline_event_time_mae(sequences, train_mean)
        eval_report.details["prediction_cap"] = cap
        inputs["corpus"] = args.corpus
    eval_report.validate()
    out = _out_dir(args)
    json_path = out / "eval_report.json"
    csv_path = out / "eval_report.csv"
    json_path.write_text(json.dumps(eval_report.to_dict(), indent=2) + "\n")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EvalReport.CSV_FIELDS)
        writer.writeheader()
        writer.writerow(eval_report.to_csv_row(tag=Path(args.config).stem,
                                               seed=report.get("seed", "")))
    _write_manifest(
        out, "evaluate", args,
        inputs=inputs,
        outputs={"report_json": json_path, "report_csv": csv_path},
        seed=report.get("seed", ""), started=started,
    )
    return EXIT_OK


def cmd_explain(args) -> int:
    started = time.monotonic()
    report, catalog, rules, params = _load_model(args.model)
    if args.corpus is None:
        raise ConfigError("explain requires --corpus")
    sequences = load_sequences(args.corpus, catalog, strict=True)
    if not 0 <= args.sequence < len(sequences):
        raise ValidationError(
            f"unknown sequence id {args.sequence} (corpus has {len(sequences)})"
        )
    seq = sequences[args.sequence]
    tolerance = float(report.get("config", {}).get("time_tolerance", 0.0))
    ranked = ranked_component_posteriors(seq, params, rules, catalog, tolerance)
    rows = []
    lines = []
    for i, (t, table) in enumerate(zip(seq.target_times, ranked)):
        entry = {"event": i, "time": float(t), "components": []}
        lines.append(f"event {i} at t={t:.4f}")
        for component, prob in table:
            name = "spontaneous" if component == 0 else f"rule {component}"
            groundings = {}
            if component >= 1:
                rule = rules[component - 1]
                for pred in rule.body:
                    times = seq.times_for(pred)
                    pos = int(np.searchsorted(times, t, side="left"))
                    groundings[catalog.names[pred]] = (
                        float(times[pos - 1]) if pos > 0 else None
                    )
            entry["components"].append(
                {"component": component, "label": name, "probability": prob,
                 "groundings": groundings}
            )
            ground_text = ", ".join(
                f"{k}@{v:.4f}" if v is not None else f"{k}@-"
                for k, v in groundings.items()
            )
            lines.append(f"  {name:<12} {prob:6.3f}  {ground_text}")
        rows.append(entry)
    out = _out_dir(args)
    json_path = out / f"explain_{args.sequence}.json"
    text_path = out / f"explain_{args.sequence}.txt"
    json_path.write_text(json.dumps(rows, indent=2) + "\n")
    text_path.write_text("\n".join(lines) + "\n")
    _write_manifest(
        out, "explain", args,
        inputs={"model": args.model, "corpus": args.corpus},
        outputs={"json": json_path, "text": text_path},
        seed=report.get("seed", ""), started=started,
    )
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ruletpp",
        description="Discover latent if-then temporal rules explaining target events.",
    )
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func in (
        ("generate", cmd_generate), ("fit", cmd_fit),
        ("evaluate", cmd_evaluate), ("explain", cmd_explain),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="config file (JSON or TOML)")
        p.add_argument("--corpus", help="JSONL corpus path")
        p.add_argument("--model", help="fitted model report (model.json)")
        p.add_argument("--labels", help="hidden-label sidecar (labels.jsonl)")
        p.add_argument("--sequence", type=int, default=0, help="sequence id for explain")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--strict", action="store_true",
                       help="force strict ingestion validation")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    _limit_threads(args.threads)
    try:
        if args.command in ("generate", "fit", "evaluate") and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusFormatError, ValidationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
