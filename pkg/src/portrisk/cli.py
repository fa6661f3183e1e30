"""Command-line entry point.

One binary, subcommand style, all experiment state in files, so every
cell of the comparison table can be reproduced and audited piecewise.
Exit codes: 0 success, 1 usage/config error, 2 data/metric error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .claims import parse_claims_file, write_claims_file, write_demographics_file
from .cohort import (CohortConfig, build_cohort, read_cohort_csv,
                     write_audit_json, write_cohort_csv)
from .errors import ConfigError, DataError, NumericalError, PortriskError
from .experiment import ExperimentConfig, run_full_experiment
from .features import (FeatureSchema, encode_dataset, fit_schema,
                       load_dataset, save_dataset)
from .neural import ModelConfig, gradient_check, load_model, save_model
from .pipeline import (Hyperparams, SplitSpec, default_grid, grid_search,
                       platt_calibrate, predict_scores, stratified_split,
                       train_local)
from .synthgen import ShiftSpec, SiteProfile, generate_site, shift_profile, \
    write_labels_csv
from .transfer import FineTuneParams, ban_transfer, predict_soft

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # one-line usage errors, exit code 1
        raise ConfigError(message)


def _load_json(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None


def _split_for(dataset, args) -> "SplitSpec":
    fractions = tuple(args.fractions) if getattr(args, "fractions", None) \
        else (0.70, 0.10, 0.05, 0.15)
    return SplitSpec(fractions=fractions, seed=args.seed)


def cmd_synth(args) -> int:
    profile = SiteProfile.from_json(args.profile)
    if args.shift:
        profile = shift_profile(profile, ShiftSpec.from_dict(_load_json(args.shift)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    histories, labels = generate_site(profile, args.seed)
    write_claims_file(out / "claims.csv", histories)
    write_demographics_file(out / "demographics.csv", histories)
    write_labels_csv(out / "labels.csv", labels)
    profile.write_json(out / "profile.json")
    print(f"wrote {len(histories)} patients to {out}")
    return EXIT_OK


def cmd_cohort(args) -> int:
    cfg = CohortConfig.from_json(args.config) if args.config else CohortConfig()
    parsed = parse_claims_file(args.claims, args.demographics)
    events, audit = build_cohort(parsed.histories, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort_csv(out / "cohort.csv", events)
    write_audit_json(out / "cohort_audit.json", audit)
    print(f"cohort: {audit.n_index_events} index events from {audit.n_kept} "
          f"kept patients (positive rate {audit.positive_rate:.4f}); "
          f"{parsed.rejection_count} rejected rows")
    return EXIT_OK


def cmd_featurize(args) -> int:
    parsed = parse_claims_file(args.claims, args.demographics)
    events = read_cohort_csv(args.cohort)
    if args.schema:
        schema = FeatureSchema.from_dict(_load_json(args.schema))
    else:
        schema = fit_schema(events, parsed.histories, args.vocab_cap,
                            n_buckets=args.buckets, bucket_days=args.bucket_days)
    dataset = encode_dataset(events, parsed.histories, schema, args.site_name,
                             cci_config_path=args.cci_config)
    save_dataset(args.out, dataset)
    if args.schema_out:
        Path(args.schema_out).write_text(
            json.dumps(schema.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    print(f"encoded {len(dataset)} examples (schema {schema.version_hash}) "
          f"-> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    raw = _load_json(args.config) if args.config else {}
    split = stratified_split(dataset, SplitSpec(
        fractions=tuple(raw.get("split_fractions", (0.70, 0.10, 0.05, 0.15))),
        seed=args.seed))
    train_fold = dataset.subset(split.train)
    valid_fold = dataset.subset(split.valid)
    hp = Hyperparams(**raw.get("hyperparams", {}))
    if raw.get("use_grid"):
        grid = ([Hyperparams(**g) for g in raw["grid"]] if raw.get("grid")
                else default_grid())
        hp, model, results = grid_search(train_fold, valid_fold, grid,
                                         args.seed, threads=args.threads)
        log = [{"setting": i, "val_auroc": r.val_auroc, "val_auprc": r.val_auprc,
                "failed": r.failed} for i, r in enumerate(results)]
    else:
        model, log = train_local(train_fold, valid_fold, hp, args.seed)
    save_model(args.out, model)
    if args.log:
        with Path(args.log).open("w", encoding="utf-8") as fh:
            for record in log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    print(f"trained model on {len(train_fold)} examples -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    dataset = load_dataset(args.dataset)
    model = load_model(args.model)
    split = stratified_split(dataset, _split_for(dataset, args))
    model.calibrator = platt_calibrate(model, dataset.subset(split.calib))
    save_model(args.out or args.model, model)
    print(f"calibrator a={model.calibrator.a:.6f} b={model.calibrator.b:.6f} "
          f"-> {args.out or args.model}")
    return EXIT_OK


def cmd_predict(args) -> int:
    dataset = load_dataset(args.dataset)
    model = load_model(args.model)
    if args.fold == "all":
        indices = list(range(len(dataset)))
    else:
        split = stratified_split(dataset, _split_for(dataset, args))
        indices = list(getattr(split, args.fold))
    scores = predict_scores(model, dataset, indices, calibrated=not args.raw)
    with Path(args.out).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "discharge_date", "score", "label"])
        for i, score in zip(indices, scores):
            pid, d = dataset.example_ids[i] if dataset.example_ids else ("", "")
            writer.writerow([pid, d.isoformat() if d else "",
                             repr(float(score)), int(dataset.examples[i].label)])
    print(f"wrote {len(indices)} scores -> {args.out}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    dataset = load_dataset(args.dataset)
    local = load_model(args.local_model)
    remote = load_model(args.remote_model)
    raw = _load_json(args.config) if args.config else {}
    ft = FineTuneParams(**raw.get("fine_tune", {}))
    split = stratified_split(dataset, _split_for(dataset, args))
    train_fold = dataset.subset(split.train)
    soft = predict_soft(remote, train_fold)
    model = ban_transfer(local, train_fold, soft, dataset.subset(split.valid),
                         ft, seed=args.seed)
    save_model(args.out, model)
    print(f"transferred model -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    path = Path(args.scores)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    scores, labels = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores.append(float(row["score"]))
            labels.append(int(row["label"]))
    result = {"n": len(scores),
              "auroc": metrics.auroc(scores, labels),
              "auprc": metrics.auprc(scores, labels),
              "ece": metrics.ece(scores, labels)}
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_experiment(args) -> int:
    if args.config and args.config != "default":
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig.default()
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_full_experiment(cfg, args.out, threads=args.threads,
                                 write_figures=not args.no_figures)
    for direction, block in report["directions"].items():
        lifts = block["lift_pct"]
        print(f"{direction}: remote auprc lift {lifts['remote']['auprc']:+.2f}% | "
              f"transferred auprc lift {lifts['transferred']['auprc']:+.2f}%")
    boot = report["bootstrap"]
    print(f"bootstrap ({boot['direction']}, {boot['n_folds']} folds): "
          f"mean transferred auprc lift "
          f"{boot['mean_lift_pct']['transferred']['auprc']:+.2f}%, "
          f"positive fraction "
          f"{boot['positive_lift_fraction']['transferred']['auprc']:.3f}")
    print(f"report -> {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = ModelConfig(embed_dim=3, hidden_dim=4, attn_dim=3, dense_dim=3,
                         dropout_rate=0.0, seed=args.seed)
    report = gradient_check(config, n_trials=args.trials, seed=args.seed)
    if report.warning:
        print(f"warning: {report.warning}", file=sys.stderr)
    status = "PASS" if report.passed else "FAIL"
    print(f"{status} max_rel_err={report.max_rel_err:.3e} "
          f"trials={report.n_trials} tol={report.tolerance:.0e}")
    return EXIT_OK if report.passed else EXIT_NUMERICAL


def build_parser() -> _Parser:
    parser = _Parser(prog="portrisk",
                     description="Two-site readmission model portability toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate one synthetic site")
    p.add_argument("--profile", required=True, help="site profile JSON")
    p.add_argument("--shift", help="optional shift spec JSON applied to the profile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cohort", help="build the labeled cohort from claims CSVs")
    p.add_argument("--claims", required=True)
    p.add_argument("--demographics", required=True)
    p.add_argument("--config", help="cohort config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_cohort)

    p = sub.add_parser("featurize", help="encode a cohort into a binary dataset")
    p.add_argument("--claims", required=True)
    p.add_argument("--demographics", required=True)
    p.add_argument("--cohort", required=True, help="cohort CSV")
    p.add_argument("--schema", help="reuse an existing schema JSON")
    p.add_argument("--schema-out", help="write the fitted schema JSON here")
    p.add_argument("--vocab-cap", type=int, default=64)
    p.add_argument("--buckets", type=int, default=12)
    p.add_argument("--bucket-days", type=int, default=30)
    p.add_argument("--site-name", default="site")
    p.add_argument("--cci-config", help="override comorbidity weight JSON")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a local model on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--seed", type=int, default=0, help="split + model seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log", help="write per-epoch JSONL here")
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="fit the calibrator on the calibration fold")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0, help="must match the training split seed")
    p.add_argument("--out", help="output model path (default: rewrite in place)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="score a dataset with a model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--fold", choices=["all", "train", "valid", "calib", "test"],
                   default="all")
    p.add_argument("--seed", type=int, default=0, help="split seed when --fold != all")
    p.add_argument("--raw", action="store_true", help="skip the calibrator")
    p.add_argument("--out", required=True, help="output scores CSV")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("transfer", help="fine-tune a local model on remote soft labels")
    p.add_argument("--local-model", required=True)
    p.add_argument("--remote-model", required=True)
    p.add_argument("--dataset", required=True, help="local site dataset")
    p.add_argument("--config", help="fine-tune config JSON")
    p.add_argument("--seed", type=int, default=0, help="split + fine-tune seed")
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("evaluate", help="compute metrics from a scores CSV")
    p.add_argument("--scores", required=True, help="CSV with score,label columns")
    p.add_argument("--out", help="optional metrics JSON output path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the full two-site experiment")
    p.add_argument("--config", default="default",
                   help="experiment config JSON, or 'default'")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="check gradients against finite differences")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PortriskError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
