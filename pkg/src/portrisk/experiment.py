"""Two-site experiment orchestration: train locals, cross-apply, transfer,
and bootstrap the lift.

The report mirrors a two-direction comparison table: for each direction
there is a local baseline, the directly applied remote model, and the
soft-label-transferred model, with percent lift over the local baseline.
The bootstrap re-splits the target site, retrains the local model, and
re-runs the transfer once per fold while the remote model stays fixed,
matching the black-box deployment story.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import metrics
from .cohort import CohortConfig, build_cohort, write_audit_json, write_cohort_csv
from .claims import PatientHistory, write_claims_file, write_demographics_file
from .errors import ConfigError
from .features import (LabeledDataset, encode_dataset, fit_schema, save_dataset)
from .neural import RiskModel, save_model
from .pipeline import (Hyperparams, SplitIndices, SplitSpec, default_grid,
                       grid_search, platt_calibrate, predict_scores,
                       stratified_split, train_local)
from .synthgen import (ShiftSpec, SiteProfile, generate_site, shift_profile,
                       write_labels_csv)
from .transfer import FineTuneParams, ban_transfer, predict_soft

DIRECTIONS = ("site1_to_site2", "site2_to_site1")


@dataclass
class ExperimentConfig:
    seed: int = 42
    vocab_size_cap: int = 64
    split_fractions: tuple[float, float, float, float] = (0.70, 0.10, 0.05, 0.15)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    use_grid: bool = False
    grid: list[Hyperparams] | None = None
    fine_tune: FineTuneParams = field(default_factory=FineTuneParams)
    bootstrap_folds: int = 8
    bootstrap_direction: str = "site1_to_site2"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    site1_profile: SiteProfile | None = None
    site2_profile: SiteProfile | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        cfg = cls()
        cfg.seed = raw.get("seed", cfg.seed)
        cfg.vocab_size_cap = raw.get("vocab_size_cap", cfg.vocab_size_cap)
        if "split_fractions" in raw:
            cfg.split_fractions = tuple(raw["split_fractions"])
        if "hyperparams" in raw:
            cfg.hyperparams = Hyperparams(**raw["hyperparams"])
        cfg.use_grid = raw.get("use_grid", False)
        if raw.get("grid"):
            cfg.grid = [Hyperparams(**g) for g in raw["grid"]]
        if "fine_tune" in raw:
            cfg.fine_tune = FineTuneParams(**raw["fine_tune"])
        boot = raw.get("bootstrap", {})
        cfg.bootstrap_folds = boot.get("n_folds", cfg.bootstrap_folds)
        cfg.bootstrap_direction = boot.get("direction", cfg.bootstrap_direction)
        if cfg.bootstrap_direction not in DIRECTIONS:
            raise ConfigError(f"bootstrap direction must be one of {DIRECTIONS}")
        if "cohort" in raw:
            c = raw["cohort"]
            cfg.cohort = CohortConfig(
                long_stay_threshold_days=c.get("long_stay_threshold_days", 30),
                cancer_dx_prefixes=tuple(c.get("cancer_dx_prefixes", ["C"])),
                rehab_dx_prefixes=tuple(c.get("rehab_dx_prefixes", ["REH"])),
                merge_gap_days=c.get("merge_gap_days", 2),
                readmission_window_days=c.get("readmission_window_days", 30))
        if "site1_profile" in raw:
            cfg.site1_profile = SiteProfile.from_dict(raw["site1_profile"])
        if "site2_profile" in raw:
            cfg.site2_profile = SiteProfile.from_dict(raw["site2_profile"])
        elif "site2" in raw:
            derived = shift_profile(cfg.site1_profile,
                                    ShiftSpec.from_dict(raw["site2"].get("shift", {})))
            derived.site_name = raw["site2"].get("site_name", "site2")
            derived.n_patients = raw["site2"].get("n_patients", derived.n_patients)
            cfg.site2_profile = derived
        return cfg

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "ExperimentConfig":
        ref = resources.files("portrisk.data").joinpath("default_experiment.json")
        return cls.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class SiteBundle:
    """Everything produced while training one site's local model."""

    name: str
    dataset: LabeledDataset
    split: SplitIndices
    model: RiskModel
    train_log: list[dict]
    grid_table: list[dict] = field(default_factory=list)

    def fold(self, name: str) -> LabeledDataset:
        return self.dataset.subset(getattr(self.split, name))


def train_site_bundle(dataset: LabeledDataset, cfg: ExperimentConfig,
                      site_tag: int, threads: int = 1) -> SiteBundle:
    split = stratified_split(dataset,
                             SplitSpec(cfg.split_fractions,
                                       seed=_derive_seed(cfg.seed, site_tag, 1)))
    train_fold = dataset.subset(split.train)
    valid_fold = dataset.subset(split.valid)
    model_seed = _derive_seed(cfg.seed, site_tag, 2)
    grid_table: list[dict] = []
    if cfg.use_grid:
        grid = cfg.grid or default_grid()
        hp, model, results = grid_search(train_fold, valid_fold, grid,
                                         model_seed, threads=threads)
        log = []
        grid_table = [{"lr": r.hp.lr, "hidden_dim": r.hp.hidden_dim,
                       "dropout_rate": r.hp.dropout_rate,
                       "val_auroc": r.val_auroc, "val_auprc": r.val_auprc,
                       "failed": r.failed} for r in results]
    else:
        model, log = train_local(train_fold, valid_fold, cfg.hyperparams, model_seed)
    model.calibrator = platt_calibrate(model, dataset.subset(split.calib))
    return SiteBundle(name=dataset.site_name, dataset=dataset, split=split,
                      model=model, train_log=log, grid_table=grid_table)


def _condition_metrics(scores: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    return {"auroc": metrics.auroc(scores, labels),
            "auprc": metrics.auprc(scores, labels),
            "ece": metrics.ece(scores, labels)}


def evaluate_direction(target: SiteBundle, remote_model: RiskModel,
                       cfg: ExperimentConfig, seed: int) -> dict:
    """Local baseline, direct remote, and transferred metrics on the
    target site's test fold."""
    test_fold = target.fold("test")
    test_seq_labels = test_fold.labels
    local_scores = predict_scores(target.model, target.dataset, target.split.test)
    remote_scores = predict_scores(remote_model, target.dataset, target.split.test)

    soft = predict_soft(remote_model, target.fold("train"))
    transferred = ban_transfer(target.model, target.fold("train"), soft,
                               target.fold("valid"), cfg.fine_tune, seed=seed)
    transferred.calibrator = platt_calibrate(transferred, target.fold("calib"))
    transferred_scores = predict_scores(transferred, target.dataset,
                                        target.split.test)

    conditions = {
        "local": _condition_metrics(local_scores, test_seq_labels),
        "remote": _condition_metrics(remote_scores, test_seq_labels),
        "transferred": _condition_metrics(transferred_scores, test_seq_labels),
    }
    base = conditions["local"]
    lifts = {cond: {m: 100.0 * (vals[m] - base[m]) / base[m]
                    for m in ("auroc", "auprc")}
             for cond, vals in conditions.items()}
    return {"conditions": conditions, "lift_pct": lifts,
            "transferred_model": transferred}


def run_two_site_experiment(ds1: LabeledDataset, ds2: LabeledDataset,
                            cfg: ExperimentConfig,
                            threads: int = 1) -> tuple[dict, dict[str, SiteBundle]]:
    """Train both locals and evaluate both transfer directions."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=2) as pool:
            f1 = pool.submit(train_site_bundle, ds1, cfg, 1, threads)
            f2 = pool.submit(train_site_bundle, ds2, cfg, 2, threads)
            bundle1, bundle2 = f1.result(), f2.result()
    else:
        bundle1 = train_site_bundle(ds1, cfg, 1)
        bundle2 = train_site_bundle(ds2, cfg, 2)

    directions = {}
    directions["site1_to_site2"] = evaluate_direction(
        bundle2, bundle1.model, cfg, seed=_derive_seed(cfg.seed, 3, 1))
    directions["site2_to_site1"] = evaluate_direction(
        bundle1, bundle2.model, cfg, seed=_derive_seed(cfg.seed, 3, 2))

    report = {d: {"conditions": r["conditions"], "lift_pct": r["lift_pct"]}
              for d, r in directions.items()}
    return report, {"site1": bundle1, "site2": bundle2,
                    "transferred_models": {d: directions[d]["transferred_model"]
                                           for d in DIRECTIONS}}


def make_bootstrap_runner(target_dataset: LabeledDataset, remote_model: RiskModel,
                          cfg: ExperimentConfig):
    """Build the per-fold runner: re-split, retrain local, apply the fixed
    remote model, transfer, evaluate."""

    def runner(fold_seed: int) -> dict[str, dict[str, float]]:
        split = stratified_split(target_dataset,
                                 SplitSpec(cfg.split_fractions, seed=fold_seed))
        train_fold = target_dataset.subset(split.train)
        valid_fold = target_dataset.subset(split.valid)
        calib_fold = target_dataset.subset(split.calib)
        labels = target_dataset.subset(split.test).labels

        local, _ = train_local(train_fold, valid_fold, cfg.hyperparams,
                               model_seed=_derive_seed(fold_seed, 11))
        local.calibrator = platt_calibrate(local, calib_fold)
        soft = predict_soft(remote_model, train_fold)
        transferred = ban_transfer(local, train_fold, soft, valid_fold,
                                   cfg.fine_tune, seed=_derive_seed(fold_seed, 12))
        transferred.calibrator = platt_calibrate(transferred, calib_fold)

        out = {}
        for name, model in (("local", local), ("remote", remote_model),
                            ("transferred", transferred)):
            scores = predict_scores(model, target_dataset, split.test)
            out[name] = {"auroc": metrics.auroc(scores, labels),
                         "auprc": metrics.auprc(scores, labels)}
        return out

    return runner


def run_bootstrap(bundles: dict, cfg: ExperimentConfig,
                  threads: int = 1) -> metrics.BootstrapLiftReport:
    direction = cfg.bootstrap_direction
    target = bundles["site2" if direction == "site1_to_site2" else "site1"]
    remote = bundles["site1" if direction == "site1_to_site2" else "site2"].model
    runner = make_bootstrap_runner(target.dataset, remote, cfg)
    seeds = [_derive_seed(cfg.seed, 9000 + i) for i in range(cfg.bootstrap_folds)]
    return metrics.bootstrap_lift(runner, seeds, threads=threads)


def generate_sites(cfg: ExperimentConfig
                   ) -> tuple[list[PatientHistory], list, list[PatientHistory], list]:
    if cfg.site1_profile is None or cfg.site2_profile is None:
        raise ConfigError("experiment config must define both site profiles")
    h1, l1 = generate_site(cfg.site1_profile, _derive_seed(cfg.seed, 21))
    h2, l2 = generate_site(cfg.site2_profile, _derive_seed(cfg.seed, 22))
    return h1, l1, h2, l2


def run_full_experiment(cfg: ExperimentConfig, out_dir: str | Path,
                        threads: int = 1, write_figures: bool = True) -> dict:
    """Generate both sites, build cohorts, encode under a pooled schema,
    run both transfer directions plus the bootstrap, and write every
    artifact (CSVs, models, report, figures) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    h1, l1, h2, l2 = generate_sites(cfg)
    events1, audit1 = build_cohort(h1, cfg.cohort)
    events2, audit2 = build_cohort(h2, cfg.cohort)

    # pooled vocabulary so both sites share one feature space
    schema = fit_schema(events1 + events2, h1 + h2, cfg.vocab_size_cap)
    ds1 = encode_dataset(events1, h1, schema, cfg.site1_profile.site_name)
    ds2 = encode_dataset(events2, h2, schema, cfg.site2_profile.site_name)

    for tag, hists, labels, events, audit, ds in (
            ("site1", h1, l1, events1, audit1, ds1),
            ("site2", h2, l2, events2, audit2, ds2)):
        site_dir = out / tag
        site_dir.mkdir(exist_ok=True)
        write_claims_file(site_dir / "claims.csv", hists)
        write_demographics_file(site_dir / "demographics.csv", hists)
        write_labels_csv(site_dir / "labels.csv", labels)
        write_cohort_csv(site_dir / "cohort.csv", events)
        write_audit_json(site_dir / "cohort_audit.json", audit)
        save_dataset(site_dir / "dataset.prsk", ds)

    table_report, bundles = run_two_site_experiment(ds1, ds2, cfg, threads)
    boot = run_bootstrap(bundles, cfg, threads)

    save_model(out / "model_site1.prskm", bundles["site1"].model)
    save_model(out / "model_site2.prskm", bundles["site2"].model)
    for direction, model in bundles["transferred_models"].items():
        save_model(out / f"model_transferred_{direction}.prskm", model)

    report = {
        "seed": cfg.seed,
        "schema": {"version_hash": schema.version_hash,
                   "vocab_size": len(schema.vocab)},
        "sites": {
            "site1": {"name": cfg.site1_profile.site_name,
                      "n_patients": cfg.site1_profile.n_patients,
                      "cohort_audit": audit1.to_dict()},
            "site2": {"name": cfg.site2_profile.site_name,
                      "n_patients": cfg.site2_profile.n_patients,
                      "cohort_audit": audit2.to_dict()},
        },
        "directions": table_report,
        "bootstrap": {"direction": cfg.bootstrap_direction,
                      **boot.summary()},
    }
    (out / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_lift_table(out / "lift_table.csv", boot)

    if write_figures:
        from .figures import render_bootstrap_figures
        render_bootstrap_figures(boot, cfg.bootstrap_direction, out)
    return report


def _write_lift_table(path: Path, boot: metrics.BootstrapLiftReport) -> None:
    import csv
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "metric", "local", "remote", "transferred",
                         "lift_pct"])
        for row in boot.table_rows():
            writer.writerow([row["fold"], row["metric"],
                             repr(row["local"]), repr(row["remote"]),
                             repr(row["transferred"]), repr(row["lift_pct"])])
