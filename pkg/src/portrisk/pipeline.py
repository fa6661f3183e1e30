"""Local-model production: stratified splits, training, grid search,
and Platt calibration.

The split is stratified with largest-remainder rounding inside each
class, so every fold's positive count stays within one example of the
exact proportion.  Early stopping tracks validation AUPRC because the
cohorts are heavily imbalanced.  The test fold is only ever consumed by
the final evaluation step of an experiment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import metrics
from .errors import DataError, NumericalError
from .features import LabeledDataset, fit_expert_stats
from .neural import (Calibrator, ModelConfig, RiskModel, adam_step, check_schema,
                     forward_batch, init_model, loss_and_grad_arrays, _sigmoid)

FOLD_NAMES = ("train", "valid", "calib", "test")


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float, float] = (0.70, 0.10, 0.05, 0.15)
    seed: int = 0

    def __post_init__(self):
        if any(f <= 0 for f in self.fractions):
            raise ValueError("all fold fractions must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError("fold fractions must sum to 1")


@dataclass
class SplitIndices:
    train: np.ndarray
    valid: np.ndarray
    calib: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"train": self.train, "valid": self.valid,
                "calib": self.calib, "test": self.test}


def largest_remainder(n: int, fractions) -> list[int]:
    """Integer quotas summing to n; remainders resolved largest-first,
    ties by position."""
    quotas = [n * f for f in fractions]
    base = [math.floor(q) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(len(fractions)),
                   key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def stratified_split(dataset: LabeledDataset, spec: SplitSpec) -> SplitIndices:
    """Shuffle each class by seed and partition by the fold fractions."""
    labels = dataset.labels
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("stratified split needs both classes present")
    rng = np.random.default_rng(spec.seed)
    pos = pos[rng.permutation(len(pos))]
    neg = neg[rng.permutation(len(neg))]

    pos_quota = largest_remainder(len(pos), spec.fractions)
    neg_quota = largest_remainder(len(neg), spec.fractions)
    folds = []
    p0 = n0 = 0
    for name, pq, nq in zip(FOLD_NAMES, pos_quota, neg_quota):
        chunk = np.sort(np.concatenate([pos[p0:p0 + pq], neg[n0:n0 + nq]]))
        if len(chunk) == 0:
            raise DataError(f"fold {name!r} is empty; supply more data")
        folds.append(chunk)
        p0 += pq
        n0 += nq
    return SplitIndices(*folds)


@dataclass(frozen=True)
class Hyperparams:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    embed_dim: int = 16
    hidden_dim: int = 32
    attn_dim: int = 16
    dense_dim: int = 16
    dropout_rate: float = 0.0

    def model_config(self, seed: int) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
                           attn_dim=self.attn_dim, dense_dim=self.dense_dim,
                           dropout_rate=self.dropout_rate, seed=seed)


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, log: list[dict]):
        super().__init__(message)
        self.log = log


def predict_scores(model: RiskModel, dataset: LabeledDataset,
                   indices=None, calibrated: bool = True) -> np.ndarray:
    """Score examples with a trained model.

    Expert features are standardized with the stats stored in the model
    (the deployable black box carries its own preprocessing), and the
    calibrator is applied when present unless raw scores are requested.
    """
    check_schema(model, dataset.schema.version_hash)
    sub = dataset if indices is None else dataset.subset(indices)
    seq, expert, _ = sub.stacked()
    if model.expert_stats is not None:
        expert = model.expert_stats.apply(expert)
    _, cache = forward_batch(model, seq, expert, train_mode=False)
    logits = cache["logits"]
    if calibrated and model.calibrator is not None:
        return model.calibrator.apply_to_logits(logits)
    return _sigmoid(logits)


def train_local(train_fold: LabeledDataset, valid_fold: LabeledDataset,
                hp: Hyperparams, model_seed: int
                ) -> tuple[RiskModel, list[dict]]:
    """Minibatch adaptive-moment training with early stopping on
    validation AUPRC; returns the best-validation checkpoint."""
    if len(train_fold) == 0 or len(valid_fold) == 0:
        raise DataError("train and validation folds must be nonempty")
    schema_hash = train_fold.schema.version_hash

    stats = fit_expert_stats(train_fold)
    train_seq, train_exp, train_y = train_fold.stacked()
    valid_seq, valid_exp, valid_y = valid_fold.stacked()
    train_exp = stats.apply(train_exp)
    valid_exp = stats.apply(valid_exp)
    targets = train_y.astype(np.float64)

    model = init_model(hp.model_config(model_seed), schema_hash,
                       n_vocab=train_seq.shape[2], n_expert=train_exp.shape[1])
    model.expert_stats = stats

    shuffle_rng = np.random.default_rng([model_seed, 101])
    dropout_rng = np.random.default_rng([model_seed, 202])
    state: dict | None = None
    log: list[dict] = []
    best_auprc = -np.inf
    best_params = model.copy_params()
    best_epoch = 0
    since_best = 0
    n = len(train_fold)

    for epoch in range(1, hp.max_epochs + 1):
        perm = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, hp.batch_size):
            idx = perm[start:start + hp.batch_size]
            loss, grads = loss_and_grad_arrays(
                model, train_seq[idx], train_exp[idx], targets[idx],
                train_mode=True, rng=dropout_rng)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", log)
            epoch_loss += loss * len(idx)
            model.params, state = adam_step(model.params, grads, state, hp.lr)
        epoch_loss /= n

        _, cache = forward_batch(model, valid_seq, valid_exp, train_mode=False)
        val_scores = cache["scores"]
        val_auroc = metrics.auroc(val_scores, valid_y)
        val_auprc = metrics.auprc(val_scores, valid_y)
        log.append({"epoch": epoch, "train_loss": epoch_loss,
                    "val_auroc": val_auroc, "val_auprc": val_auprc})

        if val_auprc > best_auprc:
            best_auprc = val_auprc
            best_params = model.copy_params()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > hp.patience:
                break

    model.params = best_params
    model.training_provenance.append({
        "site": train_fold.site_name, "stage": "local_training",
        "model_seed": model_seed, "best_epoch": best_epoch,
        "hyperparams": asdict(hp)})
    return model, log


@dataclass
class GridResult:
    hp: Hyperparams
    val_auroc: float
    val_auprc: float
    model: RiskModel | None
    failed: bool = False
    error: str = ""


def default_grid() -> list[Hyperparams]:
    grid = []
    for lr in (1e-3, 3e-4):
        for hidden in (32, 64):
            for dropout in (0.0, 0.2):
                grid.append(Hyperparams(lr=lr, hidden_dim=hidden,
                                        dropout_rate=dropout))
    return grid


def grid_search(train_fold: LabeledDataset, valid_fold: LabeledDataset,
                grid: list[Hyperparams], model_seed: int,
                threads: int = 1) -> tuple[Hyperparams, RiskModel, list[GridResult]]:
    """Train one model per setting; select by validation AUPRC, ties by
    AUROC then earliest grid order."""
    if not grid:
        raise DataError("hyperparameter grid is empty")

    def run(i: int) -> GridResult:
        hp = grid[i]
        try:
            model, log = train_local(train_fold, valid_fold, hp, model_seed)
            return GridResult(hp=hp, val_auroc=max(r["val_auroc"] for r in log),
                              val_auprc=max(r["val_auprc"] for r in log),
                              model=model)
        except NumericalError as exc:
            return GridResult(hp=hp, val_auroc=float("nan"),
                              val_auprc=float("nan"), model=None,
                              failed=True, error=str(exc))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(len(grid))))
    else:
        results = [run(i) for i in range(len(grid))]

    viable = [(r.val_auprc, r.val_auroc, -i) for i, r in enumerate(results)
              if not r.failed]
    if not viable:
        raise NumericalError("every grid setting diverged")
    best_idx = -max(viable)[2]
    best = results[best_idx]
    return best.hp, best.model, results


def platt_calibrate(model: RiskModel, calib_fold: LabeledDataset,
                    max_iter: int = 100, tol: float = 1e-8) -> Calibrator:
    """Fit (a, b) of sigmoid(a * logit + b) by damped Newton maximum
    likelihood on the calibration fold."""
    y = calib_fold.labels.astype(np.float64)
    if y.min() == y.max():
        raise DataError("calibration fold must contain both classes")
    seq, expert, _ = calib_fold.stacked()
    if model.expert_stats is not None:
        expert = model.expert_stats.apply(expert)
    _, cache = forward_batch(model, seq, expert, train_mode=False)
    z = cache["logits"]

    def nll(a: float, b: float) -> float:
        p = np.clip(_sigmoid(a * z + b), 1e-12, 1.0 - 1e-12)
        return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum())

    a, b = 1.0, 0.0
    current = nll(a, b)
    for _ in range(max_iter):
        p = _sigmoid(a * z + b)
        resid = p - y
        grad = np.array([float(resid @ z), float(resid.sum())])
        if np.abs(grad).max() < tol:
            break
        w = p * (1.0 - p)
        hess = np.array([[float((w * z) @ z), float(w @ z)],
                         [float(w @ z), float(w.sum())]])
        hess += 1e-10 * np.eye(2)
        step = np.linalg.solve(hess, grad)
        # damping: halve the step until the likelihood improves
        scale = 1.0
        for _ in range(50):
            cand = nll(a - scale * step[0], b - scale * step[1])
            if cand <= current + 1e-15:
                break
            scale *= 0.5
        a -= scale * step[0]
        b -= scale * step[1]
        current = nll(a, b)
    if not (math.isfinite(a) and math.isfinite(b)):
        raise NumericalError("calibration diverged to non-finite parameters")
    return Calibrator(a=a, b=b)
