"""Black-box model transfer via soft-label fine-tuning.

The remote model is used strictly as a scorer: its calibrated predictions
on the local training fold become the targets for a short, gentle
fine-tune of the already-trained local model.  Replacing the remote model
with a frozen lookup table of its scores yields a bit-identical result;
nothing but the score vector crosses the site boundary.

Fine-tuning minimizes the same cross-entropy as local training, against
``lam * soft + (1 - lam) * hard`` (default ``lam = 1``, pure soft
targets).  Early stopping watches validation AUPRC computed against the
hard labels and returns the best fine-tuned checkpoint; only a divergent
run falls back to the untouched local model.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict, replace as dc_replace

import numpy as np

from . import metrics
from .errors import ConfigError, DataError
from .features import LabeledDataset
from .neural import (RiskModel, SoftTargets, adam_step, forward_batch,
                     loss_and_grad_arrays)
from .pipeline import predict_scores


@dataclass(frozen=True)
class FineTuneParams:
    lr_ft: float = 1e-4
    batch_size: int = 64
    max_epochs_ft: int = 10
    patience_ft: int = 2
    lam: float = 1.0


def predict_soft(remote: RiskModel, local_train_fold: LabeledDataset) -> SoftTargets:
    """Calibrated remote scores on the local training fold, order-aligned."""
    return SoftTargets(values=predict_scores(remote, local_train_fold,
                                             calibrated=True))


def _clone_model(model: RiskModel) -> RiskModel:
    return RiskModel(config=model.config, schema_hash=model.schema_hash,
                     params=model.copy_params(), n_vocab=model.n_vocab,
                     n_expert=model.n_expert, expert_stats=model.expert_stats,
                     calibrator=None,
                     training_provenance=list(model.training_provenance))


def ban_transfer(local: RiskModel, train_fold: LabeledDataset, soft: SoftTargets,
                 valid_fold: LabeledDataset, ft: FineTuneParams,
                 seed: int = 0) -> RiskModel:
    """Fine-tune the local model toward the remote model's soft decisions."""
    if not (0.0 <= ft.lam <= 1.0):
        raise ConfigError(f"lam must be in [0, 1], got {ft.lam}")
    if len(soft) != len(train_fold):
        raise DataError(
            f"{len(soft)} soft targets for {len(train_fold)} training examples")
    if local.expert_stats is None:
        raise DataError("local model has no expert stats; train it first")

    train_seq, train_exp, train_y = train_fold.stacked()
    valid_seq, valid_exp, valid_y = valid_fold.stacked()
    train_exp = local.expert_stats.apply(train_exp)
    valid_exp = local.expert_stats.apply(valid_exp)
    targets = ft.lam * soft.values + (1.0 - ft.lam) * train_y.astype(np.float64)

    model = _clone_model(local)
    shuffle_rng = np.random.default_rng([seed, 301])
    dropout_rng = np.random.default_rng([seed, 302])
    state: dict | None = None
    n = len(train_fold)

    def valid_auprc() -> float:
        _, cache = forward_batch(model, valid_seq, valid_exp, train_mode=False)
        return metrics.auprc(cache["scores"], valid_y)

    # Best checkpoint is selected among fine-tuned epochs only: the local
    # model's weights were already picked to maximize this same validation
    # metric, so letting them compete would bias selection toward "no
    # transfer" whenever validation is noisy.
    best_auprc = -np.inf
    best_params = model.copy_params()
    best_epoch = 1
    since_best = 0

    for epoch in range(1, ft.max_epochs_ft + 1):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, ft.batch_size):
            idx = perm[start:start + ft.batch_size]
            loss, grads = loss_and_grad_arrays(
                model, train_seq[idx], train_exp[idx], targets[idx],
                train_mode=True, rng=dropout_rng)
            if not math.isfinite(loss):
                warnings.warn("fine-tuning diverged; returning the local model "
                              "untouched", RuntimeWarning)
                return local
            model.params, state = adam_step(model.params, grads, state, ft.lr_ft)
        score = valid_auprc()
        if score > best_auprc:
            best_auprc = score
            best_params = model.copy_params()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best > ft.patience_ft:
                break

    model.params = best_params
    model.training_provenance.append({
        "site": train_fold.site_name, "stage": "ban_transfer",
        "seed": seed, "best_epoch": best_epoch, "fine_tune": asdict(ft)})
    return model


def hard_label_fine_tune(local: RiskModel, train_fold: LabeledDataset,
                         valid_fold: LabeledDataset, ft: FineTuneParams,
                         seed: int = 0) -> RiskModel:
    """Continued training on hard labels: the ``lam = 0`` endpoint."""
    soft = SoftTargets(values=train_fold.labels.astype(np.float64))
    return ban_transfer(local, train_fold, soft, valid_fold,
                        dc_replace(ft, lam=1.0), seed=seed)
