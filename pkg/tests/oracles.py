"""Independent oracle implementations used only by tests.

These deliberately avoid the library's code paths: plain loops, no shared
helpers, so a bug in the implementation cannot hide in its own oracle.
"""

from __future__ import annotations

import math


def auroc_pair_count(scores, labels) -> float:
    """Brute-force concordant-pair probability with ties counted 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def auprc_rank_scan(scores, labels) -> float:
    """Average precision by an explicit rank scan.

    Ties break by descending score then original input order, mirroring
    the documented convention.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    hits = 0
    total = 0.0
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


def label_by_claim_scan(episode_end, claims, window_days=30):
    """Readmission label by scanning every inpatient claim of the patient."""
    for claim in claims:
        if claim.setting.value != "inpatient":
            continue
        gap = (claim.admit_date - episode_end).days
        if 1 <= gap <= window_days:
            return True
    return False


def _sig(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def forward_reference(params, seq, expert) -> float:
    """Step-by-step scalar recomputation of the scorer's forward pass.

    Written with explicit per-element loops so it shares nothing with the
    vectorized implementation.
    """
    n_buckets = len(seq)
    n_vocab = len(seq[0])
    de = len(params["emb_b"])
    h = len(params["gru_bz"])
    a = len(params["attn_b"])
    dd = len(params["dense_b"])

    def matvec(m, v):
        rows = len(m)
        cols = len(m[0])
        return [sum(m[r][c] * v[r] for r in range(rows)) for c in range(cols)]

    def add(u, v):
        return [x + y for x, y in zip(u, v)]

    # embed each bucket
    xs = []
    for t in range(n_buckets):
        xs.append(add(matvec(params["emb_W"], seq[t]), list(params["emb_b"])))

    # recurrence from the oldest bucket (highest index) to the newest
    hidden = [0.0] * h
    states = []
    for t in range(n_buckets - 1, -1, -1):
        x = xs[t]
        z = [_sig(v) for v in add(add(matvec(params["gru_Wz"], x),
                                      matvec(params["gru_Uz"], hidden)),
                                  list(params["gru_bz"]))]
        r = [_sig(v) for v in add(add(matvec(params["gru_Wr"], x),
                                      matvec(params["gru_Ur"], hidden)),
                                  list(params["gru_br"]))]
        rh = [ri * hi for ri, hi in zip(r, hidden)]
        c = [math.tanh(v) for v in add(add(matvec(params["gru_Wh"], x),
                                           matvec(params["gru_Uh"], rh)),
                                       list(params["gru_bh"]))]
        hidden = [(1.0 - zi) * hi + zi * ci for zi, hi, ci in zip(z, hidden, c)]
        states.append(list(hidden))

    # additive attention over the recurrent states
    raw = []
    for state in states:
        u = [math.tanh(v) for v in add(matvec(params["attn_W"], state),
                                       list(params["attn_b"]))]
        raw.append(sum(params["attn_v"][i] * u[i] for i in range(a)))
    peak = max(raw)
    weights = [math.exp(v - peak) for v in raw]
    total = sum(weights)
    weights = [w / total for w in weights]
    pooled = [sum(weights[t] * states[t][i] for t in range(n_buckets))
              for i in range(h)]

    blended = pooled + list(expert)
    dense = [math.tanh(v) for v in add(matvec(params["dense_W"], blended),
                                       list(params["dense_b"]))]
    logit = sum(params["out_w"][i] * dense[i] for i in range(dd)) + params["out_b"][0]
    return _sig(logit)
