"""Reconstruction loss, the partially structured hinge loss and their sum.

The hinge loss for one sentence is ``alpha * max(0, margin + S(y_neg) - S(y_pos))``
where S sums local split scores over a tree's nodes. Tree selections and
alpha are treated as constants; gradients flow only through S.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import chart as chart_mod
from . import decode
from . import diff_core as dc

VARIANTS = ("NCBL", "MinDifference", "Rescale", "StructuredRamp")

_ALIASES = {
    "ncbl": "NCBL",
    "mindifference": "MinDifference",
    "mindiff": "MinDifference",
    "min_difference": "MinDifference",
    "rescale": "Rescale",
    "structuredramp": "StructuredRamp",
    "structured_ramp": "StructuredRamp",
    "ramp": "StructuredRamp",
}


@dataclass(frozen=True)
class PsSvmVariant:
    name: str = "Rescale"
    margin: float = 1.0
    normalize_rescale: bool = True  # divide alpha by n - 1

    def __post_init__(self):
        canonical = _ALIASES.get(self.name.lower().replace("-", "").replace(" ", ""), self.name)
        if canonical not in VARIANTS:
            raise ValueError(f"unknown PS-SVM variant {self.name!r}; expected one of {VARIANTS}")
        object.__setattr__(self, "name", canonical)
        if not self.margin > 0:
            raise ValueError("margin must be positive")


def reconstruction_losses(chart, token_ids, params):
    """Per-sentence ``-mean_i log P(x_i | outside(i, i+1))`` as a (B,) tensor."""
    ids = np.asarray(token_ids, dtype=np.int64).reshape(chart.batch, chart.n)
    logits = dc.matmul(chart.h_out[1], params["out_proj"])  # (B, n, V)
    logp = dc.pick(dc.log_softmax(logits, axis=-1), ids)  # (B, n)
    return dc.mul(dc.tsum(logp, axis=1), -1.0 / chart.n)


def reconstruction_loss(chart, token_ids, params):
    """Mean reconstruction loss over the batch (a single sentence gives its own loss)."""
    losses = reconstruction_losses(chart, token_ids, params)
    return dc.mul(dc.tsum(losses), 1.0 / chart.batch)


def select_trees(local, n, constraints, variant):
    """Pick ``(y_neg, y_pos, alpha)`` for one sentence under ``variant``."""
    z = set(constraints)
    if variant.name == "StructuredRamp":
        y_neg = decode.ccky_avoid(local, z, n=n)
    else:
        y_neg = decode.cky(local, n=n)
    if variant.name == "MinDifference":
        y_pos = decode.ccky(local, z, n=n, extra=y_neg.spans())
    else:
        y_pos = decode.ccky(local, z, n=n)
    alpha = 1.0
    if variant.name == "Rescale":
        shared = len(y_pos.spans() & y_neg.spans())
        alpha = shared / (n - 1) if variant.normalize_rescale and n > 1 else float(shared)
    return y_neg, y_pos, alpha


@dataclass
class PsResult:
    loss: object  # Tensor (B,)
    y_neg: list
    y_pos: list
    alpha: list
    active: list  # hinge strictly positive and trees differ


def ps_svm_losses(chart, constraints, variant):
    """Hinge loss per sentence of the batch.

    ``constraints`` holds one span set per sentence. Sentences with fewer
    than two tokens or no constraints get y_pos = y_neg.
    """
    n, B = chart.n, chart.batch
    n_splits = chart_mod.n_split_entries(n)
    coef = np.zeros((B, n_splits))
    const = np.zeros(B)
    weight = np.zeros(B)
    y_negs, y_poss, alphas, active = [], [], [], []
    for b in range(B):
        z = constraints[b] if constraints is not None else None
        if n < 2:
            y_negs.append(None)
            y_poss.append(None)
            alphas.append(1.0)
            active.append(False)
            continue
        local = chart.local_array(b)
        if z:
            y_neg, y_pos, alpha = select_trees(local, n, z, variant)
        else:
            y_neg = decode.cky(local, n=n)
            y_pos = y_neg
            alpha = 1.0
        y_negs.append(y_neg)
        y_poss.append(y_pos)
        alphas.append(alpha)
        if y_pos == y_neg:
            const[b] = alpha * variant.margin
            active.append(False)
            continue
        row = np.zeros(n_splits)
        for i, j, k in y_neg.nodes():
            row[chart_mod.split_index(n, i, j, k)] += 1.0
        for i, j, k in y_pos.nodes():
            row[chart_mod.split_index(n, i, j, k)] -= 1.0
        margin_term = variant.margin + float(row @ chart.flat_local.value[b])
        if margin_term > 0:
            coef[b] = row
            weight[b] = alpha
            active.append(True)
        else:
            active.append(False)
    if any(active):
        diff = dc.tsum(dc.mul(chart.flat_local, coef), axis=1)  # S(y_neg) - S(y_pos)
        hinge = dc.add(diff, variant.margin * (weight > 0))
        loss = dc.add(dc.mul(hinge, weight), const)
    else:
        loss = dc.Tensor(const)
    return PsResult(loss, y_negs, y_poss, alphas, active)


def ps_svm_loss(chart, constraints, variant):
    """Single-sentence convenience: ``(loss Tensor, y_neg, y_pos, alpha)``."""
    res = ps_svm_losses(chart, [constraints], variant)
    return dc.index(res.loss, 0), res.y_neg[0], res.y_pos[0], res.alpha[0]


def batch_loss(token_ids, constraints, params, variant, ps_weight=1.0, max_len=chart_mod.DEFAULT_MAX_LEN):
    """Mean over the batch of ``J_rec + ps_weight * J_PS``.

    Returns ``(loss Tensor, breakdown dict)``; sentences without constraints
    contribute only their reconstruction term.
    """
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    ch = chart_mod.encode(ids, params, max_len=max_len)
    rec = reconstruction_losses(ch, ids, params)
    B = ch.batch
    has_z = [bool(constraints is not None and constraints[b]) for b in range(B)]
    info = {"J_rec": float(rec.value.mean()), "J_PS": 0.0, "n_constrained": sum(has_z), "violations": 0}
    total = rec
    if ps_weight != 0 and any(has_z):
        ps = ps_svm_losses(ch, [constraints[b] if has_z[b] else None for b in range(B)], variant)
        mask = np.array(has_z, dtype=np.float64)
        total = dc.add(rec, dc.mul(ps.loss, ps_weight * mask))
        info["J_PS"] = float((ps.loss.value * mask).sum() / max(1, sum(has_z)))
        info["violations"] = int(sum(ps.active))
        info["alpha"] = float(np.mean([a for a, h in zip(ps.alpha, has_z) if h]))
    return dc.mul(dc.tsum(total), 1.0 / B), info


def instance_loss(token_ids, constraints, params, variant=None, ps_weight=1.0, max_len=chart_mod.DEFAULT_MAX_LEN):
    """``J_rec(x) + ps_weight * J_PS(x, z)`` for one sentence."""
    variant = variant or PsSvmVariant()
    loss, _ = batch_loss([list(token_ids)], [set(constraints or ())], params, variant, ps_weight, max_len)
    return loss
