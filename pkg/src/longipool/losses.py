"""Training objective: weighted cross entropy, the monotone-consistency
hinge, and L2 regularization of recurrent/linear weights.

Cohort roles gate the two data terms: controls and positives enter the
classification entropy; positives and consistency-only subjects enter the
consistency penalty; consistency-only subjects never enter classification.

Sign convention: ``weighted_bce`` returns the entropy E as written (a sum
of log-probabilities, so E <= 0); the objective minimizes
``-E + lambda_cons * L_cons + lambda_reg * ||W||^2``.

Batch aggregation averages each term over the subjects eligible for it, so
the lambda weights transfer across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .layers import ModelParams

ROLE_CONTROL = "control"
ROLE_POSITIVE = "positive"
ROLE_CONSISTENCY_ONLY = "consistency_only"
ROLES = (ROLE_CONTROL, ROLE_POSITIVE, ROLE_CONSISTENCY_ONLY)

CLASSIFIED_ROLES = (ROLE_CONTROL, ROLE_POSITIVE)
CONSISTENCY_ROLES = (ROLE_POSITIVE, ROLE_CONSISTENCY_ONLY)

CLAMP_MARGIN = 1e-7


@dataclass
class LossWeights:
    lambda_cons: float = 2.0
    lambda_reg: float = 0.02
    w_pos: float = 1.0

    def __post_init__(self):
        if self.lambda_cons < 0 or self.lambda_reg < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.w_pos <= 0:
            raise ValueError("w_pos must be positive")


def clamp_probability(p: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Differentiable clamp of p into [margin, 1-margin] before logs,
    built from hinges: unit gradient inside the band, zero outside."""
    lo = Tensor(np.full(p.shape, CLAMP_MARGIN, np.float32))
    hi = Tensor(np.full(p.shape, 1.0 - CLAMP_MARGIN, np.float32))
    inner = ad.hinge_pos(ad.sub(p, lo, tape), tape)
    over = ad.hinge_pos(ad.sub(p, hi, tape), tape)
    return ad.add(lo, ad.sub(inner, over, tape), tape)


def weighted_bce(preds: Sequence[Tensor], labels: Sequence[int], w_pos: float,
                 tape: Optional[Tape] = None) -> Tensor:
    """Entropy contribution of one classified subject:
    sum_t ( w_pos * y_t log p_t + (1 - y_t) log(1 - p_t) )."""
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("subject has no visits")
    terms = []
    for p, y in zip(preds, labels):
        arr = p.array
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError(f"prediction outside (0,1): {arr}")
        if y not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {y}")
        pc = clamp_probability(p, tape)
        if y == 1:
            terms.append(ad.scale(ad.log(pc, tape), w_pos, tape))
        else:
            one = Tensor(np.ones(p.shape, np.float32))
            terms.append(ad.log(ad.sub(one, pc, tape), tape))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term, tape)
    return ad.reduce_sum(total, tape)


def consistency_loss(pred_sequences: Sequence[Sequence[Tensor]],
                     roles: Sequence[str],
                     tape: Optional[Tape] = None) -> Tensor:
    """Hinge on score decreases between consecutive visits, summed over
    positives and consistency-only subjects; controls and single-visit
    subjects contribute exactly zero."""
    if len(pred_sequences) != len(roles):
        raise ValueError("one role per prediction sequence required")
    terms = []
    for preds, role in zip(pred_sequences, roles):
        if role not in ROLES:
            raise ValueError(f"unknown cohort role {role!r}")
        if role not in CONSISTENCY_ROLES:
            continue
        for earlier, later in zip(preds[:-1], preds[1:]):
            terms.append(ad.hinge_pos(ad.sub(earlier, later, tape), tape))
    if not terms:
        return Tensor(np.zeros((), np.float32))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term, tape)
    return ad.reduce_sum(total, tape)


def l2_penalty(params: ModelParams, tape: Optional[Tape] = None) -> Tensor:
    """Squared L2 norm of the recurrent and linear weight matrices."""
    total = None
    for _, w in params.l2_parameters():
        sq = ad.reduce_sum(ad.mul(w, w, tape), tape)
        total = sq if total is None else ad.add(total, sq, tape)
    if total is None:
        return Tensor(np.zeros((), np.float32))
    return total


def total_objective(entropy: Tensor, cons: Tensor, penalty: Tensor,
                    weights: LossWeights, tape: Optional[Tape] = None) -> Tensor:
    """-E + lambda_cons * L_cons + lambda_reg * penalty."""
    loss = ad.scale(entropy, -1.0, tape)
    loss = ad.add(loss, ad.scale(cons, weights.lambda_cons, tape), tape)
    return ad.add(loss, ad.scale(penalty, weights.lambda_reg, tape), tape)


def batch_objective(pred_sequences: Sequence[Sequence[Tensor]],
                    label_sequences: Sequence[Sequence[int]],
                    roles: Sequence[str], params: ModelParams,
                    weights: LossWeights,
                    tape: Optional[Tape] = None):
    """Mini-batch loss: each data term is averaged over the subjects
    eligible for it.  Returns (loss tensor, component floats for logging)."""
    entropy_terms = []
    for preds, labels, role in zip(pred_sequences, label_sequences, roles):
        if role in CLASSIFIED_ROLES:
            entropy_terms.append(weighted_bce(preds, labels, weights.w_pos, tape))
    if entropy_terms:
        entropy = entropy_terms[0]
        for term in entropy_terms[1:]:
            entropy = ad.add(entropy, term, tape)
        entropy = ad.scale(entropy, 1.0 / len(entropy_terms), tape)
    else:
        entropy = Tensor(np.zeros((), np.float32))
    n_cons = sum(1 for role in roles if role in CONSISTENCY_ROLES)
    cons = consistency_loss(pred_sequences, roles, tape)
    if n_cons:
        cons = ad.scale(cons, 1.0 / n_cons, tape)
    penalty = l2_penalty(params, tape)
    loss = total_objective(entropy, cons, penalty, weights, tape)
    stats = {
        "neg_entropy": -entropy.item(),
        "consistency": cons.item(),
        "penalty": penalty.item(),
        "total": loss.item(),
    }
    return loss, stats


def auto_w_pos(label_sequences: Sequence[Sequence[int]],
               roles: Sequence[str]) -> float:
    """Default class balance: negative-label visits over positive-label
    visits among classified subjects of the training split (1.0 when a
    class is absent)."""
    pos = neg = 0
    for labels, role in zip(label_sequences, roles):
        if role not in CLASSIFIED_ROLES:
            continue
        pos += sum(1 for y in labels if y == 1)
        neg += sum(1 for y in labels if y == 0)
    if pos == 0 or neg == 0:
        return 1.0
    return neg / pos
