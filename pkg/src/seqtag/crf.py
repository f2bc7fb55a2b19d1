"""Linear-chain CRF: path scores, forward-algorithm log partition, Viterbi, and the training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import TagScheme
from .evaluation import split_tag
from .numerics import (
    ContractViolation,
    Parameter,
    Tensor,
    add,
    add_to_rows,
    as_tensor,
    glorot_uniform,
    logsumexp,
    scale,
    sub,
    sum_of_squares,
    take,
    total,
)

FORBIDDEN = -1e4


@dataclass
class CrfParams:
    """``transitions[i, j]`` scores moving from tag ``i`` to tag ``j``.

    ``sigma_sq`` is the Gaussian prior variance of the L2 penalty; ``inf``
    switches the penalty off.
    """

    transitions: Parameter
    start_scores: Parameter
    stop_scores: Parameter
    sigma_sq: float = math.inf

    @classmethod
    def create(cls, num_tags: int, rng: np.random.Generator | None = None,
               sigma_sq: float = math.inf) -> "CrfParams":
        trans = glorot_uniform((num_tags, num_tags), rng) if rng is not None else np.zeros((num_tags, num_tags))
        return cls(Parameter(trans, "crf.transitions"),
                   Parameter(np.zeros(num_tags), "crf.start"),
                   Parameter(np.zeros(num_tags), "crf.stop"),
                   sigma_sq)

    @classmethod
    def from_arrays(cls, transitions, start, stop, sigma_sq: float = math.inf) -> "CrfParams":
        return cls(Parameter(transitions, "crf.transitions"), Parameter(start, "crf.start"),
                   Parameter(stop, "crf.stop"), sigma_sq)

    @property
    def num_tags(self) -> int:
        return self.start_scores.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.transitions, self.start_scores, self.stop_scores]


def _check(em: Tensor, crf: CrfParams) -> None:
    if em.value.ndim != 2 or em.shape[0] < 1 or em.shape[1] != crf.num_tags:
        raise ContractViolation(f"emissions of shape {em.shape} do not fit {crf.num_tags} tags")


def score_sequence(em, crf: CrfParams, tags: Sequence[int]) -> Tensor:
    """``start[y1] + Σ em[t, yt] + Σ trans[y(t-1), yt] + stop[yN]``."""
    em = as_tensor(em)
    _check(em, crf)
    tags = np.asarray(tags, dtype=np.int64)
    n = em.shape[0]
    if tags.shape != (n,):
        raise ContractViolation(f"{len(tags)} tags for {n} emission rows")
    if np.any(tags < 0) or np.any(tags >= crf.num_tags):
        raise ContractViolation("tag index out of range")
    s = add(total(take(em, (np.arange(n), tags))),
            add(take(crf.start_scores, tags[0]), take(crf.stop_scores, tags[-1])))
    if n > 1:
        s = add(s, total(take(crf.transitions, (tags[:-1], tags[1:]))))
    return s


def forward_logZ(em, crf: CrfParams) -> Tensor:
    """Log partition function by the forward recursion."""
    em = as_tensor(em)
    _check(em, crf)
    alpha = add(crf.start_scores, take(em, 0))
    for t in range(1, em.shape[0]):
        alpha = add(take(em, t), logsumexp(add_to_rows(crf.transitions, alpha), axis=0))
    return logsumexp(add(alpha, crf.stop_scores))


def l2_penalty(params: Sequence[Parameter], sigma_sq: float) -> Tensor | None:
    if math.isinf(sigma_sq):
        return None
    terms = [sum_of_squares(p) for p in params]
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return scale(acc, 1.0 / (2.0 * sigma_sq))


def nll(em, crf: CrfParams, gold_tags: Sequence[int], all_params: Sequence[Parameter] = ()) -> Tensor:
    """Negative conditional log-likelihood plus ``Σ λ²/(2σ²)`` over ``all_params``."""
    loss = sub(forward_logZ(em, crf), score_sequence(em, crf, gold_tags))
    penalty = l2_penalty(all_params, crf.sigma_sq) if all_params else None
    return add(loss, penalty) if penalty is not None else loss


def viterbi(em, crf: CrfParams) -> tuple[list[int], float]:
    """Best tag path and its score; ties go to the lowest tag index."""
    em = as_tensor(em)
    _check(em, crf)
    e = em.value
    trans = crf.transitions.value
    n = e.shape[0]
    score = crf.start_scores.value + e[0]
    back = np.zeros((n, crf.num_tags), dtype=np.int64)
    for t in range(1, n):
        cand = score[:, None] + trans
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(crf.num_tags)] + e[t]
    final = score + crf.stop_scores.value
    best = int(np.argmax(final))
    path = [best]
    for t in range(n - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    path.reverse()
    return path, float(final[path[-1]])


def constrain_transitions(crf: CrfParams, scheme: TagScheme) -> CrfParams:
    """Copy of ``crf`` with IOB2-illegal moves (and starting on ``I-``) scored ``-1e4``."""
    tags = scheme.tags
    if len(tags) != crf.num_tags:
        raise ContractViolation(f"scheme has {len(tags)} tags, CRF has {crf.num_tags}")
    trans = crf.transitions.value.copy()
    start = crf.start_scores.value.copy()
    for j, tag in enumerate(tags):
        prefix, etype = split_tag(tag)
        if prefix != "I":
            continue
        start[j] = FORBIDDEN
        for i, prev in enumerate(tags):
            if prev not in (f"B-{etype}", f"I-{etype}"):
                trans[i, j] = FORBIDDEN
    return CrfParams.from_arrays(trans, start, crf.stop_scores.value.copy(), crf.sigma_sq)
