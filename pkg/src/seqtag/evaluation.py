"""Exact-match entity scoring: a prediction counts only if type, start and end all agree."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import NamedTuple, Sequence

from .numerics import ContractViolation


class EntitySpan(NamedTuple):
    entity_type: str
    start: int
    end: int  # inclusive


def split_tag(tag: str) -> tuple[str, str | None]:
    if tag == "O" or "-" not in tag:
        return "O", None
    prefix, etype = tag.split("-", 1)
    return prefix, etype


def extract_entities(tags: Sequence[str], strict: bool = False,
                     repairs: list | None = None) -> list[EntitySpan]:
    """Maximal ``B-t (I-t)*`` chains, in order.

    An ``I-t`` that does not continue a ``t`` chain is an orphan. By default it
    opens a new span (conlleval behaviour) and a note is appended to
    ``repairs``; with ``strict=True`` the orphan chain yields no span.
    """
    spans = []
    cur_type, cur_start, skipping = None, -1, None
    for i, tag in enumerate(tags):
        prefix, etype = split_tag(tag)
        if prefix == "I" and etype == cur_type:
            continue
        if prefix == "I" and skipping == etype:
            continue
        if cur_type is not None:
            spans.append(EntitySpan(cur_type, cur_start, i - 1))
        cur_type, skipping = None, None
        if prefix == "B":
            cur_type, cur_start = etype, i
        elif prefix == "I":
            if repairs is not None:
                repairs.append((i, tag))
            if strict:
                skipping = etype
            else:
                cur_type, cur_start = etype, i
    if cur_type is not None:
        spans.append(EntitySpan(cur_type, cur_start, len(tags) - 1))
    return spans


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    @property
    def undefined(self) -> list[str]:
        """Metrics whose denominator was zero and were reported as 0."""
        flags = []
        if self.tp + self.fp == 0:
            flags.append("p")
        if self.tp + self.fn == 0:
            flags.append("r")
        if self.precision + self.recall == 0:
            flags.append("f1")
        return flags

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn,
                "p": self.precision, "r": self.recall, "f1": self.f1,
                "undefined": self.undefined}


@dataclass
class EvalReport:
    types: dict[str, Counts] = field(default_factory=dict)
    micro: Counts = field(default_factory=Counts)
    repairs: int = 0

    @property
    def macro(self) -> dict[str, float]:
        """Unweighted mean of the per-type scores."""
        if not self.types:
            return {"p": 0.0, "r": 0.0, "f1": 0.0}
        n = len(self.types)
        return {
            "p": sum(c.precision for c in self.types.values()) / n,
            "r": sum(c.recall for c in self.types.values()) / n,
            "f1": sum(c.f1 for c in self.types.values()) / n,
        }

    def as_dict(self) -> dict:
        return {
            "types": {t: c.as_dict() for t, c in sorted(self.types.items())},
            "micro": self.micro.as_dict(),
            "macro": self.macro,
            "repairs": self.repairs,
        }


def evaluate(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]],
             strict: bool = False) -> EvalReport:
    """Score predicted tag sequences against gold ones, sentence by sentence."""
    if len(gold) != len(pred):
        raise ContractViolation(f"evaluate: {len(gold)} gold vs {len(pred)} predicted sentences")
    report = EvalReport()
    for k, (g_tags, p_tags) in enumerate(zip(gold, pred)):
        if len(g_tags) != len(p_tags):
            raise ContractViolation(
                f"evaluate: sentence {k} has {len(g_tags)} gold vs {len(p_tags)} predicted tags")
        notes: list = []
        g_spans = Counter(extract_entities(g_tags, strict=strict))
        p_spans = Counter(extract_entities(p_tags, strict=strict, repairs=notes))
        report.repairs += len(notes)
        for span in g_spans.keys() | p_spans.keys():
            tp = min(g_spans[span], p_spans[span])
            c = Counts(tp, p_spans[span] - tp, g_spans[span] - tp)
            report.types.setdefault(span.entity_type, Counts())
            report.types[span.entity_type] += c
            report.micro += c
    return report


def percent(x: float) -> str:
    """Two-decimal percentage, rounding half away from zero on the decimal repr."""
    d = (Decimal(repr(float(x))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return f"{d:.2f}"


def report_render(report: EvalReport) -> tuple[str, str]:
    """Return ``(text_table, json_document)``."""
    rows = [(t, c) for t, c in sorted(report.types.items())] + [("micro", report.micro)]
    width = max([len(r[0]) for r in rows] + [len("macro"), len("type")])
    header = f"{'type':<{width}}  {'TP':>6} {'FP':>6} {'FN':>6}  {'P':>6} {'R':>6} {'F1':>6}"
    lines = [header, "-" * len(header)]
    for name, c in rows:
        flag = "  *" if c.undefined else ""
        lines.append(f"{name:<{width}}  {c.tp:>6} {c.fp:>6} {c.fn:>6}  "
                     f"{percent(c.precision):>6} {percent(c.recall):>6} {percent(c.f1):>6}{flag}")
    m = report.macro
    lines.append(f"{'macro':<{width}}  {'':>6} {'':>6} {'':>6}  "
                 f"{percent(m['p']):>6} {percent(m['r']):>6} {percent(m['f1']):>6}")
    if any(c.undefined for _, c in rows):
        lines.append("* zero denominator; metric reported as 0.00")
    if report.repairs:
        lines.append(f"repaired orphan I- tags: {report.repairs}")
    return "\n".join(lines) + "\n", json.dumps(report.as_dict(), indent=2, sort_keys=True)
