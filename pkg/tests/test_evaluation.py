import json
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqtag.evaluation import EntitySpan, evaluate, extract_entities, percent, report_render
from seqtag.numerics import ContractViolation


def read_three_column(path):
    gold, pred, g, p = [], [], [], []
    for line in path.read_text().splitlines() + [""]:
        if not line.strip():
            if g:
                gold.append(g)
                pred.append(p)
                g, p = [], []
            continue
        _, gt, pt = line.split()
        g.append(gt)
        p.append(pt)
    return gold, pred


def test_extract_examples():
    assert extract_entities(["O", "O", "O"]) == []
    assert extract_entities(["B-D", "I-D", "O", "B-C"]) == [EntitySpan("D", 0, 1), EntitySpan("C", 3, 3)]
    notes = []
    assert extract_entities(["B-D", "I-C"], repairs=notes) == [EntitySpan("D", 0, 0), EntitySpan("C", 1, 1)]
    assert len(notes) == 1


def test_extract_strict_drops_orphans():
    assert extract_entities(["B-D", "I-C", "I-C", "O", "B-C"], strict=True) == [EntitySpan("D", 0, 0),
                                                                                 EntitySpan("C", 4, 4)]


def test_identity_is_perfect():
    tags = [["B-D", "I-D", "O"], ["O", "B-C"]]
    r = evaluate(tags, tags)
    assert (r.micro.precision, r.micro.recall, r.micro.f1) == (1.0, 1.0, 1.0)


def test_eight_two_two():
    # eight one-token hits, two spurious predictions, two misses
    gold = [["B-D"]] * 8 + [["O"]] * 2 + [["B-D"]] * 2
    pred = [["B-D"]] * 8 + [["B-D"]] * 2 + [["O"]] * 2
    r = evaluate(gold, pred)
    assert (r.micro.tp, r.micro.fp, r.micro.fn) == (8, 2, 2)
    assert r.micro.precision == pytest.approx(0.8)
    assert r.micro.recall == pytest.approx(0.8)
    assert r.micro.f1 == pytest.approx(0.8)


def test_boundary_mismatch_counts_both_ways():
    r = evaluate([["B-D", "I-D", "O"]], [["B-D", "I-D", "I-D"]])
    assert (r.micro.tp, r.micro.fp, r.micro.fn) == (0, 1, 1)


def test_shape_mismatch():
    with pytest.raises(ContractViolation):
        evaluate([["O"]], [])
    with pytest.raises(ContractViolation):
        evaluate([["O"]], [["O", "O"]])


def test_scorer_fixture_hand_counts(fixtures_dir):
    gold, pred = read_three_column(fixtures_dir / "scorer20.conll")
    assert len(gold) == 20
    r = evaluate(gold, pred)
    assert (r.types["Disease"].tp, r.types["Disease"].fp, r.types["Disease"].fn) == (6, 7, 5)
    assert (r.types["Chemical"].tp, r.types["Chemical"].fp, r.types["Chemical"].fn) == (5, 4, 5)
    assert (r.micro.tp, r.micro.fp, r.micro.fn) == (11, 11, 10)
    assert r.repairs == 3
    assert r.micro.precision == pytest.approx(0.5, abs=1e-12)
    assert r.micro.recall == pytest.approx(11 / 21, abs=1e-12)
    assert r.micro.f1 == pytest.approx(float(Fraction(22, 43)), abs=1e-12)
    macro_f1 = (float(Fraction(12, 24)) + float(Fraction(10, 19))) / 2
    assert r.macro["f1"] == pytest.approx(macro_f1, abs=1e-12)


def test_render_zero_predictions_flagged():
    text, doc = report_render(evaluate([["B-D"]], [["O"]]))
    row = next(line for line in text.splitlines() if line.startswith("D "))
    assert row.split()[4:7] == ["0.00", "0.00", "0.00"]
    assert row.endswith("*")
    data = json.loads(doc)
    assert data["types"]["D"]["undefined"] == ["p", "f1"]
    assert set(data) == {"types", "micro", "macro", "repairs"}


def test_render_identity():
    text, _ = report_render(evaluate([["B-D", "O"]], [["B-D", "O"]]))
    row = next(line for line in text.splitlines() if line.startswith("micro"))
    assert row.split()[4:7] == ["100.00", "100.00", "100.00"]


def decimal_oracle(x):
    return str((Decimal(str(x)) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@pytest.mark.parametrize("x,expected", [(0.90165, "90.17"), (0.5, "50.00"), (1.0, "100.00"), (0.0, "0.00"),
                                        (0.123449, "12.34"), (0.00005, "0.01")])
def test_percent_rounding(x, expected):
    assert percent(x) == expected == decimal_oracle(x)


@st.composite
def tag_corpora(draw):
    n = draw(st.integers(1, 6))
    tags = st.sampled_from(["O", "B-C", "I-C", "B-D", "I-D"])
    gold, pred = [], []
    for _ in range(n):
        length = draw(st.integers(1, 8))
        gold.append(draw(st.lists(tags, min_size=length, max_size=length)))
        pred.append(draw(st.lists(tags, min_size=length, max_size=length)))
    return gold, pred


@settings(max_examples=100, deadline=None)
@given(tag_corpora())
def test_symmetry(corpora):
    gold, pred = corpora
    a, b = evaluate(gold, pred), evaluate(pred, gold)
    assert a.micro.tp == b.micro.tp
    assert (a.micro.fp, a.micro.fn) == (b.micro.fn, b.micro.fp)


@settings(max_examples=100, deadline=None)
@given(tag_corpora(), st.randoms(use_true_random=False))
def test_permutation_and_additivity(corpora, rnd):
    gold, pred = corpora
    base = evaluate(gold, pred)
    order = list(range(len(gold)))
    rnd.shuffle(order)
    assert evaluate([gold[i] for i in order], [pred[i] for i in order]).as_dict() == base.as_dict()
    per = [evaluate([g], [p]).micro for g, p in zip(gold, pred)]
    assert base.micro.tp == sum(c.tp for c in per)
    assert base.micro.fp == sum(c.fp for c in per)
    assert base.micro.fn == sum(c.fn for c in per)
    assert base.micro.tp == sum(c.tp for c in base.types.values())


@settings(max_examples=100, deadline=None)
@given(tag_corpora())
def test_self_evaluation_and_disjoint_spans(corpora):
    gold, _ = corpora
    r = evaluate(gold, gold)
    assert r.micro.fp == r.micro.fn == 0
    for tags in gold:
        spans = extract_entities(tags)
        for a, b in zip(spans, spans[1:]):
            assert a.end < b.start
        assert all(0 <= s.start <= s.end < len(tags) for s in spans)
