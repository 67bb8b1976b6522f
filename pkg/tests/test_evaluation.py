import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from screc.evaluation import (MetricsReport, cov_at_k, hr_at_k, metrics_from_scores, ndcg_at_k,
                              rank_items)


def hand_metrics(scores, targets, exclusions, ks):
    """Per-user python sort; returns dict of metric -> value."""
    U, C = len(scores), len(scores[0])
    ranks, tops = [], []
    for u in range(U):
        excl = set(exclusions[u]) if exclusions else set()
        items = [c + 1 for c in range(C) if c + 1 not in excl]
        ordered = sorted(items, key=lambda c: (-scores[u][c - 1], c))
        ranks.append(ordered.index(targets[u]) + 1 if targets[u] in ordered else C + 1)
        tops.append(ordered)
    out = {}
    for k in ks:
        out[f"ndcg@{k}"] = sum(1 / math.log2(1 + r) if r <= k else 0.0 for r in ranks) / U
        out[f"hr@{k}"] = sum(1.0 for r in ranks if r <= k) / U
        out[f"cov@{k}"] = len({c for t in tops for c in t[:k]}) / C
    return out


def test_ndcg_cases():
    assert ndcg_at_k(1, 10) == 1.0
    assert ndcg_at_k(2, 10) == pytest.approx(0.6309297535714575, abs=1e-15)
    assert ndcg_at_k(11, 10) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(1, 0)


def test_hr_and_cov_cases():
    assert hr_at_k(5, 5) == 1.0 and hr_at_k(6, 5) == 0.0
    assert cov_at_k([[1, 2, 3]] * 4, 20) == 3 / 20
    assert cov_at_k([[1, 2], [2, 3]], 4) == 3 / 4


def test_rank_items_cases():
    Y = np.eye(5)
    assert rank_items(np.eye(5)[2], Y)[0] == 3
    assert rank_items(np.zeros(5), Y).tolist() == [1, 2, 3, 4, 5]
    assert rank_items(np.eye(5)[2], Y, exclusions={3}).tolist() == [1, 2, 4, 5]
    with pytest.raises(ValueError):
        rank_items(np.zeros(2), np.eye(2), exclusions={1, 2})


def test_rank_items_vs_sort_oracle():
    rng = np.random.default_rng(0)
    x, Y = rng.normal(size=4), rng.normal(size=(12, 4))
    s = Y @ x
    assert rank_items(x, Y).tolist() == sorted(range(1, 13), key=lambda c: (-s[c - 1], c))


@settings(max_examples=300, deadline=None)
@given(st.data())
def test_metrics_match_hand_computation(data):
    C = data.draw(st.integers(1, 20))
    U = data.draw(st.integers(1, 10))
    # small integer scores produce plenty of ties
    scores = [[float(data.draw(st.integers(-3, 3))) for _ in range(C)] for _ in range(U)]
    targets = [data.draw(st.integers(1, C)) for _ in range(U)]
    use_excl = data.draw(st.booleans())
    excl = [data.draw(st.sets(st.integers(1, C), max_size=C - 1)) for _ in range(U)] if use_excl else None
    ks = (1, 5, 10)
    rep = metrics_from_scores(np.array(scores), targets, excl, ks).to_dict()
    ref = hand_metrics(scores, targets, excl, ks)
    for key, v in ref.items():
        assert abs(rep[key] - v) <= 1e-12, key
    assert rep["ndcg@1"] == rep["hr@1"]
    for a, b in ((1, 5), (5, 10)):
        assert rep[f"hr@{a}"] <= rep[f"hr@{b}"] and rep[f"ndcg@{a}"] <= rep[f"ndcg@{b}"] + 1e-15
    for k in ks:
        assert rep[f"ndcg@{k}"] <= rep[f"hr@{k}"] + 1e-15


def test_identical_lists_give_k_over_c():
    C, U = 20, 7
    scores = np.tile(np.arange(C, 0, -1, dtype=float), (U, 1))
    rep = metrics_from_scores(scores, [1] * U)
    for k in (1, 5, 10):
        assert rep.cov[k] == pytest.approx(k / C, abs=1e-12)


def test_report_roundtrip_and_pretty():
    rep = metrics_from_scores(np.eye(4), [1, 2, 4, 3])
    again = MetricsReport.from_dict(rep.to_dict())
    assert again.to_dict() == rep.to_dict()
    assert "NDCG" in rep.pretty() and rep.n_users == 4
