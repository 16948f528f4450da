from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from adassign.matching import (
    AssignmentError,
    ClickMatrix,
    Layout,
    count_matchings,
    enumerate_matchings,
    image_text_layouts,
    ordered_slot_layouts,
    solve_assignment,
    solve_assignment_batch,
    solve_dual,
    solve_image_text,
    solve_layout_auction,
)
from conftest import brute_force_objective, lp_min_slot_prices, lsa_objective


def random_instance(rng, max_i=5, max_l=5, benefits=True):
    I = int(rng.integers(1, max_i + 1))
    L = int(rng.integers(1, max_l + 1))
    p = rng.uniform(0, 1, (I, L))
    b = rng.uniform(0, 3, I) * (rng.uniform(size=I) > 0.15)
    q = rng.normal(0, 0.3, (I, L)) if benefits and rng.uniform() < 0.5 else None
    return ClickMatrix(p, q), b


def check_feasible(m, cm, b):
    used = [l for l in m.slot_of if l >= 0]
    assert len(used) == len(set(used))
    assert all(-1 <= l < cm.n_slots for l in m.slot_of)
    w = b[:, None] * cm.probs + (cm.benefits if cm.benefits is not None else 0.0)
    recomputed = sum(w[i, l] for i, l in enumerate(m.slot_of) if l >= 0)
    assert m.objective == pytest.approx(recomputed, abs=1e-12)
    for i, l in enumerate(m.slot_of):
        assert m.ctr[i] == (cm.probs[i, l] if l >= 0 else 0.0)


class TestExamples:
    def test_single_pair(self):
        m = solve_assignment(ClickMatrix([[0.5]]), [2.0])
        assert m.slot_of == (0,)
        assert m.objective == pytest.approx(1.0)
        np.testing.assert_allclose(m.ctr, [0.5])

    def test_single_slot_products(self):
        m = solve_assignment(ClickMatrix([[0.6], [0.2]]), [1.0, 2.0])
        assert m.slot_of == (0, -1)

    def test_two_by_two(self):
        cm = ClickMatrix([[0.9, 0.1], [0.8, 0.2]])
        m = solve_assignment(cm, [1.0, 1.0])
        assert m.slot_of == (0, 1)
        assert m.objective == pytest.approx(1.1)
        assert enumerate_matchings(cm, [1.0, 1.0]).slot_of == (0, 1)

    def test_all_zero_bids(self):
        m = solve_assignment(ClickMatrix(np.full((3, 2), 0.5)), np.zeros(3))
        assert m.slot_of == (-1, -1, -1)
        assert m.objective == 0.0

    def test_three_by_two_matches_oracle(self, rng):
        cm = ClickMatrix(rng.uniform(size=(3, 2)))
        b = rng.uniform(0.1, 2, 3)
        assert count_matchings(3, 2) == 13
        assert solve_assignment(cm, b).objective == pytest.approx(brute_force_objective(b[:, None] * cm.probs), abs=1e-12)


class TestValidation:
    def test_rejects_out_of_range(self):
        with pytest.raises(AssignmentError):
            ClickMatrix([[1.5]])
        with pytest.raises(AssignmentError):
            ClickMatrix([[np.nan]])

    def test_rejects_shape_mismatch(self):
        with pytest.raises(AssignmentError):
            ClickMatrix(np.ones((2, 2)) * 0.5, np.zeros((2, 3)))

    def test_rejects_negative_bid(self):
        with pytest.raises(AssignmentError):
            solve_assignment(ClickMatrix([[0.5]]), [-1.0])

    def test_rejects_wrong_bid_length(self):
        with pytest.raises(AssignmentError):
            solve_assignment(ClickMatrix([[0.5]]), [1.0, 2.0])


class TestOracleEquivalence:
    def test_random_instances(self, rng):
        for _ in range(300):
            cm, b = random_instance(rng)
            m = solve_assignment(cm, b)
            e = enumerate_matchings(cm, b)
            check_feasible(m, cm, b)
            assert abs(m.objective - e.objective) <= 1e-12
            assert m.slot_of == e.slot_of
            w = b[:, None] * cm.probs + (cm.benefits if cm.benefits is not None else 0.0)
            w = np.where(b[:, None] > 0, w, 0.0)
            assert m.objective == pytest.approx(lsa_objective(w), abs=1e-12)

    def test_batch_matches_single(self, rng):
        for I, L in [(3, 2), (4, 4), (5, 3), (2, 5)]:
            N = 200
            probs = rng.uniform(size=(N, I, L))
            bids = rng.uniform(0, 2, (N, I)) * (rng.uniform(size=(N, I)) > 0.1)
            ben = rng.normal(0, 0.2, (N, I, L))
            out = solve_assignment_batch(probs, bids, ben)
            for n in range(N):
                m = solve_assignment(ClickMatrix(probs[n], ben[n]), bids[n])
                assert tuple(out.slot_of[n]) == m.slot_of
                assert out.objective[n] == pytest.approx(m.objective, abs=1e-12)
                np.testing.assert_array_equal(out.ctr[n], m.ctr)

    def test_ties_choose_smallest_slot_vector(self):
        cm = ClickMatrix(np.full((2, 1), 0.5))
        assert solve_assignment(cm, [1.0, 1.0]).slot_of == (0, -1)
        assert solve_assignment_batch(cm.probs[None], np.ones(2)).slot_of[0].tolist() == [0, -1]

    def test_organic_rows_compete(self):
        cm = ClickMatrix([[0.5, 0.2]], organic=[[0.6, 0.0]])
        m = solve_assignment(cm, [1.0])
        assert m.slot_of == (1,)
        assert m.organic_slot_of == (0,)
        assert m.objective == pytest.approx(0.8)


class TestZeroBids:
    @settings(max_examples=60, deadline=None)
    @given(arrays(float, (4, 3), elements=st.floats(0, 1)), st.integers(0, 3))
    def test_zero_bid_never_assigned(self, probs, i):
        b = np.ones(4)
        b[i] = 0.0
        ben = np.full((4, 3), 0.3)
        m = solve_assignment(ClickMatrix(probs, ben), b)
        assert m.slot_of[i] == -1
        assert m.ctr[i] == 0.0


class TestProperties:
    @settings(max_examples=80, deadline=None)
    @given(arrays(float, (3, 3), elements=st.floats(0, 1)),
           arrays(float, 3, elements=st.floats(0, 5)),
           st.integers(0, 2), st.floats(0, 3))
    def test_objective_nondecreasing_in_bids(self, probs, b, i, extra):
        cm = ClickMatrix(probs)
        up = b.copy()
        up[i] += extra
        assert solve_assignment(cm, up).objective >= solve_assignment(cm, b).objective - 1e-12

    @settings(max_examples=80, deadline=None)
    @given(arrays(float, (3, 2), elements=st.floats(0, 1)),
           arrays(float, 3, elements=st.floats(0.01, 5)), st.integers(0, 2), st.floats(1.0, 4.0))
    def test_own_ctr_monotone(self, probs, b, i, factor):
        cm = ClickMatrix(probs)
        up = b.copy()
        up[i] *= factor
        assert solve_assignment(cm, up).ctr[i] >= solve_assignment(cm, b).ctr[i]


class TestDual:
    def test_single_slot_example(self):
        cm = ClickMatrix([[0.6], [0.2]])
        b = [1.0, 2.0]
        d = solve_dual(cm, b, solve_assignment(cm, b))
        np.testing.assert_allclose(d.v, [0.4])
        np.testing.assert_allclose(d.s, [0.2, 0.0], atol=1e-15)

    def test_lone_advertiser(self):
        cm = ClickMatrix([[0.5]])
        d = solve_dual(cm, [2.0], solve_assignment(cm, [2.0]))
        np.testing.assert_allclose(d.v, [0.0])
        np.testing.assert_allclose(d.s, [1.0])

    def test_against_lp(self, rng):
        for _ in range(150):
            cm, b = random_instance(rng, 4, 4, benefits=False)
            m = solve_assignment(cm, b)
            d = solve_dual(cm, b, m)
            w = b[:, None] * cm.probs
            assert (d.s[:, None] + d.v[None, :] >= w - 1e-9).all()
            assert d.total == pytest.approx(m.objective, abs=1e-9)
            total, min_v = lp_min_slot_prices(w)
            assert total == pytest.approx(m.objective, abs=1e-8)
            assert d.v.sum() == pytest.approx(min_v, abs=1e-7)

    def test_rejects_benefits(self):
        cm = ClickMatrix([[0.5]], [[0.1]])
        with pytest.raises(AssignmentError):
            solve_dual(cm, [1.0], solve_assignment(cm, [1.0]))

    def test_rejects_suboptimal_matching(self):
        cm = ClickMatrix([[0.6], [0.2]])
        bad = solve_assignment(cm, [0.0, 2.0])
        with pytest.raises(AssignmentError):
            solve_dual(cm, [1.0, 2.0], bad)


class TestLayouts:
    def test_image_beats_text(self):
        text = ClickMatrix([[0.9], [0.0]])
        lay, ctr = solve_image_text(text, [0.0, 0.55], [1.0, 2.0])
        assert lay.id == ("image", 1)
        np.testing.assert_allclose(ctr, [0.0, 0.55])

    def test_single_layout(self):
        only = Layout("only", [0.3, 0.1])
        lay, _ = solve_layout_auction([only], [1.0, 1.0])
        assert lay is only

    def test_ordered_layouts_match_assignment(self, rng):
        for _ in range(100):
            I = int(rng.integers(1, 4))
            L = int(rng.integers(1, 4))
            cm = ClickMatrix(rng.uniform(size=(I, L)))
            b = rng.uniform(0.1, 2, I)
            lay, ctr = solve_layout_auction(ordered_slot_layouts(cm), b)
            m = solve_assignment(cm, b)
            assert float(b @ ctr) == pytest.approx(m.objective, abs=1e-12)

    def test_zero_bid_layout_ctr(self):
        lay, ctr = solve_layout_auction([Layout("a", [0.5, 0.5])], [1.0, 0.0])
        np.testing.assert_array_equal(ctr, [0.5, 0.0])

    def test_image_text_equals_exhaustive(self, rng):
        for _ in range(200):
            I = int(rng.integers(1, 5))
            L = int(rng.integers(1, 4))
            text = ClickMatrix(rng.uniform(size=(I, L)))
            img = rng.uniform(size=I) * (rng.uniform(size=I) < 0.6)
            b = rng.uniform(0, 2, I)
            _, ctr = solve_image_text(text, img, b)
            _, best = solve_layout_auction(image_text_layouts(text, img), b)
            assert float(b @ ctr) == pytest.approx(float(b @ best), abs=1e-12)
