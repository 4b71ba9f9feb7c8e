import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refgs.numkit import make_rng
from refgs.pseudomask import (
    Candidate,
    CandidateMaskSet,
    CorruptionConfig,
    corrupt_masks,
    filter_candidates,
    iou,
    load_candidates,
    overlap_scores,
    save_candidates,
    select_iou_unweighted,
    select_top1,
    select_weighted_iou,
    selection_benchmark,
    weighted_jaccard,
)


def _square(n, y0, x0, size):
    m = np.zeros((n, n), dtype=bool)
    m[y0:y0 + size, x0:x0 + size] = True
    return m


def _set(masks, gammas):
    return CandidateMaskSet([Candidate(np.asarray(m, bool), g) for m, g in zip(masks, gammas)])


def _pixel_oracle(mk, gk, mj, gj):
    lo = hi = 0.0
    for a, b in zip(np.ravel(mk), np.ravel(mj)):
        va, vb = gk * a, gj * b
        lo += min(va, vb)
        hi += max(va, vb)
    return 1.0 if hi == 0 else lo / hi


masks_st = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).random((5, 5)) > 0.5)
gamma_st = st.floats(0.01, 1.0)


# -- weighted Jaccard ----------------------------------------------------------------


def test_weighted_jaccard_examples():
    a = _square(4, 0, 0, 2)
    assert weighted_jaccard(a, 0.7, a, 0.7) == 1.0
    assert weighted_jaccard(_square(4, 0, 0, 1), 0.5, _square(4, 3, 3, 1), 0.5) == 0.0
    k = np.array([[1, 1], [0, 0]], bool)
    j = np.array([[1, 0], [0, 0]], bool)
    assert weighted_jaccard(k, 0.8, j, 0.4) == pytest.approx(0.25, abs=1e-15)
    assert weighted_jaccard(np.zeros((2, 2)), 0.5, np.zeros((2, 2)), 0.9) == 1.0


@given(masks_st, gamma_st, masks_st, gamma_st)
def test_weighted_jaccard_matches_pixel_oracle_and_is_symmetric(mk, gk, mj, gj):
    w = weighted_jaccard(mk, gk, mj, gj)
    assert w == pytest.approx(_pixel_oracle(mk, gk, mj, gj), abs=1e-12)
    assert w == pytest.approx(weighted_jaccard(mj, gj, mk, gk), abs=1e-15)
    assert 0.0 <= w <= 1.0
    same_soft = np.array_equal(mk * gk, mj * gj)
    assert (w == 1.0) == same_soft or not (mk.any() or mj.any())


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_vectorised_scores_match_pairwise_definition(seed, k):
    rng = np.random.default_rng(seed)
    ms = [rng.random((6, 6)) > 0.6 for _ in range(k)]
    gs = rng.uniform(0.1, 1.0, k)
    cs = _set(ms, gs)
    p = [sum(_pixel_oracle(ms[a], gs[a], ms[b], gs[b]) for b in range(k)) for a in range(k)]
    np.testing.assert_allclose(overlap_scores(cs), p, atol=1e-12)


# -- selectors ------------------------------------------------------------------------


def test_identical_candidates_pick_index_zero():
    m = _square(8, 2, 2, 3)
    cs = _set([m] * 4, [0.6] * 4)
    np.testing.assert_allclose(overlap_scores(cs), 4.0)
    assert select_weighted_iou(cs)[0] == 0
    assert select_iou_unweighted(cs)[0] == 0
    assert select_top1(cs)[0] == 0


def test_single_candidate():
    m = _square(8, 1, 1, 2)
    cs = _set([m], [0.4])
    assert select_weighted_iou(cs)[0] == 0
    assert overlap_scores(cs).tolist() == [1.0]


def test_scripted_set_matches_exhaustive_oracle():
    a = _square(4, 0, 0, 2)
    b = _square(4, 0, 0, 3)
    c = _square(4, 2, 2, 2)
    gammas = [0.9, 0.5, 0.95]
    cs = _set([a, b, c], gammas)
    p = [sum(_pixel_oracle(x, gx, y, gy) for y, gy in zip([a, b, c], gammas)) for x, gx in zip([a, b, c], gammas)]
    assert select_weighted_iou(cs)[0] == int(np.argmax(p))
    assert select_top1(cs)[0] == 2


def test_top1_examples():
    m = _square(4, 0, 0, 1)
    assert select_top1(_set([m] * 3, [0.5, 0.9, 0.7]))[0] == 1
    assert select_top1(_set([m] * 3, [0.5, 0.5, 0.5]))[0] == 0


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_top1_matches_max_oracle(seed):
    rng = np.random.default_rng(seed)
    gs = rng.random(6)
    cs = _set([rng.random((3, 3)) > 0.5 for _ in range(6)], gs)
    assert select_top1(cs)[0] == max(range(6), key=lambda i: (gs[i], -i))


def test_unweighted_rejects_outlier():
    base = _square(10, 2, 2, 5)
    near = [base, _square(10, 2, 3, 5), _square(10, 3, 2, 5), _square(10, 2, 2, 4)]
    outlier = _square(10, 7, 7, 3)
    cs = _set([outlier] + near, [0.99, 0.5, 0.5, 0.5, 0.5])
    assert select_iou_unweighted(cs)[0] != 0
    assert select_weighted_iou(cs)[0] != 0


@settings(max_examples=40)
@given(st.integers(0, 2**31), st.floats(0.05, 20.0))
def test_selection_is_confidence_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    ms = [rng.random((6, 6)) > 0.5 for _ in range(5)]
    gs = rng.uniform(0.05, 1.0, 5)
    a = overlap_scores(_set(ms, gs))
    b = overlap_scores(_set(ms, gs * c))
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert select_weighted_iou(_set(ms, gs))[0] == select_weighted_iou(_set(ms, gs * c))[0]


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(0.05, 1.0))
def test_equal_confidences_reduce_to_unweighted(seed, g):
    rng = np.random.default_rng(seed)
    cs = _set([rng.random((6, 6)) > 0.5 for _ in range(5)], [g] * 5)
    assert select_weighted_iou(cs)[0] == select_iou_unweighted(cs)[0]


# -- filtering ---------------------------------------------------------------------------


def test_filter_examples(caplog):
    m = _square(4, 0, 0, 1)
    assert len(filter_candidates(_set([m] * 3, [0.9] * 3), 0.3)) == 3
    assert len(filter_candidates(_set([m] * 3, [0.2, 0.4, 0.5]), 0.3)) == 2
    with caplog.at_level(logging.WARNING):
        kept = filter_candidates(_set([m] * 3, [0.1, 0.15, 0.05]), 0.3)
    assert kept.gammas.tolist() == [0.15]
    assert "below eps" in caplog.text
    with pytest.raises(ValueError):
        filter_candidates(_set([m], [0.5]), 1.0)


def test_mixed_shapes_are_rejected():
    with pytest.raises(ValueError):
        _set([np.zeros((2, 2)), np.zeros((3, 3))], [0.5, 0.5])


# -- corruption ----------------------------------------------------------------------------


def test_zero_noise_gives_identical_copies():
    gt = _square(16, 4, 4, 6)
    cs = corrupt_masks(gt, CorruptionConfig.zero_noise(5), make_rng(0, "corruption"))
    assert len(cs) == 5
    assert all(np.array_equal(m, gt) for m in cs.masks)
    for name in ("weighted", "unweighted", "top1"):
        from refgs.pseudomask import SELECTORS
        assert iou(SELECTORS[name](cs)[1], gt) == 1.0


def test_wrong_object_rate_one_never_returns_gt():
    gt = _square(16, 2, 2, 4)
    decoy = _square(16, 9, 9, 5)
    cfg = CorruptionConfig(k=9, wrong_object_rate=1.0)
    for s in range(5):
        cs = corrupt_masks(gt, cfg, make_rng(s, "corruption"), [decoy])
        assert not any(np.array_equal(m, gt) for m in cs.masks)
    cs = corrupt_masks(gt, cfg, make_rng(0, "corruption"))
    assert not any(np.array_equal(m, gt) for m in cs.masks)


def test_corruption_is_deterministic():
    gt = _square(16, 4, 4, 6)
    a = corrupt_masks(gt, CorruptionConfig(), make_rng(3, "corruption"), [_square(16, 0, 10, 4)])
    b = corrupt_masks(gt, CorruptionConfig(), make_rng(3, "corruption"), [_square(16, 0, 10, 4)])
    assert all(np.array_equal(x, y) for x, y in zip(a.masks, b.masks))
    assert a.gammas.tolist() == b.gammas.tolist()


def test_empty_gt_is_an_error():
    with pytest.raises(ValueError):
        corrupt_masks(np.zeros((4, 4), bool), CorruptionConfig(), make_rng(0, "corruption"))


def _scene_samples():
    return [(_square(32, 4, 4, 8), [_square(32, 18, 16, 9), _square(32, 3, 20, 6)]),
            (_square(32, 12, 10, 6), [_square(32, 2, 2, 7), _square(32, 22, 22, 8)]),
            (_square(32, 20, 3, 10), [_square(32, 4, 18, 8)])]


def test_default_corruption_is_informative_but_imperfect():
    bench = selection_benchmark(_scene_samples(), trials=200, seed=0)
    assert 0.0 < bench.candidate_iou < 1.0
    assert bench.top1_is_best < 1.0


def test_default_corruption_reproduces_selector_ordering():
    # the weighted/unweighted gap is about 0.01 here, so use enough trials to resolve it
    bench = selection_benchmark(_scene_samples(), trials=1000, seed=0)
    assert bench.ordered(), bench.mean_iou


def test_iou_examples():
    a = _square(4, 0, 0, 2)
    assert iou(a, a) == 1.0
    assert iou(a, _square(4, 2, 2, 2)) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    assert iou(a, _square(4, 0, 0, 1)) == 0.25
    with pytest.raises(ValueError):
        iou(a, np.zeros((3, 3)))


def test_candidate_directory_round_trip(tmp_path):
    gt = _square(12, 2, 2, 5)
    cs = corrupt_masks(gt, CorruptionConfig(), make_rng(1, "corruption"), [_square(12, 8, 8, 3)])
    save_candidates(cs, tmp_path / "c", gt=gt, seed=1, comment="config_hash=abc")
    back, gt2 = load_candidates(tmp_path / "c")
    assert np.array_equal(gt2, gt)
    assert back.gammas.tolist() == cs.gammas.tolist()
    assert all(np.array_equal(a, b) for a, b in zip(back.masks, cs.masks))
