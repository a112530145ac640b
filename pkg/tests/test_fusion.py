import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trackid.autodiff import Prng
from trackid.errors import DimensionError
from trackid.fusion import (EPS, RULES, FusedScore, classify_fused, fuse, fuse_geomean,
                            fuse_logsum, fuse_mean, fuse_median, fuse_product, fuse_topn,
                            fusion_probs, predict_tracklet, read_score_csv, write_score_csv)
from trackid.models import FusionCNN, ModelConfig, ResNet10, ResNetLSTM, score_tracklet


def stochastic(rng, n, m, alpha=1.0):
    return rng.dirichlet(np.full(m, alpha), n)


@st.composite
def score_matrices(draw, max_n=32, max_m=81):
    n = draw(st.integers(1, max_n))
    m = draw(st.integers(2, max_m))
    seed = draw(st.integers(0, 2**32 - 1))
    alpha = draw(st.sampled_from([0.05, 0.3, 1.0, 5.0]))
    S = stochastic(np.random.default_rng(seed), n, m, alpha)
    # strictly positive entries, floored so a 32-row product stays above the
    # float64 underflow limit
    S = np.maximum(S, 1e-9)
    return S / S.sum(axis=1, keepdims=True)


# -- worked examples ---------------------------------------------------------

def test_mean_example():
    np.testing.assert_allclose(fuse_mean([[0.2, 0.8], [0.6, 0.4]]).scores, [0.4, 0.6], atol=1e-15)


def test_median_example():
    S = np.array([[0.1, 0.9], [0.5, 0.5], [0.9, 0.1]])
    assert fuse_median(S).scores[0] == 0.5


def test_mean_matches_column_mean_oracle():
    S = stochastic(np.random.default_rng(0), 7, 5)
    oracle = [sum(S[:, j]) / 7 for j in range(5)]
    np.testing.assert_allclose(fuse_mean(S).scores, oracle, atol=1e-9)
    assert abs(fuse_mean(S).scores.sum() - 1) < 1e-6


def test_rule_formulas_against_direct_oracles():
    S = stochastic(np.random.default_rng(1), 6, 4)
    np.testing.assert_allclose(fuse_product(S).scores, [np.prod([S[i, j] + EPS for i in range(6)]) for j in range(4)],
                               rtol=1e-12)
    np.testing.assert_allclose(fuse_logsum(S).scores, [sum(np.log(S[:, j] + EPS)) for j in range(4)], rtol=1e-12)
    np.testing.assert_allclose(fuse_geomean(S).scores, np.prod(S + EPS, axis=0) ** (1 / 6), rtol=1e-12)
    top3 = [np.mean(sorted(S[:, j])[-3:]) for j in range(4)]
    np.testing.assert_allclose(fuse_topn(S, 3).scores, top3, rtol=1e-12)


def test_product_floors_zero_entries():
    S = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert fuse_product(S).scores[1] == pytest.approx(EPS ** 2)
    assert np.isfinite(fuse_logsum(S).scores).all()


def test_topn_range_checked():
    S = stochastic(np.random.default_rng(2), 4, 3)
    for n in (0, 5):
        with pytest.raises(ValueError):
            fuse_topn(S, n)
    # the generic dispatcher clamps the CLI default to the tracklet length
    np.testing.assert_array_equal(fuse(S, "topn", 99).scores, fuse_topn(S, 4).scores)


def test_unknown_rule_and_invalid_matrices():
    S = stochastic(np.random.default_rng(3), 3, 3)
    with pytest.raises(ValueError):
        fuse(S, "vote")
    with pytest.raises(ValueError):
        fuse_mean([[0.5, 0.6]])
    with pytest.raises(ValueError):
        fuse_mean([[1.5, -0.5]])
    with pytest.raises(DimensionError):
        fuse_mean(np.zeros((0, 3)))


def test_ties_break_to_lowest_index():
    assert fuse_mean([[0.25, 0.375, 0.375]]).argmax() == 1
    assert fuse_mean([[0.5, 0.5], [0.5, 0.5]]).argmax() == 0


# -- properties ----------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(score_matrices(), st.randoms(use_true_random=False))
def test_every_rule_is_row_permutation_invariant(S, rnd):
    order = list(range(len(S)))
    rnd.shuffle(order)
    for rule in RULES:
        np.testing.assert_array_equal(fuse(S, rule).scores, fuse(S[order], rule).scores)


@settings(max_examples=100, deadline=None)
@given(score_matrices())
def test_product_logsum_geomean_agree(S):
    a = fuse_product(S).argmax()
    assert a == fuse_logsum(S).argmax() == fuse_geomean(S).argmax()


@settings(max_examples=100, deadline=None)
@given(score_matrices())
def test_topn_of_all_rows_is_mean(S):
    np.testing.assert_allclose(fuse_topn(S, len(S)).scores, fuse_mean(S).scores, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(score_matrices(max_n=1))
def test_single_row_degeneracy(S):
    k = int(np.argmax(S[0]))
    for rule in RULES:
        assert fuse(S, rule).argmax() == k
    np.testing.assert_array_equal(fuse_mean(S).scores, S[0])


@settings(max_examples=100, deadline=None)
@given(score_matrices())
def test_bounded_rules_stay_in_unit_interval(S):
    for rule in ("mean", "median", "topn"):
        v = fuse(S, rule, 3).scores
        assert np.all(v >= 0) and np.all(v <= 1)
    np.testing.assert_allclose(fuse_mean(S).scores.sum(), 1.0, atol=1e-6)


# -- secondary classifier ------------------------------------------------------

def test_classify_fused_accepts_mean_only():
    net = FusionCNN(6, Prng(0))
    S = stochastic(np.random.default_rng(4), 5, 6)
    k = classify_fused(fuse_mean(S), net)
    assert k == int(np.argmax(fusion_probs(net, fuse_mean(S).scores)[0]))
    assert classify_fused(fuse_mean(S), net) == k
    with pytest.raises(ValueError):
        classify_fused(fuse_median(S), net)
    with pytest.raises(DimensionError):
        classify_fused(np.full(5, 0.2), net)


def test_fusion_probs_are_distributions_and_leave_mode():
    net = FusionCNN(6, Prng(1))
    net.train()
    P = fusion_probs(net, stochastic(np.random.default_rng(5), 8, 6))
    assert P.shape == (8, 6)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-6)
    assert net.training


# -- tracklet prediction ------------------------------------------------------

TINY = ModelConfig(input_h=24, input_w=24, precrop_h=28, precrop_w=28,
                   width_factor=0.125, num_classes=5, lstm_hidden=32)


def test_predict_matches_hand_composed_oracle():
    rng = np.random.default_rng(6)
    seq = ResNetLSTM(TINY, Prng(2))
    fnet = FusionCNN(5, Prng(3))
    for i in range(20):
        x = rng.random((int(rng.integers(16, 40)), 3, 28, 28)).astype(np.float32)
        S = score_tracklet(seq, x)
        for rule in ("mean", "logsum", "topn"):
            fused = fuse(S, rule, 5).scores
            k = int(np.argmax(fused))
            assert predict_tracklet(seq, x, rule=rule) == (k, float(fused[k]))
        p = fusion_probs(fnet, S.mean(axis=0))[0]
        k, conf = predict_tracklet(seq, x, fusion_net=fnet)
        assert k == int(np.argmax(p)) and conf == pytest.approx(float(p.max()), rel=1e-5)


def test_constant_frames_match_single_frame_argmax():
    frame_net = ResNet10(TINY, Prng(4))
    f = np.random.default_rng(7).random((3, 28, 28)).astype(np.float32)
    single = score_tracklet(frame_net, f[None])[0]
    k, _ = predict_tracklet(frame_net, np.repeat(f[None], 20, axis=0))
    assert k == int(np.argmax(single))


def test_frame_only_path_ignores_frame_order():
    frame_net = ResNet10(TINY, Prng(5))
    x = np.random.default_rng(8).random((16, 3, 28, 28)).astype(np.float32)
    perm = np.random.default_rng(9).permutation(16)
    a = fuse_mean(score_tracklet(frame_net, x)).scores
    b = fuse_mean(score_tracklet(frame_net, x[perm])).scores
    np.testing.assert_allclose(a, b, atol=1e-7)
    assert np.argmax(a) == np.argmax(b)


# -- score export --------------------------------------------------------------

def test_score_csv_round_trip(tmp_path):
    S = stochastic(np.random.default_rng(10), 9, 4)
    path = tmp_path / "s.csv"
    write_score_csv(S, [0, 14, 45, 100], path)
    labels, back = read_score_csv(path)
    assert labels == [0, 14, 45, 100]
    np.testing.assert_allclose(back, S, rtol=1e-7)
    assert path.read_text().splitlines()[0] == "0,14,45,100"


def test_fused_score_carries_rule():
    S = stochastic(np.random.default_rng(11), 3, 3)
    for rule in RULES:
        f = fuse(S, rule, 2)
        assert isinstance(f, FusedScore) and f.rule == rule
