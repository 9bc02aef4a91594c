import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jointpercept import numcore as nc
from jointpercept.head import (adapted_score, adapted_scores, infer, joint_logit, predict, similarity_logits,
                               smoothed_nll, task_loss)
from jointpercept.tasks import make_classification

F64 = np.float64


def vec(x):
    return nc.Tensor(np.asarray(x, dtype=F64), dtype=F64)


def log_tau(tau):
    return vec([math.log(tau)])


def test_joint_logit_examples():
    v = vec([0.3, -1.0, 2.0])
    assert joint_logit(v, v, log_tau(1.0)).item() == pytest.approx(1.0, abs=1e-12)
    assert joint_logit(vec([1.0, 0.0]), vec([0.0, 2.0]), log_tau(0.07)).item() == 0.0


def test_joint_logit_rejects_zero_vectors():
    with pytest.raises(nc.NumericError):
        joint_logit(vec([0.0, 0.0]), vec([1.0, 0.0]), log_tau(1.0))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(F64, 6, elements=st.floats(-3, 3)), hnp.arrays(F64, 6, elements=st.floats(-3, 3)),
       st.floats(0.01, 100), st.floats(0.01, 2))
def test_joint_logit_matches_direct_formula_and_is_scale_invariant(a, b, c, tau):
    a, b = a + 0.1, b - 0.1  # keep away from the zero vector
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    direct = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) / tau)
    got = joint_logit(vec(a), vec(b), log_tau(tau)).item()
    assert got == pytest.approx(direct, rel=1e-9, abs=1e-9)
    assert joint_logit(vec(a), vec(b * c), log_tau(tau)).item() == pytest.approx(got, rel=1e-9, abs=1e-9)
    # symmetric in its arguments
    assert joint_logit(vec(b), vec(a), log_tau(tau)).item() == pytest.approx(got, rel=1e-12, abs=1e-12)


def test_similarity_matrix_matches_pairwise_logits():
    rng = np.random.default_rng(0)
    fx, fy = vec(rng.normal(size=(3, 5))), vec(rng.normal(size=(4, 5)))
    lt = log_tau(0.2)
    m = similarity_logits(fx, fy, lt).data
    for i in range(3):
        for k in range(4):
            assert m[i, k] == pytest.approx(joint_logit(vec(fx.data[i]), vec(fy.data[k]), lt).item(), abs=1e-12)


def test_single_candidate_has_probability_one():
    arg, p = infer(vec([[1.0, 2.0]]), vec([[-1.0, 0.5]]), log_tau(0.07))
    assert arg.tolist() == [0]
    np.testing.assert_array_equal(p, [[1.0]])


def test_empty_candidate_set():
    with pytest.raises(ValueError):
        infer(vec([[1.0, 2.0]]), nc.Tensor(np.zeros((0, 2)), dtype=F64), log_tau(1.0))


def test_three_candidate_probabilities_match_direct_softmax():
    fx = np.array([0.2, -0.4, 1.0, 0.3])
    fy = np.array([[1.0, 0.0, 0.5, 0.0], [0.0, -1.0, 0.2, 0.9], [-0.3, 0.3, 0.3, -0.3]])
    tau = 0.5
    cos = [float(fx @ y / np.linalg.norm(fx) / np.linalg.norm(y)) for y in fy]
    e = [math.exp(c / tau) for c in cos]
    want = [x / sum(e) for x in e]
    arg, p = infer(vec(fx[None]), vec(fy), log_tau(tau))
    np.testing.assert_allclose(p[0], want, atol=1e-12)
    assert arg[0] == int(np.argmax(want))


def test_duplicate_targets_get_equal_probability():
    rng = np.random.default_rng(0)
    fy = rng.normal(size=(3, 8))
    fy = np.concatenate([fy, fy[1:2]])
    _, p = infer(vec(rng.normal(size=(2, 8))), vec(fy), log_tau(0.07))
    np.testing.assert_allclose(p[:, 1], p[:, 3], atol=1e-15)


def test_ties_break_to_lowest_index():
    fy = vec([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    arg, _ = infer(vec([[1.0, 0.0]]), fy, log_tau(0.1))
    assert arg[0] == 0


@pytest.mark.parametrize("eps", [0.0, 0.1])
@pytest.mark.parametrize("k", [2, 5, 17])
def test_uniform_logits_give_log_k(k, eps):
    loss = smoothed_nll(vec(np.full((3, k), 0.7)), np.array([0, k - 1, 1]), eps)
    assert loss.item() == pytest.approx(math.log(k), abs=1e-12)


def test_two_target_smoothed_loss_closed_form():
    tau, eps = 0.07, 0.1
    a = 1.0 / tau
    lse = math.log(math.exp(a) + 1.0)
    want = -((1 - eps + eps / 2) * (a - lse) + (eps / 2) * (0.0 - lse))
    got = smoothed_nll(vec([[a, 0.0]]), np.array([0]), eps).item()
    assert got == pytest.approx(want, rel=1e-12)


def test_smoothed_loss_rejects_bad_truth():
    with pytest.raises(ValueError):
        smoothed_nll(vec([[0.0, 1.0]]), np.array([2]), 0.1)


def test_fresh_head_scores_equal_exp_joint_logit():
    rng = np.random.default_rng(0)
    fx, fy = vec(rng.normal(size=(4, 6))), vec(rng.normal(size=(3, 6)))
    lt = log_tau(0.07)
    s = adapted_scores(fx, fy, lt, vec([1.0]), vec(np.zeros((3, 6))), vec(np.zeros(3))).data
    np.testing.assert_allclose(s, np.exp(similarity_logits(fx, fy, lt).data), rtol=1e-12)
    np.testing.assert_array_equal(s.argmax(axis=1), infer(fx, fy, lt)[0])


def test_alpha_zero_is_a_linear_probe():
    rng = np.random.default_rng(1)
    fx, fy = rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    w, b = rng.normal(size=(3, 6)), rng.normal(size=3)
    s = adapted_scores(vec(fx), vec(fy), log_tau(0.07), vec([0.0]), vec(w), vec(b)).data
    np.testing.assert_allclose(s, fx @ w.T + b, atol=1e-12)


def test_random_head_matches_direct_evaluation():
    rng = np.random.default_rng(2)
    fx, fy = rng.normal(size=6), rng.normal(size=(3, 6))
    alpha, w, b, tau = 0.7, rng.normal(size=(3, 6)), rng.normal(size=3), 0.3
    for k in range(3):
        cos = fx @ fy[k] / np.linalg.norm(fx) / np.linalg.norm(fy[k])
        want = alpha * math.exp(cos / tau) + w[k] @ fx + b[k]
        got = adapted_score(vec(fx), vec(fy[k]), log_tau(tau), vec([alpha]), vec(w), vec(b), k).item()
        assert got == pytest.approx(want, rel=1e-12)
    batch = adapted_scores(vec(fx[None]), vec(fy), log_tau(tau), vec([alpha]), vec(w), vec(b)).data[0]
    for k in range(3):
        assert batch[k] == pytest.approx(
            adapted_score(vec(fx), vec(fy[k]), log_tau(tau), vec([alpha]), vec(w), vec(b), k).item(), rel=1e-12)


def test_adapted_score_class_out_of_range():
    with pytest.raises(IndexError):
        adapted_score(vec([1.0]), vec([1.0]), log_tau(1.0), vec([1.0]), vec([[0.0]]), vec([0.0]), 1)


def test_head_shape_mismatch():
    with pytest.raises(nc.ShapeError):
        adapted_scores(vec([[1.0, 2.0]]), vec([[1.0, 0.0]]), log_tau(1.0), vec([1.0]), vec(np.zeros((2, 2))),
                       vec(np.zeros(2)))


def test_single_class_instance_has_zero_loss(ctx, fresh_model):
    inst = make_classification(ctx, [np.zeros((16, 16, 3))], [0], ["red square"])
    assert task_loss(inst, fresh_model).item() == 0.0
    assert predict(inst, fresh_model)[1].tolist() == [[1.0]]


def test_task_loss_validates_truth(ctx, fresh_model):
    inst = make_classification(ctx, [np.zeros((16, 16, 3))], [0], ["red square", "blue ring"])
    inst.truth = np.array([3])
    with pytest.raises(ValueError):
        task_loss(inst, fresh_model)


def test_temperature_is_positive_for_any_log_tau():
    for lt in (-20.0, 0.0, 3.0):
        inv = similarity_logits(vec([[1.0, 0.0]]), vec([[1.0, 0.0]]), vec([lt])).item()
        assert inv == pytest.approx(math.exp(-lt)) and inv > 0
