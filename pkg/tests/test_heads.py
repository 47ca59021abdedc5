import itertools
import math

import numpy as np
import pytest

from nrnm import diffcore as dc
from nrnm.diffcore import Graph, ParamSet, backward, finite_diff_check
from nrnm.heads import (DataError, classification_loss, init_head_params, pair_features,
                        similarity_loss, similarity_score, stepwise_loss)
from nrnm.trainer import roc_auc

import oracles


def test_uniform_classifier_loss_is_log_k():
    loss = classification_loss(np.ones((1, 5)), [2], dc.constant(np.zeros((4, 5))),
                               dc.constant(np.zeros((1, 4))))
    assert abs(loss.item() - math.log(4)) < 1e-12


def test_saturated_classifier_loss_is_tiny():
    W = np.zeros((3, 2))
    W[1, 0] = 100.0
    loss = classification_loss(np.array([[1.0, 0.0]]), [1], dc.constant(W),
                               dc.constant(np.zeros((1, 3))))
    assert 0 <= loss.item() < 1e-12


def test_classification_matches_log_sum_exp(rng):
    r, W, b = rng.normal(size=(6, 5)), rng.normal(size=(4, 5)) * 3, rng.normal(size=(1, 4))
    y = rng.integers(0, 4, size=6)
    loss = classification_loss(r, y, dc.constant(W), dc.constant(b)).item()
    ref = -sum(oracles.log_softmax(W @ r[i] + b[0])[y[i]] for i in range(6))
    assert abs(loss - ref) < 1e-12


def test_classification_rejects_bad_label():
    with pytest.raises(DataError):
        classification_loss(np.zeros((1, 2)), [5], dc.constant(np.zeros((3, 2))),
                            dc.constant(np.zeros((1, 3))))


def test_stepwise_uniform_is_t_log_k():
    loss = stepwise_loss(dc.constant(np.ones((5, 3))), np.zeros(5), dc.constant(np.zeros((8, 3))),
                         dc.constant(np.zeros((1, 8))))
    assert abs(loss.item() - 5 * math.log(8)) < 1e-12


def test_stepwise_masked_matches_brute_force(rng):
    B, T, H, K = 3, 7, 4, 5
    reps = [rng.normal(size=(B, H)) for _ in range(T)]
    y = rng.integers(0, K, size=(B, T))
    mask = rng.random((B, T)) < 0.6
    mask[0, 0] = True
    y[~mask] = 99  # masked labels are never read
    W, b = rng.normal(size=(K, H)), rng.normal(size=(1, K))
    loss = stepwise_loss([dc.constant(r) for r in reps], y, dc.constant(W), dc.constant(b),
                         mask).item()
    ref = 0.0
    for i in range(B):
        for t in range(T):
            if mask[i, t]:
                ref -= oracles.log_softmax(W @ reps[t][i] + b[0])[y[i, t]]
    assert abs(loss - ref) < 1e-12


def test_stepwise_all_masked_is_an_error():
    with pytest.raises(DataError):
        stepwise_loss(dc.constant(np.ones((2, 3))), [0, 0], dc.constant(np.zeros((2, 3))),
                      dc.constant(np.zeros((1, 2))), mask=[0, 0])


def test_bce_values(rng):
    r1, r2 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    v, b = rng.normal(size=(1, 6)), rng.normal(size=(1, 1))
    y = [1, 0, 1, 0]
    p, loss = similarity_loss(r1, r2, y, dc.constant(v), dc.constant(b))
    scores = np.concatenate([r1, r2], axis=1) @ v[0] + b[0, 0]
    assert abs(loss.item() - sum(oracles.bce(s, t) for s, t in zip(scores, y))) < 1e-12
    np.testing.assert_allclose(p.value[:, 0], oracles.sigmoid(scores), atol=1e-15)


def test_bce_saturation_is_finite():
    v = dc.constant(np.array([[100.0, 0.0]]))
    p, loss = similarity_loss(np.array([[1.0]]), np.array([[0.0]]), [0], v, dc.constant([[0.0]]))
    assert np.isfinite(loss.item())
    assert abs(loss.item() - (-math.log(1e-12))) < 1e-6


def test_zero_head_gives_half():
    p, loss = similarity_loss(np.ones((2, 3)), np.ones((2, 3)), [1, 0],
                              dc.constant(np.zeros((1, 9))), dc.constant([[0.0]]),
                              pair_mode="concat_product")
    assert (p.value == 0.5).all()
    assert abs(loss.item() - 2 * math.log(2)) < 1e-12


def test_concat_head_is_order_sensitive(rng):
    r1, r2 = rng.normal(size=(1, 3)), rng.normal(size=(1, 3))
    v, b = dc.constant(rng.normal(size=(1, 6))), dc.constant([[0.1]])
    a = similarity_score(r1, r2, v, b).item()
    c = similarity_score(r2, r1, v, b).item()
    assert a != c


def test_pair_features_layout(rng):
    r1, r2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    f = pair_features(dc.constant(r1), dc.constant(r2), "concat_product").value
    np.testing.assert_array_equal(f, np.concatenate([r1, r2, r1 * r2], axis=1))


def test_label_validation():
    with pytest.raises(DataError):
        similarity_loss(np.ones((1, 2)), np.ones((1, 2)), [2], dc.constant(np.zeros((1, 4))),
                        dc.constant([[0.0]]))


@pytest.mark.parametrize("kind,mode", [("cls", None), ("step", None), ("sim", "concat"),
                                       ("sim", "concat_product")])
def test_head_gradients(kind, mode, rng):
    ps = ParamSet()
    init_head_params(ps, kind, 4, 3, rng, pair_mode=mode or "concat")
    r = ps.add("r", rng.normal(size=(5, 4)))
    r2 = ps.add("r2", rng.normal(size=(5, 4)))

    def f(p):
        if kind == "cls":
            return classification_loss(p["r"], [0, 1, 2, 1, 0], p["cls.W"], p["cls.b"])
        if kind == "step":
            return stepwise_loss(p["r"], [0, 1, 2, 1, 0], p["step.W"], p["step.b"],
                                 mask=[1, 0, 1, 1, 1])
        return similarity_loss(p["r"], p["r2"], [1, 0, 1, 0, 1], p["sim.v"], p["sim.b"], mode)[1]

    assert finite_diff_check(f, ps, h=1e-6, sample=ps.size()) < 1e-6


# The head sigmoid(v . [r1, r2] + b) scores a pair as f(r1) + g(r2).  With
# balanced same/different-family pairs that additive form cannot separate
# the classes, whatever the encoder learns.

def _family_auc(score, F):
    pos = [score(a, a) for a in range(F)]
    neg = [score(a, b) for a in range(F) for b in range(F) if a != b]
    d = np.subtract.outer(pos, neg)
    return float(((d > 0) + 0.5 * (d == 0)).mean())


def test_additive_pair_head_cannot_separate_families():
    F = 4
    best = 0.0
    for vals in itertools.product(range(4), repeat=2 * F):
        f, g = vals[:F], vals[F:]
        best = max(best, _family_auc(lambda a, b: f[a] + g[b], F))
    assert best < 0.59
    # positives and negatives share the same mean score for any f, g
    rng = np.random.default_rng(0)
    f, g = rng.normal(size=F), rng.normal(size=F)
    pos = np.mean([f[a] + g[a] for a in range(F)])
    neg = np.mean([f[a] + g[b] for a in range(F) for b in range(F) if a != b])
    assert abs(pos - neg) < 1e-12


def test_product_pair_head_separates_families():
    F = 4
    E = np.eye(F)
    v = np.concatenate([np.zeros(2 * F), np.ones(F)])

    def score(a, b):
        return float(v @ np.concatenate([E[a], E[b], E[a] * E[b]]))

    assert _family_auc(score, F) == 1.0
    s = [score(a, b) for a in range(F) for b in range(F)]
    y = [int(a == b) for a in range(F) for b in range(F)]
    assert roc_auc(np.array(s), np.array(y)) == 1.0
