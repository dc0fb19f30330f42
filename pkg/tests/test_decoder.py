import numpy as np
import pytest

from osis import tensor as T
from osis.backbone import BackboneOutput
from osis.decoder import (
    InstanceDecoder,
    classify_instances,
    feature_interaction,
    feature_to_instance,
    mask_to_feature,
)
from osis.tensor import Parameter, Tensor, grad_check


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(p):
    return np.log(p / (1.0 - p))


def test_mask_to_feature_full_suppression(rng):
    m = Tensor(np.full((5, 3), -100.0))
    f = Tensor(rng.normal(size=(5, 4)))
    out = mask_to_feature(m, f, tau=0.5)
    assert np.array_equal(out.data, np.zeros((3, 4)))
    out_ws = mask_to_feature(m, f, tau=0.5, norm="weight_sum")
    assert np.array_equal(out_ws.data, np.zeros((3, 4)))


def test_mask_to_feature_single_confident_point():
    m = Tensor([[100.0]])
    f = Tensor([[2.0, -3.0, 0.5]])
    out = mask_to_feature(m, f, tau=0.5)  # Z = N = 1
    assert np.allclose(out.data, [[2.0, -3.0, 0.5]], atol=1e-12)


def test_mask_to_feature_hand_case():
    # probs (0.9, 0.4, 0.8), tau 0.5: point 1 gated off; rows e1,e2,e3; Z=N=3
    m = Tensor(_logit(np.array([[0.9], [0.4], [0.8]])))
    f = Tensor(np.eye(3))
    out = mask_to_feature(m, f, tau=0.5)
    assert np.allclose(out.data, [[0.3, 0.0, 0.8 / 3.0]], atol=1e-12)


def test_mask_to_feature_grads(rng):
    for norm in ("count", "weight_sum"):
        m = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        f = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        cost = np.arange(20.0).reshape(4, 5)
        err_m = grad_check(lambda t: T.tsum(mask_to_feature(t, f, 0.5, norm) * cost), m, eps=1e-6)
        err_f = grad_check(lambda t: T.tsum(mask_to_feature(m, t, 0.5, norm) * cost), f, eps=1e-6)
        assert err_m < 1e-6, norm
        assert err_f < 1e-6, norm


def test_mask_to_feature_rejects_bad_args(rng):
    m, f = Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mask_to_feature(m, f, tau=1.0)
    with pytest.raises(ValueError):
        mask_to_feature(m, f, 0.5, norm="bogus")
    with pytest.raises(ValueError):
        mask_to_feature(Tensor(np.zeros((4, 2))), f, 0.5)


def test_monotone_suppression_nonnegative_features(rng):
    # raising tau only removes non-negative contributions (F >= 0, Z = N)
    m = Tensor(rng.normal(size=(10, 4)))
    f = Tensor(rng.uniform(0, 1, size=(10, 3)))
    prev = mask_to_feature(m, f, 0.0).data
    for tau in (0.25, 0.5, 0.75, 0.9):
        cur = mask_to_feature(m, f, tau).data
        assert np.all(np.abs(cur) <= np.abs(prev) + 1e-15)
        prev = cur


def test_convex_combination_under_weight_sum(rng):
    m = Tensor(rng.normal(size=(8, 5)))
    f = Tensor(rng.normal(size=(8, 3)))
    out = mask_to_feature(m, f, tau=0.0, norm="weight_sum").data
    w = _sigmoid(m.data)  # tau=0 keeps every weight
    coef = w / w.sum(axis=0)[None, :]
    assert np.all(coef >= 0) and np.allclose(coef.sum(axis=0), 1.0, atol=1e-12)
    assert np.allclose(out, coef.T @ f.data, atol=1e-12)


def test_feature_interaction_single_instance():
    f = Tensor([[1.0, -2.0, 3.0]])
    assert np.array_equal(feature_interaction(f).data, [[2.0, -4.0, 6.0]])


def test_feature_interaction_zeros():
    f = Tensor(np.zeros((4, 3)))
    assert np.array_equal(feature_interaction(f).data, np.zeros((4, 3)))


def test_feature_interaction_hand_case():
    f = Tensor([[1.0, 0.0], [0.0, 2.0]])
    assert feature_interaction(f).data.tolist() == [[2.0, 2.0], [1.0, 4.0]]


def test_feature_to_instance_orthogonal_gives_half_probs(rng):
    f_ins = Tensor([[1.0, 0.0]])
    points = Tensor([[0.0, 1.0], [0.0, -2.0]])
    bw = Parameter("bw", np.zeros((2, 1)))
    bb = Parameter("bb", np.zeros(1))
    logits = feature_to_instance(f_ins, points, bw, bb)
    assert np.array_equal(logits.data, np.zeros((2, 1)))
    assert np.allclose(T.sigmoid(logits).data, 0.5)


def test_feature_to_instance_unit_norm_dot():
    v = np.array([0.6, 0.8])  # unit norm
    f_ins = Tensor([v])
    points = Tensor([v])
    logits = feature_to_instance(f_ins, points, Parameter("w", np.zeros((2, 1))), Parameter("b", np.zeros(1)))
    assert abs(logits.data[0, 0] - 1.0) < 1e-12


def test_feature_to_instance_shape(rng):
    logits = feature_to_instance(
        Tensor(rng.normal(size=(64, 8))),
        Tensor(rng.normal(size=(500, 8))),
        Parameter("w", rng.normal(size=(8, 1))),
        Parameter("b", np.zeros(1)),
    )
    assert logits.shape == (500, 64)


def test_classify_instances():
    k, d, c = 3, 4, 2
    w = Parameter("w", np.zeros((d, c + 1)))
    b = Parameter("b", np.array([0.0, 0.0, 50.0]))
    logits = classify_instances(Tensor(np.ones((k, d))), w, b)
    assert logits.shape == (k, c + 1)
    assert np.all(T.softmax(logits).data.argmax(axis=1) == c)


def test_classify_grad(rng):
    w = Parameter("w", rng.normal(size=(4, 3)))
    b = Parameter("b", rng.normal(size=3))
    pooled = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    err = grad_check(lambda t: T.tsum(classify_instances(t, w, b) * np.arange(15.0).reshape(5, 3)), pooled, eps=1e-6)
    assert err < 1e-5


def _decoder(rng, d=4, c=3, k=2, n=5):
    dec = InstanceDecoder(rng, d=d, c=c, pe_levels=2, tau=0.5, feature_norm="count")
    out = BackboneOutput(
        offsets=Tensor(rng.normal(size=(n, 3)) * 0.1),
        point_features=Tensor(rng.normal(size=(n, d))),
        mask_logits=Tensor(rng.normal(size=(n, k)), requires_grad=True),
        semantic_logits=Tensor(rng.normal(size=(n, c))),
    )
    return dec, out, rng.normal(size=(n, 3))


def test_decode_shapes_and_determinism(rng):
    dec, out, pos = _decoder(rng, d=4, c=3, k=2, n=1)
    inst = dec.decode(out, pos)
    assert inst.mask_logits.shape == (1, 2)
    assert inst.class_logits.shape == (2, 4)
    again = dec.decode(out, pos)
    assert np.array_equal(inst.mask_logits.data, again.mask_logits.data)
    assert np.array_equal(inst.class_logits.data, again.class_logits.data)


def test_decode_mask_probs_in_open_interval(rng):
    dec, out, pos = _decoder(rng)
    inst = dec.decode(out, pos)
    assert np.all(inst.mask_probs.data > 0) and np.all(inst.mask_probs.data < 1)


def test_decode_end_to_end_grad(rng):
    dec, out, pos = _decoder(rng, n=6, k=3)

    def f(t):
        inst = dec.decode(out, pos)
        return T.tsum(inst.mask_probs) + T.tsum(inst.class_logits)

    # keep probes off the tau gate: regenerate if a sigmoid sits within 1e-4
    gate_margin = np.abs(_sigmoid(out.mask_logits.data) - 0.5).min()
    assert gate_margin > 1e-4
    err = grad_check(f, out.mask_logits, eps=1e-6)
    assert err < 1e-4


def test_decode_permutation_equivariance(rng):
    dec, out, pos = _decoder(rng, k=4, n=7)
    perm = rng.permutation(4)
    permuted = BackboneOutput(
        offsets=out.offsets,
        point_features=out.point_features,
        mask_logits=Tensor(out.mask_logits.data[:, perm]),
        semantic_logits=out.semantic_logits,
    )
    a = dec.decode(out, pos)
    b = dec.decode(permuted, pos)
    assert np.allclose(b.features.data, a.features.data[perm], atol=1e-12)
    assert np.allclose(b.mask_logits.data, a.mask_logits.data[:, perm], atol=1e-12)
    assert np.allclose(b.class_logits.data, a.class_logits.data[perm], atol=1e-12)
