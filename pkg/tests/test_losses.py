import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmda import diffcore as dc
from cmda.detect import AssignedTargets
from cmda.diffcore import ContractError, Tensor, check_gradients
from cmda.losses import (SMOOTH_L1_BETA, LossWeights, bce_with_logits, cmki_loss, det_loss, domain_loss,
                         entropy_loss, entropy_of_distribution, smooth_l1, total_loss)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


def scalar_entropy(p):
    """Independent per-distribution entropy normalised by log K."""
    return -sum(v * math.log(v) for v in p if v > 0) / math.log(len(p))


# ------------------------------------------------------------------ alignment


def test_cmki_examples():
    f = np.random.default_rng(0).normal(size=(3, 3, 4))
    assert cmki_loss(f, f.copy()).item() == 0.0
    a = np.array([[[1.0, 0.0]]])
    b = np.array([[[0.0, 1.0]]])
    assert cmki_loss(a, b).item() == pytest.approx(math.sqrt(2))
    fp = np.array([[[3.0, 4.0]], [[0.0, 0.0]]])
    assert cmki_loss(fp, np.zeros_like(fp)).item() == pytest.approx(2.5)


def test_cmki_symmetric_nonnegative_and_masked():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
    assert cmki_loss(a, b).item() == cmki_loss(b, a).item() > 0
    mask = np.zeros((4, 4))
    mask[0, 0] = 1
    assert cmki_loss(a, b, mask).item() == pytest.approx(np.linalg.norm(a[0, 0] - b[0, 0]) / 16)
    with pytest.raises(ContractError):
        cmki_loss(a, b[:, :, :2])


def test_cmki_gradient():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(4, 4, 8))), leaf(rng.normal(size=(4, 4, 8)))
    assert check_gradients(lambda: cmki_loss(a, b), [a, b])["ok"]


def test_cmki_subgradient_at_equal_maps_is_finite():
    a = leaf(np.ones((2, 2, 3)))
    cmki_loss(a, np.ones((2, 2, 3))).backward()
    assert np.array_equal(a.grad, np.zeros((2, 2, 3)))


# -------------------------------------------------------------------- entropy


def test_entropy_examples():
    onehot = np.zeros((3, 4, 5))
    onehot[..., 1] = 1.0
    assert entropy_of_distribution(onehot).item() == 0.0
    assert entropy_loss(np.zeros((3, 4, 5))).item() == pytest.approx(12.0, abs=1e-9)
    assert entropy_of_distribution(np.full((3, 4, 5), 0.2)).item() == pytest.approx(12.0, abs=1e-9)
    p = np.array([[[0.9, 0.1]]])
    expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1)) / math.log(2)
    assert expected == pytest.approx(0.4690, abs=1e-4)
    assert entropy_of_distribution(p).item() == pytest.approx(expected, abs=1e-12)
    assert entropy_loss(np.log(p)).item() == pytest.approx(scalar_entropy([0.9, 0.1]), abs=1e-12)
    with pytest.raises(ContractError):
        entropy_loss(np.zeros((2, 2, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_entropy_bounded_by_cell_count(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(scale=3.0, size=(3, 2, 6))
    v = entropy_loss(f).item()
    assert 0.0 <= v <= 6.0 + 1e-9
    p = np.exp(f) / np.exp(f).sum(-1, keepdims=True)
    ref = sum(scalar_entropy(p[i, j]) for i in range(3) for j in range(2))
    assert v == pytest.approx(ref, abs=1e-9)


def test_entropy_decreases_when_sharpening_one_cell():
    rng = np.random.default_rng(3)
    f = rng.normal(size=(3, 3, 4))
    logits = rng.normal(size=4)
    values = []
    for temp in (4.0, 2.0, 1.0, 0.5, 0.1):
        g = f.copy()
        g[1, 2] = logits / temp
        values.append(entropy_loss(g).item())
    assert all(b < a for a, b in zip(values, values[1:]))


def test_entropy_gradient():
    f = leaf(np.random.default_rng(4).normal(size=(4, 4, 8)))
    assert check_gradients(lambda: entropy_loss(f), [f])["ok"]


# --------------------------------------------------------------------- domain


def test_domain_examples():
    loss, empty = domain_loss(np.zeros((4, 2)), [0, 1, 1, 0])
    assert not empty and loss.item() == pytest.approx(math.log(2))
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]])
    loss, _ = domain_loss(np.log(probs), [0, 1, 0])
    ref = -(math.log(0.7) + math.log(0.8) + math.log(0.5)) / 3
    assert ref == pytest.approx(0.4243, abs=1e-4)
    assert loss.item() == pytest.approx(ref, abs=1e-12)
    confident = [domain_loss(np.array([[s, -s]]), [0])[0].item() for s in (1.0, 5.0, 20.0)]
    assert confident[0] > confident[1] > confident[2] and confident[2] < 1e-15


def test_domain_empty_and_mismatch():
    with pytest.warns(RuntimeWarning):
        loss, empty = domain_loss(np.zeros((0, 2)), [])
    assert empty and loss.item() == 0.0
    with pytest.raises(ContractError):
        domain_loss(np.zeros((3, 2)), [0, 1])


def test_domain_gradient_through_reversal():
    rng = np.random.default_rng(5)
    feats = leaf(rng.normal(size=(5, 4)))
    w = leaf(rng.normal(size=(4, 2)))
    labels = [0, 1, 1, 0, 1]
    rep = check_gradients(lambda: domain_loss(dc.matmul(dc.grad_reverse(feats), w), labels)[0], [w])
    assert rep["ok"]
    # the reversed feature gradient is exactly the negated plain one
    feats.grad = None
    domain_loss(dc.matmul(dc.grad_reverse(feats), w), labels)[0].backward()
    rev = feats.grad.copy()
    feats.grad = w.grad = None
    domain_loss(dc.matmul(feats, w), labels)[0].backward()
    assert np.array_equal(rev, -feats.grad)


def test_reversed_step_does_not_decrease_domain_loss():
    # linear toy: frozen discriminator, encoder h = x @ E; one step along the reversed gradient
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 3))
    labels = np.array([0, 1] * 4)
    E = leaf(rng.normal(size=(3, 4)))
    D = Tensor(rng.normal(size=(4, 2)))

    def loss():
        return domain_loss(dc.matmul(dc.grad_reverse(dc.matmul(Tensor(x), E)), D), labels)[0]

    before = loss()
    before.backward()
    E.data -= 0.01 * E.grad
    assert loss().item() >= before.item()


# ------------------------------------------------------------------ detection


def _targets(X=3, Y=3, pos=(), residuals=None):
    obj = np.zeros((X, Y))
    for c in pos:
        obj.flat[c] = 1
    res = np.zeros((len(pos), 8)) if residuals is None else np.asarray(residuals, dtype=float)
    return AssignedTargets(obj, np.array(pos, dtype=np.int64), res)


def test_det_examples():
    X = Y = 3
    t = _targets()
    assert det_loss(np.zeros((X, Y)), np.zeros((X, Y, 8)), t).item() == pytest.approx(math.log(2))
    t = _targets(pos=[4])
    logits = np.full((X, Y), -40.0)
    logits.flat[4] = 40.0
    assert det_loss(logits, np.zeros((X, Y, 8)), t).item() < 1e-15
    res = np.zeros((1, 8))
    res[0, 3] = 1.0
    reg = det_loss(logits, np.zeros((X, Y, 8)), _targets(pos=[4], residuals=res)).item()
    assert reg == pytest.approx(1 - SMOOTH_L1_BETA / 2, abs=1e-12)
    assert 1 - SMOOTH_L1_BETA / 2 == pytest.approx(0.9444, abs=1e-4)


def test_smooth_l1_and_bce():
    r = np.array([-2.0, -0.05, 0.0, 0.05, 1.0])
    b = SMOOTH_L1_BETA
    ref = np.where(np.abs(r) < b, 0.5 * r ** 2 / b, np.abs(r) - 0.5 * b)
    assert np.allclose(smooth_l1(r).data, ref)
    z = np.array([[-3.0, 0.5], [2.0, 0.0]])
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    s = 1 / (1 + np.exp(-z))
    ref = -np.mean(4.0 * t * np.log(s) + (1 - t) * np.log(1 - s))
    assert bce_with_logits(z, t, 4.0).item() == pytest.approx(ref)


def test_det_gradient_with_code_weights():
    rng = np.random.default_rng(7)
    logits, box = leaf(rng.normal(size=(4, 4))), leaf(rng.normal(size=(4, 4, 8)))
    t = _targets(4, 4, pos=[1, 6, 13], residuals=rng.normal(size=(3, 8)))
    cw = rng.uniform(0.5, 2.0, size=8)
    rep = check_gradients(lambda: det_loss(logits, box, t, 5.0, code_weights=cw), [logits, box])
    assert rep["ok"]


# ---------------------------------------------------------------- combination


def test_total_loss_toggles():
    parts = {k: Tensor(v) for k, v in zip(("det", "cmki", "d", "ent"), (1.0, 2.0, 3.0, 4.0))}
    w = LossWeights(1, 1, 1, 1, 1)
    assert total_loss(parts, w.for_stage("pretrain")).item() == 3.0
    assert total_loss(parts, w.for_stage("selftrain")).item() == 1.0 + 3.0 + 4.0
    big = dict(parts, d=Tensor(1e6), ent=Tensor(1e6))
    assert total_loss(big, w.for_stage("pretrain")).item() == 3.0
    assert total_loss(dict(parts, cmki=Tensor(1e6)), w.for_stage("selftrain")).item() == 8.0
    w2 = LossWeights(2.0, 1.0, 0.5, 0.1, 0.01).for_stage("selftrain")
    assert total_loss(parts, w2).item() == pytest.approx(2 + 0.5 * (0.3 + 0.04))


def test_loss_weights_validation():
    with pytest.raises(ContractError):
        LossWeights(d=-0.1)
    with pytest.raises(ContractError):
        LossWeights(t_cmki=2)
    with pytest.raises(ContractError):
        LossWeights().for_stage("finetune")
    w = LossWeights().for_stage("selftrain")
    assert (w.t_cmki, w.t_cdan) == (0, 1)
