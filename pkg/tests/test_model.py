import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from mnemonics.errors import LabelError, ShapeError
from mnemonics.model import (ClassifierParams, LossWeights, TransferParams, apply_transfer,
                             classification_loss, combined_loss, distillation_loss, expand_head,
                             entropy_from_logits, forward, init_classifier, load_checkpoint,
                             model_level_update, save_checkpoint, tempered_softmax, _phase_loss)


def linear(W, b):
    return ClassifierParams(((torch.tensor(W, dtype=torch.float64), torch.tensor(b, dtype=torch.float64)),),
                            "identity")


def logits_model(rows):
    """A 1-layer identity model whose logits on input e_k are ``rows`` (via bias-free identity)."""
    rows = torch.tensor(rows, dtype=torch.float64)
    n, k = rows.shape
    return linear(rows.T.tolist(), [0.0] * k), torch.eye(n)


def random_transfer(base, rng):
    return TransferParams(tuple(
        (torch.from_numpy(rng.normal(1.0, 0.3, size=s.shape)), torch.from_numpy(rng.normal(0, 0.3, size=t.shape)))
        for s, t in TransferParams.identity(base).layers))


# -- forward / transfer ----------------------------------------------------

def test_forward_hand_arithmetic():
    m = linear([[1, 0], [0, 1]], [0.5, -0.5])
    assert forward(m, None, torch.tensor([[1.0, 1.0]])).tolist() == [[1.5, 0.5]]


def test_forward_zero_model():
    m = ClassifierParams(((torch.zeros(4, 3), torch.zeros(4)), (torch.zeros(2, 4), torch.zeros(2))), "identity")
    assert torch.equal(forward(m, None, torch.randn(5, 3)), torch.zeros(5, 2))


def test_forward_shape_errors():
    m = init_classifier(3, 2, 4, 0)
    with pytest.raises(ShapeError, match="layer 0"):
        forward(m, None, torch.zeros(2, 5))
    with pytest.raises(ShapeError):
        ClassifierParams(((torch.zeros(4, 3), torch.zeros(4)), (torch.zeros(2, 5), torch.zeros(2))))


def test_identity_transfer_is_exact():
    m = init_classifier(3, 4, 6, 0)
    x = torch.randn(7, 3)
    t = TransferParams.identity(m)
    assert torch.equal(forward(m, t, x), forward(m, None, x))
    assert apply_transfer(m, t).equal(m)


def test_scaling_two_doubles_weights():
    m = linear([[1.0, -2.0], [3.0, 0.5]], [0.1, 0.2])
    t = TransferParams(((torch.full((2,), 2.0), torch.zeros(2)),))
    out = apply_transfer(m, t)
    assert torch.equal(out.layers[0][0], 2 * m.layers[0][0])
    assert torch.equal(out.layers[0][1], m.layers[0][1])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), hidden=st.sampled_from([None, 3, 8]))
def test_transfer_paths_agree(seed, hidden):
    rng = np.random.default_rng(seed)
    m = init_classifier(3, 4, hidden, seed)
    t = random_transfer(m, rng)
    x = torch.from_numpy(rng.normal(size=(6, 3)))
    diff = forward(m, t, x) - forward(apply_transfer(m, t), None, x)
    assert float(diff.abs().max()) <= 1e-12


def test_transfer_shape_mismatch():
    m = init_classifier(3, 4, 6, 0)
    with pytest.raises(ShapeError):
        forward(m, TransferParams(TransferParams.identity(m).layers[:1]), torch.zeros(1, 3))


def test_growing_head_keeps_old_logits():
    m = init_classifier(2, 3, 5, 0)
    x = torch.randn(9, 2)
    grown = expand_head(m, 2, seed=1)
    assert grown.num_classes == 5
    assert torch.equal(forward(grown, None, x)[:, :3], forward(m, None, x))


# -- losses ----------------------------------------------------------------

def test_tempered_softmax_values():
    assert tempered_softmax(torch.tensor([0.0, 0.0]), 1.0).tolist() == [0.5, 0.5]
    p = tempered_softmax(torch.tensor([2.0, 0.0]), 2.0)
    # e/(e+1) from an mpmath evaluation
    assert p[0].item() == pytest.approx(0.7310585786300049, abs=1e-12)
    assert p[1].item() == pytest.approx(0.2689414213699951, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(logits=st.lists(st.floats(-1, 1), min_size=2, max_size=8))
def test_tempered_softmax_high_temperature_is_uniform(logits):
    p = tempered_softmax(torch.tensor(logits), 1e6)
    assert float((p - 1.0 / len(logits)).abs().max()) < 1e-5


@settings(max_examples=50, deadline=None)
@given(logits=st.lists(st.floats(-30, 30), min_size=1, max_size=8), shift=st.floats(-50, 50),
       tau=st.floats(1, 10))
def test_tempered_softmax_sums_to_one_and_is_shift_invariant(logits, shift, tau):
    z = torch.tensor(logits)
    p = tempered_softmax(z, tau)
    assert bool((p > 0).all())
    assert abs(float(p.sum()) - 1.0) <= 1e-12
    assert float((tempered_softmax(z + shift, tau) - p).abs().max()) <= 1e-12


@pytest.mark.parametrize("k", [2, 4, 7])
def test_classification_loss_uniform_is_log_k(k):
    m = linear(np.zeros((k, 3)).tolist(), [0.0] * k)
    y = torch.arange(5) % k
    assert abs(float(classification_loss(m, torch.randn(5, 3), y)) - math.log(k)) <= 1e-12


def test_classification_loss_log4():
    m = linear(np.zeros((4, 2)).tolist(), [0.0] * 4)
    assert float(classification_loss(m, torch.zeros(3, 2), torch.tensor([0, 1, 3]))) == pytest.approx(
        1.386294361119891, abs=1e-12)


def test_classification_loss_saturates():
    m = linear(np.zeros((4, 1)).tolist(), [50.0, 0.0, 0.0, 0.0])
    assert float(classification_loss(m, torch.zeros(1, 1), torch.tensor([0]))) < 1e-20


def test_classification_loss_two_sample_case():
    m, x = logits_model([[1.0, 0.0], [0.0, 1.0]])
    # -ln(e/(e+1)), mpmath
    assert float(classification_loss(m, x, torch.tensor([0, 1]))) == pytest.approx(0.3132616875182228, abs=1e-12)


def test_classification_loss_label_error():
    m = linear(np.zeros((3, 2)).tolist(), [0.0] * 3)
    with pytest.raises(LabelError):
        classification_loss(m, torch.zeros(1, 2), torch.tensor([3]))


def test_distillation_self_is_entropy():
    m = linear(np.zeros((2, 2)).tolist(), [0.0, 0.0])
    loss = float(distillation_loss(m, m, torch.randn(4, 2), 1.0, 2))
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_distillation_hand_case():
    prev, x = logits_model([[2.0, 0.0]])
    cur, _ = logits_model([[0.0, 2.0]])
    # -(s ln(1-s) + (1-s) ln s), s = e^2/(e^2+1), mpmath
    assert float(distillation_loss(cur, prev, x, 1.0, 2)) == pytest.approx(1.8885221669987374, abs=1e-12)


def mp_entropy(logits, tau):
    """Mean tempered-softmax entropy evaluated with 50-digit arithmetic."""
    with mpmath.workdps(50):
        total = mpmath.mpf(0)
        for row in logits.tolist():
            e = [mpmath.exp(mpmath.mpf(v) / tau) for v in row]
            s = mpmath.fsum(e)
            total -= mpmath.fsum((x / s) * mpmath.log(x / s) for x in e)
        return float(total / len(logits))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(1, 5), k=st.integers(1, 4))
def test_entropy_matches_high_precision(seed, tau, k):
    z = torch.from_numpy(np.random.default_rng(seed).normal(size=(5, k)) * 4)
    assert abs(float(entropy_from_logits(z, tau)) - mp_entropy(z, tau)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(1, 5), k=st.integers(1, 4))
def test_distillation_gibbs_inequality(seed, tau, k):
    rng = np.random.default_rng(seed)
    prev = init_classifier(3, 4, None, seed, "identity")
    cur = init_classifier(3, 5, None, seed + 1, "identity")
    x = torch.from_numpy(rng.normal(size=(6, 3)))
    with torch.no_grad():
        teacher = forward(prev, None, x)[:, :k]
    h = float(entropy_from_logits(teacher, tau))
    assert float(distillation_loss(cur, prev, x, tau, k)) >= h
    gap = float(distillation_loss(prev, prev, x, tau, k)) - h
    assert 0.0 <= gap <= 1e-12


def test_distillation_width_error():
    prev = init_classifier(2, 2, None, 0, "identity")
    cur = init_classifier(2, 3, None, 1, "identity")
    with pytest.raises(ShapeError):
        distillation_loss(cur, prev, torch.zeros(1, 2), 2.0, 3)


@pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 1.0])
def test_combined_loss_is_affine(lam):
    rng = np.random.default_rng(3)
    prev = init_classifier(2, 2, 4, 0)
    cur = expand_head(prev, 2, seed=5)
    cur = ClassifierParams(tuple((W + 0.1, b) for W, b in cur.layers), cur.activation)
    x = torch.from_numpy(rng.normal(size=(8, 2)))
    y = torch.from_numpy(rng.integers(0, 4, size=8))
    w = LossWeights(**{"lambda": lam, "temperature": 2.0})
    lc = float(classification_loss(cur, x, y))
    ld = float(distillation_loss(cur, prev, x, 2.0, 2))
    got = float(combined_loss(cur, prev, x, y, w, 2))
    assert abs(got - (lam * lc + (1 - lam) * ld)) <= 1e-12
    if lam == 1.0:
        assert got == lc
    if lam == 0.0:
        assert got == ld
    if lam == 0.5:
        assert abs(got - 0.5 * (lc + ld)) <= 1e-12


def test_loss_weights_validation():
    assert LossWeights().lambda_ == 0.5 and LossWeights().temperature == 2.0
    with pytest.raises(ValueError):
        LossWeights(**{"lambda": 1.5})
    with pytest.raises(ValueError):
        LossWeights(temperature=0.5)


# -- model-level update ----------------------------------------------------

def _phase_setup(seed=0):
    rng = np.random.default_rng(seed)
    prev = init_classifier(2, 2, 6, seed)
    base = expand_head(prev, 1, seed=seed + 1)
    x = torch.from_numpy(rng.normal(size=(30, 2)))
    y = torch.from_numpy(rng.integers(0, 3, size=30))
    return prev, base, x, y


def test_model_level_update_zero_epochs():
    prev, base, x, y = _phase_setup()
    t0 = TransferParams.identity(base)
    t1, b1 = model_level_update(base, t0, prev, x, y, LossWeights(), 0.1, 0, 2)
    assert all(torch.equal(s0, s1) and torch.equal(h0, h1) for (s0, h0), (s1, h1) in zip(t0.layers, t1.layers))
    assert b1.equal(base)


def test_model_level_update_descends():
    prev, base, x, y = _phase_setup()
    w = LossWeights()
    t0 = TransferParams.identity(base)
    before = float(combined_loss(base, prev, x, y, w, 2, t0))
    t1, _ = model_level_update(base, t0, prev, x, y, w, 1e-4, 1, 2)
    assert float(combined_loss(base, prev, x, y, w, 2, t1)) < before


def test_model_level_update_with_head_moves_only_head():
    prev, base, x, y = _phase_setup()
    t1, b1 = model_level_update(base, TransferParams.identity(base), prev, x, y, LossWeights(), 0.1, 3, 2,
                                train_head=True)
    assert torch.equal(b1.layers[0][0], base.layers[0][0])
    assert not torch.equal(b1.layers[-1][0], base.layers[-1][0])


def test_transfer_gradient_matches_finite_differences():
    prev, base, x, y = _phase_setup(4)
    rng = np.random.default_rng(9)
    t = random_transfer(base, rng)
    with torch.no_grad():
        teacher = forward(prev, None, x)
    flat = t.to_flat()

    def loss(f):
        return _phase_loss(forward(base, TransferParams.from_flat(f), x), y, teacher, LossWeights(), 2, True)

    from mnemonics.diffcore import value_and_grad
    _, g = value_and_grad(loss, flat)
    fd = central_diff(lambda v: loss(flat.with_values(v)), flat.values, 1e-5)
    assert rel_err(g.values, fd) < 1e-5


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = init_classifier(3, 5, 7, 11)
    m = ClassifierParams(tuple((W * math.pi, b + 1e-17) for W, b in m.layers), m.activation)
    path = tmp_path / "model.json"
    save_checkpoint(m, path)
    assert load_checkpoint(path).equal(m)
