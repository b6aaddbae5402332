import math

import numpy as np
import pytest
import torch
from torch import nn

import oracles
from attract_repulse.exceptions import InvalidInputError
from attract_repulse.model import ConvClassifier, ModelSpec
from attract_repulse.teacher import MeanTeacher, ema_update, mean_teacher_loss


def const_module(value):
    m = nn.Linear(3, 2).double()
    with torch.no_grad():
        for p in m.parameters():
            p.fill_(value)
    return m


def teacher_values(t):
    return torch.cat([p.reshape(-1) for p in t.model.parameters()])


def test_initialized_equal_to_student():
    torch.manual_seed(0)
    s = ConvClassifier(ModelSpec(num_classes=3, widths=(4, 4), blocks_per_stage=1, aux_stage=0))
    t = MeanTeacher(s, 0.99)
    for (n1, a), (n2, b) in zip(s.state_dict().items(), t.model.state_dict().items()):
        assert n1 == n2 and torch.equal(a, b)
    assert all(not p.requires_grad for p in t.model.parameters())
    assert t.step_count == 0


def test_eta_zero_copies_student():
    t = MeanTeacher(const_module(0.0), 0.0)
    s = const_module(3.5)
    ema_update(t, s)
    assert torch.equal(teacher_values(t), torch.full((8,), 3.5, dtype=torch.float64))


def test_eta_09_three_steps_closed_form():
    t = MeanTeacher(const_module(0.0), 0.9)
    s = const_module(1.0)
    for _ in range(3):
        ema_update(t, s)
    want = 0.0
    for _ in range(3):  # iterate the recursion directly
        want = 0.9 * want + 0.1 * 1.0
    assert want == pytest.approx(1 - 0.9 ** 3, abs=1e-15)
    torch.testing.assert_close(teacher_values(t), torch.full((8,), 0.271, dtype=torch.float64),
                               rtol=0, atol=1e-12)
    assert t.step_count == 3


def test_eta_one_freezes_with_warning():
    with pytest.warns(RuntimeWarning):
        t = MeanTeacher(const_module(0.25), 1.0)
    ema_update(t, const_module(9.0))
    assert torch.all(teacher_values(t) == 0.25)


@pytest.mark.parametrize("eta", [0.5, 0.9, 0.99])
def test_max_norm_distance_shrinks_by_eta(eta):
    torch.manual_seed(1)
    start = const_module(0.0)
    nn.init.normal_(start.weight)
    t = MeanTeacher(start, eta)
    s = const_module(1.0)
    target = teacher_values(MeanTeacher(s, 0.0))
    prev = float((teacher_values(t) - target).abs().max())
    for _ in range(10):
        ema_update(t, s)
        d = float((teacher_values(t) - target).abs().max())
        assert d == pytest.approx(eta * prev, rel=1e-9)
        prev = d


def test_teacher_is_convex_combination_of_history():
    torch.manual_seed(2)
    s = const_module(0.0)
    t = MeanTeacher(s, 0.8)
    lo = hi = teacher_values(t).clone()
    for k in range(6):
        with torch.no_grad():
            for p in s.parameters():
                p.normal_()
        v = teacher_values(MeanTeacher(s, 0.0))
        lo, hi = torch.minimum(lo, v), torch.maximum(hi, v)
        ema_update(t, s)
        cur = teacher_values(t)
        assert torch.all(cur >= lo - 1e-12) and torch.all(cur <= hi + 1e-12)


def test_update_leaves_student_untouched():
    s = const_module(2.0)
    before = [p.clone() for p in s.parameters()]
    ema_update(MeanTeacher(const_module(0.0), 0.5), s)
    assert all(torch.equal(a, b) for a, b in zip(before, s.parameters()))


def test_shape_mismatch():
    t = MeanTeacher(nn.Linear(3, 2), 0.9)
    with pytest.raises(InvalidInputError):
        t.update(nn.Linear(4, 2))
    with pytest.raises(InvalidInputError):
        t.update(nn.Sequential(nn.Linear(3, 2)))


def test_bn_buffers_follow_ema():
    torch.manual_seed(3)
    s = nn.BatchNorm1d(2)
    t = MeanTeacher(s, 0.5)
    s.train()
    s(torch.randn(8, 2) + 4.0)
    t.update(s)
    torch.testing.assert_close(t.model.running_mean, 0.5 * s.running_mean)
    assert t.model.num_batches_tracked == s.num_batches_tracked


def test_teacher_forward_is_deterministic():
    torch.manual_seed(4)
    s = ConvClassifier(ModelSpec(num_classes=3, widths=(4, 4), blocks_per_stage=1, dropout=0.5, aux_stage=0))
    s.train()
    t = MeanTeacher(s, 0.9)
    x = torch.randn(3, 3, 8, 8)
    a, b = t(x), t(x)
    assert torch.equal(a.logits, b.logits)
    assert not a.logits.requires_grad


# loss ---------------------------------------------------------------------------

def test_mt_loss_zero_on_equal():
    p = torch.tensor([[0.2, 0.3, 0.5]], dtype=torch.float64)
    assert float(mean_teacher_loss(p, p)) == 0.0


def test_mt_loss_scalar_oracle():
    want = 0.9 * math.log(1.8) + 0.1 * math.log(0.2)
    assert want == pytest.approx(oracles.kl([0.9, 0.1], [0.5, 0.5]), abs=1e-15)
    assert want == pytest.approx(0.3681, abs=1e-4)
    got = mean_teacher_loss(torch.tensor([[0.9, 0.1]], dtype=torch.float64),
                            torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert float(got) == pytest.approx(want, abs=1e-14)


def test_mt_loss_is_batch_mean(rng):
    s = rng.dirichlet(np.ones(4), 5)
    t = rng.dirichlet(np.ones(4), 5)
    want = np.mean([oracles.kl(a, b) for a, b in zip(s, t)])
    assert float(mean_teacher_loss(s, t)) == pytest.approx(want, abs=1e-13)


def test_no_gradient_into_teacher():
    zs = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    zt = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    loss = mean_teacher_loss(torch.softmax(zs, -1), torch.softmax(zt, -1))
    gs, gt = torch.autograd.grad(loss, (zs, zt), allow_unused=True)
    assert gt is None or torch.all(gt == 0)
    assert gs.abs().sum() > 0


def test_mt_loss_length_mismatch():
    with pytest.raises(InvalidInputError):
        mean_teacher_loss([[0.5, 0.5]], [[0.2, 0.3, 0.5]])
