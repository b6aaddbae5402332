import numpy as np
import pytest
import torch

from attract_repulse.augment import AugmentConfig, AugPolicy, make_two_view_batch
from attract_repulse.contrastive import build_positive_sets, contrastive_regularization
from attract_repulse.exceptions import InvalidInputError, NonFiniteLossError
from attract_repulse.losses import LossConfig, cross_entropy, reverse_cross_entropy
from attract_repulse.model import ModelOutput, ModelSpec
from attract_repulse.teacher import mean_teacher_loss
from attract_repulse.train import (OptimConfig, ScheduleConfig, evaluate, init_state, lr_at,
                                   top1, total_loss, train_epoch, train_step)

TINY = ModelSpec(num_classes=3, widths=(8, 8), blocks_per_stage=1, dropout=0.0, aux_stage=0)


def tiny_state(loss_cfg=None, aug=None, sched=None, seed=0, dtype=torch.float64, **kw):
    return init_state(TINY, loss_cfg or LossConfig(eta=0.9), aug or AugmentConfig(),
                      sched or ScheduleConfig(warmup_epochs=1, total_epochs=10, steps_per_epoch=5),
                      OptimConfig(**kw), seed, 4, dtype)


def tiny_batch(rng, n=4, C=3, size=8, seed=0, aug=None):
    x = rng.normal(size=(n, 3, size, size))
    return make_two_view_batch(x, rng.integers(0, C, n), seed, aug or AugmentConfig(), num_classes=C)


# schedule -----------------------------------------------------------------------

def test_lr_endpoints():
    s = ScheduleConfig(base_lr=0.005, warmup_start_lr=1e-6, warmup_epochs=3, total_epochs=100,
                       steps_per_epoch=7)
    assert lr_at(0, s) == 1e-6
    assert lr_at(s.warmup_steps, s) == pytest.approx(0.005, abs=1e-15)
    assert abs(lr_at(s.total_steps, s)) < 1e-9


def test_lr_continuous_at_junction():
    s = ScheduleConfig(warmup_epochs=3, total_epochs=50, steps_per_epoch=1000)
    W = s.warmup_steps
    left = 1e-6 + (0.005 - 1e-6) * (W - 1e-9) / W  # limit from the warmup side
    assert left == pytest.approx(lr_at(W, s), abs=1e-12)
    assert abs(lr_at(W - 1, s) - lr_at(W, s)) < 1e-5
    assert abs(lr_at(W + 1, s) - lr_at(W, s)) < 1e-8


def test_lr_monotone_pieces():
    s = ScheduleConfig(warmup_epochs=2, total_epochs=10, steps_per_epoch=3)
    lrs = [lr_at(t, s) for t in range(s.total_steps + 1)]
    W = s.warmup_steps
    assert all(a < b for a, b in zip(lrs[:W], lrs[1:W + 1]))
    assert all(a >= b for a, b in zip(lrs[W:], lrs[W + 1:]))


def test_lr_out_of_range():
    s = ScheduleConfig(warmup_epochs=1, total_epochs=2)
    with pytest.raises(InvalidInputError):
        lr_at(-1, s)
    with pytest.raises(InvalidInputError):
        lr_at(3, s)
    with pytest.raises(InvalidInputError):
        ScheduleConfig(warmup_epochs=5, total_epochs=5)


# total loss -----------------------------------------------------------------------

def random_outputs(rng, n=6, C=4):
    t = lambda *s: torch.from_numpy(rng.normal(size=s))
    return ModelOutput(t(n, C), t(n, C), t(n, 5), None), ModelOutput(t(n, C), t(n, C), t(n, 5), None)


def two_view_labels(rng, n=3, C=4):
    y = 0.9 * np.eye(C)[rng.integers(0, C, n)] + 0.1 / C
    return torch.from_numpy(np.concatenate([y, y]))


def test_breakdown_recombines_from_module_ops(rng):
    s, t = random_outputs(rng)
    y = two_view_labels(rng)
    cfg = LossConfig(alpha=0.3, beta=0.7, gamma=1.3, aux_weight=0.4)
    parts = total_loss(s, t, y, cfg)
    p = torch.softmax(s.logits, -1)
    ce = cross_entropy(y, p).mean()
    rce = reverse_cross_entropy(y, p, cfg.rce_floor).mean()
    cr = contrastive_regularization(p, build_positive_sets(y, cfg.delta), cfg.tau)
    mt = mean_teacher_loss(p, torch.softmax(t.logits, -1))
    aux = cross_entropy(y, torch.softmax(s.aux_logits, -1)).mean()
    for name, want in dict(ce=ce, rce=rce, cr=cr, mt=mt, aux=aux).items():
        assert float(getattr(parts, name)) == pytest.approx(float(want), abs=1e-12)
    want_total = ce + 0.3 * rce + 0.7 * cr + 1.3 * mt + 0.4 * aux
    assert abs(float(parts.total) - float(want_total)) < 1e-9


def test_all_weights_zero_is_ce_alone(rng):
    s, _ = random_outputs(rng)
    y = two_view_labels(rng)
    parts = total_loss(s, None, y, LossConfig(alpha=0.0, beta=0.0, gamma=0.0, aux_weight=0.0))
    assert float(parts.total) == float(parts.ce)
    for k in ("rce", "cr", "mt", "aux"):
        assert float(getattr(parts, k)) == 0.0


@pytest.mark.parametrize("knob,field", [("alpha", "rce"), ("beta", "cr"), ("gamma", "mt"),
                                        ("aux_weight", "aux")])
def test_zero_knob_zeroes_field(rng, knob, field):
    s, t = random_outputs(rng)
    y = two_view_labels(rng)
    assert float(getattr(total_loss(s, t, y, LossConfig(**{knob: 0.0})), field)) == 0.0
    assert float(getattr(total_loss(s, t, y, LossConfig()), field)) != 0.0


def test_mt_start_step_delays_consistency(rng):
    s, t = random_outputs(rng)
    y = two_view_labels(rng)
    cfg = LossConfig(mt_start_step=5)
    assert float(total_loss(s, t, y, cfg, step=4).mt) == 0.0
    assert float(total_loss(s, t, y, cfg, step=5).mt) > 0.0


def test_total_loss_alignment_errors(rng):
    s, t = random_outputs(rng)
    y = two_view_labels(rng)
    with pytest.raises(InvalidInputError):
        total_loss(s, t, y[:4], LossConfig())
    with pytest.raises(InvalidInputError):
        total_loss(s, None, y, LossConfig())
    odd = ModelOutput(s.logits[:5], s.aux_logits[:5], None, None)
    with pytest.raises(InvalidInputError):
        total_loss(odd, None, y[:5], LossConfig(gamma=0.0))
    short = ModelOutput(t.logits[:4], t.aux_logits[:4], None, None)
    with pytest.raises(InvalidInputError):
        total_loss(s, short, y, LossConfig())


def test_feature_space_needs_projector(rng):
    s, t = random_outputs(rng)
    with pytest.raises(InvalidInputError):
        total_loss(s, t, two_view_labels(rng), LossConfig(cr_space="feature"))


# train_step -----------------------------------------------------------------------

def test_teacher_starts_equal_and_updates_after_step(rng):
    st = tiny_state()
    for a, b in zip(st.model.parameters(), st.teacher.model.parameters()):
        assert torch.equal(a, b)
    st, m = train_step(st, tiny_batch(rng))
    assert st.step == 1 and st.teacher.step_count == 1
    assert set(m) >= {"ce", "rce", "cr", "mt", "aux", "total", "lr", "mean_positives"}


def test_lr_zero_leaves_params_unchanged(rng, monkeypatch):
    cfg = LossConfig(alpha=0.0, beta=0.0, gamma=0.0, aux_weight=0.0, eta=0.9)
    st = tiny_state(cfg, weight_decay=0.0)
    monkeypatch.setattr("attract_repulse.train.lr_at", lambda step, sched: 0.0)
    before = [p.detach().clone() for p in st.model.parameters()]
    st, m = train_step(st, tiny_batch(rng))
    assert m["lr"] == 0.0
    for a, b in zip(before, st.model.parameters()):
        assert torch.equal(a, b)


def separable_set(n=32, seed=0):
    r = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = r.normal(0, 0.3, size=(n, 3, 8, 8))
    x[y == 1] += 1.5
    return x, y


def test_loss_decreases_on_separable_set():
    x, y = separable_set()
    spec = ModelSpec(num_classes=2, widths=(8, 8), blocks_per_stage=1, dropout=0.0, aux_stage=0)
    cfg = LossConfig(alpha=0.0, beta=0.0, gamma=0.0, aux_weight=0.0, eta=0.9)
    aug = AugmentConfig(policy=AugPolicy.identity(), mix_prob=0.0)
    st = init_state(spec, cfg, aug, ScheduleConfig(base_lr=0.01, warmup_epochs=1, total_epochs=50),
                    OptimConfig(), 0, 32, torch.float64)
    ces = []
    for _ in range(50):
        b = make_two_view_batch(x, y, st.step, aug, num_classes=2, epsilon=0.0)
        st, m = train_step(st, b)
        ces.append(m["ce"])
    assert ces[-1] < ces[0]
    assert ces[-1] < 0.1


def test_teacher_matches_replay_of_student_trajectory(rng):
    st = tiny_state(LossConfig(eta=0.7))
    traj = [torch.cat([p.detach().reshape(-1) for p in st.model.parameters()]).clone()]
    for k in range(5):
        st, _ = train_step(st, tiny_batch(rng, seed=k))
        traj.append(torch.cat([p.detach().reshape(-1) for p in st.model.parameters()]).clone())
    want = traj[0].clone()
    for theta in traj[1:]:
        want = 0.7 * want + 0.3 * theta
    got = torch.cat([p.reshape(-1) for p in st.teacher.model.parameters()])
    torch.testing.assert_close(got, want, rtol=0, atol=1e-12)


def test_teacher_only_changes_via_ema(rng):
    st = tiny_state(LossConfig(eta=0.0))
    st, _ = train_step(st, tiny_batch(rng))
    for a, b in zip(st.model.parameters(), st.teacher.model.parameters()):
        assert torch.equal(a.detach(), b)
        assert b.grad is None


def test_non_finite_loss_aborts_with_record(rng):
    st = tiny_state()
    with torch.no_grad():
        st.model.head.weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as ei:
        train_step(st, tiny_batch(rng))
    assert ei.value.record["step"] == 0
    assert ei.value.record["batch_seed"] == [0, 0, 0]
    assert st.step == 0


def test_train_epoch_runs_all_steps(rng):
    st = tiny_state()
    x = rng.normal(size=(20, 3, 8, 8))
    y = rng.integers(0, 3, 20)
    rows = train_epoch(st, x, y)
    assert len(rows) == 5 and st.step == 5 and st.epoch == 1


# evaluate -----------------------------------------------------------------------

class FixedModel(torch.nn.Module):
    """Returns canned final and aux logits keyed by the first pixel."""

    def __init__(self, final, aux):
        super().__init__()
        self.dummy = torch.nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.final = torch.as_tensor(final, dtype=torch.float64)
        self.aux = torch.as_tensor(aux, dtype=torch.float64)

    def forward(self, x):
        idx = x[:, 0, 0, 0].long()
        return ModelOutput(self.final[idx], self.aux[idx], None, None)


def index_images(n):
    x = np.zeros((n, 1, 2, 2))
    x[:, 0, 0, 0] = np.arange(n)
    return x


def test_perfect_classifier_scores_100():
    y = np.array([2, 0, 1, 1])
    m = FixedModel(np.log(np.eye(3)[y] * 0.98 + 0.01), np.zeros((4, 3)))
    assert evaluate(m, m, index_images(4), y, use_fusion=False) == {"student_top1": 100.0,
                                                                     "teacher_top1": 100.0}


def test_random_predictor_is_near_chance():
    r = np.random.default_rng(5)
    n = 20000
    y = np.repeat(np.arange(10), n // 10)
    probs = r.dirichlet(np.ones(10), n)
    assert top1(probs, y) == pytest.approx(10.0, abs=1.0)


def test_fusion_changes_accuracy_only_through_aux():
    # three samples: heads agree on 0, disagree on 1 and 2
    y = np.array([0, 1, 1])
    final = np.log([[0.9, 0.1], [0.6, 0.4], [0.55, 0.45]])
    aux = np.log([[0.8, 0.2], [0.1, 0.9], [0.45, 0.55]])
    m = FixedModel(final, aux)
    x = index_images(3)
    off = evaluate(m, None, x, y, use_fusion=False, fusion_weight=0.3)["student_top1"]
    on = evaluate(m, None, x, y, use_fusion=True, fusion_weight=0.3)["student_top1"]
    # fused p1: 0.7*0.4+0.3*0.9 = 0.55 (correct), 0.7*0.45+0.3*0.55 = 0.48 (wrong)
    assert off == pytest.approx(100 / 3)
    assert on == pytest.approx(200 / 3)
    assert evaluate(m, None, x, y, use_fusion=True, fusion_weight=0.0)["student_top1"] == off


def test_evaluate_errors():
    m = FixedModel(np.zeros((1, 2)), np.zeros((1, 2)))
    with pytest.raises(InvalidInputError):
        evaluate(m, None, np.zeros((0, 1, 2, 2)), [])
    with pytest.raises(InvalidInputError):
        evaluate(m, None, index_images(1), [0], use_tencrop=True)
