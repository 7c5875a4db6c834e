import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from punet.errors import InvalidConfig, NumericalOverflow
from punet.nn import Parameter
from punet.optim import (
    PRESETS,
    SGD,
    ScheduleSpec,
    Scheduler,
    SGDConfig,
    TrainConfig,
    preset,
    schedule_step,
    sgd_step,
)


def param(v, g):
    p = Parameter(np.array(v, dtype=np.float64))
    p.grad = np.array(g, dtype=np.float64)
    return p


def test_zero_lr_leaves_params():
    p = param([1.0, -2.0], [3.0, 4.0])
    sgd_step([p], SGDConfig(lr=0.0, momentum=0.9, weight_decay=0.1))
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_plain_step():
    p = param(1.0, 0.5)
    sgd_step([p], SGDConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
    assert float(p.data) == pytest.approx(0.95, abs=1e-15)


def test_decay_only_step():
    p = param(1.0, 0.0)
    sgd_step([p], SGDConfig(lr=0.1, momentum=0.0, weight_decay=0.01))
    assert float(p.data) == pytest.approx(0.999, abs=1e-15)


@given(
    lr=st.floats(1e-4, 1.0),
    m=st.floats(0.0, 0.99),
    wd=st.floats(0.0, 0.1),
    grads=st.lists(st.floats(-5, 5), min_size=3, max_size=3),
)
def test_momentum_recursion_matches_reference(lr, m, wd, grads):
    p = Parameter(np.array(0.7))
    opt = SGD([p], SGDConfig(lr, m, wd))
    w, v = 0.7, 0.0
    for g in grads:
        p.grad = np.array(g)
        opt.step()
        d = g + wd * w
        v = m * v + d
        w = w - lr * v
    assert float(p.data) == pytest.approx(w, rel=1e-12, abs=1e-12)


def test_optimizers_do_not_share_state():
    a, b = param([1.0], [1.0]), param([1.0], [1.0])
    oa, ob = SGD([a], SGDConfig(0.1, 0.9)), SGD([b], SGDConfig(0.1, 0.9))
    for _ in range(3):
        oa.step()
    ob.step()
    assert ob.velocity[0][0] == 1.0
    assert oa.velocity[0][0] == pytest.approx(1 + 0.9 + 0.81)


def test_optimizer_copies_config():
    cfg = SGDConfig(0.1, 0.9)
    opt = SGD([], cfg)
    opt.lr = 0.001
    assert cfg.lr == 0.1


def test_grad_clip_global_norm():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    SGD([a, b], SGDConfig(1.0, 0.0, grad_clip=1.0)).step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [-0.6, -0.8], rtol=1e-9)


def test_nonfinite_update_raises():
    p = param([1e308], [1e308])
    with pytest.raises(NumericalOverflow):
        SGD([p], SGDConfig(10.0, 0.0)).step()


def test_config_validation():
    for bad in (SGDConfig(lr=-1), SGDConfig(momentum=1.0), SGDConfig(weight_decay=-0.1), SGDConfig(grad_clip=0)):
        with pytest.raises(InvalidConfig):
            bad.validate()
    for bad in (ScheduleSpec("cosine"), ScheduleSpec("multistep", [5, 5]), ScheduleSpec(factor=1.0)):
        with pytest.raises(InvalidConfig):
            bad.validate()


def test_multistep_milestones():
    s = Scheduler(ScheduleSpec("multistep", [80, 120], 0.1), 0.01)
    lrs = {1: s.lr}
    for epoch in range(1, 160):
        lrs[epoch + 1] = schedule_step(s, epoch)
    assert lrs[80] == pytest.approx(0.01)
    assert lrs[81] == pytest.approx(0.001)
    assert lrs[121] == pytest.approx(0.0001)
    drops = sum(1 for e in range(2, 161) if lrs[e] < lrs[e - 1])
    assert drops == 2


def test_plateau_never_fires_when_improving():
    s = Scheduler(ScheduleSpec("plateau", patience=3), 0.1)
    assert all(s.step(e, 1.0 / e) == 0.1 for e in range(1, 30))


def test_plateau_trace():
    s = Scheduler(ScheduleSpec("plateau", factor=0.1, patience=3), 0.1)
    lrs = [s.step(e, loss) for e, loss in enumerate([1.0, 1.1, 1.1, 1.1], start=1)]
    assert lrs[:3] == [0.1, 0.1, 0.1]
    assert lrs[3] == pytest.approx(0.01)
    assert s.bad_epochs == 0


def test_plateau_equal_loss_is_not_improvement():
    s = Scheduler(ScheduleSpec("plateau", patience=2), 1.0)
    for e, loss in enumerate([1.0, 1.0, 1.0], start=1):
        s.step(e, loss)
    assert s.lr == pytest.approx(0.1)


def test_presets():
    assert preset("cifar-pure").sgd.lr == 0.01 and preset("cifar-pure").schedule.milestones == [80, 120]
    assert preset("cifar-pure-extended").epochs == 220
    assert preset("galaxy-pure").sgd.weight_decay == 0.01
    assert preset("galaxy-resnet").sgd.lr == 0.1
    assert preset("imagenet").schedule.milestones == [30, 60]
    with pytest.raises(InvalidConfig):
        preset("mnist")


def test_preset_is_a_copy():
    p = preset("cifar-pure")
    p.sgd.lr = 5.0
    p.schedule.milestones.append(999)
    assert PRESETS["cifar-pure"].sgd.lr == 0.01
    assert PRESETS["cifar-pure"].schedule.milestones == [80, 120]


def test_train_config_round_trip():
    cfg = preset("galaxy-pure")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
