import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from builders import tiny_setup
from hgda.errors import NegativeLoss, NonFiniteGradient, NonFiniteLoss
from hgda.model import ModelParams, global_norm
from hgda.rng import RngKey
from hgda.sampler import sample_batch
from hgda.trainer import (
    SGD,
    TaskLosses,
    TrainConfig,
    clip_global,
    config_hash,
    hardness,
    inner_adapt,
    linear_lr,
    outer_step,
    scaled_lr,
    train,
    uniform_scores,
)


def losses(lab, cls=None):
    cls = cls if cls is not None else [0.0] * len(lab)
    return [TaskLosses(a, b, a + b, None) for a, b in zip(lab, cls)]


# --- learning-rate scaling ----------------------------------------------------


def test_scaled_lr_exact():
    assert scaled_lr(1e-2, 32, 32) == 1e-2
    assert scaled_lr(1e-2, 8, 32) == 5e-3
    with pytest.raises(ValueError):
        scaled_lr(1e-2, 0)


def test_linear_decay():
    assert linear_lr(0.1, 0, 10) == 0.1
    assert linear_lr(0.1, 5, 10) == pytest.approx(0.05)
    assert linear_lr(0.1, 10, 10) == 0.0


# --- hardness ---------------------------------------------------------------------


def test_hardness_reference_vector():
    h = hardness(losses([2.0, 1.0, 1.0]))
    assert list(h.gamma_phi) == [0.5, 0.25, 0.25]
    assert list(h.gamma_theta) == [0.5, 0.25, 0.25]


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=16))
def test_hardness_properties(vals):
    h = hardness(losses(vals))
    for g in h.by_group().values():
        assert abs(g.sum() - 1) <= 1e-12
        assert np.all(g >= 0)
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(h.gamma_phi[order]) >= 0)  # monotone in loss


def test_hardness_degenerate():
    h = hardness(losses([0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(h.gamma_theta, [0.25] * 4)
    # missing classifier losses (nan) fall back to uniform omega weights
    h = hardness([TaskLosses(1.0, float("nan"), 1.0, None), TaskLosses(3.0, float("nan"), 3.0, None)])
    np.testing.assert_array_equal(h.gamma_omega, [0.5, 0.5])
    np.testing.assert_array_equal(h.gamma_phi, [0.25, 0.75])
    with pytest.raises(NegativeLoss):
        hardness(losses([1.0, -0.5]))
    with pytest.raises(ValueError):
        hardness([])


def test_separate_groups_use_separate_losses():
    h = hardness(losses([1.0, 3.0], cls=[3.0, 1.0]))
    np.testing.assert_array_equal(h.gamma_phi, [0.25, 0.75])
    np.testing.assert_array_equal(h.gamma_omega, [0.75, 0.25])
    np.testing.assert_array_equal(h.gamma_theta, [0.5, 0.5])


def test_uniform_scores():
    u = uniform_scores(4)
    assert all(np.all(g == 0.25) for g in u.by_group().values())


# --- optimizer and clipping ----------------------------------------------------------


def test_sgd_matches_reference_momentum():
    p = ModelParams({"w": np.array([1.0, -2.0])}, {})
    opt = SGD(momentum=0.9, weight_decay=0.1)
    grads = [np.array([0.5, 0.5]), np.array([-1.0, 2.0])]
    w, buf = p.theta["w"].copy(), None
    for g in grads:
        d = g + 0.1 * w
        buf = d if buf is None else 0.9 * buf + d
        w = w - 0.01 * buf
        p = opt.step(p, ModelParams({"w": g}, {}), 0.01)
    np.testing.assert_array_equal(p.theta["w"], w)


def test_clip():
    g = ModelParams({"a": np.array([3.0, 4.0])}, {"b": np.array([12.0])})
    pre, post = clip_global(g, 5.0)
    assert pre == 13.0 and post == pytest.approx(5.0, abs=1e-12)
    assert global_norm(g) <= 5.0 + 1e-12
    small = ModelParams({"a": np.array([0.3])}, {})
    assert clip_global(small, 5.0) == (0.3, 0.3)
    with pytest.raises(NonFiniteGradient):
        clip_global(ModelParams({"a": np.array([np.inf])}, {}), 5.0)


# --- bilevel mechanics ----------------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    return tiny_setup()


def one_task(setup, K=3, seed=0):
    return sample_batch(setup.train_pool, TrainConfig(K=K).sampler(), 1, RngKey(seed))[0]


def test_inner_adapt_leaves_outer_params_untouched(setup):
    p = setup.init_params(0)
    before = p.copy()
    res = inner_adapt(p, setup.net, one_task(setup), TrainConfig(K=3, base_lr=0.5), RngKey(1))
    assert p.equal(before)
    assert res.lab > 0 and res.cls > 0
    assert res.total == pytest.approx(res.lab + res.cls)


@pytest.mark.parametrize("cfg", [TrainConfig(K=3, beta=0.0), TrainConfig(K=3, adaptation_steps=0)])
def test_no_adaptation_gives_plain_query_gradient(setup, cfg):
    p = setup.init_params(0)
    task = one_task(setup)
    key = RngKey(4)
    res = inner_adapt(p, setup.net, task, cfg, key)
    dom = setup.net.domain_class(task.domain_id)
    lab, cls, g = setup.net.objective(p, task.query, dom, cfg.lam, cfg.dropout, key.child(1).generator())
    assert res.lab == lab and res.cls == cls
    for name, v in g.items():
        np.testing.assert_array_equal(dict(res.meta_grads.items())[name], v)


def test_adaptation_reduces_support_loss(setup):
    p = setup.init_params(0)
    task = one_task(setup)
    cfg = TrainConfig(K=3, beta=0.3, adaptation_steps=5, dropout=0.0)
    before = setup.net.objective(p, task.support, None, grads=False)[0]
    q = p.copy()
    for _ in range(5):
        _, _, g = setup.net.objective(q, task.support, setup.net.domain_class(task.domain_id), 1.0)
        for name, v in g.items():
            grp, k = name.split("/")
            getattr(q, grp)[k] -= cfg.inner_lr * v
    after = setup.net.objective(q, task.support, None, grads=False)[0]
    assert after < before


def test_outer_step_clips_and_is_deterministic(setup):
    p = setup.init_params(0)
    cfg = TrainConfig(K=3, base_lr=1.0, grad_clip=5.0)
    tasks = sample_batch(setup.train_pool, cfg.sampler(), 4, RngKey(9))
    batch = [inner_adapt(p, setup.net, t, cfg, RngKey(9, (i,))) for i, t in enumerate(tasks)]
    outs = []
    for _ in range(2):
        new, info = outer_step(p, batch, hardness(batch), cfg, SGD())
        assert info["clipped_norm"] <= 5.0 + 1e-9
        outs.append(new)
    assert outs[0].equal(outs[1])
    assert not outs[0].equal(p)


def test_nonfinite_task_is_identified(setup):
    p = setup.init_params(0)
    p.phi["proj"][:] = np.nan
    task = one_task(setup)
    with pytest.raises(NonFiniteLoss) as e:
        inner_adapt(p, setup.net, task, TrainConfig(K=3), RngKey(0))
    assert e.value.task_entry == task.manifest_entry()


# --- the outer loop ---------------------------------------------------------------------


def small_cfg(**kw):
    return TrainConfig(**{"K": 3, "m": 3, "max_outer_iters": 6, "eval_every": 2, "dev_episodes": 3,
                          "base_lr": 0.1, **kw})


def test_train_is_deterministic_and_worker_independent(setup):
    p = setup.init_params(0)
    a = train(setup.train_pool, setup.net, p, small_cfg(), seed=3, dev_pool=setup.dev_pool)
    b = train(setup.train_pool, setup.net, p, small_cfg(workers=3), seed=3, dev_pool=setup.dev_pool)
    assert a.final_params.equal(b.final_params) and a.params.equal(b.params)
    assert a.log == b.log


def test_train_log_records(setup):
    res = train(setup.train_pool, setup.net, setup.init_params(0), small_cfg(), seed=1, dev_pool=setup.dev_pool)
    assert res.log[0]["event"] == "init" and res.log[0]["dev_lab"] is not None
    steps = [r for r in res.log if "event" not in r]
    assert [r["iter"] for r in steps] == list(range(1, 7))
    for r in steps:
        assert len(r["gamma_theta"]) == 3 and abs(sum(r["gamma_phi"]) - 1) < 1e-12
        assert r["clipped_norm"] <= 5.0 + 1e-9
    assert [r["iter"] for r in steps if "dev_lab" in r] == [2, 4, 6]
    # linear decay
    assert steps[0]["lr"] > steps[-1]["lr"] > 0


def test_uniform_weighting_logs_uniform_gammas(setup):
    res = train(setup.train_pool, setup.net, setup.init_params(0), small_cfg(weighting="uniform", max_outer_iters=2),
                seed=1)
    assert res.log[-1]["gamma_theta"] == [1 / 3] * 3


def test_early_stop_returns_best(setup):
    cfg = small_cfg(max_outer_iters=40, patience=2, eval_every=1, base_lr=5.0)
    res = train(setup.train_pool, setup.net, setup.init_params(0), cfg, seed=0, dev_pool=setup.dev_pool)
    devs = {r["iter"]: r["dev_lab"] for r in res.log if r.get("dev_lab") is not None}
    assert res.best_iter == min(devs, key=devs.get)
    assert res.best_loss == min(devs.values())
    if res.stopped_early:
        assert res.iterations - res.best_iter == 2


def test_needs_two_domains(setup):
    one = {d: s for d, s in list(setup.train_pool.by_domain.items())[:1]}
    with pytest.raises(ValueError):
        train(one, setup.net, setup.init_params(0), small_cfg(), seed=0)


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        TrainConfig(weighting="other")
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig()) != config_hash(TrainConfig(K=6))
