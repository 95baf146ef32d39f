import math

import numpy as np
import pytest

from cliffordm.autodiff import Tensor, grad_check
from cliffordm.backbone import build_model
from cliffordm.data import load_splits
from cliffordm.data.dataset import ImageSet
from cliffordm.layers import Parameter
from cliffordm.training import (
    AdamW,
    ConfigError,
    EarlyStopping,
    RunConfig,
    Trainer,
    TrainingError,
    class_weights,
    clip_global_norm,
    ema_update,
    global_norm,
    lr_at,
    mix_batch,
    smooth_targets,
    weighted_bce,
)
from cliffordm.training.trainer import derive_rng

# ---------------------------------------------------------------------------
# class weights, smoothing, loss


def counts(N, pos):
    y = np.zeros((N, 1))
    y[:pos] = 1
    return y


@pytest.mark.parametrize("N,pos,expected", [(1000, 50, 15.0), (100, 40, 1.5), (100, 0, 15.0), (10, 0, 10.0),
                                            (4, 1, 3.0)])
def test_class_weights(N, pos, expected):
    assert class_weights(counts(N, pos))[0] == expected


def test_class_weights_follow_formula_when_positives_dominate():
    # (N - n) / n < 1 here; the formula is applied as written, without a floor
    assert class_weights(counts(10, 8))[0] == 0.25


def test_class_weights_per_column():
    y = np.hstack([counts(100, 40), counts(100, 0), counts(100, 50)])
    np.testing.assert_array_equal(class_weights(y), [1.5, 15.0, 1.0])
    with pytest.raises(ValueError):
        class_weights(np.zeros((0, 8)))


def test_smoothing_values():
    np.testing.assert_allclose(smooth_targets([1.0, 0.0, 0.5], 0.1), [0.95, 0.05, 0.5], atol=1e-15)
    np.testing.assert_array_equal(smooth_targets([1.0, 0.0], 0.0), [1.0, 0.0])
    with pytest.raises(ValueError):
        smooth_targets([1.0], 1.0)


def test_bce_closed_form_log2():
    loss = weighted_bce(Tensor(np.zeros((1, 1))), np.array([[0.95]]), np.ones(1)).data
    assert float(loss) == pytest.approx(math.log(2), abs=1e-15)


def test_bce_hard_clamp():
    y, w = np.array([[0.95, 0.05]]), np.array([2.0, 3.0])
    a = Tensor(np.array([[25.0, -30.0]]), requires_grad=True)
    b = Tensor(np.array([[20.0, -20.0]]))
    la, lb = weighted_bce(a, y, w), weighted_bce(b, y, w)
    assert la.data == lb.data
    la.backward()
    np.testing.assert_array_equal(a.grad, 0.0)


def test_bce_matches_standard_bce_when_unweighted():
    r = np.random.default_rng(0)
    z = r.standard_normal((16, 8)) * 4
    y = (r.random((16, 8)) < 0.4).astype(float)
    p = 1 / (1 + np.exp(-z))
    ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    got = float(weighted_bce(Tensor(z), smooth_targets(y, 0.0), np.ones(8)).data)
    assert abs(got - ref) < 1e-12


def test_bce_weighted_reference():
    r = np.random.default_rng(1)
    z, y, w = r.standard_normal((5, 3)), r.random((5, 3)), r.uniform(1, 15, 3)
    p = 1 / (1 + np.exp(-z))
    ref = np.mean([np.mean([-w[c] * y[b, c] * np.log(p[b, c]) - (1 - y[b, c]) * np.log(1 - p[b, c])
                            for c in range(3)]) for b in range(5)])
    assert abs(float(weighted_bce(Tensor(z), y, w).data) - ref) < 1e-12


def test_bce_stable_for_large_logits():
    loss = weighted_bce(Tensor(np.array([[19.9, -19.9]])), np.array([[0.0, 1.0]]), np.ones(2)).data
    assert np.isfinite(loss) and float(loss) == pytest.approx(19.9, abs=1e-6)


def test_bce_gradient():
    r = np.random.default_rng(2)
    y, w = r.random((4, 8)), r.uniform(1, 15, 8)
    rep = grad_check(lambda z: weighted_bce(z, y, w), [r.standard_normal((4, 8)) * 3], h=1e-5, tol=1e-6)
    assert rep.passed, rep


def test_bce_class_permutation_invariance():
    r = np.random.default_rng(3)
    z, y, w = r.standard_normal((6, 8)), r.random((6, 8)), r.uniform(1, 15, 8)
    perm = r.permutation(8)
    a = float(weighted_bce(Tensor(z), y, w).data)
    b = float(weighted_bce(Tensor(z[:, perm]), y[:, perm], w[perm]).data)
    assert abs(a - b) < 1e-14


def test_bce_rejects_nan_and_shape_mismatch():
    with pytest.raises(FloatingPointError):
        weighted_bce(Tensor(np.array([[np.nan]])), np.array([[1.0]]), np.ones(1))
    with pytest.raises(ValueError):
        weighted_bce(Tensor(np.zeros((2, 3))), np.zeros((2, 2)), np.ones(3))


# ---------------------------------------------------------------------------
# MixUp / CutMix


def batch(B=4, seed=0):
    r = np.random.default_rng(seed)
    return r.standard_normal((B, 3, 8, 8)), np.eye(B, 8)


@pytest.mark.parametrize("branch", ["mixup", "cutmix"])
def test_lambda_one_is_identity(branch):
    x, y = batch()
    x2, y2, tag = mix_batch(x, y, np.random.default_rng(0), lam=1.0, branch=branch)
    assert tag == branch
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(y2, y)


def test_mixup_half_on_disjoint_onehots():
    x, y = batch()
    rng = np.random.default_rng(1)
    perm = np.random.default_rng(1).permutation(4)
    _, y2, _ = mix_batch(x, y, rng, lam=0.5, branch="mixup")
    for i in range(4):
        if perm[i] != i:
            assert y2[i, i] == 0.5 and y2[i, perm[i]] == 0.5


def test_cutmix_targets_follow_realized_area():
    x, y = batch(B=6, seed=2)
    for seed in range(30):
        x2, y2, _ = mix_batch(x, y, np.random.default_rng(seed), branch="cutmix")
        for i in range(6):
            changed = np.any(x2[i] != x[i], axis=0).mean()
            own = y2[i, i] if y2[i].sum() > 0 else 1.0
            if changed > 0:
                assert own == pytest.approx(1 - changed, abs=1e-12)
        np.testing.assert_allclose(y2.sum(axis=1), 1.0, atol=1e-12)


def test_branch_fraction_monte_carlo():
    x, y = batch(B=2)
    tags = [mix_batch(x, y, np.random.default_rng([7, i]))[2] for i in range(10_000)]
    frac = tags.count("mixup") / len(tags)
    assert 0.49 <= frac <= 0.51
    assert set(tags) == {"mixup", "cutmix"}


def test_single_sample_batch_passes_through():
    x, y = batch(B=1)
    x2, y2, tag = mix_batch(x, y, np.random.default_rng(0))
    assert tag == "none" and x2 is x and y2 is y


# ---------------------------------------------------------------------------
# schedule, clipping, AdamW, EMA, early stopping


def test_lr_schedule_values():
    total, warm = 1001, 100
    assert lr_at(0, total, warm) == 0.0
    assert lr_at(50, total, warm) == pytest.approx(1e-4, abs=1e-20)
    assert lr_at(warm, total, warm) == pytest.approx(2e-4, abs=1e-20)
    assert lr_at(total - 1, total, warm) == pytest.approx(1e-7, abs=1e-20)
    assert lr_at(550, total, warm) == pytest.approx((2e-4 + 1e-7) / 2, abs=1e-18)
    assert abs(lr_at(warm - 1, total, warm) - lr_at(warm, total, warm)) <= 2e-4 / warm + 1e-18
    lrs = [lr_at(s, total, warm) for s in range(warm, total)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(-1, total, warm)


def test_clipping():
    g = [np.array([0.15, 0.2])]
    assert clip_global_norm(g, 0.5) == pytest.approx(0.25)
    np.testing.assert_array_equal(g[0], [0.15, 0.2])
    g = [np.array([0.6]), np.array([0.8])]
    clip_global_norm(g, 0.5)
    assert global_norm(g) == pytest.approx(0.5, abs=1e-15)
    r = np.random.default_rng(0)
    for _ in range(50):
        tree = [r.standard_normal(r.integers(1, 20)) * r.uniform(0, 3) for _ in range(5)]
        clip_global_norm(tree, 0.5)
        assert global_norm(tree) <= 0.5 + 1e-9


def param(value, decay=True):
    p = Parameter(np.array(value, dtype=np.float64), decay=decay)
    return p


def test_adamw_first_step_is_sign_step():
    p = param([1.0, -2.0, 3.0])
    p.grad = np.array([0.3, -5.0, 1e-3])
    AdamW({"w": p}, weight_decay=0.0).step(1e-2)
    np.testing.assert_allclose(p.data, [1.0 - 1e-2, -2.0 + 1e-2, 3.0 - 1e-2], atol=1e-7)


def test_adamw_decay_only_step():
    p = param([2.0, -4.0])
    p.grad = np.zeros(2)
    AdamW({"w": p}, weight_decay=0.08).step(1e-3)
    np.testing.assert_array_equal(p.data, np.array([2.0, -4.0]) * (1 - 1e-3 * 0.08))
    q = param([2.0], decay=False)
    q.grad = np.zeros(1)
    AdamW({"b": q}, weight_decay=0.08).step(1e-3)
    assert q.data[0] == 2.0


def test_adamw_three_steps_match_hand_oracle():
    a, c, lr, wd, b1, b2, eps = 3.0, 0.5, 0.1, 0.08, 0.9, 0.999, 1e-8
    p = param([2.0])
    opt = AdamW({"w": p}, weight_decay=wd, betas=(b1, b2), eps=eps)
    x, m, v = 2.0, 0.0, 0.0
    for t in range(1, 4):
        g = a * (x - c)
        p.grad = np.array([a * (p.data[0] - c)])
        opt.step(lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x * (1 - lr * wd)
        x = x - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        assert abs(p.data[0] - x) < 1e-12


def test_adamw_skips_non_finite():
    p = param([1.0])
    p.grad = np.array([np.inf])
    opt = AdamW({"w": p})
    assert opt.step(1e-3) is False and opt.skipped == 1 and p.data[0] == 1.0 and opt.t == 0


def test_ema_examples_and_closed_form():
    s = {"w": np.array([1.5])}
    ema_update(s, {"w": np.array([1.5])}, 0.9998)
    assert s["w"][0] == 1.5
    s = {"w": np.array([0.0])}
    ema_update(s, {"w": np.array([1.0])}, 0.9998)
    assert s["w"][0] == pytest.approx(0.0002, abs=1e-15)
    s = {"w": np.array([0.0])}
    prev = 0.0
    for k in range(1, 501):
        ema_update(s, {"w": np.array([1.0])}, 0.99)
        assert s["w"][0] == pytest.approx(1 - 0.99**k, abs=1e-12)
        assert s["w"][0] > prev
        prev = s["w"][0]


def test_patience_trace():
    stop = EarlyStopping(30)
    seq = [0.5, 0.6, 0.7] + [0.7] * 100
    stopped = next(e for e, auc in enumerate(seq) if stop.update(auc, e))
    assert stop.best_epoch == 2 and stopped == 2 + 30


# ---------------------------------------------------------------------------
# run configuration


def test_run_config_text_round_trip_and_errors():
    cfg = RunConfig(lr=1e-3, mix_enabled=False, epochs=3)
    assert RunConfig.from_text(cfg.to_text()) == cfg
    assert len(cfg.to_text().splitlines()) == 22
    with pytest.raises(ConfigError):
        RunConfig.from_text("learning_rate=1\n")
    with pytest.raises(ConfigError):
        RunConfig.from_text("epochs=abc\n")
    with pytest.raises(ConfigError):
        RunConfig(accum_steps=0)
    with pytest.raises(ConfigError):
        RunConfig(ema_decay=1.0)


def test_derive_rng_independent_streams():
    a = derive_rng(1, "augment", 0, 5).random()
    assert a == derive_rng(1, "augment", 0, 5).random()
    assert a != derive_rng(1, "mix", 0, 5).random()
    assert a != derive_rng(2, "augment", 0, 5).random()


# ---------------------------------------------------------------------------
# trainer steps


TOY = dict(input_size=112, dim=8, num_self_blocks=1, drop_path_max=0.0, head_dropout=0.0, mix_enabled=False,
           warmup_epochs=0, lr=1e-3)


def toy_trainer(accum):
    cfg = RunConfig(**TOY, accum_steps=accum)
    t = Trainer(cfg, build_model(cfg.model_config(), 0, np.float64), freeze_bn=True)
    t.weights = np.linspace(1, 3, 8)
    return t


def test_accumulation_matches_full_batch():
    r = np.random.default_rng(0)
    x = r.standard_normal((4, 3, 112, 112))
    y = (r.random((4, 8)) < 0.4).astype(float)
    full, accum = toy_trainer(1), toy_trainer(2)
    for _ in range(2):
        full.train_step([(x, y)])
        accum.train_step([(x[:2], y[:2]), (x[2:], y[2:])])
    for k, p in full.params.items():
        np.testing.assert_allclose(accum.params[k].data, p.data, atol=1e-10, rtol=0, err_msg=k)


def test_non_finite_loss_twice_aborts():
    t = toy_trainer(1)
    bad = np.full((2, 3, 112, 112), np.nan)
    y = np.zeros((2, 8))
    assert math.isnan(t.accumulate(bad, y))
    with pytest.raises(TrainingError):
        t.accumulate(bad, y)


def test_single_non_finite_loss_is_tolerated():
    t = toy_trainer(1)
    y = np.zeros((2, 8))
    t.accumulate(np.full((2, 3, 112, 112), np.nan), y)
    good = np.random.default_rng(0).standard_normal((2, 3, 112, 112))
    assert math.isfinite(t.accumulate(good, y))
    t.accumulate(np.full((2, 3, 112, 112), np.nan), y)


def test_fit_rejects_empty_or_tiny_split():
    t = toy_trainer(1)
    one = ImageSet(np.zeros((1, 32, 32, 3), np.uint8), np.zeros((1, 8)), ["a"])
    with pytest.raises(TrainingError):
        t.fit(one, one)
    empty = ImageSet(np.zeros((0, 32, 32, 3), np.uint8), np.zeros((0, 8)), [])
    with pytest.raises(TrainingError):
        t.fit(one, empty)


SHORT = dict(input_size=112, dim=8, num_self_blocks=1, epochs=2, batch_size=8, accum_steps=2, warmup_epochs=1,
             lr=2e-3, seed=5)


def test_short_fit_writes_artifacts_and_is_reproducible(small_synth, tmp_path):
    train, val = load_splits(small_synth / "manifest.csv", 0.8, 0)
    cfg = RunConfig(**SHORT)
    t1 = Trainer(cfg)
    h1 = t1.fit(train, val, tmp_path / "a", meta={"ratio": "0.8"})
    h2 = Trainer(cfg).fit(train, val, tmp_path / "b", meta={"ratio": "0.8"})
    assert h1 == h2 and len(h1) == 2
    for name in ("history.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [r["epoch"] for r in h1] == [1, 2]
    assert t1.state.step == 2 * math.ceil((len(train) // 8) / 2)
    assert float(h1[-1]["lr"]) == pytest.approx(1e-7)
    assert f"{t1.state.best_auc:.6f}" == max(h1, key=lambda r: float(r["val_macro_auc"]))["val_macro_auc"]
