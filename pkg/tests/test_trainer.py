import math

import numpy as np
import pytest

from mfdmc.data import DatasetMeta, DatasetSplit, Ratings
from mfdmc.losses import total_loss
from mfdmc.model import CenterBank, MfdmcModel, ModelConfig, init_model
from mfdmc.optim import SGD, Adam
from mfdmc.trainer import (
    TrainConfig,
    TrainingError,
    compute_gradients,
    fit,
    gradient_check,
    prune_centers,
    ramp_coefficients,
    run_epochs,
    write_epoch_log,
)
from tiny import random_batch, random_model


def test_ramp():
    cfg = TrainConfig(eta_max=0.4, gamma_max=0.2, I_p=40)
    assert ramp_coefficients(cfg, 0) == (0.0, 0.0)
    assert ramp_coefficients(cfg, 20) == pytest.approx((0.2, 0.1))
    assert ramp_coefficients(cfg, 40) == (0.4, 0.2)
    assert ramp_coefficients(cfg, 400) == (0.4, 0.2)
    short = TrainConfig(eta_max=1.0, gamma_max=1.0, ramp_epochs=4)
    assert ramp_coefficients(short, 1) == (0.25, 0.25)
    assert ramp_coefficients(TrainConfig(ramp_epochs=0), 0) == (0.1, 0.01)


def _toy_one_view():
    C = np.array([[0.3, -0.2], [0.8, 0.5]])
    zu = np.array([[0.4, -0.1]])
    zi = np.array([[-0.3, 0.2]])
    cfg = ModelConfig(d=2, v=1, t_init=3, use_biases=False)
    bank = CenterBank([C])
    return MfdmcModel(cfg, bank, bank, [zu], [zi])


def test_gradient_hand_chain_rule():
    model = _toy_one_view()
    C = model.banks["user"].views[0].copy()
    wu = np.exp([0.4, -0.1]) / np.exp([0.4, -0.1]).sum()
    wi = np.exp([-0.3, 0.2]) / np.exp([-0.3, 0.2]).sum()
    p, q = wu @ C, wi @ C
    r = 2.0
    e = p @ q - r
    # dL/dC_k = 2e (wu_k q + wi_k p); dL/dz = w * (a - w.a), a_k = 2e C_k . (other latent)
    g_c = 2 * e * (np.outer(wu, q) + np.outer(wi, p))
    a_u = 2 * e * (C @ q)
    a_i = 2 * e * (C @ p)
    g_zu = wu * (a_u - wu @ a_u)
    g_zi = wi * (a_i - wi @ a_i)
    grads, _ = compute_gradients(model, Ratings([0], [0], [r]), 0.0, 0.0, 0.0, 1.0)
    np.testing.assert_allclose(grads["centers.shared.0"], g_c, rtol=1e-12)
    np.testing.assert_allclose(grads["logits.user.0"][0], g_zu, rtol=1e-12)
    np.testing.assert_allclose(grads["logits.item.0"][0], g_zi, rtol=1e-12)


def test_zero_error_zero_gradient():
    model = _toy_one_view()
    r = float(model.predict(0, 0))
    grads, br = compute_gradients(model, Ratings([0], [0], [r]), 0.0, 0.0, 0.0, 1.0)
    assert br.loss3 == 0.0
    assert all(not g.any() for g in grads.values())


def test_absent_entities_get_zero_logit_gradient():
    rng = np.random.default_rng(0)
    model = random_model(rng, m=6, n=6)
    grads, _ = compute_gradients(model, Ratings([0, 2], [1, 1], [3.0, 4.0]), 0.5, 0.5, 0.5, 1.0)
    for j in range(model.config.v):
        assert not grads[f"logits.user.{j}"][[1, 3, 4, 5]].any()
        assert not grads[f"logits.item.{j}"][[0, 2, 3, 4, 5]].any()
    assert not grads["bias.user"][[1, 3, 4, 5]].any()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_gradient_raises():
    model = _toy_one_view()
    with pytest.raises(TrainingError, match="centers|logits"):
        compute_gradients(model, Ratings([0], [0], [np.inf]), 0.0, 0.0, 0.0, 1.0)


@pytest.mark.parametrize("kind", ["mapped-entropy", "uniform-offset"])
@pytest.mark.parametrize("seed", range(6))
def test_gradient_matches_finite_differences(seed, kind):
    rng = np.random.default_rng(50 + seed)
    model = random_model(rng, v=1 + seed % 3, t=3 + seed % 2, share=seed % 2 == 0,
                         biases=seed != 3, spread_counts=seed == 5)
    batch = random_batch(rng)
    co = dict(eta=0.8, gamma=0.5, lam=0.3, rho=0.6, weight_loss=kind)
    errs = gradient_check(model, batch, lambda m, b: compute_gradients(m, b, **co)[0],
                          lambda m, b: total_loss(m, b, **co).total)
    assert max(errs.values()) < 1e-4, errs


def test_breakdown_from_gradients_matches_losses():
    rng = np.random.default_rng(8)
    model, batch = random_model(rng, v=3, t=4, share=False), random_batch(rng)
    _, br = compute_gradients(model, batch, 0.3, 0.2, 0.1, 0.9)
    ref = total_loss(model, batch, 0.3, 0.2, 0.1, 0.9)
    for field in ("loss1", "loss2", "loss3", "weight_decay", "total"):
        assert getattr(br, field) == pytest.approx(getattr(ref, field), abs=1e-12)


def test_sgd_step():
    theta = {"x": np.array([0.0])}
    SGD(0.1).step(theta, {"x": np.array([1.0])})
    assert theta["x"][0] == pytest.approx(-0.1)
    SGD(0.1).step(theta, {"x": np.array([0.0])})
    assert theta["x"][0] == pytest.approx(-0.1)


def test_adam_first_step_magnitude():
    theta = {"x": np.array([0.0, 5.0])}
    opt = Adam(lr=0.01)
    opt.step(theta, {"x": np.array([1.0, 0.0])})
    assert theta["x"][0] == pytest.approx(-0.01, rel=1e-6)
    assert theta["x"][1] == 5.0


def test_adam_state_persists():
    theta = {"x": np.array([0.0])}
    opt = Adam(lr=0.1)
    opt.step(theta, {"x": np.array([1.0])})
    opt.step(theta, {"x": np.array([0.0])})
    # momentum carries the second step although the gradient is zero
    assert theta["x"][0] < -0.1
    assert opt.t == 2


def _pruning_model(rows_by_view, m=4, n=3, share=False):
    """Every user (and item) gets the same weight row in each view."""
    v = len(rows_by_view)
    t = len(rows_by_view[0])
    cfg = ModelConfig(d=2 * v, v=v, t_init=t, share_centers=share, use_biases=False)
    rng = np.random.default_rng(0)

    def bank():
        return CenterBank([rng.random((t, 2)) for _ in range(v)])

    ub = bank()
    ib = ub if share else bank()
    ul = [np.tile(np.log(np.asarray(w)), (m, 1)) for w in rows_by_view]
    il = [np.tile(np.log(np.asarray(w)), (n, 1)) for w in rows_by_view]
    return MfdmcModel(cfg, ub, ib, ul, il)


def test_prune_removes_exactly_below_threshold():
    row = np.r_[0.05, np.full(9, 0.95 / 9)]
    model = _pruning_model([row, np.full(10, 0.1)])
    events = prune_centers(model, TrainConfig(I_p=40), epoch=41)
    assert model.banks["user"].counts() == [9, 10]
    assert model.banks["user"].alive[0].tolist() == list(range(1, 10))
    assert model.logits["user"][0].shape == (4, 9)
    user_events = [e for e in events if e.side == "user"]
    assert len(user_events) == 1 and user_events[0].removed == [0]
    assert user_events[0].mean_weights[0] == pytest.approx(0.05)


def test_prune_noop_during_warmup():
    row = np.r_[0.05, np.full(9, 0.95 / 9)]
    model = _pruning_model([row])
    for epoch in range(41):
        assert prune_centers(model, TrainConfig(I_p=40), epoch) == []
    assert model.banks["user"].counts() == [10]


def test_prune_cadence():
    row = np.r_[0.05, np.full(9, 0.95 / 9)]
    cfg = TrainConfig(I_p=10, prune_every=3)
    model = _pruning_model([row])
    assert prune_centers(model, cfg, 12) == []
    assert prune_centers(model, cfg, 13) != []


def test_prune_floor_keeps_top_three():
    row = np.array([0.02, 0.15, 0.03, 0.2, 0.05, 0.1, 0.25, 0.04, 0.06, 0.1])
    model = _pruning_model([row])
    prune_centers(model, TrainConfig(psi_mode="fixed", psi=0.5), epoch=41)
    assert model.banks["user"].alive[0].tolist() == [1, 3, 6]
    assert model.banks["item"].alive[0].tolist() == [1, 3, 6]


def test_prune_floor_ties_go_to_lower_index():
    row = np.array([0.1, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1])
    model = _pruning_model([row / row.sum()])
    prune_centers(model, TrainConfig(psi_mode="fixed", psi=0.9), epoch=41)
    assert model.banks["user"].alive[0].tolist() == [1, 2, 3]


def test_prune_shared_bank_uses_pooled_mean():
    rows = np.r_[0.05, np.full(9, 0.95 / 9)]
    model = _pruning_model([rows], share=True)
    events = prune_centers(model, TrainConfig(), epoch=41)
    assert [e.side for e in events] == ["shared"]
    assert model.banks["item"].counts() == [9]
    assert model.logits["item"][0].shape[1] == 9 and model.logits["user"][0].shape[1] == 9


def test_prune_preserves_latent_when_removed_weight_zero():
    rng = np.random.default_rng(1)
    model = random_model(rng, m=4, n=4, v=1, t=5, share=False, biases=False)
    model.logits["user"][0][:, 4] = -1e6
    before = model.compose("user")
    prune_centers(model, TrainConfig(psi_mode="fixed", psi=1e-12, min_centers=3), epoch=41)
    assert model.banks["user"].counts() == [4]
    np.testing.assert_array_equal(model.compose("user"), before)


@pytest.mark.parametrize("seed", range(5))
def test_prune_never_violates_floor(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, m=30, n=30, v=3, t=8, share=seed % 2 == 0)
    for z in model.logits["user"] + model.logits["item"]:
        z *= 5
    cfg = TrainConfig(I_p=0, psi_mode="fixed", psi=0.3)
    for epoch in range(1, 10):
        for ev in prune_centers(model, cfg, epoch):
            assert all(w < ev.psi for w in ev.mean_weights)
        assert min(model.banks["user"].counts() + model.banks["item"].counts()) >= 3


def test_adam_state_follows_pruning():
    row = np.r_[0.05, np.full(9, 0.95 / 9)]
    model = _pruning_model([row])
    opt = Adam(0.01)
    batch = Ratings([0, 1], [0, 2], [3.0, 4.0])
    grads, _ = compute_gradients(model, batch, 0.1, 0.1, 0.1, 1.0)
    opt.step(model.parameters(), grads)
    prune_centers(model, TrainConfig(), 41, opt)
    assert opt.m["logits.user.0"].shape == model.logits["user"][0].shape
    assert opt.m["centers.user.0"].shape == model.banks["user"].views[0].shape
    grads, _ = compute_gradients(model, batch, 0.1, 0.1, 0.1, 1.0)
    opt.step(model.parameters(), grads)


def _toy_split(seed=0, m=6, n=5):
    rng = np.random.default_rng(seed)
    u, i = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    r = np.clip(np.round(3 + rng.normal(size=m)[:, None] + rng.normal(size=n)[None, :]), 1, 5)
    tri = Ratings(u.ravel(), i.ravel(), r.ravel())
    meta = DatasetMeta(m=m, n=n, N=len(tri), range_min=1, range_max=5,
                       global_mean=float(tri.ratings.mean()))
    return DatasetSplit(tri, tri, tri, 0, meta), meta


def test_fit_deterministic():
    split, meta = _toy_split()
    cfg = TrainConfig(epochs=12, batch_size=7, I_p=4, seed=3, early_stop_patience=None,
                      psi_mode="fixed", psi=0.15)
    traces = []
    for _ in range(2):
        model = init_model(ModelConfig(d=4, v=2, t_init=5), meta, seed=3)
        rep = fit(model, split, cfg)
        traces.append([(r.val_rmse, r.total, tuple(r.alive["user"])) for r in rep.records])
    assert traces[0] == traces[1]
    assert len(traces[0]) == 12


def test_fit_returns_best_model():
    split, meta = _toy_split(1)
    model = init_model(ModelConfig(d=4, v=2, t_init=4), meta, seed=0)
    rep = fit(model, split, TrainConfig(epochs=15, batch_size=8, learning_rate=0.05))
    from mfdmc.evaluation import evaluate
    assert evaluate(rep.model, split.validation).rmse == rep.best_val_rmse
    assert rep.best_val_rmse == min(rep.val_trace())


class _Worsening:
    """Stub whose predictions drift further from the truth on every epoch."""

    range_min, range_max = 1.0, 5.0

    def __init__(self):
        self.offset = 0.0

    def predict_many(self, users, items):
        return np.full(len(users), 3.0 + self.offset)

    def clone(self):
        return self


class _Br:
    loss1 = loss2 = loss3 = total = eta = gamma = 0.0


def test_early_stop_patience_one():
    split, _ = _toy_split()
    stub = _Worsening()

    def step(batch, epoch_index):
        return _Br()

    def worsen(epoch):
        stub.offset += 0.5

    rep = run_epochs(stub, split, TrainConfig(epochs=50, early_stop_patience=1), step, worsen)
    assert len(rep.records) == 2 and rep.stopped_early and rep.best_epoch == 1


def test_memorize_toy():
    rng = np.random.default_rng(5)
    u, i = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    tri = Ratings(u.ravel(), i.ravel(), rng.integers(1, 6, 16).astype(float))
    meta = DatasetMeta(m=4, n=4, N=16, range_min=1, range_max=5,
                       global_mean=float(tri.ratings.mean()))
    split = DatasetSplit(tri, tri, tri, 0, meta)
    model = init_model(ModelConfig(d=4, v=2, t_init=4), meta, seed=0)
    cfg = TrainConfig(epochs=2000, batch_size=16, learning_rate=0.03, eta_max=0, gamma_max=0,
                      lam=0.0, I_p=10**6, early_stop_patience=None, clamp=False)
    rep = fit(model, split, cfg)
    assert rep.records[-1].loss3 < 1e-3


def test_epoch_log(tmp_path):
    split, meta = _toy_split()
    model = init_model(ModelConfig(d=4, v=2, t_init=3), meta, seed=0)
    rep = fit(model, split, TrainConfig(epochs=3, batch_size=10))
    path = tmp_path / "log.tsv"
    write_epoch_log(rep, path)
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["epoch", "loss1", "loss2", "loss3", "total", "eta", "gamma",
                                    "alive_user_0", "alive_user_1", "alive_item_0",
                                    "alive_item_1", "val_rmse"]
    assert len(lines) == 4
    assert math.isclose(float(lines[-1].split("\t")[-1]), rep.records[-1].val_rmse)
