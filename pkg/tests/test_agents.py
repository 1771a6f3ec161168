import math

import numpy as np
import pytest

from oilca.agents import (
    Discriminator,
    DwbcConfig,
    Policy,
    bc_loss,
    disc_loss,
    dwbc_weights,
    log_prob,
    log_prob_graph,
    policy_loss,
    train_bc,
    train_dwbc,
)
from oilca.errors import ConfigError, ContractError
from oilca.numkit import backward, substream
from oilca.numkit import tensor as T

from .conftest import check_gradients

LOG_2PI = math.log(2 * math.pi)


def _pairs(n, rng):
    return {"s": rng.uniform(-5, 5, (n, 2)), "a": rng.uniform(-1, 1, (n, 2))}


def _fitted(hidden=(5,), seed=0):
    rng = substream(seed, "agent")
    pol, disc = Policy(hidden=hidden, rng=rng), Discriminator(hidden=hidden, rng=rng)
    states = np.random.default_rng(seed).uniform(-5, 5, (50, 2))
    pol.fit_normalizer(states)
    disc.fit_normalizer(states)
    pol.log_std.value = np.array([[-0.3, 0.2]])
    return pol, disc


# -- log-density ------------------------------------------------------------

def test_log_prob_at_mean_with_unit_std():
    pol = Policy(hidden=(3,))
    assert log_prob(pol, [[1.0, 2.0]], [[0.0, 0.0]])[0] == pytest.approx(-LOG_2PI, abs=1e-12)
    assert -LOG_2PI == pytest.approx(-1.837877, abs=1e-6)
    assert log_prob_graph(pol, [[1.0, 2.0]], [[0.0, 0.0]]).item() == pytest.approx(-LOG_2PI, abs=1e-12)


def test_log_prob_falls_off_with_distance():
    pol, _ = _fitted()
    s = np.zeros((1, 2))
    mean = pol.mean_action(s)
    vals = [log_prob(pol, s, mean + r * np.array([[0.6, 0.8]]))[0] for r in (0.0, 0.5, 1.0, 2.0)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_log_std_is_clamped():
    pol = Policy(hidden=())
    pol.log_std.value = np.array([[-9.0, 4.0]])
    np.testing.assert_array_equal(pol.log_std_graph().value, [[-5.0, 2.0]])


# -- discriminator objective ------------------------------------------------

def test_disc_loss_at_constant_half_is_log_two():
    pol, disc = Policy(hidden=(4,)), Discriminator(hidden=(4,))  # zero weights: d == 0.5 everywhere
    rng = np.random.default_rng(0)
    loss = disc_loss(disc, pol, _pairs(9, rng), _pairs(13, rng), eta=0.5).item()
    assert abs(loss - math.log(2)) <= 1e-10


def test_disc_loss_without_class_prior_keeps_unlabeled_term():
    pol, disc = _fitted()
    rng = np.random.default_rng(1)
    e, u = _pairs(6, rng), _pairs(7, rng)
    d_u = disc.prob(u["s"], u["a"], log_prob(pol, u["s"], u["a"]))[:, 0]
    want = float(np.mean(-np.log(1 - d_u)))
    assert disc_loss(disc, pol, e, u, eta=0.0).item() == pytest.approx(want, abs=1e-12)


def test_disc_loss_rejects_empty_batch():
    pol, disc = _fitted()
    rng = np.random.default_rng(2)
    with pytest.raises(ContractError):
        disc_loss(disc, pol, {"s": np.zeros((0, 2)), "a": np.zeros((0, 2))}, _pairs(3, rng), 0.5)


def _scalar_net(layers, x, hidden_act):
    for k, (w, b) in enumerate(layers):
        W, B = w.value, b.value
        z = [sum(x[i] * W[i, j] for i in range(len(x))) + B[0, j] for j in range(W.shape[1])]
        x = z if k == len(layers) - 1 else [hidden_act(v) for v in z]
    return x


def _scalar_log_prob(pol, s, a):
    x = [(s[i] - pol.s_loc[0, i]) / pol.s_scale[0, i] for i in range(2)]
    mean = _scalar_net(pol.net.layers, x, math.tanh)
    total = 0.0
    for i in range(2):
        ls = min(max(pol.log_std.value[0, i], -5.0), 2.0)
        total += -0.5 * (((a[i] - mean[i]) / math.exp(ls)) ** 2 + 2 * ls + LOG_2PI)
    return total


def _scalar_d(disc, s, a, logp):
    x = [(s[i] - disc.s_loc[0, i]) / disc.s_scale[0, i] for i in range(2)] + list(a) + [logp]
    logit = _scalar_net(disc.net.layers, x, math.tanh)[0]
    return min(max(1.0 / (1.0 + math.exp(-logit)), disc.d_min), disc.d_max)


def _fixed_batches():
    e = {"s": np.array([[1.0, -2.0], [0.5, 3.0]]), "a": np.array([[1.0, 0.0], [0.0, -1.0]])}
    u = {"s": np.array([[-4.0, 0.2], [2.5, 2.5]]), "a": np.array([[-1.0, 0.0], [0.3, 0.9]])}
    return e, u


def _scalar_disc_loss(disc, pol, e, u, eta):
    d_e = [_scalar_d(disc, s, a, _scalar_log_prob(pol, s, a)) for s, a in zip(e["s"], e["a"])]
    d_u = [_scalar_d(disc, s, a, _scalar_log_prob(pol, s, a)) for s, a in zip(u["s"], u["a"])]
    return (eta * sum(-math.log(d) for d in d_e) / len(d_e) + sum(-math.log(1 - d) for d in d_u) / len(d_u)
            - eta * sum(-math.log(1 - d) for d in d_e) / len(d_e))


def _scalar_policy_loss(pol, disc, e, u, eta, alpha):
    out = 0.0
    for batch, expert in ((e, True), (u, False)):
        acc = 0.0
        for s, a in zip(batch["s"], batch["a"]):
            lp = _scalar_log_prob(pol, s, a)
            d = _scalar_d(disc, s, a, lp)
            w = alpha - eta / (d * (1 - d)) if expert else 1 / (1 - d)
            acc += -lp * w
        out += acc / len(batch["s"])
    return out


def test_disc_loss_matches_scalar_trace():
    pol, disc = _fitted(seed=3)
    e, u = _fixed_batches()
    got = disc_loss(disc, pol, e, u, 0.5).item()
    assert abs(got - _scalar_disc_loss(disc, pol, e, u, 0.5)) <= 1e-10
    # frozen from the scalar trace (hidden 5, substream(3, "agent"))
    assert abs(got - 0.8405579921304518) <= 1e-10


def test_policy_loss_matches_scalar_trace():
    pol, disc = _fitted(seed=3)
    e, u = _fixed_batches()
    got = policy_loss(pol, disc, e, u, 0.5, 2.0).item()
    assert abs(got - _scalar_policy_loss(pol, disc, e, u, 0.5, 2.0)) <= 1e-10
    # frozen from the scalar trace (hidden 5, substream(3, "agent"))
    assert abs(got - 1.571936681303245) <= 1e-10


# -- policy objective -------------------------------------------------------

def test_weights_at_half():
    w_e, w_u = dwbc_weights([0.5], [0.5], eta=0.5, alpha=3.7)
    assert w_e[0] == 3.7 - 2 and w_u[0] == 2.0
    w_e, w_u = dwbc_weights([0.5], [0.5], eta=0.5, alpha=2.0)
    assert w_e[0] == 0.0 and w_u[0] == 2.0


def test_weights_stay_bounded_under_clipping():
    d = np.linspace(0.1, 0.9, 81)
    w_e, w_u = dwbc_weights(d, d, eta=0.5, alpha=2.0)
    assert np.isfinite(w_e).all() and np.isfinite(w_u).all()
    assert (2.0 - w_e).max() <= 0.5 / 0.09 + 1e-12
    assert w_u.max() <= 10.0 + 1e-12
    with pytest.raises(AssertionError):
        dwbc_weights([1.0], [0.5], 0.5, 2.0)


def test_policy_loss_zero_when_every_log_density_is_zero():
    pol, disc = Policy(hidden=(3,)), Discriminator(hidden=(3,))
    pol.log_std.value = np.full((1, 2), -0.5 * LOG_2PI)
    zeros = {"s": np.random.default_rng(0).normal(size=(5, 2)), "a": np.zeros((5, 2))}
    assert np.allclose(log_prob(pol, zeros["s"], zeros["a"]), 0.0, atol=1e-15)
    assert policy_loss(pol, disc, zeros, zeros, 0.5, 3.0).item() == pytest.approx(0.0, abs=1e-14)


def test_gradient_isolation():
    pol, disc = _fitted(seed=4)
    rng = np.random.default_rng(4)
    e, u = _pairs(8, rng), _pairs(8, rng)
    for p in (*pol.parameters().values(), *disc.parameters().values()):
        p.grad = None
    backward(disc_loss(disc, pol, e, u, 0.5))
    assert all(p.grad is None or not p.grad.any() for p in pol.parameters().values())
    assert any(p.grad is not None and p.grad.any() for p in disc.parameters().values())
    for p in (*pol.parameters().values(), *disc.parameters().values()):
        p.grad = None
    backward(policy_loss(pol, disc, e, u, 0.5, 2.0))
    assert all(p.grad is None or not p.grad.any() for p in disc.parameters().values())
    assert any(p.grad is not None and p.grad.any() for p in pol.parameters().values())


@pytest.mark.parametrize("point", range(10))
def test_loss_gradients_match_finite_differences(point):
    pol, disc = _fitted(hidden=(4,), seed=100 + point)
    rng = np.random.default_rng(point)
    e, u = _pairs(5, rng), _pairs(5, rng)
    check_gradients(lambda: disc_loss(disc, pol, e, u, 0.5), disc.parameters())
    check_gradients(lambda: bc_loss(pol, e), pol.parameters())
    check_gradients(lambda: T.total(log_prob_graph(pol, e["s"], e["a"])), pol.parameters())
    # d enters the policy objective as a constant; cut its dependence on log pi so
    # finite differences see the same function
    disc.net.layers[0][0].value[4, :] = 0.0
    check_gradients(lambda: policy_loss(pol, disc, e, u, 0.5, 7.5), pol.parameters())


# -- training loops ---------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        DwbcConfig(alpha=1.0)
    with pytest.raises(ConfigError):
        DwbcConfig(eta=0.0)
    with pytest.raises(ConfigError):
        DwbcConfig(d_min=0.6, d_max=0.5)
    with pytest.raises(ConfigError):
        DwbcConfig(disc_update_period=0)


def test_update_schedule_counts():
    rng = np.random.default_rng(0)
    cfg = DwbcConfig(total_steps=1000, disc_update_period=100, batch_size=4, hidden=(3,))
    pol, _, curves = train_dwbc(_pairs(30, rng), _pairs(30, rng), cfg, substream(0, "agent", 3))
    assert pol.update_counts == {"disc": 10, "policy": 1000}
    assert sum(1 for r in curves if r[2] == "disc") == 10
    assert [r[0] for r in curves if r[2] == "disc"] == list(range(0, 1000, 100))


def test_dwbc_is_deterministic():
    rng = np.random.default_rng(1)
    e, u = _pairs(40, rng), _pairs(40, rng)
    cfg = DwbcConfig(total_steps=60, disc_update_period=10, batch_size=8, hidden=(4,), alpha=7.5)
    p1, d1, c1 = train_dwbc(e, u, cfg, substream(5, "agent", 3))
    p2, d2, c2 = train_dwbc(e, u, cfg, substream(5, "agent", 3))
    assert c1 == c2
    for a, b in zip(p1.parameters().values(), p2.parameters().values()):
        np.testing.assert_array_equal(a.value, b.value)


def _linear_expert(n, rng, slope=2.0):
    s = rng.uniform(-1, 1, (n, 2))
    return {"s": s, "a": slope * s}


def test_bc_recovers_linear_expert():
    rng = np.random.default_rng(2)
    data = _linear_expert(1000, rng)
    pol = train_bc(data, 150, substream(0, "agent", 1), batch_size=100, lr=1e-2, hidden=(32,))
    held = rng.uniform(-1, 1, (200, 2))
    err = np.abs(pol.mean_action(held) - 2 * held).max()
    assert err < 0.05
    smooth = np.convolve(pol.bc_curve, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < smooth[0]


def test_bc_all_suffers_from_wrong_unlabeled_data():
    rng = np.random.default_rng(3)
    expert = _linear_expert(300, rng)
    wrong = _linear_expert(2700, rng, slope=-2.0)
    both = {k: np.concatenate([expert[k], wrong[k]]) for k in ("s", "a")}
    held = _linear_expert(500, rng)
    bc_exp = train_bc(expert, 40, substream(0, "agent", 1), batch_size=64, lr=1e-2, hidden=(16,))
    bc_all = train_bc(both, 40, substream(0, "agent", 2), batch_size=64, lr=1e-2, hidden=(16,),
                      steps_per_epoch=5)
    nll_exp = -log_prob(bc_exp, held["s"], held["a"]).mean()
    nll_all = -log_prob(bc_all, held["s"], held["a"]).mean()
    assert nll_all > nll_exp


def test_bc_is_deterministic_and_checkpoints(tmp_path):
    rng = np.random.default_rng(4)
    data = _linear_expert(100, rng)
    a = train_bc(data, 3, substream(1, "agent", 1), batch_size=32, hidden=(4,))
    b = train_bc(data, 3, substream(1, "agent", 1), batch_size=32, hidden=(4,))
    assert a.bc_curve == b.bc_curve
    a.save(tmp_path / "p.ckpt", seed=1)
    back, header = Policy.load(tmp_path / "p.ckpt")
    np.testing.assert_array_equal(back.mean_action(data["s"]), a.mean_action(data["s"]))
    with pytest.raises(ContractError):
        train_bc({"s": np.zeros((0, 2)), "a": np.zeros((0, 2))}, 1, rng)


def test_discriminator_checkpoint_and_range(tmp_path):
    _, disc = _fitted(seed=6)
    disc.save(tmp_path / "d.ckpt")
    back, _ = Discriminator.load(tmp_path / "d.ckpt")
    rng = np.random.default_rng(5)
    b = _pairs(50, rng)
    lp = rng.normal(0, 30, 50)
    np.testing.assert_array_equal(back.prob(b["s"], b["a"], lp), disc.prob(b["s"], b["a"], lp))
    disc.net.layers[-1][1].value[:] = 50.0
    assert (disc.prob(b["s"], b["a"], lp) == 0.9).all()
