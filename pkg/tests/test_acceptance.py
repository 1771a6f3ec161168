"""End-to-end acceptance checks at the default configuration.

Each test records one PASS/FAIL line, echoed in the terminal summary.  The
three experiments share one process-wide cache of data, CVAE and sampler per
seed, so the slow upstream work runs once.  Expect about 20 minutes on one core.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oilca import cli, datagen, pipeline
from oilca.agents import Discriminator, Policy, bc_loss, disc_loss, dwbc_weights, log_prob_graph, policy_loss
from oilca.config import default_config
from oilca.evaluate import experiment_compare, experiment_disentangle, experiment_ratio_sweep
from oilca.ivae import CvaeModel, elbo
from oilca.numkit import kl_diag_gaussians, substream
from oilca.numkit import tensor as T

from . import test_agents, test_ivae
from .conftest import check_gradients

TINY = Path(__file__).parent / "data" / "tiny.cfg"
SEEDS = (0, 1, 2, 3, 4)


def verdict(log, name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    log.append(line)
    print(line)
    return ok


def combined_se(a, b):
    return math.sqrt(a**2 + b**2)


def spearman(x, y):
    """Rank correlation with average ranks for ties."""
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for value in np.unique(v):
            tie = v == value
            r[tie] = r[tie].mean()
        return r

    return float(np.corrcoef(ranks(x), ranks(y))[0, 1])


@pytest.fixture(scope="module")
def cfg():
    pipeline.clear_cache()
    return default_config()


@pytest.fixture(scope="module")
def disentangle(cfg, tmp_path_factory):
    t0 = time.perf_counter()
    res = experiment_disentangle(cfg, seeds=SEEDS, out_dir=tmp_path_factory.mktemp("disentangle"))
    return res, (time.perf_counter() - t0) / len(SEEDS)


@pytest.fixture(scope="module")
def compare(cfg, disentangle, tmp_path_factory):
    t0 = time.perf_counter()
    reports = experiment_compare(cfg, seeds=SEEDS, out_dir=tmp_path_factory.mktemp("compare"))
    return {r.method: r for r in reports}, time.perf_counter() - t0


@pytest.fixture(scope="module")
def sweep(cfg, compare, tmp_path_factory):
    rows = experiment_ratio_sweep(cfg, seeds=SEEDS, out_dir=tmp_path_factory.mktemp("sweep"))
    return {r.ratio_pct: r for r in rows}


def test_disentanglement(disentangle, acceptance_log):
    res, per_seed = disentangle
    cond, plain = res.mcc("conditional"), res.mcc("no-label")
    margins = {s: cond[s] - plain[s] for s in SEEDS}
    ok = (all(cond[s] >= 0.80 for s in SEEDS) and all(m >= 0.15 for m in margins.values())
          and per_seed < 600)
    detail = (" ".join(f"s{s}:{cond[s]:.3f}/{plain[s]:.3f}" for s in SEEDS)
              + f" min margin {min(margins.values()):.3f}, {per_seed / 60:.1f} min/seed")
    assert verdict(acceptance_log, "disentanglement (conditional/no-label MCC)", ok, detail)


def test_method_ordering(compare, acceptance_log):
    reps, wall = compare
    oilca = reps["oilca"]
    gaps = {}
    for other in ("dwbc", "bc-all", "bc-exp"):
        r = reps[other]
        gaps[other] = (oilca.mean - r.mean, combined_se(oilca.stderr, r.stderr))
    ok = all(g > se for g, se in gaps.values()) and wall < 1800
    detail = (" ".join(f"{m}={r.mean:.2f}+-{r.stderr:.2f}" for m, r in reps.items())
              + " | " + " ".join(f"gap vs {m} {g:.2f} (se {se:.2f})" for m, (g, se) in gaps.items())
              + f" | grid {wall / 60:.1f} min")
    assert verdict(acceptance_log, "method ordering (OILCA first, gaps > 1 SE)", ok, detail)


def test_ratio_trend(sweep, acceptance_log):
    pcts = [10, 30, 50, 70, 90, 100]
    rho = spearman(pcts, [sweep[p].mean_return for p in pcts])
    hi, top = sweep[200], sweep[100]
    plateau = abs(hi.mean_return - top.mean_return) <= 2 * combined_se(hi.stderr, top.stderr)
    ok = rho >= 0.8 and plateau
    detail = (" ".join(f"{p}%={sweep[p].mean_return:.2f}" for p in [*pcts, 200])
              + f" | spearman {rho:.3f} | 200% vs 100% diff {hi.mean_return - top.mean_return:.2f}"
              + f" (2 se {2 * combined_se(hi.stderr, top.stderr):.2f})")
    assert verdict(acceptance_log, "ratio trend (Spearman >= 0.8, plateau at 200%)", ok, detail)


def test_loss_formula_oracles(acceptance_log):
    pol, disc = Policy(hidden=(4,)), Discriminator(hidden=(4,))
    rng = np.random.default_rng(0)
    half = disc_loss(disc, pol, test_agents._pairs(9, rng), test_agents._pairs(13, rng), eta=0.5).item()
    w_e, w_u = dwbc_weights([0.5], [0.5], eta=0.5, alpha=7.5)
    pol, disc = test_agents._fitted(seed=3)
    e, u = test_agents._fixed_batches()
    d_err = abs(disc_loss(disc, pol, e, u, 0.5).item() - test_agents._scalar_disc_loss(disc, pol, e, u, 0.5))
    p_err = abs(policy_loss(pol, disc, e, u, 0.5, 2.0).item()
                - test_agents._scalar_policy_loss(pol, disc, e, u, 0.5, 2.0))
    ok = abs(half - math.log(2)) <= 1e-10 and w_e[0] == 7.5 - 2 and w_u[0] == 2.0 and max(d_err, p_err) <= 1e-10
    detail = (f"d=0.5 loss-log2 {half - math.log(2):.1e}, weights ({w_e[0]}, {w_u[0]}) at alpha 7.5, "
              f"trace errors {d_err:.1e}/{p_err:.1e}")
    assert verdict(acceptance_log, "loss-formula oracles", ok, detail)


def test_numerical_hygiene(acceptance_log):
    worst = 0.0
    for point in range(10):
        pol, disc = test_agents._fitted(hidden=(4,), seed=100 + point)
        rng = np.random.default_rng(point)
        e, u = test_agents._pairs(5, rng), test_agents._pairs(5, rng)
        worst = max(worst, check_gradients(lambda: disc_loss(disc, pol, e, u, 0.5), disc.parameters()))
        worst = max(worst, check_gradients(lambda: bc_loss(pol, e), pol.parameters()))
        worst = max(worst, check_gradients(lambda: T.total(log_prob_graph(pol, e["s"], e["a"])), pol.parameters()))
        disc.net.layers[0][0].value[4, :] = 0.0  # d is a constant of the policy objective
        worst = max(worst, check_gradients(lambda: policy_loss(pol, disc, e, u, 0.5, 7.5), pol.parameters()))
        m = CvaeModel(3, hidden=(4,), rng=substream(point, "vae"))
        b = test_ivae._batch(6, rng)
        m.fit_normalizer(b["s"], b["a"], b["s_next"], b["c"])
        worst = max(worst, check_gradients(lambda: m.elbo_graph(b, np.random.default_rng(9))[0], m.parameters()))

    # analytic KL against a one-million-sample Monte-Carlo estimate
    rng = np.random.default_rng(11)
    mq, lq, mp, lp = (rng.normal(0, 0.7, (1, 3)) for _ in range(4))
    kl = kl_diag_gaussians(mq, lq, mp, lp).item()
    z = mq + np.exp(0.5 * lq) * rng.standard_normal((10**6, 3))

    def logpdf(x, m, lv):
        return (-0.5 * ((x - m) ** 2 / np.exp(lv) + lv + math.log(2 * math.pi))).sum(axis=1)

    samples = logpdf(z, mq, lq) - logpdf(z, mp, lp)
    kl_se = samples.std() / math.sqrt(len(samples))
    kl_ok = abs(samples.mean() - kl) < 3 * kl_se

    # ELBO against the closed-form evidence of a linear-Gaussian model
    data = test_ivae._linear_gaussian_data(2000, 0)
    model = CvaeModel(1, d_u=1, state_dim=1, action_dim=1, hidden=(), activation="identity", residual=False,
                      rng=substream(0, "vae"))
    from oilca.ivae import train_cvae
    train_cvae(model, data, epochs=400, batch_size=2000, lr=2e-2, rng=substream(0, "vae", 10))
    train_cvae(model, data, epochs=200, batch_size=2000, lr=2e-3, rng=substream(0, "vae", 11))
    evidence = test_ivae._exact_log_evidence(model, data)
    draws = np.array([elbo(model, data, rng).total for _ in range(200)])
    est, se = draws.mean(), draws.std() / math.sqrt(len(draws))
    gap_ok = est <= evidence + 3 * se and evidence - est < 0.05

    ok = worst < 1e-4 and kl_ok and gap_ok
    detail = (f"worst FD rel err {worst:.1e}; KL {kl:.4f} vs MC {samples.mean():.4f} (3se {3 * kl_se:.4f}); "
              f"evidence-ELBO gap {evidence - est:.4f}")
    assert verdict(acceptance_log, "numerical hygiene", ok, detail)


def test_pipeline_determinism(tmp_path, acceptance_log):
    reports = []
    for name in ("first", "second"):
        assert cli.main(["-q", "--config", str(TINY), "--workdir", str(tmp_path / name), "run-all"]) == 0
        reports.append((tmp_path / name / "reports" / "report.csv").read_bytes())
    ok = reports[0] == reports[1]
    assert verdict(acceptance_log, "pipeline determinism (run-all twice)", ok,
                   f"report.csv {len(reports[0])} bytes, identical={ok}")


def test_split_semantics(cfg, acceptance_log):
    spec, net = pipeline.build_env(cfg)
    eps = datagen.collect(spec, net, datagen.DEFAULT_MIXTURE, 1000, substream(0, "datagen"))
    split = datagen.label_split(eps, 0.2, 0.1, substream(0, "datagen", 1))
    ids_e = {e.episode_id for e in split.expert}
    ids_u = {e.episode_id for e in split.unlabeled}
    partition = not (ids_e & ids_u) and (ids_e | ids_u) == set(range(3000))
    gap = np.mean([e.ret for e in split.expert]) - np.mean([e.ret for e in split.unlabeled])
    sigma = math.sqrt(600 * 0.1 * 0.9)
    count_ok = abs(len(ids_e) - 60) <= 3 * sigma
    ok = len(eps) == 3000 and partition and gap > 0 and count_ok
    detail = f"|D_E|={len(ids_e)} (60 +- {3 * sigma:.1f}), |D_U|={len(ids_u)}, return gap {gap:.2f}"
    assert verdict(acceptance_log, "split semantics (3000 episodes)", ok, detail)
