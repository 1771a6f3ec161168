import math
from pathlib import Path

import numpy as np
import pytest

from oilca import pipeline
from oilca.config import load_config
from oilca.datagen import greedy_actions, random_actions
from oilca.errors import ConfigError, ContractError
from oilca.evaluate import (
    REPORT_HEADER,
    SCATTER_HEADER,
    SWEEP_HEADER,
    EvalReport,
    evaluate_policy,
    experiment_compare,
    experiment_disentangle,
    experiment_ratio_sweep,
    read_csv,
    stderr,
    write_csv,
)
from oilca.numkit import substream
from oilca.toyenv import TransitionNet, make_env_spec, rollout

TINY = Path(__file__).parent / "data" / "tiny.cfg"


@pytest.fixture(scope="module")
def env():
    spec = make_env_spec(0)
    return spec, TransitionNet(spec)


def test_greedy_beats_uniform_random(env):
    spec, net = env
    greedy, _ = evaluate_policy(lambda s, r: greedy_actions(spec, s), spec, net, 1000, substream(0, "eval"))
    rand, _ = evaluate_policy(lambda s, r: random_actions(spec, len(s), r), spec, net, 1000, substream(0, "eval"))
    assert greedy > rand


def test_single_episode_and_determinism(env):
    spec, net = env

    def policy(s, r):
        return greedy_actions(spec, s)

    mean, per_ep = evaluate_policy(policy, spec, net, 1, substream(3, "eval"))
    assert per_ep.shape == (1,) and mean == per_ep[0]
    # one episode of class 0 from the same stream is the same rollout
    ep = rollout(spec, net, policy, 0, substream(3, "eval"))
    assert mean == pytest.approx(ep.ret, abs=1e-9)
    again, _ = evaluate_policy(policy, spec, net, 1, substream(3, "eval"))
    assert again == mean
    with pytest.raises(ContractError):
        evaluate_policy(policy, spec, net, 0, substream(3, "eval"))


def test_stderr_helpers():
    assert stderr([1.0, 3.0]) == pytest.approx(1.0)
    assert math.isnan(stderr([2.0]))
    rep = EvalReport("bc-exp", {0: 1.0, 1: 3.0, 2: 5.0}, 10, 500, "abc")
    assert rep.mean == 3.0 and rep.stderr == pytest.approx(2.0 / math.sqrt(3))
    with pytest.raises(ContractError):
        EvalReport("bc-exp", {0: 1.0}, 10, 500, "abc").stderr


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "x.csv", REPORT_HEADER, [("oilca", 0, 0.1, float("nan"), 6, "h")])
    text = path.read_text()
    assert text.splitlines()[0] == "method,seed,mean_return,stderr,n_episodes,config_hash"
    assert read_csv(path)[0]["mean_return"] == "0.1"


@pytest.fixture(scope="module")
def tiny():
    return load_config(TINY)


@pytest.fixture(scope="module")
def compare_run(tiny, tmp_path_factory):
    out = tmp_path_factory.mktemp("compare")
    return experiment_compare(tiny, seeds=(0, 1), out_dir=out), out


def test_compare_outputs(compare_run, tiny):
    reports, out = compare_run
    assert [r.method for r in reports] == list(pipeline.ALGOS)
    rows = read_csv(out / "report.csv")
    assert list(rows[0]) == list(REPORT_HEADER)
    assert len(rows) == 4 * 2
    assert {r["config_hash"] for r in rows} == {tiny.config_hash()}
    assert all(np.isfinite(float(r["mean_return"])) for r in rows)
    assert (out / "compare.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    plot = read_csv(out / "compare_plot.csv")
    assert [p["series"] for p in plot] == list(pipeline.ALGOS)
    assert (out / "curves" / "oilca_seed1.csv").exists()


def test_compare_is_reproducible(compare_run, tiny, tmp_path):
    _, out = compare_run
    pipeline.clear_cache()
    experiment_compare(tiny, seeds=(0, 1), out_dir=tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == (out / "report.csv").read_bytes()


def test_oilca_and_dwbc_differ_only_by_augmentation(tiny):
    """With augmentation switched off, the OILCA path is the DWBC path."""
    spec, net = pipeline.build_env(tiny)
    art = pipeline.prepare_seed(tiny, 0, spec, net)
    no_aug = pipeline.run_augment(tiny, 0, art.split, art.model, art.sampler, spec, ratio=0.0)
    assert len(no_aug.augmented) == 0
    p_oilca, _ = pipeline.train_policy(tiny, 0, "oilca", art.split, no_aug)
    p_dwbc, _ = pipeline.train_policy(tiny, 0, "dwbc", art.split)
    for a, b in zip(p_oilca.parameters().values(), p_dwbc.parameters().values()):
        np.testing.assert_array_equal(a.value, b.value)


def test_disentangle_outputs(tiny, tmp_path):
    res = experiment_disentangle(tiny, seeds=(0,), out_dir=tmp_path, scatter_points=20)
    assert res.mcc("true") == {0: pytest.approx(1.0, abs=1e-12)}
    assert set(res.mcc("conditional")) == {0}
    rows = read_csv(tmp_path / "scatter.csv")
    assert list(rows[0]) == list(SCATTER_HEADER)
    assert len(rows) == 3 * 3 * 20
    assert (tmp_path / "scatter.png").exists()
    with pytest.raises(ConfigError):
        experiment_disentangle(tiny.replace(datagen__log_latent=False), seeds=(0,))


def test_sweep_outputs(tiny, tmp_path):
    rows = experiment_ratio_sweep(tiny, seeds=(0, 1), ratios=(10, 50), out_dir=tmp_path)
    assert [r.ratio_pct for r in rows] == [10, 50]
    assert all(r.n_seeds == 2 for r in rows)
    csv_rows = read_csv(tmp_path / "sweep.csv")
    assert list(csv_rows[0]) == list(SWEEP_HEADER)
    assert [int(r["ratio_pct"]) for r in csv_rows] == [10, 50]
    assert (tmp_path / "sweep.png").exists()
