"""Online evaluation in the toy environment."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import plots
from .errors import ConfigError, ContractError, OilcaError
from .numkit import substream
from .toyenv import EnvSpec, TransitionNet, rollout_batch


@dataclass
class EvalReport:
    method: str
    seed_returns: dict
    n_episodes: int
    episode_len: int
    config_hash: str
    per_seed_stderr: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.seed_returns.values())))

    @property
    def stderr(self) -> float:
        values = np.array(list(self.seed_returns.values()), dtype=float)
        if len(values) < 2:
            raise ContractError("a cross-seed standard error needs at least two seeds")
        return float(values.std(ddof=1) / math.sqrt(len(values)))


def evaluate_policy(policy, spec: EnvSpec, net: TransitionNet, n_episodes: int, rng, horizon=None):
    """Mean episode return over ``n_episodes`` rollouts; classes cycle ``i mod C``.

    ``policy(states, rng) -> actions``.  Returns ``(mean, per_episode_returns)``.
    """
    if n_episodes < 1:
        raise ContractError("n_episodes must be at least 1")
    classes = np.arange(n_episodes) % spec.n_classes
    episodes = rollout_batch(spec, net, policy, classes, rng, horizon=horizon)
    returns = np.array([e.ret for e in episodes])
    return float(returns.mean()), returns


def stderr(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return float("nan")
    return float(values.std(ddof=1) / math.sqrt(len(values)))


# -- report files ------------------------------------------------------------

REPORT_HEADER = ("method", "seed", "mean_return", "stderr", "n_episodes", "config_hash")
SWEEP_HEADER = ("ratio_pct", "mean_return", "stderr", "n_seeds")
SCATTER_HEADER = ("source", "class", "dim1", "dim2")
CURVE_HEADER = ("step", "loss", "component")
PLOT_HEADER = ("x", "y", "yerr", "series")
MCC_HEADER = ("seed", "model", "mcc")


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_rows(reports) -> list[tuple]:
    rows = []
    for rep in reports:
        for seed, value in rep.seed_returns.items():
            rows.append((rep.method, seed, value, rep.per_seed_stderr.get(seed, float("nan")),
                         rep.n_episodes, rep.config_hash))
    return rows


# -- experiments ---------------------------------------------------------------

@dataclass
class DisentangleResult:
    rows: list
    scatter: list

    def mcc(self, model) -> dict:
        return {seed: value for seed, name, value in self.rows if name == model}


def experiment_disentangle(cfg, seeds=None, out_dir=None, scatter_points=200, log=None) -> DisentangleResult:
    """Conditional CVAE against its no-label ablation, MCC against logged ground truth."""
    from . import pipeline
    from .datagen import stack_records
    from .ivae import mcc

    if not cfg["datagen"]["log_latent"]:
        raise ConfigError("the disentanglement experiment needs datagen.log_latent = true")
    seeds = tuple(cfg["eval"]["seeds"] if seeds is None else seeds)
    spec, net = pipeline.build_env(cfg)
    rows, scatter = [], []
    for k, seed in enumerate(seeds):
        art = pipeline.prepare_seed(cfg, seed, spec, net)
        rec = stack_records(art.episodes)
        u_true = pipeline.latent_matrix(art.episodes)
        ablation, _ = pipeline.train_vae(cfg, seed, rec, spec.n_classes, conditional=False)
        estimates = {
            "true": u_true,
            "conditional": art.model.encode(rec["s"], rec["a"], rec["s_next"], rec["c"])[0],
            "no-label": ablation.encode(rec["s"], rec["a"], rec["s_next"], rec["c"])[0],
        }
        for name, est in estimates.items():
            rows.append((seed, name, mcc(u_true, est)))
        if log is not None:
            log(f"seed {seed}: " + " ".join(f"{n}={v:.3f}" for s, n, v in rows if s == seed))
        if k == 0:
            pick = substream(seed, "eval", 1)
            for c in range(spec.n_classes):
                idx = np.flatnonzero(rec["c"] == c)
                idx = np.sort(pick.choice(idx, size=min(scatter_points, len(idx)), replace=False))
                for name, est in estimates.items():
                    scatter.extend((name, c, est[i, 0], est[i, 1]) for i in idx)
    result = DisentangleResult(rows, scatter)
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "disentangle.csv", MCC_HEADER, rows)
        write_csv(out / "scatter.csv", SCATTER_HEADER, scatter)
        plots.latent_scatter(scatter, out / "scatter.png")
    return result


def _summary_plot(out, stem, labels, means, errs, series):
    write_csv(out / f"{stem}_plot.csv", PLOT_HEADER,
              [(x, m, e, series if isinstance(series, str) else series[i])
               for i, (x, m, e) in enumerate(zip(labels, means, errs))])


def experiment_compare(cfg, seeds=None, out_dir=None, methods=None, log=None) -> list[EvalReport]:
    """BC-exp, BC-all, DWBC and OILCA on identical data and seeds."""
    from . import pipeline

    seeds = tuple(cfg["eval"]["seeds"] if seeds is None else seeds)
    methods = tuple(pipeline.ALGOS if methods is None else methods)
    spec, net = pipeline.build_env(cfg)
    chash = cfg.config_hash()
    returns = {m: {} for m in methods}
    errs = {m: {} for m in methods}
    curves = {}
    for seed in seeds:
        art = pipeline.prepare_seed(cfg, seed, spec, net)
        augmented = None
        if "oilca" in methods:
            augmented = pipeline.run_augment(cfg, seed, art.split, art.model, art.sampler, spec)
        for method in methods:
            try:
                policy, rows = pipeline.train_policy(cfg, seed, method, art.split, augmented)
                mean, per_ep = pipeline.evaluate(cfg, seed, policy, spec, net)
            except OilcaError as exc:
                raise type(exc)(f"{method} (seed {seed}): {exc}") from exc
            returns[method][seed] = mean
            errs[method][seed] = stderr(per_ep)
            curves[(method, seed)] = rows
            if log is not None:
                log(f"seed {seed} {method}: {mean:.2f}")
    n_ep = cfg["eval"]["n_episodes"]
    reports = [EvalReport(m, returns[m], n_ep, spec.episode_len, chash, errs[m]) for m in methods]
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "report.csv", REPORT_HEADER, report_rows(reports))
        means = [r.mean for r in reports]
        ses = [r.stderr if len(seeds) > 1 else float("nan") for r in reports]
        _summary_plot(out, "compare", list(methods), means, ses, list(methods))
        plots.method_bars(list(methods), means, np.nan_to_num(ses), out / "compare.png")
        for (method, seed), rows in curves.items():
            write_csv(out / "curves" / f"{method}_seed{seed}.csv", CURVE_HEADER, rows)
        first = seeds[0]
        for method in methods:
            if curves[(method, first)]:
                plots.loss_curves(curves[(method, first)], out / "curves" / f"{method}_seed{first}.png")
    return reports


@dataclass
class SweepRow:
    ratio_pct: int
    mean_return: float
    stderr: float
    n_seeds: int
    per_seed: dict


def experiment_ratio_sweep(cfg, seeds=None, ratios=None, out_dir=None, log=None) -> list[SweepRow]:
    """OILCA trained after augmenting D_E up to each requested |D_E| / |D_U| percentage."""
    from . import pipeline

    seeds = tuple(cfg["eval"]["seeds"] if seeds is None else seeds)
    ratios = tuple(cfg["eval"]["sweep_ratios"] if ratios is None else ratios)
    spec, net = pipeline.build_env(cfg)
    per = {r: {} for r in ratios}
    for seed in seeds:
        art = pipeline.prepare_seed(cfg, seed, spec, net)
        for pct in ratios:
            augmented = pipeline.run_augment(cfg, seed, art.split, art.model, art.sampler, spec, ratio=pct / 100.0)
            policy, _ = pipeline.train_policy(cfg, seed, "oilca", art.split, augmented)
            per[pct][seed] = pipeline.evaluate(cfg, seed, policy, spec, net)[0]
            if log is not None:
                log(f"seed {seed} ratio {pct}%: {per[pct][seed]:.2f}")
    rows = []
    for pct in ratios:
        values = list(per[pct].values())
        rows.append(SweepRow(pct, float(np.mean(values)), stderr(values), len(values), per[pct]))
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "sweep.csv", SWEEP_HEADER,
                  [(r.ratio_pct, r.mean_return, r.stderr, r.n_seeds) for r in rows])
        _summary_plot(out, "sweep", [r.ratio_pct for r in rows], [r.mean_return for r in rows],
                      [r.stderr for r in rows], "oilca")
        plots.ratio_curve([r.ratio_pct for r in rows], [r.mean_return for r in rows],
                          np.nan_to_num([r.stderr for r in rows]), out / "sweep.png")
    return rows
