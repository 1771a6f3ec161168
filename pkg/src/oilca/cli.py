"""Command-line pipeline.

Stages write into a work directory::

    data/       dataset.oilca (+ .latent), augmented.oilca (+ .prov)
    ckpt/       cvae.ckpt, sampler.ckpt, policy-<algo>.ckpt
    reports/    report.csv, curves, experiment outputs, PNG figures
    manifest    one line per stage run

The work directory comes from ``--workdir``, then ``$OILCA_WORKDIR``, then
``paths.workdir`` in the config.  Every random draw derives from the master
seed through :func:`oilca.numkit.substream`, i.e. a Philox generator keyed on
``(master_seed, crc32(stage name), extra...)``.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
from pathlib import Path

from . import datagen, evaluate, pipeline, plots
from .agents import Policy
from .augment import AugmentedExpert
from .config import default_config, load_config
from .errors import OilcaError, PrerequisiteError, StalenessError
from .evaluate import EvalReport, report_rows, stderr, write_csv
from .ivae import CvaeModel

WORKDIR_ENV = "OILCA_WORKDIR"

DATASET = "data/dataset.oilca"
AUGMENTED = "data/augmented.oilca"
CVAE = "ckpt/cvae.ckpt"
SAMPLER = "ckpt/sampler.ckpt"


def policy_path(algo):
    return f"ckpt/policy-{algo}.ckpt"


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, rel) -> Path:
        return self.root / rel

    def ensure(self):
        for sub in ("data", "ckpt", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def need(self, rel, producer) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise PrerequisiteError(f"missing {p}; run `oilca {producer}` first")
        return p

    def record(self, stage, inputs, outputs, started):
        def fmt(paths):
            items = []
            for rel in paths:
                p = self.path(rel)
                items.append(f"{rel}:{file_hash(p)}" if p.exists() else f"{rel}:-")
            return ",".join(items) or "-"

        line = f"stage={stage} inputs={fmt(inputs)} outputs={fmt(outputs)} wall={time.time() - started:.3f}\n"
        with open(self.path("manifest"), "a") as fh:
            fh.write(line)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _say(args, msg):
    if not args.quiet:
        print(msg, flush=True)


# -- stages --------------------------------------------------------------------

def cmd_gen_data(args, cfg, wd):
    t0 = time.time()
    spec, net = pipeline.build_env(cfg)
    episodes, split = pipeline.generate_data(cfg, cfg.master_seed, spec, net)
    split.manifest.update(env_hash=spec.spec_hash(), seeds=str(cfg.master_seed), n_classes=spec.n_classes)
    datagen.save(split, wd.path(DATASET), n_classes=spec.n_classes)
    outputs = [DATASET]
    if cfg["datagen"]["log_latent"]:
        datagen.save_latent(episodes, str(wd.path(DATASET)) + ".latent")
        outputs.append(DATASET + ".latent")
    wd.record("gen-data", [], outputs, t0)
    _say(args, f"gen-data: {len(split.expert)} expert / {len(split.unlabeled)} unlabeled episodes")


def _load_split(wd):
    return datagen.load(wd.need(DATASET, "gen-data"))


def cmd_train_vae(args, cfg, wd):
    t0 = time.time()
    split = _load_split(wd)
    rec = datagen.stack_records(split.all_episodes)
    model, curve = pipeline.train_vae(cfg, cfg.master_seed, rec, int(split.manifest["n_classes"]))
    model.save(wd.path(CVAE), seed=cfg.master_seed, step=len(curve))
    steps = cfg["vae"]["steps_per_epoch"]
    write_csv(wd.path("reports/curve-vae.csv"), evaluate.CURVE_HEADER,
              [((i + 1) * steps, -v, "neg_elbo") for i, v in enumerate(curve)])
    wd.record("train-vae", [DATASET], [CVAE, "reports/curve-vae.csv"], t0)
    _say(args, f"train-vae: final ELBO {curve[-1]:.4f}")


def cmd_train_sampler(args, cfg, wd):
    t0 = time.time()
    split = _load_split(wd)
    sampler = pipeline.train_sampler(cfg, cfg.master_seed, split.expert)
    sampler.save(wd.path(SAMPLER), seed=cfg.master_seed)
    wd.record("train-sampler", [DATASET], [SAMPLER], t0)
    _say(args, "train-sampler: done")


def cmd_augment(args, cfg, wd):
    t0 = time.time()
    split = _load_split(wd)
    wd.need(CVAE, "train-vae")
    wd.need(SAMPLER, "train-sampler")
    _check_fresh(wd, CVAE, "train-vae")
    _check_fresh(wd, SAMPLER, "train-sampler")
    model, _ = CvaeModel.load(wd.path(CVAE))
    sampler, _ = Policy.load(wd.path(SAMPLER))
    spec, _ = pipeline.build_env(cfg)
    aug = pipeline.run_augment(cfg, cfg.master_seed, split, model, sampler, spec)
    out = datagen.SplitDataset(split.expert, split.unlabeled, dict(split.manifest), aug.augmented)
    datagen.save(out, wd.path(AUGMENTED), n_classes=int(split.manifest["n_classes"]))
    wd.record("augment", [DATASET, CVAE, SAMPLER], [AUGMENTED], t0)
    _say(args, f"augment: {len(aug.augmented)} counterfactual records")


def _check_fresh(wd, rel, producer):
    """The file must match the hash recorded when its producing stage last ran."""
    recorded = None
    manifest = wd.path("manifest")
    if manifest.exists():
        for line in manifest.read_text().splitlines():
            if line.startswith(f"stage={producer} "):
                for item in line.split(" outputs=", 1)[1].split(" ", 1)[0].split(","):
                    name, _, digest = item.rpartition(":")
                    if name == rel:
                        recorded = digest
    if recorded is not None and recorded != file_hash(wd.path(rel)):
        raise StalenessError(f"{wd.path(rel)} changed since `oilca {producer}` wrote it; re-run that stage")


def cmd_train_policy(args, cfg, wd):
    t0 = time.time()
    algo = args.algo
    inputs = [DATASET]
    augmented = None
    if algo == "oilca":
        path = wd.need(AUGMENTED, "augment")
        split = datagen.load(path)
        augmented = AugmentedExpert(split.expert, split.augmented or datagen.AugmentedRecords.empty())
        inputs = [AUGMENTED]
    else:
        split = _load_split(wd)
    policy, rows = pipeline.train_policy(cfg, cfg.master_seed, algo, split, augmented)
    policy.save(wd.path(policy_path(algo)), seed=cfg.master_seed)
    curve = f"reports/curve-{algo}.csv"
    write_csv(wd.path(curve), evaluate.CURVE_HEADER, rows)
    if rows:
        plots.loss_curves(rows, wd.path(curve[:-4] + ".png"))
    wd.record(f"train-policy:{algo}", inputs, [policy_path(algo), curve], t0)
    _say(args, f"train-policy {algo}: done")


def cmd_evaluate(args, cfg, wd):
    t0 = time.time()
    algos = [args.algo] if args.algo else [a for a in pipeline.ALGOS if wd.path(policy_path(a)).exists()]
    if not algos:
        raise PrerequisiteError("no trained policy found; run `oilca train-policy` first")
    spec, net = pipeline.build_env(cfg)
    reports = []
    for algo in algos:
        policy, _ = Policy.load(wd.need(policy_path(algo), f"train-policy --algo {algo}"))
        mean, per_ep = pipeline.evaluate(cfg, cfg.master_seed, policy, spec, net)
        reports.append(EvalReport(algo, {cfg.master_seed: mean}, cfg["eval"]["n_episodes"], spec.episode_len,
                                  cfg.config_hash(), {cfg.master_seed: stderr(per_ep)}))
        _say(args, f"evaluate {algo}: mean return {mean:.3f}")
    write_csv(wd.path("reports/report.csv"), evaluate.REPORT_HEADER, report_rows(reports))
    plots.method_bars([r.method for r in reports], [r.mean for r in reports],
                      [r.per_seed_stderr[cfg.master_seed] for r in reports], wd.path("reports/report.png"),
                      title=f"seed {cfg.master_seed}")
    wd.record("evaluate", [policy_path(a) for a in algos], ["reports/report.csv"], t0)
    return reports


def _experiment_seeds(args, cfg):
    return tuple(args.seeds) if args.seeds else None


def cmd_exp_disentangle(args, cfg, wd):
    t0 = time.time()
    out = "reports/disentangle"
    res = evaluate.experiment_disentangle(cfg, seeds=_experiment_seeds(args, cfg), out_dir=wd.path(out),
                                          log=lambda m: _say(args, m))
    wd.record("exp-disentangle", [], [f"{out}/disentangle.csv", f"{out}/scatter.csv"], t0)
    return res


def cmd_exp_compare(args, cfg, wd):
    t0 = time.time()
    out = "reports/compare"
    res = evaluate.experiment_compare(cfg, seeds=_experiment_seeds(args, cfg), out_dir=wd.path(out),
                                      log=lambda m: _say(args, m))
    wd.record("exp-compare", [], [f"{out}/report.csv"], t0)
    return res


def cmd_exp_sweep(args, cfg, wd):
    t0 = time.time()
    out = "reports/sweep"
    res = evaluate.experiment_ratio_sweep(cfg, seeds=_experiment_seeds(args, cfg), out_dir=wd.path(out),
                                          log=lambda m: _say(args, m))
    wd.record("exp-sweep", [], [f"{out}/sweep.csv"], t0)
    return res


def cmd_run_all(args, cfg, wd):
    cmd_gen_data(args, cfg, wd)
    cmd_train_vae(args, cfg, wd)
    cmd_train_sampler(args, cfg, wd)
    cmd_augment(args, cfg, wd)
    args.algo = "oilca"
    cmd_train_policy(args, cfg, wd)
    return cmd_evaluate(args, cfg, wd)


COMMANDS = {
    "gen-data": (cmd_gen_data, "collect episodes and split them into expert / unlabeled sets"),
    "train-vae": (cmd_train_vae, "fit the conditional VAE on all collected transitions"),
    "train-sampler": (cmd_train_sampler, "behavioural cloning of the sampler policy on expert data"),
    "augment": (cmd_augment, "add counterfactual expert records"),
    "train-policy": (cmd_train_policy, "train a policy with the chosen algorithm"),
    "evaluate": (cmd_evaluate, "roll out trained policies and write reports/report.csv"),
    "exp-disentangle": (cmd_exp_disentangle, "MCC of the conditional VAE against its no-label ablation"),
    "exp-compare": (cmd_exp_compare, "BC-exp, BC-all, DWBC and OILCA over the seed set"),
    "exp-sweep": (cmd_exp_sweep, "OILCA return as the augmented expert ratio grows"),
    "run-all": (cmd_run_all, "gen-data, train-vae, train-sampler, augment, train-policy --algo oilca, evaluate"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="oilca", description="Offline imitation learning with counterfactual augmentation on a toy causal MDP.",
        epilog="exit codes: 0 ok, 1 other failure, 2 config error, 3 missing prerequisite, 4 numeric divergence")
    parser.add_argument("--config", help="config file of 'section.key = value' lines (defaults if omitted)")
    parser.add_argument("--workdir", help=f"work directory (overrides ${WORKDIR_ENV} and paths.workdir)")
    parser.add_argument("--seed", type=int, help="override master_seed")
    parser.add_argument("-q", "--quiet", action="store_true", help="print nothing on success")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "train-policy":
            p.add_argument("--algo", required=True, choices=pipeline.ALGOS)
        if name == "evaluate":
            p.add_argument("--algo", choices=pipeline.ALGOS, help="evaluate one policy (default: every trained one)")
        if name.startswith("exp-"):
            p.add_argument("--seeds", type=int, nargs="+", help="seed set (default: eval.seeds)")
    sub.add_parser("show-config", help="print the canonical config and its hash")
    return parser


def resolve(args):
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.replace(master_seed=args.seed)
    root = args.workdir or os.environ.get(WORKDIR_ENV) or cfg["paths"]["workdir"]
    return cfg, Workdir(root)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg, wd = resolve(args)
        if args.command == "show-config":
            sys.stdout.write(cfg.canonical_text())
            print(f"# config_hash {cfg.config_hash()}")
            return 0
        wd.ensure()
        COMMANDS[args.command][0](args, cfg, wd)
    except OilcaError as exc:
        print(f"oilca {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
