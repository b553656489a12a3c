"""Command-line entry point.

Exit codes: 0 success (or "proceed"), 2 usage or I/O error, 3 uncertainty halt.
Any other failure (training divergence, a degenerate ensemble) exits with 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablations, checkpoint, experiments
from .config import RunConfig
from .diffusion import TrainingDiverged
from .engine import SPACES, EMoE
from .experiments import csv_text, dump_json, write_text
from .synthetic import parse
from .text import Prompt
from .training import train_base, finetune_experts

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_HALT = 0, 1, 2, 3
VARIANTS = ("distinct", "similar")
GP_SIZES = (2, 4, 8, 16, 32, 64, 128, 256)

log = logging.getLogger("emoe")


class UsageError(Exception):
    pass


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and every subcommand so flags work in either position
    sup = None if defaults else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=sup, help="JSON run configuration (defaults apply to missing fields)")
    p.add_argument("--seed", type=int, default=sup, help="root seed (overrides the config)")
    p.add_argument("--out-dir", default=sup, help="report directory (overrides the config)")
    p.add_argument("--checkpoint-dir", default=sup, help="checkpoint directory (overrides the config)")
    p.add_argument("--threads", type=int, default=sup, help="worker threads for per-prompt scoring")
    p.add_argument("--set", action="append", default=sup, metavar="KEY=VALUE",
                   help="override any config field (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=sup)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emoe", parents=[_global_options(True)],
                                     description="Epistemic uncertainty from a mixture of diffusion experts.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_options(False)]

    p = sub.add_parser("train", parents=common, help="train the backbone and expert bundles")
    p.add_argument("--variant", choices=VARIANTS + ("both",), default="both")

    for name, text in (("score", "estimate uncertainty for one prompt"),
                       ("generate", "sample a latent for one prompt")):
        p = sub.add_parser(name, parents=common, help=text)
        p.add_argument("prompt")
        p.add_argument("--language-tag", default="en")
        p.add_argument("--negative", default=None, help="negative prompt for gating")
        p.add_argument("--variant", choices=VARIANTS, default="distinct")
        p.add_argument("--output", default=None, help="write the generated latent(s) as .npy")
        if name == "score":
            p.add_argument("--space", choices=SPACES, default=None)
            p.add_argument("--all-spaces", action="store_true", help="print every space from one pass")
            p.add_argument("--fast", action="store_true", help="continue with one aggregate rollout unless halted")
            p.add_argument("--threshold", type=float, default=None, help="halt when reported >= threshold")
        else:
            p.add_argument("--rollout", action="store_true", help="separate and return one latent per expert")

    sub.add_parser("experiment", parents=common, help="score the corpus, write reports and ablations")
    sub.add_parser("ablate", parents=common, help="run only the ablation sweeps")
    p = sub.add_parser("gp-probe", parents=common, help="ensemble convergence probe")
    p.add_argument("--sizes", default=",".join(map(str, GP_SIZES)), help="comma-separated ensemble sizes")
    p.add_argument("--repeats", type=int, default=20, help="number of seeds (seed, seed+1, ...)")
    p.add_argument("--reference", type=int, default=10_000, help="reference ensemble size")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    updates = {}
    for flag, key in (("seed", "seed"), ("out_dir", "out_dir"), ("checkpoint_dir", "checkpoint_dir"),
                      ("threads", "threads")):
        if getattr(args, flag) is not None:
            updates[key] = getattr(args, flag)
    cfg = cfg.replace(**updates) if updates else cfg
    return cfg.with_overrides(args.set) if args.set else cfg


def bundle_dir(cfg: RunConfig, variant: str) -> Path:
    return Path(cfg.checkpoint_dir) / variant


def load_engine(cfg: RunConfig, variant: str = "distinct") -> EMoE:
    bundle = checkpoint.load_bundle(bundle_dir(cfg, variant), cfg.geometry(), cfg.M, cfg.top_n)
    return EMoE(bundle, cfg.schedule())


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig, args) -> int:
    variants = VARIANTS if args.variant == "both" else (args.variant,)
    base = train_base(cfg)
    logs = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
            "backbone": {"epoch_losses": base.log.epoch_losses, "initial_eval": base.log.initial_eval,
                         "final_eval": base.log.final_eval}}
    for variant in variants:
        scale = cfg.expert_init_scale if variant == "distinct" else cfg.similar_init_scale
        tb = finetune_experts(cfg, base, scale)
        paths = checkpoint.save_bundle(tb.bundle, bundle_dir(cfg, variant))
        logs[variant] = [{"epoch_losses": lg.epoch_losses, "initial_eval": lg.initial_eval,
                          "final_eval": lg.final_eval} for lg in tb.expert_logs]
        print(f"{variant}: wrote {len(paths)} checkpoint files to {bundle_dir(cfg, variant)}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "train_log.json", dump_json(logs))
    return EXIT_OK


def _prompt(args) -> Prompt:
    try:
        return Prompt(args.prompt, args.language_tag, args.negative)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_score(cfg: RunConfig, args) -> int:
    engine = load_engine(cfg, args.variant)
    prompt = _prompt(args)
    space = args.space or cfg.space
    latent = None
    if args.all_spaces:
        ests = engine.estimate_all_spaces(prompt, cfg.seed)
        est = ests[space]
    elif args.fast:
        est, latent = engine.fast_emoe(prompt, cfg.seed, args.threshold, space)
        ests = {space: est}
    else:
        est = engine.estimate_uncertainty(prompt, cfg.seed, space)
        ests = {space: est}
    halted = args.threshold is not None and est.reported >= args.threshold
    for s, e in ests.items():
        suffix = "" if s == space else f"[{s}]"
        print(f"eu{suffix}: {_fmt(e.eu)}")
        print(f"reported{suffix}: {_fmt(e.reported)}")
    print(f"space: {space}")
    print(f"d: {est.d_mid}")
    print(f"forward_passes: {engine.forward_calls}")
    print(f"decision: {'halt' if halted else 'proceed'}")
    if latent is not None and args.output:
        np.save(args.output, latent)
        print(f"latent: {args.output}")
    return EXIT_HALT if halted else EXIT_OK


def cmd_generate(cfg: RunConfig, args) -> int:
    engine = load_engine(cfg, args.variant)
    prompt = _prompt(args)
    if args.rollout:
        res = engine.emoe_rollout(prompt, cfg.seed)
        latents = np.stack(res.latents)
        est = res.estimate
    else:
        est, z = engine.fast_emoe(prompt, cfg.seed)
        latents = z[None]
    print(f"reported: {_fmt(est.reported)}")
    try:
        ref = parse(prompt.text)
    except ValueError:
        ref = None
    if ref is not None:
        for i, z in enumerate(latents):
            print(f"alignment[{i}]: {_fmt(experiments.alignment_score(z, Prompt(prompt.text)))}")
    if args.output:
        np.save(args.output, latents if args.rollout else latents[0])
        print(f"latent: {args.output}")
    return EXIT_OK


def _corpus(cfg: RunConfig) -> experiments.Corpus:
    return experiments.make_corpus(cfg.seed, cfg.n_in_dist, cfg.n_ood_remap, cfg.n_ood_unseen, cfg.max_unseen)


def _similar_bundle(cfg: RunConfig):
    d = bundle_dir(cfg, "similar")
    if not (d / checkpoint.BACKBONE_FILE).exists():
        log.warning("no similar-experts bundle in %s; skipping that ablation", d)
        return None
    return checkpoint.load_bundle(d, cfg.geometry(), cfg.M, cfg.top_n)


def cmd_experiment(cfg: RunConfig, args, with_main: bool = True) -> int:
    engine = load_engine(cfg, "distinct")
    similar = _similar_bundle(cfg)
    corpus = _corpus(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", cfg.to_json())
    scores = None
    if with_main:
        scores = experiments.score_corpus(engine, corpus, cfg.seed, cfg.space, threads=cfg.threads)
        report = experiments.build_report(scores, cfg.config_hash(), cfg.seed, cfg.space)
        experiments.write_report(report, scores, out)
        tests = report["tests"]
        for name, res in tests.items():
            if isinstance(res, dict):
                print(f"{name}: p={_fmt(res['p_value'])}")
        scores = [s for s in scores if s.split in ("in_dist", "ood_remap")]
    rep = ablations.run_ablations(engine.bundle, engine.schedule, corpus, cfg.seed, out / "ablations",
                                  cfg.config_hash(), similar=similar, scores=scores,
                                  step_prompts=cfg.step_series_prompts, space=cfg.space)
    print(f"ensemble subsets: {len(rep['ensemble_size']['subsets'])}")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    return cmd_experiment(cfg, args, with_main=False)


def cmd_gp_probe(cfg: RunConfig, args) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    rows = []
    for r in range(args.repeats):
        for row in experiments.gp_convergence_probe(sizes, cfg.seed + r, args.reference):
            rows.append((cfg.seed + r, row.N, row.mean_error, row.var_rel_error))
    med_mean = [float(np.median([r[2] for r in rows if r[1] == n])) for n in sizes]
    med_var = [float(np.median([r[3] for r in rows if r[1] == n])) for n in sizes]
    slope = experiments.loglog_slope(sizes, med_mean) if len(sizes) > 1 else None
    summary = {"sizes": sizes, "repeats": args.repeats, "reference": args.reference,
               "median_mean_error": med_mean, "median_var_rel_error": med_var, "loglog_slope": slope}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "gp_probe.csv", csv_text(["seed", "N", "mean_error", "var_rel_error"], rows))
    write_text(out / "gp_probe.json", dump_json(summary))
    print(f"log-log slope: {slope if slope is None else _fmt(slope)}")
    print(f"variance relative error at N={sizes[-1]}: {_fmt(med_var[-1])}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "score": cmd_score, "generate": cmd_generate, "experiment": cmd_experiment,
            "ablate": cmd_ablate, "gp-probe": cmd_gp_probe}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except (UsageError, FileNotFoundError, checkpoint.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (experiments.DegenerateEnsemble, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
