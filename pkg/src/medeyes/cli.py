"""Command line entry point: ``medeyes buffer build | train | ablate | score | plots``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from medeyes import grammar, harness
from medeyes.core import Source
from medeyes.env import dump_episodes, generate_episode, seed_of
from medeyes.harness import ConfigError, ExperimentConfig
from medeyes.policy import load_checkpoint
from medeyes.rewards import breakdowns_to_csv, composite_reward


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"0,2,5-7"`` -> (0, 2, 5, 6, 7)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (int(x) for x in part.split("-", 1))
            if hi < lo:
                raise argparse.ArgumentTypeError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return tuple(seeds)


def _config(args) -> ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else ExperimentConfig()
    run = cfg.run
    if args.seed is not None:
        run = replace(run, seeds=args.seed)
    if args.out is not None:
        run = replace(run, out_dir=str(args.out))
    return replace(cfg, run=run)


def cmd_buffer_build(args) -> int:
    cfg = _config(args)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    comps = harness.components(cfg)
    for seed in cfg.run.seeds:
        episodes = harness.train_episodes(cfg, seed)
        source = harness.build_offpolicy_source(replace(cfg, run=replace(cfg.run, buffer_path=None)),
                                                episodes, seed, comps.vocab)
        if source is None or not hasattr(source, "to_jsonl"):
            raise ConfigError("the configured buffer source has no prebuilt buffer "
                              f"(disable_offpolicy={cfg.ablation.disable_offpolicy}, "
                              f"buffer_source={cfg.ablation.buffer_source})")
        source.to_jsonl(out / f"buffer_seed{seed}.jsonl")
        dump_episodes(episodes, out / f"episodes_seed{seed}.jsonl")
        print(f"seed {seed}: {len(source)} trajectories for {len(episodes)} episodes -> {out / f'buffer_seed{seed}.jsonl'}")
    return 0


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.3f}"


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = harness.run_training(cfg, args.variant)
    for seed, path in manifest.summary_files.items():
        summary = json.loads(Path(path).read_text(encoding="utf-8"))
        print(f"seed {seed}: held-out success {_fmt(summary['held_out_success'])}, "
              f"smoothed reward {_fmt(summary['initial_smoothed_reward'])} -> {_fmt(summary['final_smoothed_reward'])}")
    print(f"manifest: {Path(manifest.out_dir) / 'manifest.json'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = None
    if args.variants:
        matrix = harness.ablation_matrix()
        names = [v.strip() for v in args.variants.split(",") if v.strip()]
        unknown = [n for n in names if n not in matrix]
        if unknown:
            raise ConfigError(f"unknown variant(s) {unknown}; choose from {sorted(matrix)}")
        variants = {n: matrix[n] for n in names}
    rows = harness.run_ablation_suite(cfg, variants)
    print(harness.format_suite(rows))
    print(f"table: {Path(cfg.run.out_dir) / 'ablation.csv'}")
    return 0


def cmd_score(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        comps = harness.components(cfg)
        params = load_checkpoint(args.checkpoint, comps.vocab)
        seed = cfg.run.seeds[0]
        success = harness.evaluate(params, harness.eval_episodes(cfg), comps, cfg.grpo.t_max, seed)
        print(f"held-out success {success:.3f} on {cfg.run.n_eval} episodes")
        return 0
    if not args.input:
        raise ConfigError("score needs --input <dialogs.jsonl> or --checkpoint <file>")
    rows = []
    with open(args.input, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ep = generate_episode(seed_of(rec["episode_ref"]), cfg.generator)
            traj = grammar.parse(rec["dialog"], source=Source(rec.get("source", "off")), episode_ref=rec["episode_ref"])
            rows.append((rec["episode_ref"], composite_reward(traj, ep.query, rec["dialog"],
                                                              cfg.reward.weights, cfg.reward.diversity)))
    text = breakdowns_to_csv(rows)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scores.csv").write_text(text, encoding="utf-8")
    mean = np.mean([b.composite for _, b in rows]) if rows else float("nan")
    print(f"{len(rows)} dialogs, mean composite {mean:.4f} -> {out / 'scores.csv'}")
    return 0


def cmd_plots(args) -> int:
    cfg = _config(args)
    runs = Path(args.runs) if args.runs else Path(cfg.run.out_dir)
    paths = harness.emit_plots_data(harness.find_manifests(runs), cfg.run.out_dir)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults built in)")
    common.add_argument("--seed", type=parse_seeds, help="seed list, e.g. 0,1,2 or 0-4")
    common.add_argument("--out", help="output directory (overrides run.out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="medeyes", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    buf = sub.add_parser("buffer", help="replay buffer tools")
    bsub = buf.add_subparsers(dest="action", required=True)
    b = bsub.add_parser("build", parents=[common], help="build the off-policy buffer for each seed")
    b.set_defaults(func=cmd_buffer_build)

    t = sub.add_parser("train", parents=[common], help="GRPO training for each seed")
    t.add_argument("--variant", default="full", help="name of the run directory")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", parents=[common], help="run the ablation suite")
    a.add_argument("--variants", help="comma-separated subset, e.g. full,no_offpolicy,full+random")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("score", parents=[common], help="score dialogs or evaluate a checkpoint")
    s.add_argument("--input", help="JSONL with episode_ref and dialog fields")
    s.add_argument("--checkpoint", help="policy checkpoint to evaluate on the held-out set")
    s.set_defaults(func=cmd_score)

    pl = sub.add_parser("plots", parents=[common], help="tidy CSVs for reward and length curves")
    pl.add_argument("--runs", help="directory holding <variant>/manifest.json (default: --out)")
    pl.set_defaults(func=cmd_plots)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"medeyes: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
