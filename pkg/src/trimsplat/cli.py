"""Command-line entry point: ``trimsplat <subcommand> [--config FILE] [flags]``.

Every subcommand accepts ``--config`` pointing at a JSON object whose keys
match the long flag names (dashes or underscores); flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as data_mod
from .masking import DEFAULT_TAU
from .pipeline import (MODES, RunConfig, build_denoiser, diversity_experiment, measure_throughput,
                       resolve_prompts, run, save_prompts, scaling_experiment, write_csv)
from .render import standard_cameras
from .selector import VARIANTS, SelectorArch, SelectorModel, TrainConfig, pairwise_accuracy, train
from .synth import generate_prompts

log = logging.getLogger("trimsplat")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with default values for any flag")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=28)
    p.add_argument("--t", type=int, help="reduction step (default steps // 2)")
    p.add_argument("--denoiser-seed", type=int, default=0)
    p.add_argument("--prompt-count", type=int, default=1)
    p.add_argument("--prompt-seed", type=int, default=0)
    p.add_argument("--prompts-path", type=str)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate prompts and scored trajectories")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--per-prompt", type=int, default=16)
    p.add_argument("--t-capture", type=int)
    p.add_argument("--out", type=Path, default=Path("triplets.trim"))

    p = sub.add_parser("build-pairs", help="balanced train/test latent pairs from a dataset")
    _add_common(p)
    p.add_argument("--dataset", type=Path, default=Path("triplets.trim"))
    p.add_argument("--split-ratio", type=float, default=0.7)
    p.add_argument("--quota", type=int, default=200)
    p.add_argument("--bin-width", type=float, default=data_mod.BIN_WIDTH)
    p.add_argument("--n-bins", type=int, default=data_mod.N_BINS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("pairs.trim"))

    p = sub.add_parser("train-selector", help="train a pairwise selector")
    _add_common(p)
    p.add_argument("--pairs", type=Path, default=Path("pairs.trim"))
    p.add_argument("--arch", choices=sorted(VARIANTS), default="Conv1-FC2")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("selector.trim"))

    p = sub.add_parser("eval-selector", help="held-out pairwise accuracy per gap bin")
    _add_common(p)
    p.add_argument("--pairs", type=Path, default=Path("pairs.trim"))
    p.add_argument("--selector", type=Path, default=Path("selector.trim"))
    p.add_argument("--out", type=Path, help="CSV report path")

    p = sub.add_parser("infer", help="one generation in a chosen mode")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--mode", choices=MODES, default="baseline")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--mask-start", type=float, default=0.5)
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--first-seed", type=int, default=1)
    p.add_argument("--prompt-index", type=int, default=0)
    p.add_argument("--selector-path", type=str)
    p.add_argument("--no-correct", dest="correct", action="store_false", default=True)
    p.add_argument("--out-dir", type=str, default="run")

    p = sub.add_parser("bench", help="masked vs plain denoising throughput")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", type=Path, default=Path("bench.csv"))

    p = sub.add_parser("scaling", help="score vs trajectory count or step count")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--axis", choices=("trajectories", "steps"), default="trajectories")
    p.add_argument("--grid", type=int, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--selector-path", type=str, help="omit to use the oracle comparator")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("scaling.csv"))

    p = sub.add_parser("diversity", help="repeated generations with and without reduction")
    _add_common(p)
    _add_run_flags(p)
    p.add_argument("--repeats", type=int, default=8)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--selector-path", type=str, required=False)
    p.add_argument("--out", type=Path, default=Path("diversity.csv"))
    parser.commands = sub.choices
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, filling in defaults from ``--config`` for flags not given explicitly."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    file_vals = json.loads(args.config.read_text())
    if not isinstance(file_vals, dict):
        raise SystemExit(f"{args.config}: expected a JSON object")
    # re-parse with file values installed as defaults so explicit flags still win
    subparser = parser.commands[args.command]
    known = {a.dest for a in subparser._actions}
    defaults = {}
    for key, val in file_vals.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise SystemExit(f"{args.config}: unknown key {key!r} for {args.command}")
        defaults[dest] = val
    subparser.set_defaults(**defaults)
    args = parser.parse_args(argv)
    for dest in ("out", "dataset", "pairs", "selector"):
        if isinstance(getattr(args, dest, None), str):
            setattr(args, dest, Path(getattr(args, dest)))
    return args


def cmd_synth_data(args) -> None:
    prompts = (resolve_prompts(RunConfig(prompts_path=args.prompts_path)) if args.prompts_path
               else generate_prompts(args.prompt_count, args.prompt_seed))
    den = build_denoiser(args.steps, args.denoiser_seed)
    ds = data_mod.synthesize(prompts, args.per_prompt, den, t_capture=args.t_capture)
    data_mod.save_dataset(ds, args.out)
    save_prompts(prompts, args.out.with_suffix(".prompts.json"))
    print(f"wrote {args.out}: {ds.n_prompts} prompts x {ds.per_prompt} trajectories, "
          f"mean score {ds.scores.mean():.4f}")


def cmd_build_pairs(args) -> None:
    ds = data_mod.load_dataset(args.dataset)
    pairs = data_mod.build_pairs(ds, args.split_ratio, args.quota, args.seed, args.bin_width, args.n_bins)
    data_mod.save_pairs(pairs, args.out)
    print(f"wrote {args.out}: {len(pairs.train)} train / {len(pairs.test)} test pairs")
    if pairs.shortfall:
        print(f"under-filled bins (bin: missing): {pairs.shortfall}")


def cmd_train_selector(args) -> None:
    pairs = data_mod.load_pairs(args.pairs)
    arch = SelectorArch.named(args.arch, hidden=args.hidden)
    cfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                      epochs=args.epochs, seed=args.seed)
    model = train(SelectorModel(arch, args.seed), pairs, cfg)
    model.save(args.out)
    rep = pairwise_accuracy(model, pairs)
    print(f"wrote {args.out}: {arch.name} final loss {model.loss_history[-1]:.4f}, held-out accuracy {rep.overall:.4f}")


def cmd_eval_selector(args) -> None:
    pairs = data_mod.load_pairs(args.pairs)
    model = SelectorModel.load(args.selector)
    rep = pairwise_accuracy(model, pairs)
    rows = [{"bin": b, "accuracy": f"{acc:.6f}", "count": n} for b, (acc, n) in sorted(rep.per_bin.items())]
    rows.append({"bin": "all", "accuracy": f"{rep.overall:.6f}", "count": rep.count})
    for r in rows:
        print(f"bin {r['bin']:>3}: accuracy {r['accuracy']} over {r['count']} pairs")
    if args.out:
        write_csv(args.out, rows, f"arch={model.arch.name}; bin_width={pairs.bin_width}")


def _run_config(args) -> RunConfig:
    return RunConfig(mode=args.mode, n=args.n, steps=args.steps, t=args.t, tau=args.tau,
                     mask_start=args.mask_start, widths=args.widths, first_seed=args.first_seed,
                     prompt_index=args.prompt_index, prompt_count=args.prompt_count,
                     prompt_seed=args.prompt_seed, prompts_path=args.prompts_path,
                     selector_path=args.selector_path, denoiser_seed=args.denoiser_seed,
                     correct=args.correct, out_dir=args.out_dir)


def cmd_infer(args) -> None:
    cfg = _run_config(args)
    res = run(cfg)
    c = res.cost
    print(f"{cfg.mode}: score {res.score:.4f} (winner {res.winner}, seed {res.seed}); "
          f"{c.denoiser_calls} denoiser calls, {c.decode_calls} decode, {c.render_calls} render, "
          f"{c.flops:.3e} MACs, {c.steps_per_second:.1f} steps/s -> {cfg.out_dir}")


def cmd_bench(args) -> None:
    prompts = resolve_prompts(RunConfig(prompt_count=args.prompt_count, prompt_seed=args.prompt_seed,
                                        prompts_path=args.prompts_path))
    den = build_denoiser(args.steps, args.denoiser_seed)
    rows = []
    for p in prompts:
        rep = measure_throughput(p, den, args.seed, args.tau, args.repeats)
        rows.append({"prompt": p.prompt_id, "steps": rep.steps, "mean_tokens": f"{rep.mean_tokens:.2f}",
                     "full_tokens": rep.full_tokens, "plain_steps_per_s": f"{rep.unmasked_steps_per_s:.2f}",
                     "masked_steps_per_s": f"{rep.masked_steps_per_s:.2f}", "speedup": f"{rep.speedup:.3f}"})
        print(f"prompt {p.prompt_id}: {rep.mean_tokens:.1f}/{rep.full_tokens} tokens, "
              f"{rep.unmasked_steps_per_s:.1f} -> {rep.masked_steps_per_s:.1f} steps/s ({rep.speedup:.2f}x)")
    write_csv(args.out, rows, "wall-clock, machine dependent")


def _selector_or_none(path):
    return SelectorModel.load(path) if path else None


def cmd_scaling(args) -> None:
    prompts = resolve_prompts(RunConfig(prompt_count=args.prompt_count, prompt_seed=args.prompt_seed,
                                        prompts_path=args.prompts_path))
    rows = scaling_experiment(args.axis, args.grid, prompts, args.steps, args.t,
                              _selector_or_none(args.selector_path), args.denoiser_seed, standard_cameras(),
                              args.workers)
    for r in rows:
        print(f"{r['axis']}={r['value']}: {r['total_steps']} steps, score {r['score_mean']:.4f} +- {r['score_std']:.4f}")
    write_csv(args.out, [{**r, "score_mean": f"{r['score_mean']:.6f}", "score_std": f"{r['score_std']:.6f}"}
                         for r in rows])


def cmd_diversity(args) -> None:
    prompts = resolve_prompts(RunConfig(prompt_count=args.prompt_count, prompt_seed=args.prompt_seed,
                                        prompts_path=args.prompts_path))
    sel = _selector_or_none(args.selector_path)
    den = build_denoiser(args.steps, args.denoiser_seed)
    rows = []
    for p in prompts:
        reps = diversity_experiment(p, args.repeats, sel, args.n, args.steps, args.t, den)
        for label, rep in zip(("plain", "reduced"), reps):
            if rep is None:
                continue
            rows.append({"prompt": p.prompt_id, "run": label, "repeats": rep.repeats,
                         "score_mean": f"{rep.score_mean:.6f}", "score_std": f"{rep.score_std:.6f}",
                         "chamfer_avg": f"{rep.chamfer_avg:.6f}", "chamfer_min": f"{rep.chamfer_min:.6f}",
                         "chamfer_max": f"{rep.chamfer_max:.6f}"})
            print(f"prompt {p.prompt_id} {label}: score {rep.score_mean:.4f} +- {rep.score_std:.4f}, "
                  f"chamfer {rep.chamfer_avg:.3f} [{rep.chamfer_min:.3f}, {rep.chamfer_max:.3f}]")
    write_csv(args.out, rows, "chamfer = sum of squared nearest-neighbour distances, both directions, not normalized")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "build-pairs": cmd_build_pairs,
    "train-selector": cmd_train_selector,
    "eval-selector": cmd_eval_selector,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "scaling": cmd_scaling,
    "diversity": cmd_diversity,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
