#!/usr/bin/env python3
"""co4: latent-query attention with triadic modulation, experiments and reports."""

import argparse
import json
import logging
import sys
from pathlib import Path

from core.errors import Co4Error

logger = logging.getLogger("co4")


def _int_list(text: str):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def cmd_field(args) -> int:
    from core.modulation import ModulationKind, sample_field, write_field_csv

    grid = sample_field(ModulationKind.parse(args.kind), args.rmin, args.rmax,
                        args.cmin, args.cmax, args.steps)
    write_field_csv(grid, args.out)
    return 0


def cmd_macs(args) -> int:
    from core import complexity

    latents = args.latents if args.arch == "co4" else None
    if args.measure:
        report = complexity.measure_layers(args.arch, args.n, args.e, args.layers, args.latents or 8)
    else:
        report = complexity.closed_form_report(args.arch, args.n, args.e, args.layers, latents)
    out = report.to_dict()
    if args.sweep:
        out["sweep"] = {"ns": args.sweep,
                        "slope": complexity.scaling_slope(args.arch, args.sweep, args.e, args.layers,
                                                          args.latents or 8)}
    print(json.dumps(out, indent=2))
    return 0


def cmd_gen_babi(args) -> int:
    from utils import babi

    cfg = babi.StoryConfig(seed=args.seed, max_tokens=args.max_tokens)
    samples, _ = babi.generate_dataset(cfg, args.count)
    babi.write_jsonl(samples, args.out)
    return 0


def cmd_rl(args) -> int:
    from core import pi_rl

    cfg = pi_rl.ESConfig(population=args.pop, generations=args.gens, sigma=args.sigma,
                         episodes=args.episodes, seed=args.seed,
                         encoder=pi_rl.PIEncoderConfig(encoder=args.encoder))
    result = pi_rl.es_train(cfg, progress=not args.quiet)
    pi_rl.write_curve_csv(result.curve, args.out)
    if args.baseline:
        baseline = pi_rl.random_baseline(args.baseline, args.seed, cfg.encoder, cfg.env)
        out = Path(args.out)
        pi_rl.write_baseline_json(out.with_name(f"{out.stem}_baseline.json"), baseline,
                                  args.baseline, args.seed, args.encoder)
        logger.info("final mean %.1f vs random baseline %.1f", result.curve[-1].mean, baseline)
    if args.shuffled_eval:
        mean, std = pi_rl.evaluate(result.best, args.shuffled_eval, args.seed + 1, cfg.encoder,
                                   cfg.env, shuffle=True)
        logger.info("shuffled evaluation over %d episodes: %.1f +/- %.1f", args.shuffled_eval, mean, std)
    return 0


def cmd_train(args) -> int:
    from core.trainer import TrainConfig, train

    cfg = TrainConfig.for_task(
        args.task, preset="smoke" if args.smoke else None, arch=args.arch, heads=args.heads,
        layers=args.layers, latents=args.latents,
        epochs=args.epochs, seed=args.seed, modulation=args.modulation, batch_size=args.batch_size,
        lr=args.lr, schedule=args.schedule, embed_dim=args.embed_dim, samples=args.samples,
        data_dir=args.data_dir, subset=args.subset,
        use_positional=False if args.no_positional else None,
    )
    result = train(cfg, args.out, dry_run=args.dry_run, progress=not args.quiet)
    if result.history:
        last = result.history[-1]
        logger.info("finished: val accuracy %.4f, macro F1 %.4f, train loss %.4f -> %.4f",
                    last.val_accuracy, last.macro_f1, result.initial_train_loss, last.train_loss)
    return 0


def cmd_report(args) -> int:
    from core.latex_generator import LaTeXGenerator
    from core.results_table import ResultsTable
    from utils.run_reader import summarize_runs

    table = ResultsTable.from_runs(summarize_runs(args.runs))
    generator = LaTeXGenerator(table)
    if args.document:
        text = generator.generate_complete_document(args.style, args.caption, args.label)
    else:
        text = generator.generate_with_caption(args.style, args.caption, args.label)

    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        logger.info("wrote table with %d runs to %s", table.rows - 1, args.out)
    else:
        print(text)
    if args.copy:
        from utils.clipboard import export_text
        result = export_text(text)
        if result["success"]:
            logger.info("table copied to clipboard via %s", result["method"])
    return 0


def cmd_inspect(args) -> int:
    from core.checkpoint import CheckpointManager, describe_checkpoint

    path = Path(args.path)
    if path.is_dir():
        entries = CheckpointManager(path).list_checkpoints()
    else:
        entries = [describe_checkpoint(path)]
    print(json.dumps(entries, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="co4", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("field", help="sample a modulation transfer function on a grid")
    p.add_argument("--kind", default="cooperation")
    p.add_argument("--rmin", type=float, default=-4.0)
    p.add_argument("--rmax", type=float, default=4.0)
    p.add_argument("--cmin", type=float, default=-4.0)
    p.add_argument("--cmax", type=float, default=4.0)
    p.add_argument("--steps", type=int, default=201)
    p.add_argument("--out", default="field.csv")
    p.set_defaults(func=cmd_field)

    p = sub.add_parser("macs", help="closed-form or measured MAC counts")
    p.add_argument("--arch", choices=["standard", "co4"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--e", type=int, required=True)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--latents", type=int)
    p.add_argument("--measure", action="store_true")
    p.add_argument("--sweep", type=_int_list, help="comma-separated N values for the log-log slope")
    p.set_defaults(func=cmd_macs)

    p = sub.add_parser("gen-babi", help="write synthetic 'Where is X?' stories as JSON lines")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=10000)
    p.add_argument("--max-tokens", type=int, default=60)
    p.add_argument("--out", default="stories.jsonl")
    p.set_defaults(func=cmd_gen_babi)

    p = sub.add_parser("rl", help="evolve a permutation-invariant cart-pole policy")
    p.add_argument("--encoder", choices=["standard", "co4", "tm1", "tm2", "tm3", "tm4"], default="co4")
    p.add_argument("--gens", type=int, default=20)
    p.add_argument("--pop", type=int, default=32)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--episodes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shuffled-eval", type=int, default=0, metavar="EPISODES",
                   help="evaluate the best genome with shuffled sensors afterwards")
    p.add_argument("--baseline", type=int, default=100, metavar="GENOMES",
                   help="random genomes averaged into <out>_baseline.json; 0 skips it")
    p.add_argument("--out", default="curve.csv")
    p.set_defaults(func=cmd_rl)

    p = sub.add_parser("train", help="supervised training run")
    p.add_argument("--task", choices=["babi", "cifar"], required=True)
    p.add_argument("--arch", choices=["standard", "co4"], default="co4")
    p.add_argument("--modulation", choices=["cooperation", "tm1", "tm2", "tm3", "tm4"])
    p.add_argument("--heads", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--latents", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=["cosine", "plateau"])
    p.add_argument("--samples", type=int, help="bAbI stories to generate")
    p.add_argument("--data-dir", help="directory with the CIFAR-10 binary batches")
    p.add_argument("--subset", type=int, help="CIFAR images to use")
    p.add_argument("--no-positional", action="store_true")
    p.add_argument("--smoke", action="store_true",
                   help="short bAbI preset: 512 samples, 10 epochs, batch 8, lr 3e-3, no dropout")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dry-run", action="store_true", help="write the run directory without training")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="LaTeX result table from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--style", choices=["booktabs", "tabular"], default="booktabs")
    p.add_argument("--caption", default="")
    p.add_argument("--label", default="")
    p.add_argument("--document", action="store_true", help="emit a complete LaTeX document")
    p.add_argument("--copy", action="store_true", help="also copy the table to the clipboard")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect", help="describe a checkpoint file or every checkpoint in a directory")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    from utils.logging_setup import configure_logging

    args = build_parser().parse_args(argv)
    configure_logging(1 if args.verbose else -1 if args.quiet else 0)
    try:
        return args.func(args)
    except Co4Error as e:
        logger.error("%s", e)
        return 2
    except FileNotFoundError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
