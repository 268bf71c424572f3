"""``branchforge`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .numerics import atomic_write

DEFAULT_DATA = "branchforge-data"


def _data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get("BRANCHFORGE_DATA") or DEFAULT_DATA)


def _read_config(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _train_config(args):
    from .gnn import GnnConfig
    from .trainer import TrainConfig
    gnn_cfg = GnnConfig(variant=args.variant, branch_agg=args.branch_agg)
    return TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr, weight_decay=args.weight_decay,
                       seed=args.seed, val_every=args.val_every, gnn_config=gnn_cfg)


def _load_model(args):
    from .model import CheckpointNotFound, JointModel
    if not args.checkpoint:
        raise CheckpointNotFound("no --checkpoint given")
    model, _ = JointModel.load(args.checkpoint)
    return model


def _out(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .corpus import GenerationConfig, generate_programs
    out = _out(args, _data_dir(args) / "programs")
    programs = generate_programs(args.seed, args.programs, GenerationConfig(loop_bound=args.loop_bound))
    for p in programs:
        atomic_write(out / f"{p.name}.ml", p.text)
    print(f"wrote {len(programs)} programs to {out}")
    return 0


def cmd_build_cpg(args) -> int:
    from .cpg import build_cpg, dumps_cpg
    from .minilang import parse_program
    src = Path(args.programs_dir) if args.programs_dir else _data_dir(args) / "programs"
    paths = sorted(src.glob("*.ml"))
    if not paths:
        raise FileNotFoundError(f"no .ml programs under {src}")
    out = _out(args, _data_dir(args) / "cpg")
    for path in paths:
        tree, program = parse_program(path.read_text(), path.stem)
        atomic_write(out / f"{path.stem}.cpg", dumps_cpg(build_cpg(tree, program)))
    print(f"wrote {len(paths)} graphs to {out}")
    return 0


def cmd_curate(args) -> int:
    from .corpus import GenerationConfig, curate
    out = _out(args, _data_dir(args))
    corpus = curate(args.seed, GenerationConfig(loop_bound=args.loop_bound), args.programs, out)
    m = corpus.manifest
    print(f"curated {m.program_count} programs, {m.record_count} records {m.split_counts} in {out}")
    return 0


def _corpus(args):
    from .corpus import load_corpus
    path = _data_dir(args)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no curated corpus in {path} (run `branchforge curate`)")
    return load_corpus(path)


def _train(args, ft: bool) -> int:
    from .trainer import train, train_ft_baseline
    corpus = _corpus(args)
    cfg = _train_config(args)
    out = _out(args, _data_dir(args) / "runs" / ("ft" if ft else f"{args.variant}-{args.branch_agg}-s{args.seed}"))
    report, _ = (train_ft_baseline if ft else train)(corpus, cfg, out_dir=out)
    print(f"best step {report.best_step}; checkpoints in {out}")
    return 0


def cmd_train(args) -> int:
    return _train(args, ft=False)


def cmd_train_ft(args) -> int:
    return _train(args, ft=True)


def _inference(args):
    from .evaluation import ModelGenerator, run_targeted_inference
    from .lm import DecodeMode
    model = _load_model(args)
    corpus = _corpus(args)
    gen = ModelGenerator(model, corpus, DecodeMode.parse(args.decode), seed=args.seed)
    programs = corpus.split_programs(args.split)
    return run_targeted_inference(gen, corpus, programs, args.delta, loop_bound=args.loop_bound,
                                  fingerprint=Path(args.checkpoint).name)


def cmd_infer(args) -> int:
    result = _inference(args)
    out = _out(args, Path(args.checkpoint).parent)
    lines = []
    for name in sorted(result.suites):
        for o in result.suites[name]:
            status = "passed" if o.passed else ("failed" if o.parse_ok else "unparsed")
            lines.append(f"{o.record_id}\t{status}\t{o.test_source}")
    atomic_write(out / "generations.tsv", "\n".join(lines) + "\n")
    print(f"wrote {len(lines)} generations to {out / 'generations.tsv'}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import write_plot_data
    result = _inference(args)
    out = _out(args, Path(args.checkpoint).parent)
    atomic_write(out / "eval_report.txt", result.report.to_text())
    if args.emit_plot_data:
        write_plot_data(result.report, out / "plot_data.tsv")
    print(result.report.to_table(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import run_ablation_matrix
    corpus = _corpus(args)
    seeds = [int(s) for s in str(args.seeds).split(",") if s.strip()]
    out = _out(args, _data_dir(args) / "ablation")
    table = run_ablation_matrix(corpus, _train_config(args), seeds, out, delta=args.delta, split=args.split)
    atomic_write(out / "table.txt", table.to_table())
    print(table.to_table(), end="")
    return 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import SUITES
    failed = 0
    for name, suite in SUITES.items():
        ok, detail = suite()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 1 if failed else 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--data-dir", default=None,
                        help=f"corpus directory (default $BRANCHFORGE_DATA, then ./{DEFAULT_DATA})")
    common.add_argument("--out", default=None, help="output directory (default depends on the subcommand)")
    common.add_argument("--checkpoint", default=None, help="model checkpoint path")
    common.add_argument("--config", default=None, help="key=value file; explicit flags win")
    common.add_argument("--loop-bound", type=int, default=2, help="loop unrolling bound (default 2)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=["attention", "mean", "none"], default="attention",
                       help="message-passing variant (default attention)")
    model.add_argument("--branch-agg", choices=["node", "pool"], default="node",
                       help="branch embedding aggregation (default node)")
    model.add_argument("--steps", type=int, default=2000, help="optimizer steps (default 2000)")
    model.add_argument("--batch", type=int, default=8, help="batch size (default 8)")
    model.add_argument("--lr", type=float, default=3e-4, help="learning rate (default 3e-4)")
    model.add_argument("--weight-decay", type=float, default=1e-4, help="decoupled weight decay (default 1e-4)")
    model.add_argument("--val-every", type=int, default=100, help="validation interval (default 100)")

    infer = argparse.ArgumentParser(add_help=False)
    infer.add_argument("--delta", type=int, default=1000, help="branch cap per program (default 1000)")
    infer.add_argument("--decode", default="greedy", help="greedy or temp:<tau> (default greedy)")
    infer.add_argument("--split", default="test", choices=["train", "val", "test"],
                       help="which programs to target (default test)")
    infer.add_argument("--emit-plot-data", action="store_true", help="also write plot_data.tsv")

    parser = argparse.ArgumentParser(prog="branchforge", description="Branch-targeted test generation pipeline.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands = {
        "gen-corpus": (cmd_gen_corpus, [common], "generate MiniLang programs"),
        "build-cpg": (cmd_build_cpg, [common], "build code property graphs for a program directory"),
        "curate": (cmd_curate, [common], "generate programs and curate the branch/test dataset"),
        "train": (cmd_train, [common, model], "train the joint graph+language model"),
        "train-ft": (cmd_train_ft, [common, model], "train the text-only baseline"),
        "infer": (cmd_infer, [common, infer], "generate one test per targeted branch"),
        "eval": (cmd_eval, [common, infer], "generate, execute and score tests"),
        "ablate": (cmd_ablate, [common, model, infer], "run the ablation matrix over seeds"),
        "selfcheck": (cmd_selfcheck, [common], "run the gradient, round-trip and metric suites"),
    }
    for name, (fn, parents, help_) in commands.items():
        p = sub.add_parser(name, parents=parents, help=help_, description=help_)
        p.set_defaults(func=fn)
        if name in ("gen-corpus", "curate"):
            p.add_argument("--programs", type=int, default=200, help="number of programs (default 200)")
        if name == "build-cpg":
            p.add_argument("--programs-dir", default=None, help="directory of .ml files (default <data-dir>/programs)")
        if name == "ablate":
            p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
    parser._subparser_map = sub.choices  # used to apply config-file defaults
    return parser


def _apply_config(parser, argv: Sequence[str]):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in parser._subparser_map), None)
    if known.config and command:
        sp = parser._subparser_map[command]
        values = _read_config(known.config)
        valid = {a.dest: a for a in sp._actions}
        for key, raw in values.items():
            if key not in valid:
                raise ValueError(f"unknown config key {key!r}")
            action = valid[key]
            values[key] = action.type(raw) if action.type else raw
        sp.set_defaults(**values)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001  single-line error class for scripts
        print(f"error: {type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
