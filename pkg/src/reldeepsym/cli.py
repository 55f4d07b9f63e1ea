"""Command-line entry point: ``reldeepsym <subcommand> [--config FILE] [flags]``.

Subcommands: gen-data, train, eval, rollout, interpret, compare. Settings
come from an optional INI config file (sections ``[data]``, ``[train]``,
``[run]``) and are overridden by flags. The fully resolved configuration is
written as ``run_config.json`` into every output directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

from . import datasets, evals, interpret, training
from .datasets import DatasetError
from .models import ARCHITECTURES, ModelCheckpoint
from .simenv import GenerationError

log = logging.getLogger("reldeepsym")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    command: str
    variant: str = "2obj"
    count: int | None = None
    data: list[str] = field(default_factory=list)
    architectures: list[str] = field(default_factory=lambda: list(ARCHITECTURES))
    checkpoints: list[str] = field(default_factory=list)
    checkpoint_dir: str | None = None
    split: str = "test"
    out: str = "runs"
    seed: int = 0
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    n_actions: int = 8
    n_scenes: int = 100
    objects: list[int] = field(default_factory=lambda: [2])
    train_missing: bool = False
    parallel_seeds: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["seeds"] = list(self.train.seeds)
        return d


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(",", " ").split()]


def _words(text: str) -> list[str]:
    return str(text).replace(",", " ").split()


TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "learning_rate": float, "clip_norm": float,
    "tau": float, "eval_every": int, "hidden": int, "dtype": str,
}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the INI file (if any) with explicit flags; flags win."""
    file_values: dict[str, str] = {}
    if args.config:
        parser = configparser.ConfigParser()
        if not parser.read(args.config):
            raise UsageError(f"cannot read config file {args.config}")
        for section in parser.sections():
            for key, value in parser.items(section):
                file_values[key.replace("-", "_")] = value

    def pick(name, convert=str):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        if name in file_values:
            try:
                return convert(file_values[name])
            except ValueError as exc:
                raise UsageError(f"bad value for {name!r} in config: {exc}") from exc
        return None

    cfg = RunConfig(command=args.command)
    for name, conv in (("variant", str), ("count", int), ("split", str), ("out", str),
                       ("seed", int), ("n_actions", int), ("n_scenes", int),
                       ("checkpoint_dir", str), ("parallel_seeds", int)):
        v = pick(name, conv)
        if v is not None:
            setattr(cfg, name, v)
    for name, conv in (("data", _words), ("architectures", _words), ("checkpoints", _words),
                       ("objects", _ints)):
        v = pick(name, conv)
        if v:
            setattr(cfg, name, list(v))
    cfg.train_missing = bool(getattr(args, "train_missing", False)) or \
        file_values.get("train_missing", "false").lower() in ("1", "true", "yes")

    train_kwargs = {}
    for key, conv in TRAIN_KEYS.items():
        v = pick(key, conv)
        if v is not None:
            train_kwargs[key] = v
    seeds = pick("seeds", _ints)
    if seeds:
        train_kwargs["seeds"] = tuple(seeds)
    if getattr(args, "straight_through", False) or \
            file_values.get("straight_through", "false").lower() in ("1", "true", "yes"):
        train_kwargs["straight_through"] = True
    try:
        cfg.train = training.TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    unknown = [a for a in cfg.architectures if a not in ARCHITECTURES]
    if unknown:
        raise UsageError(f"unknown architectures {unknown}; choose from {ARCHITECTURES}")
    if cfg.variant not in datasets.VARIANT_SIZES:
        raise UsageError(f"unknown variant {cfg.variant!r}")
    return cfg


def write_run_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(values, what):
    if not values:
        raise UsageError(f"missing {what}")
    return values


# subcommands ------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig) -> None:
    manifest = datasets.generate(cfg.variant, cfg.count, cfg.seed, cfg.out)
    write_run_config(cfg, cfg.out)
    print(json.dumps(manifest["counts"], sort_keys=True))


def cmd_train(cfg: RunConfig) -> None:
    data_dir = _require(cfg.data, "--data")[0]
    for arch in cfg.architectures:
        tc = training.TrainConfig(**{**asdict(cfg.train), "architecture": arch})
        results = training.train(tc, data_dir, cfg.out)
        for seed, res in results.items():
            print(f"{arch}\tseed {seed}\tbest val {res.best_val:.4f} (epoch {res.best_epoch})")
    write_run_config(cfg, cfg.out)


def _load_checkpoints(paths) -> list[tuple[str, ModelCheckpoint]]:
    out = []
    for p in paths:
        try:
            out.append((p, ModelCheckpoint.load(p)))
        except OSError as exc:
            raise DatasetError(f"cannot read checkpoint {p}: {exc}") from exc
    return out


def cmd_eval(cfg: RunConfig) -> None:
    data_dir = _require(cfg.data, "--data")[0]
    records = datasets.load_splits(data_dir)[cfg.split]
    name = datasets.dataset_name(data_dir)
    rows = []
    for path, ckpt in _load_checkpoints(_require(cfg.checkpoints, "--checkpoints")):
        err = evals.effect_error(ckpt, records)
        rows.append({"dataset": name, "architecture": ckpt.architecture, "seed": ckpt.seed,
                     "metric": "effect_error", "value": err})
        print(f"{path}\t{err:.4f}")
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    evals.write_table(Path(cfg.out) / "results.csv", evals.RESULT_COLUMNS, rows)
    write_run_config(cfg, cfg.out)


def cmd_rollout(cfg: RunConfig) -> None:
    groups: dict[str, list[ModelCheckpoint]] = {}
    for _, ckpt in _load_checkpoints(_require(cfg.checkpoints, "--checkpoints")):
        groups.setdefault(ckpt.architecture, []).append(ckpt)
    rows = evals.error_vs_actions(groups, cfg.n_actions, cfg.n_scenes, cfg.seed, cfg.objects)
    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    evals.write_table(Path(cfg.out) / "curves.csv", evals.CURVE_COLUMNS, rows)
    for r in rows:
        print(f"{r['architecture']}\t{r['horizon']}\t{r['mean']:.4f}\t{r['std']:.4f}")
    write_run_config(cfg, cfg.out)


def cmd_interpret(cfg: RunConfig) -> None:
    data_dir = _require(cfg.data, "--data")[0]
    records = datasets.load_splits(data_dir)[cfg.split]
    _, ckpt = _load_checkpoints(_require(cfg.checkpoints, "--checkpoints"))[0]
    sym = interpret.symbol_report(ckpt, records) if ckpt.architecture != "deepsym" else None
    rel = interpret.relation_report(ckpt, records) if ckpt.architecture == "relational" else None
    interpret.write_reports(cfg.out, sym, rel)
    if sym is not None:
        for code, (purity, kind, count) in sym.kind_purity().items():
            print(f"symbol {code}\t{count}\t{purity:.3f} {kind}")
    if rel is not None:
        for head, spread in rel.dy_spread().items():
            print(f"head {head}\tdy std {spread:.3f} (population {rel.population_dy_std:.3f})")
    write_run_config(cfg, cfg.out)


def _train_one(args):
    tc, data_dir, out_dir = args
    training.train(tc, data_dir, out_dir)
    return tc.architecture, tc.seeds


def compare(cfg: RunConfig) -> tuple[list[dict], list[dict], list[dict]]:
    """Effect errors per (dataset, architecture, seed), Table-I cells, and Welch p-values."""
    ckpt_dir = Path(cfg.checkpoint_dir or Path(cfg.out) / "checkpoints")
    results, cells, pvalues = [], [], []
    for data_dir in _require(cfg.data, "--data"):
        name = datasets.dataset_name(data_dir)
        missing = [(a, s) for a in cfg.architectures for s in cfg.train.seeds
                   if not (ckpt_dir / f"{training.checkpoint_name(a, name, s)}.ckpt").exists()]
        if missing and not cfg.train_missing:
            raise DatasetError(f"missing checkpoints for {name}: {missing} (use --train-missing)")
        jobs = [(training.TrainConfig(**{**asdict(cfg.train), "architecture": a, "seeds": (s,)}),
                 data_dir, ckpt_dir) for a, s in missing]
        if cfg.parallel_seeds > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(cfg.parallel_seeds) as pool:
                list(pool.map(_train_one, jobs))
        else:
            for job in jobs:
                _train_one(job)

        test = datasets.load_splits(data_dir)["test"]
        summaries = {}
        for arch in cfg.architectures:
            per_seed = {}
            for s in cfg.train.seeds:
                ckpt = ModelCheckpoint.load(ckpt_dir / f"{training.checkpoint_name(arch, name, s)}.ckpt")
                per_seed[s] = evals.effect_error(ckpt, test)
                results.append({"dataset": name, "architecture": arch, "seed": s,
                                "metric": "effect_error", "value": per_seed[s]})
            summaries[arch] = evals.EffectErrorSummary(name, arch, per_seed)
            cells.append({"dataset": name, "architecture": arch,
                          "mean": summaries[arch].mean, "std": summaries[arch].std})
        for a, b in combinations(cfg.architectures, 2):
            t, p = evals.welch_t(list(summaries[a].per_seed.values()), list(summaries[b].per_seed.values()))
            pvalues.append({"dataset": name, "architecture_a": a, "architecture_b": b, "t": t, "p": p})
    return results, cells, pvalues


def cmd_compare(cfg: RunConfig) -> None:
    results, cells, pvalues = compare(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    evals.write_table(out / "results.csv", evals.RESULT_COLUMNS, results)
    evals.write_table(out / "table.csv", ("dataset", "architecture", "mean", "std"), cells)
    evals.write_table(out / "pvalues.csv", ("dataset", "architecture_a", "architecture_b", "t", "p"), pvalues)
    for c in cells:
        print(f"{c['dataset']}\t{c['architecture']}\t{c['mean']:.3f} +- {c['std']:.3f}")
    for p in pvalues:
        print(f"{p['dataset']}\t{p['architecture_a']} vs {p['architecture_b']}\tp={p['p']:.4g}")
    write_run_config(cfg, cfg.out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "interpret": cmd_interpret,
    "compare": cmd_compare,
}


def build_parser() -> ArgParser:
    parser = ArgParser(prog="reldeepsym", description="Relational symbol learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    def common(p):
        p.add_argument("--config", help="INI file with [data]/[train]/[run] sections")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="global seed")
        return p

    p = common(sub.add_parser("gen-data", help="generate a dataset"))
    p.add_argument("--variant", choices=sorted(datasets.VARIANT_SIZES))
    p.add_argument("--count", type=int, help="total samples (default: desk-scale counts)")

    def train_flags(p):
        p.add_argument("--architectures", "--arch", type=_words, help="comma-separated architectures")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--learning-rate", dest="learning_rate", type=float)
        p.add_argument("--clip-norm", dest="clip_norm", type=float)
        p.add_argument("--seeds", type=_ints, help="comma-separated training seeds")
        p.add_argument("--tau", type=float, help="Gumbel-sigmoid temperature")
        p.add_argument("--straight-through", dest="straight_through", action="store_true")
        p.add_argument("--eval-every", dest="eval_every", type=int)
        p.add_argument("--hidden", type=int)
        p.add_argument("--dtype", choices=sorted(training.DTYPES))

    p = common(sub.add_parser("train", help="train one or more architectures"))
    p.add_argument("--data", type=_words, help="dataset directory")
    train_flags(p)

    p = common(sub.add_parser("eval", help="effect error of checkpoints on a split"))
    p.add_argument("--data", type=_words)
    p.add_argument("--checkpoints", type=_words, help="comma-separated checkpoint files")
    p.add_argument("--split", choices=["train", "val", "test"])

    p = common(sub.add_parser("rollout", help="error vs number of actions"))
    p.add_argument("--checkpoints", type=_words)
    p.add_argument("--n-actions", dest="n_actions", type=int)
    p.add_argument("--n-scenes", dest="n_scenes", type=int)
    p.add_argument("--objects", type=_ints, help="scene sizes, e.g. 2 or 2,3,4")

    p = common(sub.add_parser("interpret", help="dump symbol and relation activations"))
    p.add_argument("--data", type=_words)
    p.add_argument("--checkpoints", "--checkpoint", type=_words)
    p.add_argument("--split", choices=["train", "val", "test"])

    p = common(sub.add_parser("compare", help="Table-I style comparison with Welch p-values"))
    p.add_argument("--data", type=_words, help="comma-separated dataset directories")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
    p.add_argument("--train-missing", dest="train_missing", action="store_true")
    p.add_argument("--parallel-seeds", dest="parallel_seeds", type=int)
    train_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, GenerationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
