"""Command-line entry point: prepare, train, evaluate, sweep, stats.

Every run is reproducible from --seed alone and writes its fully resolved
configuration (defaults included) next to its outputs as flat `key = value`
text. The same format can be fed back via --config; explicit flags win.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from . import data as kgdata
from . import training, transe
from .autodiff import Rng
from .training import TrainConfig, TrainingDivergedError


class UsageError(ValueError):
    """Bad flag values discovered after argparse (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; the contract reserves 2 for data
    # errors, so remap.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


METRICS_HEADER = "dataset,split,accuracy,precision,recall,f1,seed"

_FLAG_FIELDS = ["dim", "heads", "lam", "margin", "lr", "epochs",
                "detector_epochs", "batch", "neg_ratio", "fraction",
                "threshold", "finetune"]
_PARAM_ALIASES = {"k": "heads", "heads": "heads", "lambda": "lambda",
                  "lam": "lambda", "dim": "dim", "d": "dim"}


def _add_data_flags(p, need_train=True):
    p.add_argument("--train-file", required=need_train,
                   help="training triples (3 or 4 columns)")
    p.add_argument("--test-file", default=None)
    p.add_argument("--valid-file", default=None)


def _add_train_flags(p):
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None,
                   help="key = value file supplying defaults for any "
                        "config field")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="contrastive loss weight")
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None,
                   help="joint feature-training epochs")
    p.add_argument("--detector-epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--neg-ratio", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None,
                   help="outdated fraction to synthesize when the input "
                        "has no labels")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--finetune", action="store_true", default=None,
                   help="keep updating the embeddings during detector "
                        "training (end-to-end)")


def parse_config_file(path: str) -> dict[str, str]:
    raw = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    return raw


def _cast_like(current, text: str, key: str):
    kind = type(current)
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError
            return low in ("true", "1")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise UsageError(
            f"config key {key}: cannot parse {text!r} as "
            f"{kind.__name__}") from None


def resolve_config(args) -> TrainConfig:
    """Defaults <- config file <- explicit flags, then validated."""
    cfg = TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    file_vals = parse_config_file(args.config) \
        if getattr(args, "config", None) else {}
    for key, text in file_vals.items():
        if key in ("command", "train_file", "test_file", "valid_file",
                   "out", "param", "values"):
            continue  # echo-file bookkeeping keys, not hyperparameters
        if key not in known:
            raise UsageError(f"unknown config key {key!r}")
        cfg = replace(cfg, **{key: _cast_like(getattr(cfg, key), text, key)})
    overrides = {}
    for name in _FLAG_FIELDS + ["seed"]:
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    cfg = replace(cfg, **overrides)
    try:
        return cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def config_echo(command: str, args, cfg: TrainConfig) -> str:
    lines = [f"command = {command}"]
    for key in ("train_file", "test_file", "valid_file", "out"):
        if getattr(args, key, None) is not None:
            lines.append(f"{key} = {getattr(args, key)}")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"


def _emit_config(command: str, args, cfg: TrainConfig,
                 out: Path | None) -> None:
    echo = config_echo(command, args, cfg)
    print(echo, end="")
    if out is not None:
        (out / "config.txt").write_text(echo, encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_name(train_file: str) -> str:
    p = Path(train_file)
    parent = p.resolve().parent.name
    return parent if parent not in ("", "/") else p.stem


def parse_values(param: str, text: str) -> list:
    """Comma list, or `a..b` / `a..b..step` inclusive ranges."""
    as_int = param in ("heads", "dim")
    items: list[float] = []
    if ".." in text:
        parts = text.split("..")
        if len(parts) not in (2, 3) or not all(parts):
            raise UsageError(f"bad range {text!r}; use a..b or a..b..step")
        try:
            lo, hi = float(parts[0]), float(parts[1])
            step = float(parts[2]) if len(parts) == 3 \
                else (1.0 if as_int else 0.1)
        except ValueError:
            raise UsageError(f"bad range {text!r}") from None
        if step <= 0 or hi < lo:
            raise UsageError(f"bad range {text!r}: need lo <= hi, step > 0")
        v = lo
        while v <= hi + 1e-9:
            items.append(round(v, 10))
            v += step
    else:
        for piece in text.split(","):
            piece = piece.strip()
            if not piece:
                continue
            try:
                items.append(float(piece))
            except ValueError:
                raise UsageError(
                    f"bad value {piece!r} in --values") from None
    if not items:
        raise UsageError("--values produced an empty list")
    if as_int:
        out = []
        for v in items:
            if v != int(v):
                raise UsageError(
                    f"--param {param} needs integer values, got {v:g}")
            out.append(int(v))
        return out
    return items


def _report_lines(rep: training.EvalReport) -> str:
    return (f"accuracy  = {rep.accuracy:.4f}\n"
            f"precision = {rep.precision:.4f}\n"
            f"recall    = {rep.recall:.4f}\n"
            f"f1        = {rep.f1:.4f}\n"
            f"counts    : tp={rep.tp} fp={rep.fp} fn={rep.fn} tn={rep.tn}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _emit_config("prepare", args, cfg, out)
    kg, removed = training.prepare_graph(
        args.train_file, args.test_file, args.valid_file, cfg,
        Rng(cfg.seed))
    written = {}
    for split in kgdata.SPLITS:
        if kg.facts_of(split):
            path = out / f"{split}.txt"
            written[split] = kgdata.write_labeled(kg, str(path), split)
    text = kgdata.format_stats(kgdata.stats(kg))
    (out / "stats.txt").write_text(text, encoding="utf-8")
    (out / "stats.csv").write_text(kgdata.stats_csv(kg), encoding="utf-8")
    print(text, end="")
    print(f"cleaning removed {removed} facts")
    for split, n in written.items():
        print(f"wrote {n} {split} facts -> {out / (split + '.txt')}")
    return 0


def cmd_stats(args) -> int:
    kg = kgdata.load_dataset(args.train_file, args.test_file,
                             args.valid_file)
    print(kgdata.format_stats(kgdata.stats(kg)), end="")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    _emit_config("train", args, cfg, out)
    res = training.run_pipeline(args.train_file, args.test_file,
                                args.valid_file, cfg)
    transe.save_embeddings(str(out / "embeddings"), res.E, res.R,
                           res.kg.entities.names, res.kg.relations.names)
    res.detector.save(str(out / "detector.bin"))
    for split in kgdata.SPLITS:
        if res.kg.facts_of(split):
            kgdata.write_labeled(res.kg, str(out / f"labeled.{split}.txt"),
                                 split)

    loss_rows = ["phase,epoch,loss"]
    loss_rows += [f"joint,{i},{v:.10g}"
                  for i, v in enumerate(res.joint_losses)]
    loss_rows += [f"detector,{i},{v:.10g}"
                  for i, v in enumerate(res.detector_losses)]
    (out / "losses.csv").write_text("\n".join(loss_rows) + "\n",
                                    encoding="utf-8")

    name = _dataset_name(args.train_file)
    rows = [METRICS_HEADER]

    def metrics_row(split, rep):
        return (f"{name},{split},{rep.accuracy:.6f},{rep.precision:.6f},"
                f"{rep.recall:.6f},{rep.f1:.6f},{cfg.seed}")

    rows.append(metrics_row("test", res.report))
    if res.valid_report is not None:
        rows.append(metrics_row("valid", res.valid_report))
    (out / "metrics.csv").write_text("\n".join(rows) + "\n",
                                     encoding="utf-8")

    print(f"test metrics ({name}, seed {cfg.seed}):")
    print(_report_lines(res.report), end="")
    print(f"majority baseline accuracy = {res.majority_accuracy:.4f}")
    print(f"wall seconds = {res.wall_seconds:.1f}")
    print(f"artifacts -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    # separate file: config.txt in this directory belongs to the train run
    (out / "eval.config.txt").write_text(
        config_echo("evaluate", args, cfg), encoding="utf-8")
    started = time.perf_counter()
    ents, rels = transe.load_embeddings(str(out / "embeddings"))
    det = training.Detector.load(str(out / "detector.bin"))
    expected = 2 * ents.dim + rels.dim
    if det.in_dim != expected:
        raise ValueError(
            f"detector expects input dim {det.in_dim} but the saved "
            f"embeddings produce fact vectors of dim {expected} "
            f"(2*{ents.dim} + {rels.dim})")
    kg = kgdata.load_triples(args.test_file, split=kgdata.TEST,
                             entities=kgdata.Vocab(ents.names),
                             relations=kgdata.Vocab(rels.names),
                             frozen=True)
    facts = kg.facts_of(kgdata.TEST)
    X, y = training.fact_vectors(ents.values, rels.values, facts)
    rep = training.evaluate(det, X, y, cfg.threshold)
    print(_report_lines(rep), end="")
    name = _dataset_name(args.test_file)
    row = (f"{name},threshold,{cfg.threshold:g},{rep.accuracy:.6f},"
           f"{rep.precision:.6f},{rep.recall:.6f},{rep.f1:.6f},{cfg.seed},"
           f"{time.perf_counter() - started:.3f}")
    (out / "eval.csv").write_text(
        training.CSV_HEADER + "\n" + row + "\n", encoding="utf-8")
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    key = _PARAM_ALIASES.get(args.param.lower())
    if key is None:
        raise UsageError(
            f"unknown --param {args.param!r}; choose K/heads, lambda, "
            f"or dim")
    values = parse_values(key, args.values)
    out = _out_dir(args)
    _emit_config("sweep", args, cfg, out)
    csv_text, failures = training.sweep(
        key, values, cfg, args.train_file, args.test_file,
        args.valid_file, _dataset_name(args.train_file))
    path = out / f"sweep_{key}.csv"
    path.write_text(csv_text, encoding="utf-8")
    print(csv_text, end="")
    print(f"sweep CSV -> {path}")
    if failures:
        print(f"{failures} run(s) failed", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="kgstale",
                     description="Outdated-fact detection on knowledge "
                                 "graphs: synthesis, embedding, attention "
                                 "features, and a binary fact classifier.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    p = sub.add_parser("prepare",
                       help="clean splits, inject outdated labels, report "
                            "stats")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("stats", help="print dataset summary")
    _add_data_flags(p)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="run the full pipeline, save artifacts")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate",
                       help="score a labeled file with saved artifacts")
    p.add_argument("--test-file", required=True)
    p.add_argument("--out", required=True,
                   help="directory holding embeddings.* and detector.bin "
                        "from `train`")
    _add_train_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="one pipeline run per parameter value")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--param", required=True,
                   help="K/heads, lambda, or dim")
    p.add_argument("--values", required=True,
                   help="comma list or a..b[..step] range")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except TrainingDivergedError as exc:
        print(f"training error: {exc}\n"
              f"try lowering --lr or the margin", file=sys.stderr)
        return 3
    except (kgdata.ParseError, kgdata.SynthesisExhaustedError,
            FileNotFoundError, IsADirectoryError, NotADirectoryError,
            PermissionError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except kgdata.UnknownSymbolError as exc:
        print(f"data error: {exc.args[0]}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
