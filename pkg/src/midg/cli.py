"""Command-line interface: ``midg {gen,train,eval,ablate,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error (unknown flag,
missing or unreadable input file, bad option value).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .autodiff import AutodiffError
from .data import DatasetError, SyntheticSpec, generate, read_dataset, write_dataset
from .pipeline import MIDG, ModelConfig, TrainConfig, ablate, evaluate, train
from .pipeline.model import DataError, TrainingError

log = logging.getLogger("midg")

CONFIG_KEY = "__config__"
TRAIN_KEY = "__train__"

# keys accepted in a config file and as --flags, with their parsers
_TUPLE_FIELDS = {"dims": int, "label_range": float}


class UsageError(Exception):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_parser(name: str, default):
    if name in _TUPLE_FIELDS:
        elem = _TUPLE_FIELDS[name]
        return lambda text: tuple(elem(x) for x in text.replace(",", " ").split())
    if isinstance(default, bool):
        return _parse_bool
    return type(default)


def _config_fields() -> dict[str, tuple[type, object]]:
    out = {}
    for cls in (ModelConfig, TrainConfig):
        for f in fields(cls):
            out[f.name] = (cls, _field_parser(f.name, f.default))
    return out


CONFIG_FIELDS = _config_fields()


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment line."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        parser.read_string("[config]\n" + Path(path).read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise UsageError(f"{path}: malformed config file ({exc.__class__.__name__})") from None
    values = dict(parser["config"])
    unknown = sorted(set(values) - set(CONFIG_FIELDS))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return values


def build_configs(args, dataset_dims=None) -> tuple[ModelConfig, TrainConfig]:
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for name in CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    parsed = {"model": {}, "train": {}}
    for name, text in raw.items():
        cls, parse = CONFIG_FIELDS[name]
        try:
            parsed["model" if cls is ModelConfig else "train"][name] = parse(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {exc}") from None
    if dataset_dims is not None and "dims" not in parsed["model"]:
        parsed["model"]["dims"] = tuple(dataset_dims)
    try:
        return ModelConfig(**parsed["model"]), TrainConfig(**parsed["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if isinstance(data, bytes) else {"encoding": "utf-8"})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_model(model: MIDG, train_config: TrainConfig, path) -> None:
    arrays = dict(model.state_dict())
    arrays[CONFIG_KEY] = np.array(json.dumps(model.config.to_dict()))
    arrays[TRAIN_KEY] = np.array(json.dumps({"w1": train_config.w1, "w2": train_config.w2}))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write(path, buf.getvalue())


def load_model(path) -> tuple[MIDG, dict]:
    with np.load(path, allow_pickle=False) as archive:
        if CONFIG_KEY not in archive.files:
            raise DataError(f"{path}: not a parameter file (no embedded config)")
        config = ModelConfig.from_dict(json.loads(str(archive[CONFIG_KEY])))
        extra = json.loads(str(archive[TRAIN_KEY])) if TRAIN_KEY in archive.files else {}
        state = {k: archive[k] for k in archive.files if k not in (CONFIG_KEY, TRAIN_KEY)}
    model = MIDG(config)
    model.load_state_dict(state)
    model.eval()
    return model, extra


def _existing_file(text: str) -> Path:
    path = Path(text)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"no such file: {text}")
    return path


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=_existing_file, help="flat key = value file; flags override it")
    group = p.add_argument_group("model/training keys (same names as the config file)")
    for name in CONFIG_FIELDS:
        group.add_argument("--" + name.replace("_", "-"), dest=name, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="midg", description="Multimodal domain-generalization toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--samples", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=int, nargs=3, default=(8, 4, 6), metavar=("D_T", "D_A", "D_V"))
    g.add_argument("--domains", type=int, default=3)
    g.add_argument("--shift", type=float, default=1.0, help="domain shift scale")
    g.add_argument("--noise", type=float, default=0.5)
    g.add_argument("--labels", choices=("mosi", "sims"), default="mosi", help="label range [-3,3] or [-1,1]")
    g.add_argument("--holdout", type=int, nargs="*", default=(), help="domains placed entirely in the test split")
    g.add_argument("--valid-fraction", type=float, default=0.15)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model, write parameters and a JSONL epoch log")
    t.add_argument("--data", type=_existing_file, required=True)
    t.add_argument("--out", required=True, help="parameter file (.npz)")
    t.add_argument("--log", help="JSONL epoch log (default: <out>.jsonl)")
    _add_config_flags(t)

    e = sub.add_parser("eval", help="metrics JSON for a trained model")
    e.add_argument("--params", type=_existing_file, required=True)
    e.add_argument("--data", type=_existing_file, required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.add_argument("--mode", default="test", choices=("test", "train-fusion"))
    e.add_argument("--out", help="write JSON here instead of stdout")

    a = sub.add_parser("ablate", help="four-way module ablation table")
    a.add_argument("--data", type=_existing_file, required=True)
    a.add_argument("--split", default="test", choices=("train", "valid", "test"))
    a.add_argument("--format", choices=("json", "csv"), default="json")
    a.add_argument("--out", help="write the table here instead of stdout")
    _add_config_flags(a)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--points", type=int, default=100, help="random points per primitive")
    c.add_argument("--graph-points", type=int, default=3, help="toy models for the full-graph check")
    c.add_argument("--seed", type=int, default=0)
    return parser


def _emit(text: str, out) -> None:
    if out:
        _atomic_write(out, text)
    else:
        sys.stdout.write(text)


def cmd_gen(args) -> int:
    label_range = (-3.0, 3.0) if args.labels == "mosi" else (-1.0, 1.0)
    try:
        spec = SyntheticSpec(
            n_samples=args.samples,
            dims=tuple(args.dims),
            n_domains=args.domains,
            domain_shift_scale=args.shift,
            label_range=label_range,
            noise_std=args.noise,
            seed=args.seed,
            holdout_domains=tuple(args.holdout),
            valid_fraction=args.valid_fraction,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_dataset(generate(spec), args.out)
    log.info("wrote %d samples to %s", spec.n_samples, args.out)
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    model_config, train_config = build_configs(args, dataset.dims)
    result = train(dataset, model_config, train_config)
    save_model(result.model, train_config, args.out)
    _atomic_write(args.log or str(args.out) + ".jsonl", result.jsonl())
    return 0


def cmd_eval(args) -> int:
    model, extra = load_model(args.params)
    dataset = read_dataset(args.data)
    report = evaluate(model, dataset, args.split, args.mode, w1=extra.get("w1", 0.5), w2=extra.get("w2", 0.5))
    _emit(json.dumps(report.to_dict()) + "\n", args.out)
    return 0


def cmd_ablate(args) -> int:
    dataset = read_dataset(args.data)
    model_config, train_config = build_configs(args, dataset.dims)
    rows = ablate(dataset, model_config, train_config, eval_split=args.split)
    if args.format == "json":
        text = json.dumps(rows, indent=2) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    _emit(text, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import TOLERANCE, run_suite

    results = run_suite(args.points, args.seed, args.graph_points)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} {r.name:14} max_rel_err={r.max_error:.3e} points={r.points} {r.seconds:.1f}s")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) above tolerance {TOLERANCE:g}: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"midg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, DataError, TrainingError, AutodiffError, ValueError, OSError) as exc:
        print(f"midg {args.command}: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
