"""Command-line entry point: ``setvec <command> [--config FILE] [--set key=value] [--out DIR] [--seed N]``.

Every command resolves defaults, the config file, ``--set`` overrides and
``--seed`` (in that order) into one config, writes it to
``<out>/config.resolved.json`` and then runs. Feeding the snapshot back with
``--config`` reproduces the run.

Exit codes: 0 success, 2 usage or config error, 3 data or format error,
4 numeric abort.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional

from . import data as D
from . import metrics
from .checkpoint import load_checkpoint
from .errors import (DimensionError, DomainError, FormatError, IncompatibilityError, NumericError, SetVecError,
                     UsageError)
from .evaluate import bag_latents, evaluate
from .train import TrainConfig, read_log, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("gen-data", "train", "eval", "attn-export", "spectrum", "ablate-lambda1", "fetch-digits")


def default_config() -> dict:
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    return {
        "seed": 0,
        "data": {
            "kind": "digits",
            "digits_dir": "data/digits",
            "dir": None,
            "n_train": 2000,
            "n_test": 500,
            "min_size": 20,
            "max_size": 50,
            "volume_size": 64,
            "patch": 32,
            "overlap": 0.4,
            "max_lesions": 6,
        },
        "train": train_cfg,
        "eval": {"split": "test", "checkpoint": None},
        "ablate": {"lambda1": [0.0, 100.0]},
    }


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_value(text: str):
    """JSON literal when it parses (numbers, booleans, lists, null), otherwise the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for i, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise UsageError(f"unknown config key {'.'.join(parts[:i + 1])!r}")
        if i == len(parts) - 1:
            node[part] = parse_value(raw)
        else:
            node = node[part]


def resolve_config(config_path: Optional[str], overrides, seed: Optional[int]) -> dict:
    cfg = default_config()
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from exc
        _merge(cfg, loaded)
    for assignment in overrides or []:
        apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    train_config(cfg)  # validate early
    return cfg


def train_config(cfg: dict, **changes) -> TrainConfig:
    body = {**cfg["train"], "seed": cfg["seed"], **changes}
    try:
        return TrainConfig.from_dict(body)
    except TypeError as exc:
        raise UsageError(f"bad training config: {exc}") from exc


def data_dir(cfg: dict, out: Path) -> Path:
    return Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else out / "data"


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_split(cfg: dict, out: Path, split: str) -> list:
    if split not in ("train", "test"):
        raise UsageError(f"split must be train or test, got {split!r}")
    manifest = data_dir(cfg, out) / f"{split}.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"{manifest} not found; run `setvec gen-data` first")
    return D.load_bags(manifest)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path, args) -> dict:
    d = cfg["data"]
    if d["min_size"] > d["max_size"]:
        raise UsageError(f"min_size {d['min_size']} exceeds max_size {d['max_size']}")
    if d["kind"] == "digits":
        src = Path(d["digits_dir"])
        train_ds = D.load_digits(*D.find_idx_pair(src, "train"))
        test_ds = D.load_digits(*D.find_idx_pair(src, "test"))
        train_bags, test_bags = D.make_digit_splits(train_ds, test_ds, cfg["seed"], d["n_train"], d["n_test"],
                                                    d["min_size"], d["max_size"])
    elif d["kind"] == "phantom":
        train_bags, test_bags = D.make_phantom_splits(cfg["seed"], d["n_train"], d["n_test"], d["volume_size"],
                                                      d["patch"], d["overlap"], d["max_lesions"])
    else:
        raise UsageError(f"data.kind must be digits or phantom, got {d['kind']!r}")
    target = data_dir(cfg, out)
    target.mkdir(parents=True, exist_ok=True)
    report = {}
    for split, bags in (("train", train_bags), ("test", test_bags)):
        D.save_bags(bags, target, split)
        report[split] = vars(D.summarize(bags))
    write_json(target / "summary.json", metrics._round_floats(report))
    print(json.dumps(metrics._round_floats(report), sort_keys=True))
    return report


def _checkpoint_path(cfg: dict, out: Path) -> Path:
    return Path(cfg["eval"]["checkpoint"]) if cfg["eval"]["checkpoint"] else out / "checkpoint.bin"


def cmd_train(cfg: dict, out: Path, args) -> dict:
    tcfg = train_config(cfg)
    bags = load_split(cfg, out, "train")
    ck_path = out / "checkpoint.bin"
    resume = None
    if getattr(args, "resume", False):
        if not ck_path.is_file():
            raise FileNotFoundError(f"--resume given but {ck_path} does not exist")
        resume = load_checkpoint(ck_path, expect_arch=tcfg.arch)
    result = train(bags, tcfg, log_path=out / "metrics.ndjson", checkpoint_path=ck_path, resume=resume)
    final = read_log(out / "metrics.ndjson")[-1] if (out / "metrics.ndjson").stat().st_size else {}
    print(json.dumps(final, sort_keys=True))
    return {"final": final, "epochs": result.epoch}


def _load_model(cfg: dict, out: Path):
    tcfg = train_config(cfg)
    return tcfg, load_checkpoint(_checkpoint_path(cfg, out), expect_arch=tcfg.arch).params


def cmd_eval(cfg: dict, out: Path, args) -> dict:
    tcfg, params = _load_model(cfg, out)
    report = evaluate(load_split(cfg, out, cfg["eval"]["split"]), params, tcfg.pool_mode)
    text = report.summary.to_json()
    (out / "summary.json").write_text(text)
    print(text, end="")
    return json.loads(text)


def cmd_attn_export(cfg: dict, out: Path, args) -> dict:
    from .model import predict_bags

    tcfg, params = _load_model(cfg, out)
    bags = load_split(cfg, out, cfg["eval"]["split"])
    outputs = predict_bags(bags, params, tcfg.pool_mode)
    rows = metrics.export_attention([(b, o.attention) for b, o in zip(bags, outputs)], out / "attention.csv")
    metrics.export_subject_vectors([b.subject_id for b in bags], [o.pooled for o in outputs], [b.y for b in bags],
                                   out / "subjects.csv")
    print(json.dumps({"attention_rows": rows, "subjects": len(bags)}))
    return {"rows": rows}


def cmd_spectrum(cfg: dict, out: Path, args) -> dict:
    _, params = _load_model(cfg, out)
    bags = load_split(cfg, out, cfg["eval"]["split"])
    rep = metrics.latent_spectrum(bag_latents(bags, params)).to_dict()
    rep["n_patches"] = int(sum(len(b) for b in bags))
    write_json(out / "spectrum.json", rep)
    print(json.dumps({k: rep[k] for k in ("effective_rank", "threshold_rank", "top_share")}, sort_keys=True))
    return rep


def _lambda_tag(value: float) -> str:
    return f"lambda1_{metrics.fmt(value)}"


def cmd_ablate_lambda1(cfg: dict, out: Path, args) -> dict:
    """Train (or reuse a finished run) for every lambda1 and tabulate R², effective rank and attention spread."""
    values = cfg["ablate"]["lambda1"]
    if getattr(args, "lambda1", None):
        values = [float(v) for v in args.lambda1.split(",") if v.strip()]
    if not values:
        raise UsageError("ablate-lambda1 needs at least one lambda1 value")
    values = sorted({float(v) for v in values})
    train_bags = load_split(cfg, out, "train")
    test_bags = load_split(cfg, out, cfg["eval"]["split"])
    rows = []
    for lam in values:
        tcfg = train_config(cfg, lambda1=lam)
        run = out / _lambda_tag(lam)
        run.mkdir(parents=True, exist_ok=True)
        sub_cfg = copy.deepcopy(cfg)
        sub_cfg["train"]["lambda1"] = lam
        write_json(run / "config.resolved.json", sub_cfg)
        ck_path = run / "checkpoint.bin"
        params = None
        if ck_path.is_file():
            ck = load_checkpoint(ck_path, expect_arch=tcfg.arch)
            if ck.config == tcfg.to_dict() and ck.epoch == tcfg.epochs:
                params = ck.params
        if params is None:
            params = train(train_bags, tcfg, log_path=run / "metrics.ndjson", checkpoint_path=ck_path).params
        rep = evaluate(test_bags, params, tcfg.pool_mode)
        (run / "summary.json").write_text(rep.summary.to_json())
        rows.append({"lambda1": lam, "r2": rep.summary.r2, "effective_rank": rep.summary.effective_rank,
                     "attention_std": rep.summary.extra["attention_std"], "mean_auc": rep.summary.mean_auc,
                     "top_share": rep.summary.extra["top_share"]})
    write_json(out / "ablation.json", metrics._round_floats(rows))
    for row in rows:
        print(json.dumps(metrics._round_floats(row), sort_keys=True))
    return {"rows": rows}


def cmd_fetch_digits(cfg: dict, out: Path, args) -> dict:
    target = Path(cfg["data"]["digits_dir"]) if args.out is None else out
    counts = D.write_bundled_digits(target)
    print(json.dumps({"dir": str(target), **counts}, sort_keys=True))
    return counts


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "attn-export": cmd_attn_export,
    "spectrum": cmd_spectrum,
    "ablate-lambda1": cmd_ablate_lambda1,
    "fetch-digits": cmd_fetch_digits,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="setvec", description="Train and evaluate set-of-patches regression models.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")
        p.add_argument("--out", help="output directory (default: run)")
        p.add_argument("--seed", type=int, help="top-level seed for every random sub-stream")
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.bin")
        if name == "ablate-lambda1":
            p.add_argument("--lambda1", help="comma-separated lambda1 values")
    return parser


def _thread_limit():
    raw = os.environ.get("SETVEC_THREADS")
    if not raw:
        return nullcontext()
    try:
        limit = int(raw)
    except ValueError as exc:
        raise UsageError(f"SETVEC_THREADS must be a positive integer, got {raw!r}") from exc
    if limit < 1:
        raise UsageError(f"SETVEC_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out or "run")
        out.mkdir(parents=True, exist_ok=True)
        if args.command != "fetch-digits":
            if cfg["data"]["dir"] is None:
                cfg["data"]["dir"] = str(data_dir(cfg, out))
            write_json(out / "config.resolved.json", cfg)
        with _thread_limit():
            HANDLERS[args.command](cfg, out, args)
        return EXIT_OK
    except (UsageError, DimensionError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IncompatibilityError, DomainError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SetVecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
