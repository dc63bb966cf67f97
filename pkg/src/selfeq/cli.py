"""Command-line entry point: gen-data, augment, train, eval, explain, inspect.

Every command writes only under --out, exits 0 on success, 1 on a
validation error, and 2 on an I/O error. SELFEQ_LOG={error|info|debug}
controls logging.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps reruns bit-identical and the micro model fast
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import data as d
from . import evaluate as ev
from . import explain as ex
from . import model as m
from .config import ConfigError, RunConfig, load_config
from .train import train_run

logger = logging.getLogger("selfeq")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.exit(1, f"{self.prog}: {message}\n")


class ValidationFailure(ValueError):
    pass


def _require(cond: bool, message: str):
    if not cond:
        raise ValidationFailure(message)


def _config(args) -> RunConfig:
    if args.config is None:
        return RunConfig()
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    path = d.generate_dataset(
        out,
        seed=cfg.seed,
        n_train=cfg.data.n_train,
        n_eval=cfg.data.n_eval,
        image_size=cfg.data.image_size,
        region_fraction=cfg.data.region_fraction,
        paraphrase_fraction=cfg.data.paraphrase_fraction,
        hard_fraction=cfg.data.hard_fraction,
    )
    print(f"wrote {path}")
    return 0


def cmd_augment(args) -> int:
    cfg = _config(args)
    _require(bool(cfg.data.path), "config must set data.path to the input JSONL")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    endpoint = None
    if cfg.augment.endpoint_url:
        endpoint = aug.EndpointConfig(
            url=cfg.augment.endpoint_url,
            timeout_s=cfg.augment.timeout_s,
            retries=cfg.augment.retries,
            concurrency=cfg.augment.concurrency,
        )
    report = aug.augment_dataset(
        cfg.data.path, out / "augmented.jsonl",
        mode=cfg.augment.mode, seed=cfg.seed, endpoint=endpoint,
    )
    (out / "coverage.json").write_text(
        json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    )
    print(f"coverage {report.coverage:.4f} ({report.succeeded}/{report.total})")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    _require(bool(cfg.data.path), "config must set data.path to the dataset JSONL")
    paths = train_run(cfg, cfg.data.path, args.out, mode=cfg.mode)
    print(f"trained {cfg.mode} run: {paths['final']}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    _require(args.checkpoint is not None, "--checkpoint is required")
    _require(bool(cfg.data.path), "config must set data.path to the dataset JSONL")
    params, model_cfg = m.load_checkpoint(args.checkpoint)
    vocab = d.build_vocabulary()
    rows = d.read_dataset(cfg.data.path)
    report = ev.evaluate(
        params, model_cfg, vocab, rows, Path(cfg.data.path).parent, split=args.split
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"report_{args.split}.json"
    ev.write_report(report, path)
    print(f"{args.split}: accuracy {report.accuracy:.4f} ({report.n_hits}/{report.n_total}) -> {path}")
    return 0


def cmd_explain(args) -> int:
    cfg = _config(args)
    _require(args.checkpoint is not None, "--checkpoint is required")
    _require(
        args.sample_id is not None or args.caption is not None,
        "--sample-id and/or --caption required",
    )
    params, model_cfg = m.load_checkpoint(args.checkpoint)
    vocab = d.build_vocabulary()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sample_id is not None:
        _require(bool(cfg.data.path), "config must set data.path to resolve --sample-id")
        rows = {r["sample_id"]: r for r in d.read_dataset(cfg.data.path)}
        _require(args.sample_id in rows, f"sample_id {args.sample_id!r} not in dataset")
        row = rows[args.sample_id]
        image = d.load_raster(Path(cfg.data.path).parent / row["image"])
        caption = args.caption or row["caption"]
        sample_id = args.sample_id
    else:
        image = np.full((model_cfg.image_size, model_cfg.image_size, 3), 0.1, np.float32)
        caption = args.caption
        sample_id = "adhoc"
    amap = ex.gradcam(params, model_cfg, vocab, image, caption)
    up = ex.upsample_map(amap, model_cfg.image_size)
    peak = float(up.max())
    if peak > 0:
        up = up / peak
    path = out / ex.map_filename(sample_id, caption)
    ex.export_map(up, path)
    print(f"wrote {path}")
    return 0


def cmd_inspect(args) -> int:
    _require(args.checkpoint is not None, "--checkpoint is required")
    params, model_cfg = m.load_checkpoint(args.checkpoint)
    total = sum(int(np.prod(p.shape)) for p in params.values())
    print(f"config: {model_cfg}")
    print(f"parameters: {len(params)} tensors, {total} values")
    for name in sorted(params):
        print(f"  {name}: {tuple(params[name].shape)}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfeq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
        p.add_argument("--mode", choices=["baseline", "selfeq"], default=None)
        p.add_argument("--split", default="eval_seen")
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--sample-id", dest="sample_id", default=None)
        p.add_argument("--caption", default=None)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("SELFEQ_LOG", "error").upper(), logging.ERROR)
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValidationFailure, ConfigError, d.DatasetError, m.CheckpointError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
