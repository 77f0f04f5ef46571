"""``msedf`` command line: synth, train, evaluate, caption, ablate, gradcheck.

Machine-readable output goes to stdout as JSON, diagnostics to stderr.
Exit codes: 0 ok, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

from .data import DatasetBundle, SyntheticSpec, generate_synthetic, load_dataset
from .gradcheck import TOLERANCE, TinyDims, gradcheck_grid
from .inference import DecodeConfig, build_train_pool, caption_image, decode_split
from .metrics import MetricReport, corpus_evaluate
from .model import ModelConfig, init_params
from .stacking import STRATEGIES, StackConfig
from .training import TrainConfig, fit, load_checkpoint, save_checkpoint


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    captions: str = "captions.json"
    features_a: str = "features_a.msef"
    features_b: str = "features_b.msef"
    output_dir: str = "run"
    strategy: str = "lws"
    depth: int = 3
    embed_dim: int = 256
    gru_hidden: int = 256
    l1_out: int = 256
    l2_out: int = 512
    dropout_rate: float = 0.5
    batch_size: int = 64
    patience: int = 8
    max_epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    beam_width: int = 5
    k_similar: int = 4
    rerank: bool = True
    decode_max_len: int | None = None
    caption_max_len: int | None = None
    min_count: int = 1
    seed: int = 0

    def stack(self) -> StackConfig:
        return StackConfig(self.strategy, self.depth)

    def model_config(self, bundle: DatasetBundle) -> ModelConfig:
        return ModelConfig(bundle.vocab.size, bundle.store_a.dim, bundle.store_b.dim, self.stack(),
                           self.embed_dim, self.gru_hidden, self.l1_out, self.l2_out, self.dropout_rate)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.patience, self.max_epochs, self.seed, self.lr,
                           self.beta1, self.beta2, self.eps)

    def decode_config(self, bundle: DatasetBundle, **overrides) -> DecodeConfig:
        max_len = self.decode_max_len if self.decode_max_len is not None else bundle.max_len + 1
        base = dict(beam_width=self.beam_width, max_len=max_len, k_similar=self.k_similar, rerank=self.rerank)
        base.update(overrides)
        return DecodeConfig(**base)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: str | None, overrides=()) -> tuple[RunConfig, Path]:
    """Read a JSON config (unknown keys rejected), apply ``key=value`` overrides and MSEDF_SEED."""
    doc = {}
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        base = p.parent
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        doc[key] = _parse_value(value)
    if "MSEDF_SEED" in os.environ:
        doc["seed"] = int(os.environ["MSEDF_SEED"])
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**doc)
    try:
        cfg.stack()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg, base


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_bundle(cfg: RunConfig, base: Path) -> DatasetBundle:
    return load_dataset(_resolve(base, cfg.captions), _resolve(base, cfg.features_a),
                        _resolve(base, cfg.features_b), cfg.caption_max_len, cfg.min_count)


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def train_run(cfg: RunConfig, bundle: DatasetBundle, log=None):
    params = init_params(cfg.model_config(bundle), cfg.seed)
    return fit(params, bundle.train, bundle.val, cfg.train_config(), vocab=bundle.vocab, log=log)


def cmd_train(cfg: RunConfig, base: Path) -> int:
    bundle = _load_bundle(cfg, base)
    best, history = train_run(cfg, bundle, log=_log)
    out = _resolve(base, cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(best, None, bundle.vocab, cfg.train_config(), out / "checkpoint.msck")
    (out / "history.json").write_text(json.dumps(history, indent=2) + "\n", encoding="utf-8")
    _emit({"checkpoint": str(out / "checkpoint.msck"), "history": str(out / "history.json"),
           "epochs": len(history)})
    return 0


def evaluate_split(params, bundle: DatasetBundle, split: str, dcfg: DecodeConfig, greedy: bool = False):
    data = bundle.splits[split]
    if len(data) == 0:
        raise ValueError(f"split {split!r} is empty")
    pool = build_train_pool(params, bundle.train) if dcfg.rerank and not greedy else None
    captions = decode_split(params, data, dcfg, bundle.vocab, pool, greedy=greedy)
    return corpus_evaluate(captions, data.references), captions


def _checkpoint_for(bundle: DatasetBundle, path):
    ckpt = load_checkpoint(path)
    if ckpt.vocab.digest() != bundle.vocab.digest():
        raise ValueError("checkpoint vocabulary does not match the dataset vocabulary; refusing to evaluate")
    return ckpt


def cmd_evaluate(cfg: RunConfig, base: Path, args) -> int:
    bundle = _load_bundle(cfg, base)
    ckpt = _checkpoint_for(bundle, args.checkpoint)
    overrides = {}
    if args.beam is not None:
        overrides["beam_width"] = args.beam
    if args.rerank is not None:
        overrides["rerank"] = args.rerank
    greedy = bool(args.greedy)
    if greedy:
        overrides.setdefault("rerank", False)
    dcfg = cfg.decode_config(bundle, **overrides)
    report, captions = evaluate_split(ckpt.params, bundle, args.split, dcfg, greedy)
    if args.per_image:
        data = bundle.splits[args.split]
        dump = [{"image_id": i, "caption": " ".join(c)} for i, c in zip(data.image_ids, captions)]
        Path(args.per_image).write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
    _emit(report.to_dict())
    return 0


def cmd_caption(cfg: RunConfig, base: Path, args) -> int:
    bundle = _load_bundle(cfg, base)
    ckpt = _checkpoint_for(bundle, args.checkpoint)
    overrides = {"rerank": False, "beam_width": 1} if args.greedy else {}
    dcfg = cfg.decode_config(bundle, **overrides)
    pool = build_train_pool(ckpt.params, bundle.train) if dcfg.rerank else None
    out = [{"image_id": i, "caption": caption_image(ckpt.params, (bundle.store_a, bundle.store_b), i, dcfg,
                                                    bundle.vocab, pool)} for i in args.image]
    _emit(out)
    return 0


TABLE_COLUMNS = ("DC", "Stack", "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr")


def ablation_cells(strategies, depths) -> list[StackConfig]:
    cells = [StackConfig("ns", 1)]
    for depth in depths:
        for s in strategies:
            if s != "ns":
                cells.append(StackConfig(s, depth))
    return cells


def run_ablation(cfg: RunConfig, bundle: DatasetBundle, strategies, depths, log=None) -> list[dict]:
    rows = []
    for stack in ablation_cells(strategies, depths):
        label = f"{stack.label}@{stack.depth}"
        row = {"dc": stack.depth, "stack": stack.label}
        try:
            cell_cfg = dataclasses.replace(cfg, strategy=stack.strategy, depth=stack.depth)
            best, _ = train_run(cell_cfg, bundle)
            report, _ = evaluate_split(best, bundle, "test", cell_cfg.decode_config(bundle))
            row.update({k: round(v, 4) for k, v in report.to_dict().items()})
        except Exception as e:  # one failed cell must not sink the grid
            row["error"] = f"{type(e).__name__}: {e}"
            if log:
                log(f"cell {label} failed: {row['error']}")
        rows.append(row)
        if log:
            log(f"cell {label} done")
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [" & ".join(TABLE_COLUMNS)]
    for r in rows:
        if "error" in r:
            cells = [str(r["dc"]), r["stack"], f"error: {r['error']}"]
        else:
            cells = [str(r["dc"]), r["stack"]] + [f"{r[k]:.4f}" for k in MetricReport.KEYS]
        lines.append(" & ".join(cells))
    return "\n".join(lines) + "\n"


def _csv(text: str, conv=str) -> list:
    return [conv(x.strip()) for x in text.split(",") if x.strip()]


def cmd_ablate(cfg: RunConfig, base: Path, args) -> int:
    strategies = _csv(args.strategies)
    bad = [s for s in strategies if s not in STRATEGIES]
    if bad:
        raise ConfigError(f"unknown strategies: {', '.join(bad)}")
    depths = _csv(args.depths, int)
    for d in depths:
        StackConfig("ss", d)
    bundle = _load_bundle(cfg, base)
    rows = run_ablation(cfg, bundle, strategies, depths, log=_log)
    text = format_table(rows)
    sys.stderr.write(text)
    if args.out:
        Path(args.out + ".txt").write_text(text, encoding="utf-8")
        Path(args.out + ".json").write_text(json.dumps({"rows": rows}, indent=2) + "\n", encoding="utf-8")
    _emit({"rows": rows})
    return 0 if all("error" not in r for r in rows) else 1


def cmd_gradcheck(args) -> int:
    if args.dims != "tiny":
        raise ConfigError(f"unknown dims preset {args.dims!r}; only 'tiny' is available")
    report = gradcheck_grid(TinyDims(), args.seed)
    ok = all(r["pass"] for r in report)
    _emit({"tolerance": TOLERANCE, "cells": [dict(r, max_rel_error=float(r["max_rel_error"])) for r in report],
           "pass": ok})
    return 0 if ok else 1


def cmd_synth(args) -> int:
    doc = {}
    if args.spec:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    spec = SyntheticSpec.from_dict(doc)
    paths = generate_synthetic(spec, args.out)
    _emit({"captions": str(paths[0]), "features_a": str(paths[1]), "features_b": str(paths[2])})
    return 0


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msedf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return p

    with_config(sub.add_parser("train", help="train with early stopping and write a checkpoint"))

    p = with_config(sub.add_parser("evaluate", help="print the metric report for a split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true")
    mode.add_argument("--beam", type=int)
    p.add_argument("--rerank", dest="rerank", action="store_true", default=None)
    p.add_argument("--no-rerank", dest="rerank", action="store_false")
    p.add_argument("--per-image", metavar="FILE", help="also write each image's caption to FILE")

    p = with_config(sub.add_parser("caption", help="caption images by id"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", action="append", required=True)
    p.add_argument("--greedy", action="store_true")

    p = with_config(sub.add_parser("ablate", help="train and evaluate a strategy x depth grid"))
    p.add_argument("--strategies", default="ss,cs,gws,lws")
    p.add_argument("--depths", default="1,2,3")
    p.add_argument("--out", metavar="PREFIX", help="write PREFIX.txt and PREFIX.json")

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--dims", default="tiny")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("spec", nargs="?", help="SyntheticSpec JSON (defaults when omitted)")
    p.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "synth":
            return cmd_synth(args)
        cfg, base = load_run_config(args.config, args.set)
        if args.command == "train":
            return cmd_train(cfg, base)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, base, args)
        if args.command == "caption":
            return cmd_caption(cfg, base, args)
        return cmd_ablate(cfg, base, args)
    except ConfigError as e:
        _log(f"config error: {e}")
        return 2
    except (ValueError, KeyError, OSError, FloatingPointError) as e:
        _log(f"error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
