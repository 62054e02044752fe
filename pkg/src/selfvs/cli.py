"""Command-line entry point: ``python -m selfvs <subcommand> ...``.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
Every subcommand stages its outputs in a temporary directory and moves
them into place only after the run succeeded; a failed run leaves a
``<out>.failed`` marker holding the error message and nothing else.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import shutil
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import gradcheck as gc
from .data import Dataset, SynthConfig, generate_synthetic, load_manifest, load_splits, make_splits, save_dataset, save_splits
from .errors import ConfigurationError, SelfVSError
from .evaluation import DEFAULT_BUDGET, MetricsReport, aggregate_reports, evaluate_dataset
from .model import ModelConfig, StudentModel
from .tensor import Rng
from .training import (Checkpoint, FinetuneConfig, PretrainConfig, finetune, load_checkpoint, pretrain,
                       save_checkpoint)


class UsageError(SelfVSError):
    """Bad command-line usage; maps to exit status 2."""


# -- configuration ----------------------------------------------------------

@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    budget_ratio: float = DEFAULT_BUDGET
    k: int = 5
    data: str | None = None
    splits: str | None = None
    checkpoint: str | None = None
    out: str | None = None
    seed: int = 0

    SECTIONS = {"model": ModelConfig, "pretrain": PretrainConfig, "finetune": FinetuneConfig, "synth": SynthConfig}

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        for key, value in doc.items():
            if key in cls.SECTIONS:
                section = cls.SECTIONS[key]
                allowed = {f.name for f in fields(section)}
                bad = set(value) - allowed
                if bad:
                    raise UsageError(f"unknown keys in config section {key!r}: {sorted(bad)}")
                if section is ModelConfig:
                    # derived widths/depths must follow the overridden sizes, not the defaults
                    base = {f.name: getattr(cfg.model, f.name) for f in fields(ModelConfig)
                            if f.name not in ("d_ff", "first_stage_layers")}
                    setattr(cfg, key, ModelConfig(**{**base, **value}))
                else:
                    setattr(cfg, key, replace(getattr(cfg, key), **value))
            else:
                setattr(cfg, key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = asdict(v) if f.name in self.SECTIONS else v
        return out


def _override(obj, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    return replace(obj, **changes) if changes else obj


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("data", "splits", "out", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "checkpoint", None) is not None:
        cfg.checkpoint = args.checkpoint
    return cfg


# -- output staging ---------------------------------------------------------

@contextlib.contextmanager
def staged_output(out):
    """Yield a scratch directory whose contents replace ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    marker = out.parent / (out.name + ".failed")
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        marker.write_text(f"{type(exc).__name__}: {exc}\n")
        raise
    out.mkdir(exist_ok=True)
    for item in sorted(tmp.iterdir()):
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        elif target.exists():
            target.unlink()
        item.replace(target)
    tmp.rmdir()
    if marker.exists():
        marker.unlink()


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _require(value, flag):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _load_dataset(cfg: RunConfig) -> Dataset:
    return load_manifest(_require(cfg.data, "--data"))


def _model_config_for(cfg: RunConfig, dataset: Dataset) -> ModelConfig:
    """Input and teacher widths always follow the data."""
    mc = replace(cfg.model, input_dim=dataset.input_dim, teacher_dim=dataset.teacher_dim)
    mc.validate()
    return mc


def _histogram_rows(history: dict):
    for epoch, h in enumerate(history.get("histograms", []), start=1):
        yield [epoch, h["min"], h["max"], h["min_spread"]] + list(h["counts"])


def _loss_rows(history: dict):
    return [(i, loss) for i, loss in enumerate(history.get("loss", []), start=1)]


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = build_config(args)
    synth = _override(cfg.synth, n_videos=args.videos, n_frames=args.frames, input_dim=args.dim,
                      teacher_dim=args.teacher_dim, sparsity=args.sparsity, noise=args.noise, seed=args.seed)
    k = args.k if args.k is not None else cfg.k
    try:
        synth.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    if k > synth.n_videos:
        raise UsageError(f"--k {k} exceeds the number of videos ({synth.n_videos})")
    out = _require(cfg.out, "--out")
    dataset, planted = generate_synthetic(synth)
    with staged_output(out) as tmp:
        save_dataset(dataset, tmp)
        save_splits(make_splits(dataset, k=k, seed=synth.seed), tmp / "splits.json")
        rows = [(vid, i, w) for vid, p in planted.items() for i, w in enumerate(p)]
        _write_csv(tmp / "planted.csv", ("video_id", "frame_index", "weight"), rows)
    print(f"wrote {len(dataset)} videos to {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = build_config(args)
    loss_kind = {"ce": "cross_entropy", "mse": "mse", None: None}[args.loss]
    pcfg = _override(cfg.pretrain, epochs=args.epochs, batch_size=args.batch_size, lr_max=args.lr,
                     warmup_epochs=args.warmup, loss_kind=loss_kind, seed=args.seed)
    try:
        pcfg.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    out = _require(cfg.out, "--out")
    dataset = _load_dataset(cfg)
    model = StudentModel(_model_config_for(cfg, dataset), seed=cfg.seed)
    with staged_output(out) as tmp:
        t0 = time.perf_counter()
        ckpt = pretrain(model, dataset, pcfg)
        save_checkpoint(ckpt, tmp / "checkpoint")
        _write_csv(tmp / "loss.csv", ("epoch", "loss"), _loss_rows(ckpt.history))
        bins = [f"bin{i}" for i in range(len(ckpt.history["histograms"][0]["counts"]))]
        _write_csv(tmp / "histogram.csv", ["epoch", "min", "max", "min_spread"] + bins, _histogram_rows(ckpt.history))
    print(f"pretrained {pcfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; final loss {ckpt.history['loss'][-1]:.6f}")
    return 0


def _load_splits_for(cfg: RunConfig, dataset: Dataset):
    return load_splits(_require(cfg.splits, "--splits"), dataset.ids)


def _check_split_index(index: int, k: int) -> None:
    if not 0 <= index < k:
        raise UsageError(f"--split {index} out of range for {k} splits")


def cmd_finetune(args) -> int:
    cfg = build_config(args)
    fcfg = _override(cfg.finetune, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                     weight_decay=args.weight_decay, seed=args.seed)
    try:
        fcfg.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    out = _require(cfg.out, "--out")
    dataset = _load_dataset(cfg)
    splits = _load_splits_for(cfg, dataset)
    _check_split_index(args.split, splits.k)
    init = load_checkpoint(args.init) if args.init else None
    mc = init.model_config if init is not None else _model_config_for(cfg, dataset)
    if mc.input_dim != dataset.input_dim:
        raise UsageError(f"checkpoint input_dim {mc.input_dim} does not match data ({dataset.input_dim})")
    model = StudentModel(mc, seed=cfg.seed)
    with staged_output(out) as tmp:
        ckpt = finetune(model, dataset, splits[args.split].train, fcfg, init=init)
        ckpt.config["split"] = args.split
        save_checkpoint(ckpt, tmp / "checkpoint")
        _write_csv(tmp / "loss.csv", ("epoch", "loss"), _loss_rows(ckpt.history))
    print(f"fine-tuned split {args.split} ({'pretrained' if init else 'fresh'} init); final loss {ckpt.history['loss'][-1]:.6f}")
    return 0


def checkpoint_scores(ckpt: Checkpoint, samples) -> dict[str, np.ndarray]:
    """Scores a checkpoint assigns to each sample, in the mode it was trained in."""
    model = ckpt.build_model()
    mode = "softmax" if ckpt.config.get("phase") == "pretrain" else "sigmoid"
    return {s.id: model.scores(s.frame_features, score_mode=mode) for s in samples}


def _predictions(kind: str, samples, checkpoint: Checkpoint | None, seed: int, workers: int):
    if kind == "gt":
        for s in samples:
            if s.gt_scores is None:
                raise SelfVSError(f"video {s.id!r} has no gt_scores for the gt predictor")
        return {s.id: s.gt_scores for s in samples}
    if kind == "random":
        rng = Rng(seed)
        return {s.id: rng.random(s.n_frames) for s in samples}
    model = checkpoint.build_model()
    mode = "softmax" if checkpoint.config.get("phase") == "pretrain" else "sigmoid"
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        scores = list(pool.map(lambda s: model.scores(s.frame_features, score_mode=mode), samples))
    return {s.id: sc for s, sc in zip(samples, scores)}


def cmd_eval(args) -> int:
    cfg = build_config(args)
    out = _require(cfg.out, "--out")
    budget = args.budget if args.budget is not None else cfg.budget_ratio
    if not 0.0 < budget <= 1.0:
        raise UsageError(f"--budget must be in (0, 1], got {budget}")
    dataset = _load_dataset(cfg)
    splits = _load_splits_for(cfg, dataset)
    indices = [args.split] if args.split is not None else list(range(splits.k))
    for i in indices:
        _check_split_index(i, splits.k)
    if args.predictor == "model" and cfg.checkpoint is None:
        raise UsageError("--checkpoint is required with --predictor model")
    # load and validate everything before producing output
    jobs = []
    for i in indices:
        samples = dataset.subset(splits[i].test)
        for s in samples:
            if s.user_annotations is None or s.segments is None:
                raise SelfVSError(f"video {s.id!r}: test videos need user_annotations and segments")
        ckpt = load_checkpoint(cfg.checkpoint.format(split=i)) if args.predictor == "model" else None
        jobs.append((i, samples, ckpt))
    reports = []
    for i, samples, ckpt in jobs:
        preds = _predictions(args.predictor, samples, ckpt, cfg.seed + i, args.workers)
        meta = {"split": i, "predictor": args.predictor, "dataset": dataset.name}
        reports.append(evaluate_dataset(preds, samples, budget, meta))
    with staged_output(out) as tmp:
        for (i, _, _), rep in zip(jobs, reports):
            (tmp / f"report_split{i}.json").write_text(rep.to_json())
            (tmp / f"report_split{i}.csv").write_text(rep.to_csv())
        agg = aggregate_reports(reports)
        (tmp / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    m = agg["means"]
    print(f"tau={_show(m['tau'])} rho={_show(m['rho'])} F={_show(m['f_score'])} over {len(reports)} split(s)")
    return 0


def _show(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def render_svg(series: dict[str, np.ndarray], width: int = 640, height: int = 240) -> str:
    """Line plot of score against frame index, one polyline per series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c"]
    pad = 20
    top = max(float(np.max(v)) for v in series.values())
    top = top if top > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">']
    for k, (name, ys) in enumerate(series.items()):
        n = len(ys)
        xs = [pad + (width - 2 * pad) * (i / (n - 1) if n > 1 else 0.5) for i in range(n)]
        pts = " ".join(f"{x:.2f},{height - pad - (height - 2 * pad) * float(y) / top:.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{colors[k % len(colors)]}" stroke-width="1.5" points="{pts}">'
                     f"<title>{name}</title></polyline>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_score(args) -> int:
    cfg = build_config(args)
    out = _require(cfg.out, "--out")
    dataset = _load_dataset(cfg)
    ckpt = load_checkpoint(_require(cfg.checkpoint, "--checkpoint"))
    if args.video not in dataset.ids:
        raise SelfVSError(f"unknown video id {args.video!r}")
    sample = dataset.get(args.video)
    scores = checkpoint_scores(ckpt, [sample])[sample.id]
    header = ["frame_index", "score"]
    cols = [scores]
    if sample.gt_scores is not None:
        header.append("gt_score")
        cols.append(sample.gt_scores)
    with staged_output(out) as tmp:
        _write_csv(tmp / f"{sample.id}.csv", header, ([i] + [c[i] for c in cols] for i in range(sample.n_frames)))
        if args.svg:
            series = {"score": scores}
            if sample.gt_scores is not None:
                series["gt_score"] = sample.gt_scores
            (tmp / args.svg).write_text(render_svg(series))
    print(f"wrote scores for {sample.id} ({sample.n_frames} frames) to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.inject_fault is not None and args.inject_fault not in gc.component_names():
        raise UsageError(f"unknown component {args.inject_fault!r}; choose from {', '.join(gc.component_names())}")
    t0 = time.perf_counter()
    results = gc.run_gradcheck(args.seed if args.seed is not None else 0, h=args.h, tol=args.tol,
                               fault=args.inject_fault)
    print(gc.format_results(results, time.perf_counter() - t0))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# -- parser -----------------------------------------------------------------

def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _common(p: argparse.ArgumentParser, data=True, splits=True) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON run configuration; flags override its values")
    if data:
        p.add_argument("--data", metavar="PATH", help="dataset manifest.json")
    if splits:
        p.add_argument("--splits", metavar="PATH", help="splits JSON file (unused by pretrain and score)")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N", help="seed for initialization, shuffling and dropout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfvs", description="Self-supervised video summarization laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic dataset and splits")
    _common(p, data=False, splits=False)
    p.add_argument("--videos", type=_positive_int, help="number of videos")
    p.add_argument("--frames", type=_positive_int, help="frames per video")
    p.add_argument("--dim", type=_positive_int, help="frame feature width")
    p.add_argument("--teacher-dim", type=_positive_int, help="teacher representation width")
    p.add_argument("--sparsity", type=float, help="fraction of high-importance frames")
    p.add_argument("--noise", type=float, help="teacher noise scale")
    p.add_argument("--k", type=_positive_int, help="number of splits (default 5)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="distil teacher representations into the student")
    _common(p)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--warmup", type=int, help="warmup epochs")
    p.add_argument("--loss", choices=("ce", "mse"), help="distillation loss (default ce)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fit frame scores on the train side of one split")
    _common(p)
    p.add_argument("--split", type=int, default=0, help="split index (default 0)")
    p.add_argument("--init", metavar="DIR", help="checkpoint to start from; omit for fresh weights")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate the test side of splits")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint; '{split}' is replaced by the split index")
    p.add_argument("--split", type=int, help="evaluate one split (default all)")
    p.add_argument("--predictor", choices=("model", "gt", "random"), default="model",
                   help="score source: a checkpoint, the ground truth, or uniform noise")
    p.add_argument("--budget", type=float, help=f"summary length as a fraction of frames (default {DEFAULT_BUDGET})")
    p.add_argument("--workers", type=_positive_int, default=1, help="threads for scoring videos")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="export per-frame scores of one video as CSV (and SVG)")
    _common(p)
    p.add_argument("--checkpoint", metavar="DIR", help="checkpoint directory")
    p.add_argument("--video", required=True, help="video id")
    p.add_argument("--svg", metavar="NAME", help="also write a score plot with this file name")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--config", metavar="PATH", help="accepted for uniformity; unused")
    p.add_argument("--seed", type=int, metavar="N", help="chooses which entries are probed")
    p.add_argument("--h", type=float, default=gc.DEFAULT_H, help="finite-difference step")
    p.add_argument("--tol", type=float, default=gc.DEFAULT_TOL, help="relative error threshold")
    p.add_argument("--inject-fault", metavar="COMPONENT", help="corrupt one component's analytic gradient (self-test)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (SelfVSError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
