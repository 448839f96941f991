"""Command-line entry point: synth-gen, train, detect, evaluate and gradcheck."""
from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import attention as A
from .checkpoint import CheckpointError, load_tensors
from .config import ConfigError, RunConfig, load_config
from .data import SynthConfig, Volume, preprocess_hu, read_dataset, synth_generate, write_dataset
from .evaluation import evaluate, export_froc_csv, format_summary
from .gradcheck import NonFiniteError, grad_check
from .inference import PipelineResult, detect
from .io import DataError, read_annotations, read_detections, read_mhd, write_detections
from .models import build_fpr, build_rpn
from .tensor import Tensor, make_node, no_grad
from .training import NumericalError, fpr_samples_from_candidates, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- helpers -------------------------------------------------------------------
def _config(args, extra: dict | None = None) -> RunConfig:
    """Profile, then --config, then --set, then dedicated flags."""
    top = dict(extra or {})
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out is not None:
        top["out"] = str(args.out)
    return load_config(args.config, args.profile, list(args.set or []) + [top])


def _run_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc
    (out / "config.yaml").write_text(cfg.dump())
    (out / "run.json").write_text(json.dumps({"seed": cfg.seed, "version": version_string()}, indent=2) + "\n")
    return out


def volume_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def synth_volumes(synth: SynthConfig, n: int, seed: int, prefix: str = "synth", workers: int = 1) -> list[Volume]:
    seeds = volume_seeds(seed, n)

    def one(i):
        return synth_generate(SynthConfig(**{**synth.__dict__, "seed": seeds[i]}), f"{prefix}{i:04d}")

    return _map(one, range(n), workers)


def _map(fn, items, workers: int):
    items = list(items)
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))  # map keeps input order


def _infer_map(fn, items, models, workers: int):
    """``_map`` for inference: models fixed in eval mode and graph recording
    off for the whole batch, so worker threads never toggle shared state."""
    for m in models:
        m.eval()
    with no_grad():
        return _map(fn, items, workers)


def _load_volumes(cfg: RunConfig, workers: int) -> tuple[list[Volume], list[Volume]]:
    """(train, val) preprocessed volumes from the dataset directory or the generator."""
    d = cfg.data
    if d.dir is not None:
        if not Path(d.dir).is_dir():
            raise DataError(f"dataset directory {d.dir} does not exist")
        vols = read_dataset(d.dir)
    else:
        vols = synth_volumes(d.synth, d.n_volumes + d.n_val, cfg.seed, workers=workers)
    vols = [preprocess_hu(v) for v in vols]
    if not vols:
        raise DataError("no volumes")
    n_val = min(d.n_val, len(vols) - 1)
    return vols[: len(vols) - n_val], vols[len(vols) - n_val :]


def _load_model(kind: str, ckpt: str, cfg: RunConfig):
    path = Path(ckpt)
    if not path.is_file():
        raise DataError(f"checkpoint {path} does not exist")
    side = path.parent / "config.yaml"
    if side.is_file():
        saved = load_config(side, "paper")
        cfg = RunConfig(**{**cfg.__dict__, kind: getattr(saved, kind)})
    model = build_rpn(cfg.rpn) if kind == "rpn" else build_fpr(cfg.fpr)
    try:
        model.load_state_dict(load_tensors(path))
    except CheckpointError as exc:
        raise DataError(f"checkpoint {path} does not match the {kind} config: {exc}") from exc
    return model.astype(np.float32)


# -- commands ------------------------------------------------------------------
def cmd_synth_gen(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.data.n_volumes
    if n < 1:
        raise UsageError("--n must be positive")
    out = _run_dir(cfg)
    vols = synth_volumes(cfg.data.synth, n, cfg.seed, workers=args.workers)
    write_dataset(out, vols, {"seed": cfg.seed, "synth": cfg.to_dict()["data"]["synth"]})
    print(f"wrote {n} volumes to {out}")
    return EXIT_OK


def _write_metrics(path: Path, history: list[dict]):
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_loss", "val_loss", "seconds"])
        for r in history:
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), "" if r["val_loss"] is None else repr(r["val_loss"]), f"{r['seconds']:.3f}"])


def cmd_train(args) -> int:
    stage = args.stage or _config(args).stage
    tc_name = f"{stage}_train"
    patch = {}
    if args.epochs is not None:
        patch["epochs"] = args.epochs
    if args.lr is not None:
        patch["lr"] = args.lr
        patch["milestones"] = []
    cfg = _config(args, {"stage": stage, tc_name: patch})
    tc = getattr(cfg, tc_name)
    tc.seed = cfg.seed
    train, val = _load_volumes(cfg, args.workers)
    out = _run_dir(cfg)
    if stage == "rpn":
        model = build_rpn(cfg.rpn, seed=cfg.seed)
        data, val_data = train, (val or None)
    else:
        model = build_fpr(cfg.fpr, seed=cfg.seed)
        cands = _fpr_candidates(args, cfg, train + val)
        data = (train, fpr_samples_from_candidates(train, cands[: len(train)]))
        val_data = (val, fpr_samples_from_candidates(val, cands[len(train) :])) if val else None
    model.save(out / "initial.ckpt")
    log_lines = []

    def log(rec):
        log_lines.append(rec)
        print(json.dumps(rec), flush=True)

    try:
        result = train_loop(stage, model, data, tc, val_data, checkpoint=out / f"{stage}.ckpt", log=log)
    finally:
        _write_metrics(out / "metrics.csv", log_lines)
    print(f"best epoch {result.best_epoch} loss {result.best_loss:.6f}; checkpoint {out / f'{stage}.ckpt'}")
    return EXIT_OK


def _fpr_candidates(args, cfg: RunConfig, vols: list[Volume]):
    if args.candidates:
        table = read_detections(args.candidates)
        return [table.get(v.series_id, []) for v in vols]
    if not args.rpn:
        raise UsageError("fpr training needs --rpn CHECKPOINT or --candidates CSV")
    rpn = _load_model("rpn", args.rpn, cfg)
    pc = cfg.pipeline
    return _infer_map(lambda v: detect(rpn, v.intensities, None, pc).candidates, vols, [rpn], args.workers)


def _detect_inputs(args, cfg: RunConfig) -> list[Volume]:
    if args.volume:
        vols = []
        for p in args.volume:
            arr, spacing, origin = read_mhd(p)
            vols.append(Volume(arr, spacing, origin, series_id=Path(p).stem))
        return [preprocess_hu(v) for v in vols]
    return _load_volumes(cfg, args.workers)[0] if cfg.data.dir else []


def cmd_detect(args) -> int:
    cfg = _config(args)
    if args.data:
        cfg.data.dir = args.data
    vols = _detect_inputs(args, cfg)
    if not vols:
        raise UsageError("detect needs --volume FILE(s) or --data DIR")
    if args.tta:
        cfg.pipeline.tta = True
    rpn = _load_model("rpn", args.rpn, cfg)
    fpr = None
    if args.fpr and not args.rpn_only:
        fpr = _load_model("fpr", args.fpr, cfg)
    out = _run_dir(cfg)
    results: list[PipelineResult] = _infer_map(
        lambda v: detect(rpn, v.intensities, fpr, cfg.pipeline), vols, [m for m in (rpn, fpr) if m is not None], args.workers
    )
    dets = {v.series_id: r.final for v, r in zip(vols, results)}
    write_detections(out / "detections.csv", dets)
    for v, r in zip(vols, results):
        counts = ", ".join(f"{k}={n}" for k, n in r.plane_counts.items())
        print(f"{v.series_id}: pool={len(r.pool)} ({counts}) candidates={len(r.candidates)} final={len(r.final)}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    for p in (args.detections, args.annotations):
        if not Path(p).is_file():
            raise DataError(f"{p} does not exist")
    dets = read_detections(args.detections)
    ann = read_annotations(args.annotations)
    unknown = sorted(set(dets) - set(ann))
    if unknown:
        raise DataError(f"detections for series without annotations: {unknown[:5]}")
    result = evaluate(dets, ann)
    out = Path(args.out) if args.out else Path(args.detections).parent
    out.mkdir(parents=True, exist_ok=True)
    export_froc_csv(result, out / "froc.csv")
    print(format_summary(result))
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------
def _corrupt(t: Tensor) -> Tensor:
    """Identity whose backward is off by 1% (negative control)."""
    return make_node(t.data, [t], lambda g: [g * 1.01], "corrupt")


def gradcheck_block(name: str, sizes, rng: np.random.Generator):
    """Module for a named block at input size (N, C, D, H, W)."""
    n, c, d, h, w = sizes
    builders = {
        "channel_attention": lambda: A.ChannelAttention(c, rng=rng),
        "spatial_attention": lambda: A.CrossSectionSpatialAttention(c, (d, h, w), rng=rng),
        "se": lambda: A.SEAttention(c, reduction=max(1, c // 2), rng=rng),
        "cbam_ca": lambda: A.CBAMChannelAttention(c, reduction=max(1, c // 2), rng=rng),
        "cbam_sa": lambda: A.CBAMSpatialAttention(rng=rng),
        "zoom_in": lambda: A.ZoomIn(c, rng=rng),
        "residual_unit": lambda: A.ResidualUnit(c, (d, h, w), groups=1, attention="proposed_ca_sa", reduction=max(1, c // 2), rng=rng),
    }
    if name not in builders:
        raise UsageError(f"unknown block {name!r}; choose from {', '.join(builders)}")
    return builders[name]()


GRADCHECK_BLOCKS = ("channel_attention", "spatial_attention", "se", "cbam_ca", "cbam_sa", "zoom_in", "residual_unit")


def cmd_gradcheck(args) -> int:
    if len(args.sizes) != 5 or min(args.sizes) < 1:
        raise UsageError("--sizes takes five positive integers N C D H W")
    rng = np.random.default_rng(args.seed or 0)
    module = gradcheck_block(args.block, args.sizes, rng).astype(np.float64)
    x = Tensor(rng.standard_normal(tuple(args.sizes)), requires_grad=True)
    inputs = {"x": x, **dict(module.named_parameters())}

    def fn():
        y = module(x)
        return _corrupt(y) if args.corrupt else y

    report = grad_check(fn, inputs, tolerance=args.tol, max_checks=args.max_checks, seed=args.seed or 0)
    for line in report.lines():
        print(line)
    print(f"{args.block}: {'PASS' if report.passed else 'FAIL'} worst={report.worst:.3e} tol={args.tol:g}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed (recorded in the run directory)")
    common.add_argument("--workers", type=int, default=1, help="threads for volume generation and tiled inference")
    common.add_argument("--profile", default="paper", help="named defaults: paper or desk")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. rpn.patch=64")

    p = _Parser(prog="nodule3d", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-gen", parents=[common], help="write a synthetic dataset")
    s.add_argument("--n", type=int, default=None, help="number of volumes")
    s.set_defaults(fn=cmd_synth_gen)

    s = sub.add_parser("train", parents=[common], help="train the rpn or fpr stage")
    s.add_argument("--stage", choices=("rpn", "fpr"), default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--lr", type=float, default=None, help="constant learning rate (drops the schedule)")
    s.add_argument("--rpn", default=None, help="rpn checkpoint supplying fpr candidates")
    s.add_argument("--candidates", default=None, help="detections CSV supplying fpr candidates")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="run the detection pipeline")
    s.add_argument("--volume", nargs="+", default=None, help="MetaImage file(s)")
    s.add_argument("--data", default=None, help="dataset directory")
    s.add_argument("--rpn", required=True)
    s.add_argument("--fpr", default=None)
    s.add_argument("--tta", action="store_true")
    s.add_argument("--rpn-only", action="store_true")
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("evaluate", parents=[common], help="FROC / CPM of a detections CSV")
    s.add_argument("--detections", required=True)
    s.add_argument("--annotations", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a block")
    s.add_argument("--block", choices=GRADCHECK_BLOCKS, default="channel_attention")
    s.add_argument("--sizes", type=int, nargs="+", default=[1, 4, 6, 6, 6], metavar="N C D H W")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-checks", type=int, default=40)
    s.add_argument("--corrupt", action="store_true", help="perturb the backward pass (negative control)")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
