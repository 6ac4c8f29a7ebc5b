"""Command-line entry point: ``ssmmot {synth,train,track,merge,eval,compare}``.

Stages talk to each other only through files (MOTChallenge text, ``seqinfo``
sidecars, checkpoints), so any stage can be run or replaced on its own.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
Every command accepts ``--config run.toml``; values found there override the
matching flags, which override built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import CHECKPOINT_FORMAT, __version__
from .association import AssociationConfig, KalmanMotion, SSMMotion, track_sequence
from .benchmark import prediction_ious
from .config import ConfigError, RunConfig, load_run_config
from .geometry import ImageSize
from .merging import MergeConfig, merge_results
from .metrics import REPORT_COLUMNS, MetricReport, evaluate
from .mot import parse_mot, read_seqinfo, write_mot
from .ssm import CheckpointError, ModelConfig, load_checkpoint
from .synthetic import KINDS, SyntheticConfig, write_sequence
from .training import (
    DEFAULT_JITTER_PX,
    SCHEDULES,
    NonFiniteLoss,
    load_dataset,
    train,
)

log = logging.getLogger("ssmmot")


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


def _build(cls, **kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {cls.__name__}: {exc}") from None


def _assoc_config(rc: RunConfig, args) -> AssociationConfig:
    d = AssociationConfig()
    return _build(
        AssociationConfig,
        tau_high=rc.resolve("association", "tau_high", getattr(args, "tau_high", None), d.tau_high),
        tau_low=rc.resolve("association", "tau_low", getattr(args, "tau_low", None), d.tau_low),
        iou_gate_high=rc.resolve("association", "iou_gate_high", None, d.iou_gate_high),
        iou_gate_low=rc.resolve("association", "iou_gate_low", None, d.iou_gate_low),
        max_age=rc.resolve("association", "max_age", getattr(args, "max_age", None), d.max_age),
        min_hits=rc.resolve("association", "min_hits", getattr(args, "min_hits", None), d.min_hits),
        new_track_score=rc.resolve("association", "new_track_score", None, d.new_track_score),
        history_len=rc.resolve("association", "history_len", None, d.history_len),
    )


def _synth_config(rc: RunConfig, args, **override) -> SyntheticConfig:
    d = SyntheticConfig()
    get = lambda key, flag, default: override.get(key, rc.resolve("synthetic", key, flag, default))
    return _build(
        SyntheticConfig,
        kind=get("kind", getattr(args, "kind", None), d.kind),
        objects=get("objects", args.objects, d.objects),
        frames=get("frames", args.frames, d.frames),
        image=_build(ImageSize, width=get("width", getattr(args, "width", None), d.image.width),
                     height=get("height", getattr(args, "height", None), d.image.height)),
        occlusion_rate=get("occlusion_rate", args.occlusion, d.occlusion_rate),
        det_noise_std=get("det_noise_std", args.noise, d.det_noise_std),
        seed=override.get("seed", rc.seed if rc.seed is not None else (args.seed or 0)),
        low_conf_fraction=get("low_conf_fraction", getattr(args, "low_conf_fraction", None),
                              d.low_conf_fraction),
        gap_windows=get("gap_windows", getattr(args, "gap_windows", None), d.gap_windows),
        gap_length=get("gap_length", getattr(args, "gap_length", None), d.gap_length),
    )


def _seed(rc: RunConfig, args) -> int:
    if rc.seed is not None:
        return rc.seed
    return 0 if args.seed is None else args.seed


def _path(rc: RunConfig, key: str, flag, required: bool = True) -> Path | None:
    value = rc.resolve("paths", key, flag)
    if value is None:
        if required:
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or [paths] {key})")
        return None
    return Path(value)


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as exc:
        raise RuntimeFailure(f"cannot load checkpoint: {exc}") from None


# -- commands -----------------------------------------------------------------

def cmd_synth(args, rc: RunConfig) -> int:
    cfg = _synth_config(rc, args)
    out = _path(rc, "out", args.out)
    write_sequence(out, cfg)
    log.info("wrote %s (%s, %d objects, %d frames, seed %d)", out, cfg.kind, cfg.objects,
             cfg.frames, cfg.seed)
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    d = ModelConfig()
    cfg = _build(
        ModelConfig,
        n_blocks=rc.resolve("model", "n_blocks", args.blocks, d.n_blocks),
        model_dim=rc.resolve("model", "model_dim", args.dim, d.model_dim),
        expand_factor=rc.resolve("model", "expand_factor", args.expand, d.expand_factor),
        embed_dim=rc.resolve("model", "embed_dim", args.embed_dim, d.embed_dim),
        max_len=rc.resolve("model", "max_len", args.max_len, d.max_len),
    )
    epochs = rc.resolve("train", "epochs", args.epochs, 500)
    batch = rc.resolve("train", "batch", args.batch, 32)
    lr = rc.resolve("train", "lr", args.lr, 1e-4)
    spt = rc.resolve("train", "samples_per_tracklet", args.samples_per_tracklet, 1)
    jitter = rc.resolve("train", "jitter_px", args.jitter, DEFAULT_JITTER_PX)
    schedule = rc.resolve("train", "schedule", args.schedule, "constant")
    if epochs < 0 or batch < 1 or lr <= 0 or spt < 1 or jitter < 0:
        raise UsageError("need epochs >= 0, batch >= 1, lr > 0, samples-per-tracklet >= 1, jitter >= 0")
    if schedule not in SCHEDULES:
        raise UsageError(f"schedule must be one of {', '.join(SCHEDULES)}")
    data = rc.resolve("paths", "data", args.data)
    if not data:
        raise UsageError("--data is required (flag or [paths] data)")
    if isinstance(data, str):
        data = [data]
    out = _path(rc, "out", args.out)
    loss_csv = _path(rc, "loss_csv", args.loss_csv, required=False) or out.with_suffix(".loss.csv")

    dataset = load_dataset(data)
    log.info("training on %d tracklets from %d sequence(s)", len(dataset), len(data))
    try:
        train(dataset, cfg, epochs=epochs, batch=batch, lr=lr, seed=_seed(rc, args),
              samples_per_tracklet=spt, checkpoint=out, loss_csv=loss_csv, jitter_px=jitter,
              schedule=schedule)
    except NonFiniteLoss as exc:
        raise RuntimeFailure(f"non-finite loss at epoch {exc.epoch}: {exc}") from None
    log.info("wrote %s and %s", out, loss_csv)
    return 0


def _track(det_path, seqinfo_path, motion: str, model_path, assoc: AssociationConfig):
    info = read_seqinfo(seqinfo_path)
    dets = parse_mot(det_path)
    if motion == "kalman":
        model = KalmanMotion()
    else:
        if model_path is None:
            raise RuntimeFailure("--motion ssm needs --model")
        params, cfg = _load_model(model_path)
        model = SSMMotion(params, cfg, info.img)
    return track_sequence(dets, model, assoc, frames=info.frames)


def cmd_track(args, rc: RunConfig) -> int:
    det = _path(rc, "det", args.det)
    seqinfo = _path(rc, "seqinfo", args.seqinfo, required=False) or det.parent
    model = _path(rc, "model", args.model, required=False)
    out = _path(rc, "out", args.out)
    res = _track(det, seqinfo, args.motion, model, _assoc_config(rc, args))
    write_mot(res, out)
    log.info("wrote %s (%d rows, %d ids)", out, len(res), len({r.id for r in res}))
    return 0


def cmd_merge(args, rc: RunConfig) -> int:
    d = MergeConfig()
    cfg = _build(
        MergeConfig,
        max_gap=rc.resolve("merge", "max_gap", args.max_gap, d.max_gap),
        max_dist=rc.resolve("merge", "max_dist", args.max_dist, d.max_dist),
        tau_cos=rc.resolve("merge", "tau_cos", args.tau, d.tau_cos),
        linkage=rc.resolve("merge", "linkage", None, d.linkage),
    )
    res_path = _path(rc, "res", args.res)
    out = _path(rc, "out", args.out)
    report_path = _path(rc, "report", args.report, required=False) or out.with_suffix(".report.txt")
    seqinfo = _path(rc, "seqinfo", args.seqinfo, required=False) or res_path.parent
    params, model_cfg = _load_model(_path(rc, "model", args.model))
    info = read_seqinfo(seqinfo)
    merged, report, ext = merge_results(parse_mot(res_path), params, model_cfg, info.img, cfg)
    write_mot(merged, out)
    report_path.write_text(report)
    log.info("merged %d tracklets into %d ids (%d forward passes); wrote %s and %s",
             len(ext.records) + len(ext.excluded), len({r.id for r in merged}),
             ext.forward_passes, out, report_path)
    return 0


def write_metrics_csv(path, rows: list[tuple[dict, MetricReport]]) -> None:
    """One row per report; leading label columns come from each row's dict."""
    label_cols = list(rows[0][0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(label_cols + list(REPORT_COLUMNS))
        for labels, rep in rows:
            vals = rep.row()
            w.writerow([labels[c] for c in label_cols] + [_cell(vals[c]) for c in REPORT_COLUMNS])


def _cell(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.6f}"


def cmd_eval(args, rc: RunConfig) -> int:
    gt_path = _path(rc, "gt", args.gt)
    res_path = _path(rc, "res", args.res)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    bad = [m for m in wanted if m not in REPORT_COLUMNS]
    if bad:
        raise UsageError(f"unknown metric(s): {', '.join(bad)}; choose from {', '.join(REPORT_COLUMNS)}")
    rep = evaluate(parse_mot(gt_path), parse_mot(res_path))
    out = _path(rc, "out", args.out, required=False) or res_path.with_suffix(".metrics.csv")
    write_metrics_csv(out, [({}, rep)])
    vals = rep.row()
    for m in wanted:
        print(f"{m:>8} {_cell(vals[m])}")
    log.info("wrote %s", out)
    return 0


def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows])


def cmd_compare(args, rc: RunConfig) -> int:
    """synth -> train -> track (ssm, kalman) -> eval per motion kind, plus per-horizon IoU."""
    seed = _seed(rc, args)
    out = _path(rc, "out", args.out)
    train_kinds = _kinds(args.train_kinds)
    eval_kinds = _kinds(args.eval_kinds)
    assoc = _assoc_config(rc, args)

    model_path = _path(rc, "model", args.model, required=False)
    if model_path is None:
        train_dirs = []
        for i in range(args.train_sequences):
            for kind in train_kinds:
                cfg = _synth_config(rc, args, kind=kind, objects=args.train_objects,
                                    frames=args.train_frames, occlusion_rate=0.0,
                                    det_noise_std=0.0, seed=seed + 100 + i)
                train_dirs.append(write_sequence(out / "train" / f"{kind}_{i:02d}", cfg))
        model_path = out / "model.ckpt"
        ns = argparse.Namespace(
            blocks=None, dim=None, expand=None, embed_dim=None, max_len=None, epochs=args.epochs,
            batch=None, lr=args.lr, samples_per_tracklet=args.samples_per_tracklet, jitter=None,
            schedule=args.schedule,
            data=[str(p) for p in train_dirs], out=str(model_path), loss_csv=None, seed=seed)
        cmd_train(ns, RunConfig(seed, {k: v for k, v in rc.sections.items() if k in ("model", "train")}))
    params, model_cfg = _load_model(model_path)

    metric_rows: list[tuple[dict, MetricReport]] = []
    horizon_rows = []
    for j, kind in enumerate(eval_kinds):
        seq = write_sequence(out / "eval" / kind, _synth_config(rc, args, kind=kind, seed=seed + 900 + j))
        for motion in ("ssm", "kalman"):
            res_path = out / "res" / f"{kind}_{motion}.txt"
            res_path.parent.mkdir(parents=True, exist_ok=True)
            write_mot(_track(seq / "det.txt", seq, motion, model_path, assoc), res_path)
            rep = evaluate(parse_mot(seq / "gt.txt"), parse_mot(res_path))
            metric_rows.append(({"kind": kind, "motion": motion}, rep))
        held = load_dataset([seq])
        ious = prediction_ious(held, params, model_cfg, horizons=args.horizons)
        for h in range(args.horizons):
            horizon_rows.append((kind, h + 1, ious["kalman"][h], ious["ssm"][h]))

    write_metrics_csv(out / "metrics.csv", metric_rows)
    with open(out / "horizon_iou.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "horizon", "kalman_iou", "ssm_iou", "gap"])
        for kind, h, kf, ssm in horizon_rows:
            w.writerow([kind, h, f"{kf:.6f}", f"{ssm:.6f}", f"{ssm - kf:.6f}"])

    cols = ["hota", "mota", "idf1", "idsw"]
    summary = [
        "tracking metrics",
        _table(["kind", "motion"] + cols,
               [[lab["kind"], lab["motion"]] + [_cell(rep.row()[c]) for c in cols]
                for lab, rep in metric_rows]),
        "",
        "mean prediction IoU by horizon",
        _table(["kind", "horizon", "kalman", "ssm", "gap"],
               [[k, str(h), f"{a:.4f}", f"{b:.4f}", f"{b - a:+.4f}"] for k, h, a, b in horizon_rows]),
    ]
    text = "\n".join(summary) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")
    return 0


def _kinds(text: str) -> list[str]:
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if not kinds or bad:
        raise UsageError(f"kinds must be a comma list drawn from {', '.join(KINDS)}")
    return kinds


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmmot", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version",
                   version=f"ssmmot {__version__} (checkpoint format: {CHECKPOINT_FORMAT})")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML run file; its values override flags")
        return sp

    def synth_flags(sp):
        sp.add_argument("--objects", type=int)
        sp.add_argument("--frames", type=int)
        sp.add_argument("--occlusion", type=float, help="per-detection drop probability")
        sp.add_argument("--noise", type=float, help="detection noise std in pixels")
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)
        sp.add_argument("--low-conf-fraction", type=float)
        sp.add_argument("--gap-windows", type=int, help="forced detection gaps per object")
        sp.add_argument("--gap-length", type=int)
        sp.add_argument("--seed", type=int)

    def assoc_flags(sp):
        sp.add_argument("--tau-high", type=float)
        sp.add_argument("--tau-low", type=float)
        sp.add_argument("--max-age", type=int)
        sp.add_argument("--min-hits", type=int)

    sp = common(sub.add_parser("synth", help="generate a synthetic sequence"))
    sp.add_argument("--kind", choices=KINDS)
    synth_flags(sp)
    sp.add_argument("--out", help="sequence directory")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train the motion model"))
    sp.add_argument("--data", nargs="+", help="sequence directories with gt.txt and seqinfo")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--blocks", type=int)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--expand", type=int)
    sp.add_argument("--embed-dim", type=int)
    sp.add_argument("--max-len", type=int)
    sp.add_argument("--samples-per-tracklet", type=int)
    sp.add_argument("--jitter", type=float, help="max input jitter std in pixels")
    sp.add_argument("--schedule", choices=SCHEDULES, help="learning-rate schedule")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", help="checkpoint path")
    sp.add_argument("--loss-csv", help="default: --out with suffix .loss.csv")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("track", help="run the online tracker"))
    sp.add_argument("--det")
    sp.add_argument("--seqinfo", help="seqinfo file or directory (default: next to --det)")
    sp.add_argument("--motion", choices=("ssm", "kalman"), default="ssm")
    sp.add_argument("--model")
    assoc_flags(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_track)

    sp = common(sub.add_parser("merge", help="offline tracklet merging"))
    sp.add_argument("--res")
    sp.add_argument("--model")
    sp.add_argument("--seqinfo", help="seqinfo file or directory (default: next to --res)")
    sp.add_argument("--max-gap", type=int)
    sp.add_argument("--max-dist", type=float)
    sp.add_argument("--tau", type=float, help="cosine-distance merge threshold")
    sp.add_argument("--out")
    sp.add_argument("--report", help="default: --out with suffix .report.txt")
    sp.set_defaults(func=cmd_merge)

    sp = common(sub.add_parser("eval", help="HOTA / CLEAR / identity metrics"))
    sp.add_argument("--gt")
    sp.add_argument("--res")
    sp.add_argument("--metrics", default="hota,mota,idf1")
    sp.add_argument("--out", help="CSV path (default: --res with suffix .metrics.csv)")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("compare", help="SSM vs Kalman benchmark on synthetic data"))
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--model", help="use this checkpoint instead of training one")
    sp.add_argument("--train-kinds", default="sinusoid,bounce")
    sp.add_argument("--eval-kinds", default="sinusoid,bounce,linear")
    sp.add_argument("--train-sequences", type=int, default=10, help="per training kind")
    sp.add_argument("--train-objects", type=int, default=10)
    sp.add_argument("--train-frames", type=int, default=150)
    sp.add_argument("--epochs", type=int, default=200)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--samples-per-tracklet", type=int, default=8)
    sp.add_argument("--schedule", choices=SCHEDULES, default="cosine")
    sp.add_argument("--horizons", type=int, default=5)
    synth_flags(sp)
    assoc_flags(sp)
    sp.set_defaults(func=cmd_compare, objects=8, frames=300, occlusion=0.1, noise=2.0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        rc = load_run_config(args.config)
        return args.func(args, rc)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ssmmot {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeFailure, ValueError, OSError, ArithmeticError) as exc:
        # data errors (ParseError, OverlapViolation, ...) are ValueErrors
        print(f"ssmmot {args.command}: {exc}", file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
