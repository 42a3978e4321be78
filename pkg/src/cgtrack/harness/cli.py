"""Command-line entry point: ``cgtrack <command> [options]``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .. import metrics
from ..model import build_model
from ..objective import LossWeights
from ..profiler import report as cost_report
from . import gradcheck
from .config import RunConfig
from .modelio import load_model, save_model
from .store import FormatError
from .synth import GT_FILE, SynthConfig, load_sequence, save_sequence, synth_generate
from .tracker import TrackerConfig, track_sequence
from .train import NonFiniteLossError, make_training_batch, smoke_train, write_history


def _config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig.default()


def cmd_init(args) -> int:
    cfg = _config(args)
    seed = cfg.seed if args.seed is None else args.seed
    model = build_model(args.variant, seed=seed, eg_ratio=cfg.head_eg_ratio)
    store = save_model(model, args.out)
    print(f"wrote {args.out}: variant {args.variant}, {len(store)} arrays, {model.param_count()} trainable params")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    sc = SynthConfig(image_size=cfg.synth_image_size, target_min=cfg.synth_target_min,
                     target_max=cfg.synth_target_max, velocity=(cfg.synth_velocity_x, cfg.synth_velocity_y),
                     scale_amplitude=cfg.synth_scale_amplitude, occluder=cfg.synth_occluder, seed=cfg.seed,
                     name=cfg.synth_name)
    n = args.frames if args.frames is not None else cfg.synth_frames
    record = synth_generate(sc, n)
    save_sequence(args.out, record)
    print(f"wrote {n} frames of {record.name!r} to {args.out}")
    return 0


def cmd_smoke_train(args) -> int:
    cfg = _config(args)
    variant, model = load_model(args.ckpt, seed=cfg.seed)
    record = load_sequence(args.data)
    bb = model.cfg.backbone
    batch = make_training_batch(record, cfg.train_batch, template_size=bb.template_size, search_size=bb.search_size,
                                template_factor=cfg.track_template_factor, search_factor=cfg.track_search_factor,
                                center_jitter=cfg.train_center_jitter, scale_jitter=cfg.train_scale_jitter,
                                seed=cfg.seed, dtype=model.backbone.pos.template_table.dtype)
    steps = cfg.train_steps if args.steps is None else args.steps
    lr = cfg.train_lr if args.lr is None else args.lr
    history = smoke_train(model, batch, steps, lr=lr, weight_decay=cfg.train_weight_decay,
                          weights=LossWeights(cfg.loss_lambda_giou, cfg.loss_lambda_l1))
    out = Path(args.out or args.ckpt)
    save_model(model, out)
    hist_path = Path(args.history) if args.history else out.with_name(out.name + ".loss.csv")
    write_history(hist_path, history)
    first, last = history[0]["total"], history[-1]["total"]
    print(f"variant {variant}: {steps} steps, loss {first:.6f} -> {last:.6f}; wrote {out} and {hist_path}")
    return 0


def cmd_track(args) -> int:
    cfg = _config(args)
    _, model = load_model(args.ckpt, seed=cfg.seed)
    record = load_sequence(args.seq)
    tc = TrackerConfig(cfg.track_search_factor, cfg.track_template_factor, cfg.track_hanning_weight)
    boxes = track_sequence(model, record.frames, record.boxes[0], tc)
    metrics.write_boxes(args.out, boxes)
    print(f"tracked {len(boxes)} frames of {record.name!r}; wrote {args.out}")
    return 0


def _gt_records(gt: Path, attrs: dict) -> dict[str, metrics.SequenceRecord]:
    if gt.is_file():
        name = next(iter(attrs)) if len(attrs) == 1 else gt.stem
        return {name: metrics.SequenceRecord(name, metrics.read_boxes(gt), attrs.get(name, frozenset()))}
    if (gt / GT_FILE).exists():
        rec = load_sequence(gt, with_frames=False)
        return {rec.name: metrics.SequenceRecord(rec.name, rec.boxes, attrs.get(rec.name, rec.attributes))}
    out = {}
    for d in sorted(p for p in gt.iterdir() if (p / GT_FILE).exists()):
        rec = load_sequence(d, with_frames=False)
        out[rec.name] = metrics.SequenceRecord(rec.name, rec.boxes, attrs.get(rec.name, rec.attributes))
    if not out:
        raise ValueError(f"no ground truth found under {gt}")
    return out


def cmd_eval(args) -> int:
    attrs = metrics.read_attributes(args.attrs) if args.attrs else {}
    records = _gt_records(Path(args.gt), attrs)
    res = Path(args.results)
    if res.is_dir():
        results = {name: metrics.read_boxes(res / f"{name}.txt") for name in records}
    elif len(records) == 1:
        results = {next(iter(records)): metrics.read_boxes(res)}
    else:
        raise ValueError("several ground-truth sequences need a results directory of <name>.txt files")
    rep = metrics.evaluate_all(results, records)
    if args.report:
        metrics.write_report_csv(args.report, rep)
    print(f"precision_at_20 = {rep.precision_at_20:.6f}")
    print(f"success_auc = {rep.success_auc:.6f}")
    for tag, sub in sorted(rep.by_attribute.items()):
        print(f"  [{tag}] precision_at_20 = {sub.precision_at_20:.6f} success_auc = {sub.success_auc:.6f}")
    return 0


def cmd_profile(args) -> int:
    cfg = _config(args)
    model = build_model(args.variant, seed=0, eg_ratio=cfg.head_eg_ratio)
    rep = cost_report(model)
    if args.report:
        rep.write_csv(args.report)
    else:
        sys.stdout.write(rep.to_csv())
    for group, (p, m) in rep.group().items():
        print(f"{group}: params={p} macs={m}", file=sys.stderr if not args.report else sys.stdout)
    print(f"total: params={rep.params} ({rep.params / 1e6:.3f} M) macs={rep.macs} ({rep.macs / 1e9:.3f} G)",
          file=sys.stderr if not args.report else sys.stdout)
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    for r in gradcheck.run(args.scope, seed=args.seed):
        failed += not r.passed
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.scope:10s} {r.name:50s} rel_err={r.max_rel_err:.2e} n={r.checked} "
              f"skipped={r.skipped}")
    print(f"{'all gradient checks passed' if not failed else f'{failed} gradient checks failed'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cgtrack", description="Tracker network tooling on synthetic data.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a freshly initialized checkpoint")
    s.add_argument("--variant", choices=("T", "S", "B"), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", help="render a synthetic sequence")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("smoke-train", help="overfit a checkpoint on a fixed batch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="synthetic sequence directory")
    s.add_argument("--steps", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--config")
    s.add_argument("--out", help="checkpoint to write (default: overwrite --ckpt)")
    s.add_argument("--history", help="loss history CSV (default: <out>.loss.csv)")
    s.set_defaults(func=cmd_smoke_train)

    s = sub.add_parser("track", help="run the tracker over a sequence")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--seq", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="precision / success report")
    s.add_argument("--results", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--attrs")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("profile", help="parameter and MAC report")
    s.add_argument("--variant", choices=("T", "S", "B"), default="B")
    s.add_argument("--report")
    s.add_argument("--config")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--scope", choices=(*gradcheck.SCOPES, "all"), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, FormatError, NonFiniteLossError, np.linalg.LinAlgError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cgtrack {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
