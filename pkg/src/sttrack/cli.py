"""Command-line entry point: synth, train, track, eval, dump-attn, grad-check.

Weights files get a ``<weights>.cfg`` sidecar with the full run config, so
``track`` and ``dump-attn`` rebuild the same network without extra flags.
Errors print one ``sttrack: error: ...`` line and exit 1; bad flags print
usage and exit 2.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import gradsuite
from .attention import attention_maps, write_dump
from .config import ConfigError, RunConfig
from .engine.serialization import WeightFormatError
from .io import FormatError, load_sequence, read_groundtruth, read_visible, save_sequence
from .metrics import SequenceResult, evaluate, ious, write_curve, write_report
from .model import TrackerNet
from .synthvid import generate_sequence
from .tracker import Tracker, read_results, track_sequence, write_results
from .trainer import DataExhausted, load_checkpoint, save_checkpoint, train_stage1, train_stage2


def sidecar(weights) -> Path:
    return Path(f"{weights}.cfg")


def _config(path, required: bool = False) -> RunConfig:
    if path:
        return RunConfig.load(path)
    if required:
        raise ConfigError("a --config file is required")
    return RunConfig()


def load_model(weights, config_path=None) -> tuple[TrackerNet, RunConfig]:
    """Network from a weights file; the sidecar config wins over ``config_path``."""
    side = sidecar(weights)
    cfg = RunConfig.load(side) if side.is_file() else _config(config_path)
    net = TrackerNet(cfg.model_config(), cfg.seed)
    net.load_state_dict(load_checkpoint(weights))
    return net.eval(), cfg


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    params = cfg.scene_params(2 if args.occlusions else 1)
    if args.frames is not None:
        params = dataclasses.replace(params, frames=args.frames)
    out = Path(args.out)
    for k in range(args.count):
        seq = generate_sequence(args.seed + k, params)
        save_sequence(out if args.count == 1 else out / f"seq_{k:03d}", seq)
    print(f"wrote {args.count} sequence(s) of {params.frames} frames to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")
    every = args.progress

    def progress(row):
        if every and row["step"] % every == 0:
            print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()), file=sys.stderr)

    if args.stage == 1:
        result = train_stage1(cfg.train_config(1), progress=progress)
    else:
        init = args.init or cfg.stage1_weights
        if not init:
            raise ConfigError("stage 2 needs stage-1 weights (--init or stage1_weights)")
        if not Path(init).is_file():
            raise FileNotFoundError(f"stage-1 weights not found: {init}")
        result = train_stage2(cfg.train_config(2), load_checkpoint(init), progress=progress)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out)
    sidecar(out).write_text(cfg.to_text(), encoding="utf-8")
    result.write_log(log_path)
    last = result.log[-1]
    print(f"stage {args.stage}: {len(result.log)} steps, last {last}, weights {out}, log {log_path}")
    return 0


def _tracker(args, cfg: RunConfig, net: TrackerNet) -> Tracker:
    tcfg = cfg.tracker_config()
    kw = {}
    if args.update_interval is not None:
        kw["update_interval"] = args.update_interval
    if args.threshold is not None:
        kw["threshold"] = args.threshold
    if kw:
        tcfg = dataclasses.replace(tcfg, **kw)
    return Tracker(net, tcfg)


def cmd_track(args) -> int:
    net, cfg = load_model(args.weights, args.config)
    seq = load_sequence(args.seq)
    results = track_sequence(_tracker(args, cfg, net), seq.frames, seq.box(0))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_results(args.out, results)
    print(f"tracked {len(results)} frames of {args.seq} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred, scores = read_results(args.results)
    gt = read_groundtruth(args.gt)
    vis_path = Path(args.visible) if args.visible else Path(args.gt).with_name("visible.txt")
    visible = read_visible(vis_path) if vis_path.is_file() else np.ones(len(gt), dtype=bool)
    if len(pred) != len(gt):
        raise FormatError(f"{args.results} has {len(pred)} lines but {args.gt} has {len(gt)}")
    name = Path(args.gt).parent.name or "sequence"
    rows = evaluate({name: SequenceResult(pred, scores, gt, visible)})
    write_report(args.out or sys.stdout, rows)
    if args.curve:
        s = slice(1, None) if len(gt) > 1 else slice(None)
        o = ious(pred[s], gt[s])
        write_curve(args.curve, o[visible[s]] if visible[s].any() else o)
    return 0


def _cell(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"cell must be 'row,col', got {text!r}") from None
    return r, c


def cmd_dump_attn(args) -> int:
    net, _ = load_model(args.weights, args.config)
    seq = load_sequence(args.seq)
    dump = attention_maps(net, seq.frames, seq.gt, args.frame, args.cell)
    files = write_dump(dump, args.out, stride=net.stride)
    totals = {v: sum(float(g.sum()) for g in grids.values()) for v, grids in (("encoder", dump.encoder), ("decoder", dump.decoder)) if grids}
    print(f"query cell {dump.query_cell}; wrote {len(files)} files to {args.out}; sums {totals}")
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.time()
    cases = gradsuite.run(seed=args.seed, include_model=not args.ops_only)
    for c in cases:
        status = "PASS" if c.ok else "FAIL"
        print(f"{status} {c.name}: normwise {c.worst:.2e} entrywise {max(c.entrywise.values(), default=0):.2e} kinks {c.kink_crossings} ({c.seconds:.1f}s)")
    failed = [c.name for c in cases if not c.ok]
    print(f"{len(cases) - len(failed)}/{len(cases)} cases within {gradsuite.TOLERANCE:g} in {time.time() - t0:.1f}s")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sttrack", description="Transformer tracker: synthetic data, training, tracking, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic sequence directories")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1, help="number of sequences (seq_000, ... when > 1)")
    s.add_argument("--frames", type=int, default=None, help="override the config's frame count")
    s.add_argument("--occlusions", action="store_true", help="use the stage-2 occlusion / out-of-view rates")
    s.add_argument("--config", default=None)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="train stage 1 (localization) or stage 2 (score head)")
    t.add_argument("--config", default=None)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="weights file to write")
    t.add_argument("--init", default=None, help="stage-1 weights for stage 2")
    t.add_argument("--log", default=None, help="loss CSV (default: weights path with .csv)")
    t.add_argument("--progress", type=int, default=0, help="print every N steps to stderr")
    t.set_defaults(fn=cmd_train)

    k = sub.add_parser("track", help="track a sequence directory")
    k.add_argument("--weights", required=True)
    k.add_argument("--seq", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--config", default=None, help="used when the weights have no .cfg sidecar")
    k.add_argument("--update-interval", type=int, default=None)
    k.add_argument("--threshold", type=float, default=None)
    k.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", help="score a results file against groundtruth")
    e.add_argument("--results", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--visible", default=None, help="visibility flags (default: visible.txt beside --gt)")
    e.add_argument("--out", default=None, help="metrics CSV (default: stdout)")
    e.add_argument("--curve", default=None, help="success curve CSV threshold,fraction")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("dump-attn", help="export encoder and decoder attention maps")
    a.add_argument("--weights", required=True)
    a.add_argument("--seq", required=True)
    a.add_argument("--frame", type=int, default=1)
    a.add_argument("--cell", type=_cell, default=None, help="template query cell 'row,col' (default: center)")
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.set_defaults(fn=cmd_dump_attn)

    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ops-only", action="store_true", help="skip the micro-model case")
    g.set_defaults(fn=cmd_grad_check)
    return p


EXPECTED_ERRORS = (ValueError, OSError, ConfigError, FormatError, WeightFormatError, DataExhausted, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except EXPECTED_ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"sttrack: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
