"""Command-line entry point: simulate, train, track, evaluate, gradcheck, bench.

Exit codes: 0 success, 1 usage or input error, 2 verification failure.
Every output directory receives ``config.txt`` holding the effective
configuration, which is also printed at the start of each run.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio, gradcheck, metrics, mtcl, sim, tracker
from .core import BoundingBox, Detection

OUTPUT_DIR_ENV = "MVTRACK_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="seed for scenario generation and training")
    p.add_argument("--out", default=None,
                   help=f"{out_help} (default: ${OUTPUT_DIR_ENV} or the current directory)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvtrack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic scenario")
    _common(p, "output directory")
    p.add_argument("--noiseless", action="store_true", help="detections equal ground truth")
    p.add_argument("--features", action="store_true", help="also write per-frame feature maps")

    p = sub.add_parser("train", help="train the embedding head on a simulated scenario")
    _common(p, "output directory")
    p.add_argument("--scenario", required=True, help="directory written by 'simulate --features'")

    p = sub.add_parser("track", help="run the online tracker")
    _common(p, "output directory")
    p.add_argument("--det", help="MOT detection file")
    p.add_argument("--emb", help="embedding sidecar for --det")
    p.add_argument("--scenario", help="simulated scenario directory (instead of --det/--emb)")
    p.add_argument("--checkpoint", help="embed detections with this model (needs --scenario)")
    p.add_argument("--preset", choices=sorted(tracker.PRESETS), default="default")
    p.add_argument("--beta", help="'adaptive' or 'fixed:<value>'")

    p = sub.add_parser("evaluate", help="score tracking results against ground truth")
    _common(p, "output directory")
    p.add_argument("--gt", required=True)
    p.add_argument("--results", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    _common(p, "output directory")
    p.add_argument("--configs", type=int, default=100)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: perturb one gradient

    p = sub.add_parser("bench", help="association throughput in frames per second")
    _common(p, "output directory")
    p.add_argument("--repeat", type=int, default=3)
    return parser


def _run_config(args) -> fileio.RunConfig:
    cfg = fileio.RunConfig()
    scenario_dir = getattr(args, "scenario", None)
    if scenario_dir and (Path(scenario_dir) / "config.txt").exists():
        cfg = fileio.load_config(Path(scenario_dir) / "config.txt")
    if args.config:
        cfg = fileio.load_config(_existing(args.config), cfg)
    values = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return cfg.with_values(values)


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file or directory: {path}")
    return p


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_DIR_ENV) or ".")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _header(out: Path, cfg: fileio.RunConfig) -> None:
    text = cfg.to_text()
    (out / "config.txt").write_text(text)
    print("# effective config")
    sys.stdout.write("".join(f"#   {line}\n" for line in text.splitlines() if not line.startswith("#")))


# -- commands -----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    if args.noiseless:
        cfg = replace(cfg, scenario=cfg.scenario.noiseless())
    out = _out_dir(args)
    _header(out, cfg)
    sc = cfg.scenario
    frames = sim.generate_scenario(sc)
    fileio.write_mot_file(out / "gt.txt", fileio.frames_to_lines([f.gt for f in frames]))
    dets = [d for f in frames for d in f.detections]
    fileio.write_mot_file(out / "det.txt", [
        fileio.MotLine(d.frame, -1, d.box.left, d.box.top, d.box.width, d.box.height, d.confidence)
        for d in dets])
    fileio.write_embeddings(out / "det.emb", [d.frame for d in dets], [d.embedding for d in dets])
    if args.features:
        fdir = out / "features"
        fdir.mkdir(exist_ok=True)
        for f in frames:
            np.save(fdir / f"{f.frame:06d}.npy", sim.render_feature_map(f, sc))
    n_gt = sum(len(f.gt.objects) for f in frames)
    print(f"frames={len(frames)} identities={sc.n_identities} gt_boxes={n_gt} detections={len(dets)}")
    return EXIT_OK


def _feature_map(scenario_dir: Path, frame: int) -> np.ndarray:
    path = scenario_dir / "features" / f"{frame:06d}.npy"
    if not path.exists():
        raise UsageError(f"missing feature map {path} (run simulate with --features)")
    return np.load(path)


def _train_frames(scenario_dir: Path, stride: float):
    gt = fileio.lines_to_frames(fileio.read_mot_file(_existing(scenario_dir / "gt.txt")))
    out = []
    for fr in gt:
        boxes = [b.scaled(1.0 / stride) for _, b in fr.objects]
        out.append(mtcl.TrainFrame(_feature_map(scenario_dir, fr.frame), boxes,
                                   [(0, i) for i, _ in fr.objects], fr.frame))
    return out


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scenario_dir = _existing(args.scenario)
    stride = cfg.scenario.feature_stride
    frames = _train_frames(scenario_dir, stride)
    out = _out_dir(args)
    _header(out, cfg)
    tc = cfg.train
    result = mtcl.train([frames], tc)
    meta = {"strategy": tc.update_strategy, "objective": tc.objective, "epochs": tc.epochs,
            "seed": tc.seed, "feature_stride": stride, "config": cfg.to_text()}
    fileio.save_checkpoint(out / "checkpoint.json", result.model, result.weights.eta, meta)
    fileio.write_loss_csv(out / "loss.csv", result.history)
    rows = []
    for fr in frames:
        emb = mtcl.embed_boxes(result.model, fr.feature_map, fr.boxes)
        rows.extend((lab[1], fr.frame, e) for lab, e in zip(fr.labels, emb))
    fileio.write_embedding_dump(out / "embeddings.csv", rows)
    last = result.history[-1].l_total if result.history else float("nan")
    print(f"iterations={len(result.history)} final_loss={last:.6f} strategy={tc.update_strategy}")
    return EXIT_OK


def _clip_to_map(box: BoundingBox, shape) -> BoundingBox | None:
    h, w = shape[:2]
    left, top = max(box.left, 0.0), max(box.top, 0.0)
    right, bottom = min(box.right, w - 1.0), min(box.bottom, h - 1.0)
    if right < left or bottom < top:
        return None
    return BoundingBox(left, top, right - left, bottom - top)


def _embedded_detections(scenario_dir: Path, checkpoint: Path, stride: float) -> dict:
    model, doc = fileio.load_checkpoint(checkpoint)
    stride = doc["metadata"].get("feature_stride", stride)
    out: dict = {}
    for m in fileio.read_mot_file(_existing(scenario_dir / "det.txt")):
        out.setdefault(m.frame, []).append(m)
    dets: dict = {}
    for frame, lines in sorted(out.items()):
        fmap = _feature_map(scenario_dir, frame)
        keep = [(m, _clip_to_map(m.box.scaled(1.0 / stride), fmap.shape)) for m in lines]
        keep = [(m, b) for m, b in keep if b is not None]
        emb = mtcl.embed_boxes(model, fmap, [b for _, b in keep])
        dets[frame] = [Detection(frame, m.box, min(1.0, max(0.0, m.conf)), e)
                       for (m, _), e in zip(keep, emb)]
    return dets


def cmd_track(args) -> int:
    cfg = _run_config(args)
    # a preset overrides the thresholds it names; everything else comes from the config
    tcfg = replace(cfg.tracker, **tracker.PRESETS[args.preset])
    if args.beta:
        tcfg = replace(tcfg, beta=args.beta)
    tcfg.fixed_beta  # validate
    cfg = replace(cfg, tracker=tcfg)
    if args.scenario:
        scenario_dir = _existing(args.scenario)
        if args.checkpoint:
            dets = _embedded_detections(scenario_dir, _existing(args.checkpoint),
                                         cfg.scenario.feature_stride)
        else:
            dets = fileio.detections_from_files(_existing(scenario_dir / "det.txt"),
                                                _existing(scenario_dir / "det.emb"))
    elif args.det:
        if not args.emb:
            raise UsageError("--det needs its embedding sidecar via --emb")
        dets = fileio.detections_from_files(_existing(args.det), _existing(args.emb))
    else:
        raise UsageError("track needs --scenario or --det/--emb")
    out = _out_dir(args)
    _header(out, cfg)
    result = tracker.run_sequence(dets, tcfg)
    lines = [fileio.MotLine(f, tid, b.left, b.top, b.width, b.height)
             for f, objs in sorted(result.items()) for tid, b in objs]
    fileio.write_mot_file(out / "results.txt", lines)
    print(f"frames={len(dets)} output_boxes={len(lines)} "
          f"trajectories={len({m.id for m in lines})}")
    return EXIT_OK


REPORT_COLUMNS = ("idf1", "mota", "motp", "mt", "ml", "fp", "fn", "ids")


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    gt_lines = fileio.read_mot_file(_existing(args.gt))
    res_lines = fileio.read_mot_file(_existing(args.results))
    if not gt_lines:
        raise UsageError("ground-truth file is empty")
    last = max(m.frame for m in gt_lines)
    extra = sorted({m.frame for m in res_lines if m.frame > last})
    if extra:
        raise UsageError(f"results contain frames beyond the ground truth (first: {extra[0]})")
    out = _out_dir(args)
    _header(out, cfg)
    res = metrics.evaluate(fileio.lines_to_frames(gt_lines), fileio.lines_to_frames(res_lines))
    report = res.as_dict()
    (out / "metrics.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    head = " ".join(f"{c.upper():>7s}" for c in REPORT_COLUMNS)
    row = " ".join(f"{report[c]:7.4f}" if isinstance(report[c], float) else f"{report[c]:7d}"
                   for c in REPORT_COLUMNS)
    (out / "metrics.txt").write_text(head + "\n" + row + "\n")
    print(head)
    print(row)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _header(out, cfg)
    report = gradcheck.run(args.configs, seed=cfg.train.seed, corrupt=args.corrupt)
    lines = report.lines()
    for cfg_idx, name, idx, a, n in report.failures[:20]:
        lines.append(f"FAIL config={cfg_idx} {name}{list(idx)} analytic={a!r} numeric={n!r}")
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK if report.ok else EXIT_VERIFY


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    _header(out, cfg)
    frames = sim.generate_scenario(cfg.scenario)
    dets = [f.detections for f in frames]
    best = float("inf")
    for _ in range(max(1, args.repeat)):
        t0 = time.perf_counter()
        tracker.run_sequence(dets, cfg.tracker)
        best = min(best, time.perf_counter() - t0)
    fps = len(frames) / best if best > 0 else float("inf")
    n_det = sum(len(d) for d in dets)
    (out / "bench.json").write_text(json.dumps(
        {"frames": len(frames), "detections": n_det, "seconds": best, "fps": fps}, indent=1) + "\n")
    print(f"frames={len(frames)} detections={n_det} fps={fps:.1f}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "track": cmd_track,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck, "bench": cmd_bench}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValueError, OSError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"mvtrack {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
