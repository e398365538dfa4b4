"""Command-line entry point: ``nltrack {synth,train,track,eval}``.

Exit codes: 0 success, 2 bad input or validation failure, 3 missing required
modality (e.g. no description in nl mode), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from nltrack import evaluation, kernels, synth, tracker, train
from nltrack.backends import Model, UnusableQuery
from nltrack.evaluation import FormatError, PredictionRecord
from nltrack.imaging import list_frames, load_frame

log = logging.getLogger("nltrack")

EXIT_OK, EXIT_INPUT, EXIT_MODALITY, EXIT_RUNTIME = 0, 2, 3, 4
MODE_ALIASES = {"box+nl": "box+nl", "box-only": "box", "box": "box", "nl-only": "nl", "nl": "nl"}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    """Everything ``track`` needs besides the sequence directories."""

    tracker: tracker.TrackerConfig = field(default_factory=tracker.TrackerConfig)
    model: str | None = None
    mode: str = "box+nl"
    mmm: bool = True
    flow: bool = True
    window: bool = True
    scale_hint: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODE_ALIASES:
            raise ValueError(f"mode: unknown value {self.mode!r}; choose from {', '.join(MODE_ALIASES)}")

    def effective_tracker(self) -> tracker.TrackerConfig:
        return dataclasses.replace(self.tracker, use_nl=MODE_ALIASES[self.mode] != "box",
                                   use_mmm=self.mmm, use_flow=self.flow, use_window=self.window)

    def to_dict(self) -> dict:
        # the mode flags win over the tracker's own switches; show what will run
        d = dataclasses.asdict(self)
        d["tracker"] = self.effective_tracker().to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ValueError("config root must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown config field(s): {', '.join(unknown)}")
        d = dict(d)
        if "tracker" in d:
            try:
                d["tracker"] = tracker.TrackerConfig.from_dict(d["tracker"])
            except TypeError as exc:
                raise ValueError(f"tracker: {exc}") from None
        for key in ("mmm", "flow", "window"):
            if key in d and not isinstance(d[key], bool):
                raise ValueError(f"{key}: expected true/false, got {d[key]!r}")
        return cls(**d)


def arm_flags(arm: str) -> dict:
    """RunConfig overrides for one ablation arm."""
    if arm not in tracker.ARMS:
        raise ValueError(f"arm: unknown value {arm!r}; choose from {', '.join(tracker.ARMS)}")
    flags = tracker.ARMS[arm]
    out = {"mode": "box" if flags.get("use_nl") is False else "box+nl"}
    for key in ("mmm", "flow", "window"):
        if f"use_{key}" in flags:
            out[key] = flags[f"use_{key}"]
    return out


def _setup_logging() -> None:
    level = os.environ.get("NLTRACK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_INPUT, f"{path}: invalid JSON ({exc})") from None


# synth


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.triplets:
        ds = train.synthetic_dataset(n_scenes=args.scenes, per_scene=args.per_scene, seed=args.seed,
                                     absent_per_scene=args.absent_per_scene)
        path = train.write_manifest(ds, out)
        print(f"{len(ds)} triplets -> {path}")
        return EXIT_OK
    if args.suite:
        specs = synth.standard_suite(args.seed)
    elif args.spec:
        specs = [synth.ScenarioSpec.from_dict(_load_json(args.spec))]
    else:
        raise CliError(EXIT_INPUT, "synth needs a spec file, --suite or --triplets")
    for spec in specs:
        spec.validate()
        d = synth.write_sequence(synth.render(spec), out / spec.name, spec)
        print(d)
    return EXIT_OK


# train


def cmd_train(args) -> int:
    if args.manifest:
        try:
            triplets = train.load_manifest(args.manifest)
        except FileNotFoundError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None
    else:
        triplets = train.synthetic_dataset(n_scenes=args.scenes, per_scene=args.per_scene, seed=args.seed,
                                           absent_per_scene=args.absent_per_scene)
    cfg = train.FitConfig(seed=args.seed)
    if args.config:
        try:
            cfg = dataclasses.replace(cfg, **_load_json(args.config))
        except TypeError as exc:
            raise CliError(EXIT_INPUT, f"{args.config}: {exc}") from None
    if args.epochs:
        cfg = dataclasses.replace(cfg, epochs=args.epochs)
    try:
        result = train.fit(triplets, cfg)
    except train.TrainingDiverged as exc:
        if exc.model is not None:
            exc.model.save(Path(args.out) / "last_good")
        raise CliError(EXIT_RUNTIME, str(exc)) from None
    model = result.model
    model.meta.update({"seed": args.seed, "dataset": args.manifest or f"synthetic:{args.scenes}x{args.per_scene}"})
    out = model.save(args.out)
    train.write_loss_log(out / "loss_log.csv", result.epoch_losses)
    print(f"model -> {out} (final loss {result.epoch_losses[-1]:.5f})")
    return EXIT_OK


# track


def _records(recs: list[tracker.TrackRecord]) -> list[PredictionRecord]:
    return [PredictionRecord(r.frame_idx, r.box, r.score, r.state.value, r.branch) for r in recs]


def track_one(seq_dir: str, cfg: RunConfig, out_dir: str) -> str:
    """Track one sequence directory and write ``<out>/<name>.csv``."""
    root = Path(seq_dir)
    paths = list_frames(root)
    if not paths:
        raise CliError(EXIT_INPUT, f"{root}: no frames")
    mode = MODE_ALIASES[cfg.mode]
    text = None
    nlp = root / "nlp.txt"
    if nlp.is_file():
        text = nlp.read_text().strip() or None
    if mode == "nl" and text is None:
        raise CliError(EXIT_MODALITY, f"{root}: nl mode needs a non-empty nlp.txt")
    init_box = None
    if mode != "nl":
        gt = root / "groundtruth_rect.txt"
        if not gt.is_file():
            raise CliError(EXIT_MODALITY, f"{root}: box modes need groundtruth_rect.txt for the first box")
        boxes = evaluation.parse_groundtruth(gt)
        if not boxes or boxes[0] is None:
            raise CliError(EXIT_MODALITY, f"{root}: the first ground-truth box is absent")
        init_box = boxes[0]
    model = Model.load(cfg.model) if cfg.model else tracker.default_model()
    frames = (load_frame(p) for p in paths)
    recs = tracker.track_sequence(frames, init_box, text, model, cfg.effective_tracker(), mode,
                                  cfg.scale_hint)
    out = Path(out_dir) / f"{root.name}.csv"
    evaluation.write_predictions(out, _records(recs))
    warned = sorted({r.warning for r in recs if r.warning})
    if warned:
        log.warning("%s: %s", root.name, ", ".join(warned))
    return str(out)


def _track_job(job):
    seq, cfg_dict, out = job
    try:
        return track_one(seq, RunConfig.from_dict(cfg_dict), out), None
    except CliError as exc:
        return None, (exc.code, str(exc))


def cmd_track(args) -> int:
    cfg = RunConfig()
    if args.config:
        try:
            cfg = RunConfig.from_dict(_load_json(args.config))
        except (TypeError, ValueError) as exc:
            raise CliError(EXIT_INPUT, f"{args.config}: {exc}") from None
    overrides = {}
    if args.arm:
        overrides.update(arm_flags(args.arm))
    if args.mode:
        overrides["mode"] = args.mode
    if args.model:
        overrides["model"] = args.model
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.scale_hint:
        overrides["scale_hint"] = args.scale_hint
    cfg = dataclasses.replace(cfg, **overrides)
    if args.print_config:
        print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if not args.sequences:
        raise CliError(EXIT_INPUT, "track needs at least one sequence directory")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "arm": args.arm, "config": cfg.to_dict(), "kernels": kernels.BACKEND,
            "sequences": [Path(s).name for s in args.sequences]}
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    jobs = [(s, cfg.to_dict(), str(out)) for s in args.sequences]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_track_job, jobs))
    else:
        results = [_track_job(j) for j in jobs]
    code = EXIT_OK
    for path, err in results:
        if err:
            print(f"error: {err[1]}", file=sys.stderr)
            code = max(code, err[0])
        else:
            print(path)
    return code


# eval


def _arm_inputs(spec: str) -> tuple[str, Path]:
    label, sep, path = spec.partition("=")
    if not sep:
        path = label
        label = Path(path).stem if Path(path).is_file() else Path(path).name
    return label, Path(path)


def _boxes_from_predictions(path: Path, n_frames: int):
    recs = evaluation.read_predictions(path)
    boxes = [None] * n_frames
    for r in recs:
        if not 1 <= r.frame_idx <= n_frames:
            raise CliError(EXIT_INPUT, f"{path}: frame_idx {r.frame_idx} outside 1..{n_frames}")
        boxes[r.frame_idx - 1] = r.box
    return boxes


def cmd_eval(args) -> int:
    annotations = {}
    for seq in args.sequences:
        root = Path(seq)
        try:
            frames, ann = evaluation.ingest_sequence(root)
        except FileNotFoundError as exc:
            raise CliError(EXIT_INPUT, str(exc)) from None
        annotations[root.name] = ann
    out = Path(args.out)
    rows = []
    for spec in args.preds:
        label, path = _arm_inputs(spec)
        results = {}
        for name, ann in sorted(annotations.items()):
            csv_path = path if path.is_file() else path / f"{name}.csv"
            if path.is_file() and len(annotations) > 1:
                raise CliError(EXIT_INPUT, f"{path}: a single prediction file needs exactly one sequence")
            if not csv_path.is_file():
                raise CliError(EXIT_INPUT, f"{csv_path}: no predictions for sequence {name}")
            results[name] = (_boxes_from_predictions(csv_path, len(ann)), ann)
        arm_dir = out / label
        meta = {"seed": args.seed, "arm": label}
        for name, (preds, ann) in results.items():
            evaluation.evaluate(name, preds, ann, meta).write(arm_dir)
        overall = evaluation.evaluate_many(results, "overall", meta)
        overall.write(arm_dir)
        rec = overall.recovery
        rows.append([label, overall.frames, overall.success_auc, overall.precision_auc, overall.norm_precision_auc,
                     overall.precision_at_20, rec.iou_after_occlusion, rec.frames_to_recover_after_occlusion,
                     rec.frames_to_recover_after_loss, rec.positive_frames_after_occlusion])
        print(f"{label}: success AUC {overall.success_auc:.4f}  precision AUC {overall.precision_auc:.4f}  "
              f"norm. precision AUC {overall.norm_precision_auc:.4f}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "frames", "success_auc", "precision_auc", "norm_precision_auc", "precision_at_20",
                    "iou_after_occlusion", "frames_to_recover_after_occlusion", "frames_to_recover_after_loss",
                    "positive_frames_after_occlusion"])
        w.writerows([["" if v is None else v for v in row] for row in rows])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nltrack", description="Language-assisted siamese tracking at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render synthetic sequences or training triplets")
    s.add_argument("spec", nargs="?", help="scenario spec JSON")
    s.add_argument("--suite", action="store_true", help="render the standard suite")
    s.add_argument("--triplets", action="store_true", help="write a training manifest instead")
    s.add_argument("--scenes", type=int, default=50)
    s.add_argument("--per-scene", type=int, default=6)
    s.add_argument("--absent-per-scene", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit the projection heads")
    t.add_argument("--manifest", help="dataset manifest; default: synthetic scenes")
    t.add_argument("--scenes", type=int, default=50)
    t.add_argument("--per-scene", type=int, default=6)
    t.add_argument("--absent-per-scene", type=int, default=5)
    t.add_argument("--epochs", type=int)
    t.add_argument("--config", help="JSON with FitConfig overrides")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    k = sub.add_parser("track", help="track sequence directories")
    k.add_argument("sequences", nargs="*")
    k.add_argument("--config", help="RunConfig JSON")
    k.add_argument("--mode", choices=sorted(MODE_ALIASES))
    k.add_argument("--arm", choices=list(tracker.ARMS))
    k.add_argument("--model", help="model bundle directory (default: bundled toy model)")
    k.add_argument("--scale-hint", type=float, help="target area in pixels for nl mode")
    k.add_argument("--seed", type=int)
    k.add_argument("--jobs", type=int, default=1)
    k.add_argument("--out", default="predictions")
    k.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("sequences", nargs="+")
    e.add_argument("--preds", action="append", required=True,
                   help="[label=]predictions dir or CSV; repeat once per arm")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="reports")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except synth.SpecError as exc:
        print(f"error: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except UnusableQuery as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODALITY
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
