"""Command-line entry point: ``ckd <command> [options]``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification failure.
The default config file path may be given by the ``CKD_CONFIG`` environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ConfigError, build_dataclass, dataclass_fields, format_flat, parse_flat, parse_value
from .data import DataFormatError, SynthConfig, load_dataset, split_dataset, synth_generate
from .data.csi import parse_csi_file
from .data.store import CrossModalData, read_frame_sidecar, save_dataset, write_pairs
from .data.sync import match_timestamps
from .eval import MetricsError, MetricsReport, classification_metrics, export_curves, pose_report
from .networks import SpecError, StudentNetworkSpec, TeacherNetworkSpec
from .pam import PoseFormatError
from .seeding import derive_seed
from .train import (
    CheckpointError,
    TrainConfig,
    TrainingError,
    distill_student,
    load_checkpoint,
    save_checkpoint,
    student_from_checkpoint,
    teacher_logits,
    train_teacher,
)

logger = logging.getLogger("ckd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3
ENV_CONFIG = "CKD_CONFIG"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    split_ratio: float = 0.85
    tolerance_ms: int = 20
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student: StudentNetworkSpec = field(default_factory=StudentNetworkSpec)
    teacher: TeacherNetworkSpec = field(default_factory=TeacherNetworkSpec)

    @property
    def split_seed(self) -> int:
        return derive_seed(self.seed, "split")

    def to_flat(self) -> dict:
        out = {"run.seed": self.seed, "run.split_ratio": self.split_ratio, "run.tolerance_ms": self.tolerance_ms}
        out.update({f"synth.{k}": v for k, v in dataclass_fields(self.synth).items()})
        out.update(self.train.to_flat())
        out.update({f"teacher_train.{k}": v for k, v in dataclass_fields(self.teacher_train).items() if k != "ckd"})
        out.update({f"student.{k}": v for k, v in dataclass_fields(self.student).items()})
        out.update({f"teacher.{k}": v for k, v in dataclass_fields(self.teacher).items()})
        return out


_SECTIONS = ("run", "synth", "train", "ckd", "teacher_train", "student", "teacher")


def build_run_config(values: dict) -> RunConfig:
    """Assemble a RunConfig from flat dotted keys; unknown keys are rejected by name."""
    groups: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, v in values.items():
        section, _, name = key.partition(".")
        if section not in groups or not name:
            raise ConfigError(f"unknown config key {key}")
        groups[section][name] = v
    run = groups["run"]
    for k in run:
        if k not in ("seed", "split_ratio", "tolerance_ms"):
            raise ConfigError(f"unknown config key run.{k}")
    seed = int(run.get("seed", 0))
    synth = build_dataclass(SynthConfig, {"seed": seed, **groups["synth"]}, "synth")
    train = TrainConfig.from_flat({"train.seed": seed, **{f"train.{k}": v for k, v in groups["train"].items()},
                                   **{f"ckd.{k}": v for k, v in groups["ckd"].items()}})
    tt = build_dataclass(TrainConfig, {"seed": seed, **groups["teacher_train"]}, "teacher_train")
    student = build_dataclass(StudentNetworkSpec, {"num_classes": synth.num_classes, "K": synth.K,
                                                   "csi_shape": synth.csi_shape, **groups["student"]}, "student")
    teacher = build_dataclass(TeacherNetworkSpec, {"num_classes": synth.num_classes,
                                                   "frame_shape": (3, *synth.frame_size), **groups["teacher"]},
                              "teacher")
    ratio = float(run.get("split_ratio", 0.85))
    if not 0 < ratio < 1:
        raise ConfigError("run.split_ratio must lie in (0, 1)")
    return RunConfig(seed, ratio, int(run.get("tolerance_ms", 20)), synth, train, tt, student, teacher)


def load_run_config(path: str | None, overrides: list[str]) -> RunConfig:
    values: dict = {}
    path = path or os.environ.get(ENV_CONFIG)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        values.update(parse_flat(p.read_text(), str(p)))
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = parse_value(val)
    return build_run_config(values)


def _echo_config(out_dir: Path, cfg: RunConfig, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_flat(cfg.to_flat())
    if extra:
        text += "".join(f"# {k} = {v}\n" for k, v in extra.items())
    (out_dir / "effective_config.txt").write_text(text)


def _require(path: str | os.PathLike, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _split(data: CrossModalData, cfg: RunConfig):
    s = split_dataset(len(data), cfg.split_ratio, cfg.split_seed)
    return s, data.subset(s.train), data.subset(s.test)


# -- commands -----------------------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    ds = synth_generate(cfg.synth)
    try:
        rows = [(p.frame.frame_index, p.csi_row, p.lag_ms) for p in ds.pairs]
        save_dataset(out, ds.frames, ds.csi, rows)
    except OSError as exc:
        raise DataFormatError(f"cannot write dataset to {out}: {exc}") from exc
    _echo_config(out, cfg)
    print(f"synth: {cfg.synth.num_classes} classes x {cfg.synth.samples_per_class} samples = {len(ds.pairs)} pairs, "
          f"{len(ds.csi)} CSI samples, seed {cfg.synth.seed} -> {out}")
    return EXIT_OK


def cmd_sync(args, cfg: RunConfig) -> int:
    csi = parse_csi_file(_require(args.csi, "CSI file").read_bytes())
    stamps, _, _ = read_frame_sidecar(_require(args.frames, "frame sidecar"))
    tol = cfg.tolerance_ms if args.tolerance is None else args.tolerance
    stamps = sorted(stamps, key=lambda r: r[1])
    csi_ts = [c.timestamp for c in csi]
    idx, dropped = match_timestamps([t for _, t in stamps], csi_ts, tol)
    rows = [(stamps[i][0], j, csi_ts[j] - stamps[i][1]) for i, j in idx]
    write_pairs(args.out, rows)
    print(f"sync: {len(rows)} pairs, {dropped} frames dropped (tolerance {tol} ms) -> {args.out}")
    return EXIT_OK


def _load_data(args) -> CrossModalData:
    root = _require(args.data, "dataset directory")
    pairs = _require(args.pairs, "pair index") if getattr(args, "pairs", None) else None
    return load_dataset(root, pairs)


def cmd_train_teacher(args, cfg: RunConfig) -> int:
    data = _load_data(args)
    _, train, _ = _split(data, cfg)
    resume = load_checkpoint(_require(args.resume, "checkpoint")) if args.resume else None
    out = Path(args.out)
    ck = train_teacher(train, cfg.teacher, cfg.teacher_train, resume=resume)
    save_checkpoint(ck, out / "teacher.ckpt")
    export_curves(ck.history, out)
    _echo_config(out, cfg)
    acc = ck.meta["accuracy"][-1] if ck.meta["accuracy"] else float("nan")
    print(f"train-teacher: {ck.epoch} epochs, final train accuracy {acc:.4f} -> {out / 'teacher.ckpt'}")
    return EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    ckd = cfg.train.ckd
    try:
        ckd = replace(ckd, **{k: v for k, v in (("weight_mode", args.weight_mode), ("temperature", args.temperature),
                                                ("temp_scale_mode", args.temp_scale)) if v is not None})
        train_cfg = replace(cfg.train, ckd=ckd, **({"distill_method": args.method} if args.method else {}))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = _load_data(args)
    _, train, test = _split(data, cfg)
    teacher = load_checkpoint(_require(args.teacher, "teacher checkpoint")) if args.teacher else None
    resume = load_checkpoint(_require(args.resume, "checkpoint")) if args.resume else None
    out = Path(args.out)
    ck = distill_student(train, teacher, cfg.student, train_cfg, resume=resume)
    save_checkpoint(ck, out / "student.ckpt")
    summary = export_curves(ck.history, out)
    report = _student_report(ck, test, "test")
    (out / "report.json").write_text(report.to_json())
    _echo_config(out, replace(cfg, train=train_cfg))
    print(f"distill[{train_cfg.distill_method}]: loss ratio {summary['last_over_first']:.4f}, "
          f"test keypoint error {report.mean_keypoint_error:.5f}, PCK@0.2 {report.pck_at_0_2:.4f} -> {out}")
    return EXIT_OK


def _student_report(ck, data: CrossModalData, split: str) -> MetricsReport:
    net = student_from_checkpoint(ck)
    pam, logits = net.forward(ck.params, data.csi, train=False, update_stats=False)
    return pose_report(pam, logits, data.coords, data.labels, {"split": split, "kind": "student"})


def evaluate_checkpoint(ck, data: CrossModalData, split: str) -> MetricsReport:
    if len(data) == 0:
        raise MetricsError(f"split {split!r} is empty")
    if ck.kind == "student":
        return _student_report(ck, data, split)
    logits = teacher_logits(ck, data.frames)
    acc, per = classification_metrics(logits, data.labels)
    return MetricsReport(len(data), acc, per, meta={"split": split, "kind": "teacher"})


def cmd_eval(args, cfg: RunConfig) -> int:
    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    data = _load_data(args)
    _, train, test = _split(data, cfg)
    subset = {"train": train, "test": test}[args.split]
    report = evaluate_checkpoint(ck, subset, args.split)
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .verify import run_gradchecks

    results = run_gradchecks(h=args.h, inject_fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:40s} max_rel_err={r.max_error:.3e} (tol {r.tolerance:g})")
    failed = [r for r in results if not r.passed]
    print(f"gradcheck: {len(results) - len(failed)}/{len(results)} passed")
    if args.out:
        Path(args.out).write_text(json.dumps([{"name": r.name, "max_error": r.max_error, "passed": r.passed}
                                              for r in results], indent=2))
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser -------------------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"flat key = value config file (default: ${ENV_CONFIG})")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="ckd", description="Correlated knowledge distillation: camera teacher, WiFi CSI student.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    s = add("synth", help="generate the synthetic cross-modal dataset")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = add("sync", help="pair frames with CSI samples by timestamp")
    s.add_argument("--csi", required=True)
    s.add_argument("--frames", required=True, help="frame timestamp sidecar (frames.csv)")
    s.add_argument("--tolerance", type=int, help="max |lag| in ms (default run.tolerance_ms)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sync)

    for name, func in (("train-teacher", cmd_train_teacher), ("distill", cmd_distill)):
        s = add(name)
        s.add_argument("--data", required=True)
        s.add_argument("--pairs", help="pair index CSV (default: <data>/pairs.csv)")
        s.add_argument("--out", required=True)
        s.add_argument("--resume", help="checkpoint to continue from")
        if name == "distill":
            s.add_argument("--teacher", help="teacher checkpoint (not needed with --method none)")
            s.add_argument("--method", choices=("ckd", "kd", "none"))
            s.add_argument("--weight-mode", choices=("adaptive", "fixed_beta"))
            s.add_argument("--temperature", type=float)
            s.add_argument("--temp-scale", choices=("squared", "literal_times4"))
        s.set_defaults(func=func)

    s = add("eval", help="evaluate a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--pairs")
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = add("gradcheck", help="finite-difference verification of all gradients")
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--inject-fault", action="store_true", help="perturb analytic gradients by 1%% (self-test)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"ckd: usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, args.set)
        return args.func(args, cfg)
    except (ConfigError, SpecError) as exc:
        print(f"ckd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, PoseFormatError, CheckpointError, TrainingError, MetricsError, OSError) as exc:
        print(f"ckd: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
