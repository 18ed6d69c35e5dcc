"""Teacher pretraining and the student distillation loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import loss as L
from ..config import build_dataclass, dataclass_fields
from ..data.store import CrossModalData
from ..networks import StudentNetwork, StudentNetworkSpec, TeacherNetwork, TeacherNetworkSpec
from ..numerics import ModelParameters
from ..seeding import derive_seed
from .checkpoint import Checkpoint
from .optim import AdamState, LrSchedule, adam_step, lr_at_epoch

logger = logging.getLogger(__name__)

DISTILL_METHODS = ("ckd", "kd", "none")
CURVE_COLUMNS = ("epoch", "batch", "ce", "tkd", "skd", "ckd_weight", "ckd_total", "pam_mse", "total")


class TrainingError(ValueError):
    """Inconsistent data, teacher or configuration."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    milestones: tuple[int, ...] = (7, 10, 18)
    gamma: float = 0.5
    lambda_pam: float = 1.0
    seed: int = 0
    distill_method: str = "ckd"
    ckd: L.CkdConfig = field(default_factory=L.CkdConfig)

    def __post_init__(self) -> None:
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_pam < 0:
            raise ValueError("lambda_pam must be >= 0")
        if self.distill_method not in DISTILL_METHODS:
            raise ValueError(f"distill_method must be one of {DISTILL_METHODS}, got {self.distill_method!r}")
        self.schedule  # validates lr / milestones / gamma

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.milestones, self.gamma)

    def to_flat(self) -> dict:
        out = {f"train.{k}": v for k, v in dataclass_fields(self).items() if k != "ckd"}
        out.update({f"ckd.{k}": v for k, v in dataclass_fields(self.ckd).items()})
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        train = {k[6:]: v for k, v in values.items() if k.startswith("train.")}
        ckd = {k[4:]: v for k, v in values.items() if k.startswith("ckd.")}
        return build_dataclass(cls, {**train, "ckd": build_dataclass(L.CkdConfig, ckd, "ckd")}, "train")


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    ce: float = 0.0
    tkd: float = 0.0
    skd: float = 0.0
    ckd_weight: float = 0.0
    ckd_total: float = 0.0
    pam_mse: float = 0.0
    total: float = 0.0
    ramp: float = 0.0  # not exported; kept for the warmup check

    def row(self) -> dict:
        return {c: getattr(self, c) for c in CURVE_COLUMNS}


def history_from_rows(rows: list[dict]) -> list[BatchRecord]:
    names = {f.name for f in fields(BatchRecord)}
    return [BatchRecord(**{k: v for k, v in r.items() if k in names}) for r in rows]


def epoch_means(history: list[BatchRecord]) -> list[dict]:
    """Per-epoch batch means of every curve column."""
    out = []
    for e in sorted({r.epoch for r in history}):
        rows = [r for r in history if r.epoch == e]
        m = {"epoch": e, "batch": len(rows)}
        for c in CURVE_COLUMNS[2:]:
            m[c] = float(np.mean([getattr(r, c) for r in rows]))
        out.append(m)
    return out


def _batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batchnorm needs at least two samples per batch
    if len(out) > 1 and len(out[-1]) < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def spec_to_dict(spec) -> dict:
    return dataclass_fields(spec)


def student_from_checkpoint(ckpt: Checkpoint) -> StudentNetwork:
    if ckpt.kind != "student":
        raise TrainingError(f"expected a student checkpoint, got {ckpt.kind!r}")
    return StudentNetwork(build_dataclass(StudentNetworkSpec, ckpt.spec, "student"))


def teacher_from_checkpoint(ckpt: Checkpoint) -> TeacherNetwork:
    if ckpt.kind != "teacher":
        raise TrainingError(f"expected a teacher checkpoint, got {ckpt.kind!r}")
    return TeacherNetwork(build_dataclass(TeacherNetworkSpec, ckpt.spec, "teacher"))


def _check_labels(data: CrossModalData, num_classes: int) -> None:
    if data.labels is None or len(data.labels) == 0:
        raise TrainingError("training data has no class labels")
    if data.labels.min() < 0 or data.labels.max() >= num_classes:
        raise TrainingError(f"labels outside [0, {num_classes})")


def _resume_state(resume: Checkpoint | None, params: ModelParameters, cfg: TrainConfig):
    if resume is None:
        return params, AdamState.for_params(params, lr=cfg.lr), 0, []
    opt = resume.optimizer.copy() if resume.optimizer is not None else AdamState.for_params(resume.params, lr=cfg.lr)
    return resume.params.copy(), opt, resume.epoch, history_from_rows(resume.history)


# -- teacher ------------------------------------------------------------------------------


def train_teacher(data: CrossModalData, spec: TeacherNetworkSpec, cfg: TrainConfig,
                  resume: Checkpoint | None = None, stop_after: int | None = None) -> Checkpoint:
    """Minimize cross-entropy of the frame classifier; per-epoch accuracy goes to ``meta``."""
    _check_labels(data, spec.num_classes)
    net = TeacherNetwork(spec)
    params = net.init_params(derive_seed(cfg.seed, "teacher.init"))
    params, opt, start, history = _resume_state(resume, params, cfg)
    accuracy = list(resume.meta.get("accuracy", [])) if resume else []
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, end):
        lr = lr_at_epoch(cfg.schedule, epoch)
        correct = 0
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, derive_seed(cfg.seed, "teacher.shuffle"), epoch)):
            logits = net.graph.forward(params, {"frame": data.frames[idx]}, train=True)["logits"]
            y = data.labels[idx]
            ce = float(np.mean([L.cross_entropy(z, t) for z, t in zip(logits, y)]))
            g = np.stack([L.cross_entropy_grad(z, t) for z, t in zip(logits, y)]) / len(idx)
            grads = net.graph.backward(params, {"logits": g})
            adam_step(params, grads, opt, lr)
            correct += int((logits.argmax(1) == y).sum())
            history.append(BatchRecord(epoch, b, ce=ce, total=ce))
        accuracy.append(correct / len(data))
        logger.info("teacher epoch %d: ce %.4f acc %.3f", epoch, history[-1].ce, accuracy[-1])
    return Checkpoint("teacher", spec_to_dict(spec), params, opt, max(end, start),
                      [asdict(r) for r in history], {"accuracy": accuracy, "train": cfg.to_flat()})


def teacher_logits(ckpt: Checkpoint, frames: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net = teacher_from_checkpoint(ckpt)
    out = [net.forward(ckpt.params, frames[i:i + batch_size], train=False, update_stats=False)
           for i in range(0, len(frames), batch_size)]
    return np.concatenate(out)


# -- student --------------------------------------------------------------------------------


def _distill_terms(logits: np.ndarray, teacher: np.ndarray | None, labels: np.ndarray, cfg: TrainConfig,
                   ramp: float) -> tuple[dict, np.ndarray]:
    """Batch-mean classification terms and their gradient w.r.t. the student logits."""
    B = len(labels)
    c = cfg.ckd
    ce = np.mean([L.cross_entropy(z, y) for z, y in zip(logits, labels)])
    g = c.ce_weight * np.stack([L.cross_entropy_grad(z, y) for z, y in zip(logits, labels)])
    rec = {"ce": c.ce_weight * ce, "tkd": 0.0, "skd": 0.0, "ckd_weight": 0.0, "ckd_total": 0.0}
    method = cfg.distill_method
    if method == "ckd":
        terms = [L.ckd_loss(z, t, y, c) for z, t, y in zip(logits, teacher, labels)]
        tkd = np.array([t.tkd for t in terms])
        skd = np.array([t.skd for t in terms])
        w = np.array([t.weight for t in terms])
        tot = np.array([t.total for t in terms])
        ssum = skd.sum()
        # effective batch weight so that ckd_total = tkd + weight * skd on the logged means
        rec.update(tkd=ramp * tkd.mean(), skd=ramp * skd.mean(),
                   ckd_weight=float((w * skd).sum() / ssum) if ssum > 0 else float(w.mean()),
                   ckd_total=ramp * tot.mean())
        g = g + ramp * np.stack([L.ckd_loss_grad(z, t, y, c) for z, t, y in zip(logits, teacher, labels)])
    elif method == "kd":
        kd = np.array([L.kd_loss(z, t, c.temperature) for z, t in zip(logits, teacher)])
        rec.update(tkd=ramp * kd.mean(), ckd_total=ramp * kd.mean())
        g = g + ramp * np.stack([L.kd_loss_grad(z, t, c.temperature) for z, t in zip(logits, teacher)])
    return rec, g / B


def distill_student(data: CrossModalData, teacher_ckpt: Checkpoint | None, spec: StudentNetworkSpec,
                    cfg: TrainConfig, resume: Checkpoint | None = None, stop_after: int | None = None,
                    init_params: ModelParameters | None = None, observer=None) -> Checkpoint:
    """Train the CSI student against PAM targets and the frozen teacher's logits.

    Per batch: ``ce_weight * CE + ramp * distill + lambda_pam * MSE(PAM)`` with
    ``ramp = min((epoch + 1) / warmup, 1)``. ``distill_method="none"`` is the
    no-distillation baseline and needs no teacher. ``observer(record, logits,
    teacher_logits, labels)`` is called after every batch.
    """
    _check_labels(data, spec.num_classes)
    if data.coords.shape[1] != spec.K:
        raise TrainingError(f"data has {data.coords.shape[1]} keypoints, student expects K={spec.K}")
    if tuple(data.csi.shape[1:]) != spec.csi_shape:
        raise TrainingError(f"data CSI shape {data.csi.shape[1:]} vs student {spec.csi_shape}")
    t_all = None
    if cfg.distill_method != "none":
        if teacher_ckpt is None:
            raise TrainingError(f"distill_method={cfg.distill_method!r} needs a teacher checkpoint")
        tnet = teacher_from_checkpoint(teacher_ckpt)
        if tnet.spec.num_classes != spec.num_classes:
            raise TrainingError(f"teacher has {tnet.spec.num_classes} classes, student {spec.num_classes}")
        if spec.num_classes < 3 and cfg.distill_method == "ckd":
            raise TrainingError("CKD needs at least 3 classes")
        # the teacher is frozen, so its logits are fixed per sample
        t_all = teacher_logits(teacher_ckpt, data.frames)

    net = StudentNetwork(spec)
    params = init_params.copy() if init_params is not None else net.init_params(derive_seed(cfg.seed, "student.init"))
    params, opt, start, history = _resume_state(resume, params, cfg)
    pams = data.pams
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(start, end):
        lr = lr_at_epoch(cfg.schedule, epoch)
        ramp = L.warmup_ramp(epoch + 1, cfg.ckd.warmup_epochs)
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, derive_seed(cfg.seed, "student.shuffle"), epoch)):
            out = net.graph.forward(params, {"csi": data.csi[idx]}, train=True)
            y = data.labels[idx]
            rec, g_logits = _distill_terms(out["logits"], None if t_all is None else t_all[idx], y, cfg, ramp)
            diff = out["pam"] - pams[idx]
            mse = float(np.mean(diff**2))
            g_pam = cfg.lambda_pam * 2.0 * diff / diff.size
            grads = net.graph.backward(params, {"pam": g_pam, "logits": g_logits})
            adam_step(params, grads, opt, lr)
            total = rec["ce"] + rec["ckd_total"] + cfg.lambda_pam * mse
            history.append(BatchRecord(epoch, b, pam_mse=mse, total=total, ramp=ramp, **rec))
            if observer is not None:
                observer(history[-1], out["logits"], None if t_all is None else t_all[idx], y)
        em = epoch_means([r for r in history if r.epoch == epoch])[0]
        logger.info("student epoch %d: total %.4f pam %.5f ckd %.4f", epoch, em["total"], em["pam_mse"], em["ckd_total"])
    return Checkpoint("student", spec_to_dict(spec), params, opt, max(end, start),
                      [asdict(r) for r in history], {"train": cfg.to_flat()})
