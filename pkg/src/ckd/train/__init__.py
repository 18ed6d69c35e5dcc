from .checkpoint import (
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .loop import (
    CURVE_COLUMNS,
    BatchRecord,
    TrainConfig,
    TrainingError,
    distill_student,
    epoch_means,
    history_from_rows,
    student_from_checkpoint,
    teacher_from_checkpoint,
    teacher_logits,
    train_teacher,
)
from .optim import AdamState, LrSchedule, adam_step, lr_at_epoch

__all__ = [
    "AdamState",
    "BatchRecord",
    "CURVE_COLUMNS",
    "Checkpoint",
    "CheckpointError",
    "CheckpointVersionError",
    "LrSchedule",
    "TrainConfig",
    "TrainingError",
    "adam_step",
    "distill_student",
    "epoch_means",
    "history_from_rows",
    "load_checkpoint",
    "lr_at_epoch",
    "save_checkpoint",
    "student_from_checkpoint",
    "teacher_from_checkpoint",
    "teacher_logits",
    "train_teacher",
]
