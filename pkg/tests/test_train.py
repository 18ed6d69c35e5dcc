import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ckd.data import SynthConfig, synth_generate, synth_to_data
from ckd.data.store import CrossModalData
from ckd import loss as L
from ckd.loss import CkdConfig
from ckd.networks import StudentNetwork, StudentNetworkSpec, TeacherNetwork, TeacherNetworkSpec
from ckd.numerics import ModelParameters, ShapeError
from ckd.seeding import derive_seed
from ckd.train import (
    AdamState,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    LrSchedule,
    TrainConfig,
    TrainingError,
    adam_step,
    distill_student,
    history_from_rows,
    load_checkpoint,
    lr_at_epoch,
    save_checkpoint,
    student_from_checkpoint,
    train_teacher,
)
from ckd.train.checkpoint import from_bytes, to_bytes

SMALL_STUDENT = StudentNetworkSpec(feature_shape=(8, 6, 6), decoder_channels=4, stage_blocks=(1, 1))
SMALL_TEACHER = TeacherNetworkSpec(channels=(4, 8))


@pytest.fixture(scope="module")
def data():
    return synth_to_data(synth_generate(SynthConfig(samples_per_class=6, noise_sigma=0.2)))


@pytest.fixture(scope="module")
def teacher(data):
    return train_teacher(data, SMALL_TEACHER, TrainConfig(epochs=3, batch_size=16))


# -- Adam ---------------------------------------------------------------------------------


def _scalar_params(x):
    return ModelParameters({"w": np.array([x])})


def test_adam_zero_gradient_is_a_no_op():
    p = _scalar_params(1.5)
    st_ = AdamState.for_params(p)
    adam_step(p, {"w": np.zeros(1)}, st_)
    assert p.tensors["w"][0] == 1.5
    assert st_.t == 1


def test_adam_first_step_closed_form():
    p = _scalar_params(0.0)
    adam_step(p, {"w": np.array([0.5])}, AdamState.for_params(p, lr=0.001))
    # hand-rolled: m = 0.1 * 0.5, v = 0.001 * 0.25, bias-corrected to 0.5 and 0.25
    m_hat = (0.1 * 0.5) / (1 - 0.9)
    v_hat = (0.001 * 0.25) / (1 - 0.999)
    expected = -0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.tensors["w"][0] == pytest.approx(expected, rel=1e-12)
    assert p.tensors["w"][0] == pytest.approx(-0.001, rel=1e-7)


def test_adam_deterministic_trajectories():
    rng = np.random.default_rng(0)
    gs = [rng.normal(size=(3, 2)) for _ in range(10)]
    outs = []
    for _ in range(2):
        p = ModelParameters({"w": np.ones((3, 2))})
        s = AdamState.for_params(p)
        for g in gs:
            adam_step(p, {"w": g}, s)
        outs.append(p.tensors["w"].tobytes())
    assert outs[0] == outs[1]


def test_adam_shape_mismatch():
    p = _scalar_params(0.0)
    with pytest.raises(ShapeError):
        adam_step(p, {"w": np.zeros(2)}, AdamState.for_params(p))
    with pytest.raises(ShapeError):
        adam_step(p, {"v": np.zeros(1)}, AdamState.for_params(p))


# -- schedule ---------------------------------------------------------------------------------


def test_schedule_milestones():
    s = LrSchedule(0.001, (7, 10, 18), 0.5)
    assert [lr_at_epoch(s, e) for e in range(7)] == [0.001] * 7
    assert lr_at_epoch(s, 7) == 0.0005
    assert lr_at_epoch(s, 10) == 0.00025
    assert lr_at_epoch(s, 18) == 0.000125


def test_schedule_constant_cases():
    assert {lr_at_epoch(LrSchedule(0.01, ()), e) for e in range(30)} == {0.01}
    assert {lr_at_epoch(LrSchedule(0.01, (1, 2), 1.0), e) for e in range(30)} == {0.01}


def test_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule(0.001, (7, 7))
    with pytest.raises(ValueError):
        LrSchedule(0.001, (7,), 0.0)
    with pytest.raises(ValueError):
        lr_at_epoch(LrSchedule(), -1)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), unique=True, max_size=5), st.floats(0.05, 1.0), st.integers(0, 60))
def test_schedule_nonincreasing(ms, gamma, epoch):
    s = LrSchedule(0.001, tuple(sorted(ms)), gamma)
    assert lr_at_epoch(s, epoch + 1) <= lr_at_epoch(s, epoch)


# -- teacher ------------------------------------------------------------------------------------


def _separable_frames(n=40, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    frames = rng.uniform(0, 0.2, size=(n, 3, 8, 8))
    frames[y == 1, 0] += 0.7  # class 1 is bright in channel 0
    return CrossModalData(np.zeros((n, 1, 1, 1)), frames, np.zeros((n, 18, 2)), y, np.arange(n))


def test_teacher_learns_separable_toy():
    spec = TeacherNetworkSpec(frame_shape=(3, 8, 8), channels=(4,), num_classes=2)
    ck = train_teacher(_separable_frames(), spec, TrainConfig(epochs=20, batch_size=8))
    assert ck.meta["accuracy"][-1] >= 0.99


def test_teacher_zero_epochs_is_initialization(data):
    ck = train_teacher(data, SMALL_TEACHER, TrainConfig(epochs=0))
    ref = TeacherNetwork(SMALL_TEACHER).init_params(derive_seed(0, "teacher.init"))
    assert all(np.array_equal(ck.params.tensors[k], v) for k, v in ref.tensors.items())


def test_teacher_deterministic(data, teacher):
    again = train_teacher(data, SMALL_TEACHER, TrainConfig(epochs=3, batch_size=16))
    assert again.history == teacher.history


def test_teacher_rejects_bad_labels(data):
    bad = CrossModalData(data.csi, data.frames, data.coords, data.labels + 20, data.frame_index)
    with pytest.raises(TrainingError):
        train_teacher(bad, SMALL_TEACHER, TrainConfig(epochs=1))


# -- distillation ----------------------------------------------------------------------------


def _cfg(**kw):
    ckd = kw.pop("ckd", CkdConfig(warmup_epochs=2))
    return TrainConfig(epochs=kw.pop("epochs", 3), batch_size=16, ckd=ckd, **kw)


def test_constructed_teacher_equal_student_has_zero_ckd(data):
    spec = SMALL_STUDENT
    b = np.array([0.3, -1.0, 2.0, 0.1, 0.0, 0.7, -0.4, 1.1])
    tparams = TeacherNetwork(SMALL_TEACHER).init_params(0)
    tparams.tensors["fc.weight"][...] = 0
    tparams.tensors["fc.bias"][...] = b
    tck = Checkpoint("teacher", {"frame_shape": (3, 32, 32), "channels": (4, 8), "num_classes": 8}, tparams)
    init = StudentNetwork(spec).init_params(1)
    init.tensors["cls_head.weight"][...] = 0
    init.tensors["cls_head.bias"][...] = b
    cfg = TrainConfig(epochs=2, batch_size=16, lambda_pam=0.0,
                      ckd=CkdConfig(ce_weight=0.0, warmup_epochs=1))
    ck = distill_student(data, tck, spec, cfg, init_params=init)
    assert all(r["ckd_total"] == 0.0 for r in ck.history)
    for name in ("cls_head.weight", "cls_head.bias"):
        np.testing.assert_array_equal(ck.params.tensors[name], init.tensors[name])


@pytest.fixture(scope="module")
def ckd_run(data, teacher):
    return distill_student(data, teacher, SMALL_STUDENT, _cfg())


def test_curves_recompose(ckd_run):
    for r in ckd_run.history:
        assert abs(r["ckd_total"] - (r["tkd"] + r["ckd_weight"] * r["skd"])) <= 1e-12 * max(1, r["ckd_total"])
        assert r["ckd_total"] <= r["tkd"] + r["skd"] + 1e-15
        assert 0 < r["ckd_weight"] < 1
        assert r["total"] == pytest.approx(r["ce"] + r["ckd_total"] + r["pam_mse"], rel=1e-15)


def test_warmup_scales_distillation(data, teacher, ckd_run):
    ramps = {r["epoch"]: r["ramp"] for r in ckd_run.history}
    assert ramps == {0: 0.5, 1: 1.0, 2: 1.0}
    seen = []

    def observe(rec, logits, t_logits, labels):
        cfg = CkdConfig(warmup_epochs=2)
        raw = np.mean([L.ckd_loss(z, t, y, cfg).total for z, t, y in zip(logits, t_logits, labels)])
        seen.append((rec.ckd_total, rec.ramp * raw))

    distill_student(data, teacher, SMALL_STUDENT, _cfg(epochs=1), observer=observe)
    assert seen
    for logged, recomputed in seen:
        assert abs(logged - recomputed) <= 1e-12


def test_distill_deterministic(data, teacher, ckd_run):
    again = distill_student(data, teacher, SMALL_STUDENT, _cfg())
    assert again.history == ckd_run.history


def test_resume_matches_unbroken_run(data, teacher, ckd_run, tmp_path):
    part = distill_student(data, teacher, SMALL_STUDENT, _cfg(), stop_after=2)
    save_checkpoint(part, tmp_path / "part.ckpt")
    resumed = distill_student(data, teacher, SMALL_STUDENT, _cfg(), resume=load_checkpoint(tmp_path / "part.ckpt"))
    assert resumed.history == ckd_run.history
    for k, v in ckd_run.params.tensors.items():
        assert resumed.params.tensors[k].tobytes() == v.tobytes()


def test_other_methods(data, teacher):
    none = distill_student(data, None, SMALL_STUDENT, _cfg(epochs=1, distill_method="none"))
    assert all(r["ckd_total"] == 0 for r in none.history)
    kd = distill_student(data, teacher, SMALL_STUDENT, _cfg(epochs=1, distill_method="kd"))
    assert all(r["ckd_total"] > 0 and r["ckd_total"] == r["tkd"] for r in kd.history)
    fixed = distill_student(data, teacher, SMALL_STUDENT,
                            _cfg(epochs=1, ckd=CkdConfig(weight_mode="fixed_beta", beta=8.0)))
    assert all(r["ckd_weight"] == 8.0 for r in fixed.history)


def test_distill_errors(data, teacher):
    with pytest.raises(TrainingError, match="teacher"):
        distill_student(data, None, SMALL_STUDENT, _cfg(epochs=1))
    wrong = StudentNetworkSpec(feature_shape=(8, 6, 6), decoder_channels=4, stage_blocks=(1,), num_classes=9)
    with pytest.raises(TrainingError, match="classes"):
        distill_student(data, teacher, wrong, _cfg(epochs=1))


# -- checkpoints -----------------------------------------------------------------------------


def test_checkpoint_roundtrip_forward_bit_exact(data, ckd_run, tmp_path):
    path = tmp_path / "s.ckpt"
    save_checkpoint(ckd_run, path)
    back = load_checkpoint(path)
    net = student_from_checkpoint(back)
    a = net.forward(ckd_run.params, data.csi[:5])
    b = net.forward(back.params, data.csi[:5])
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert back.history == ckd_run.history
    assert back.optimizer.t == ckd_run.optimizer.t
    assert history_from_rows(back.history)[3].ramp == ckd_run.history[3]["ramp"]


def test_checkpoint_corruption(ckd_run):
    raw = to_bytes(ckd_run)
    with pytest.raises(CheckpointVersionError):
        from_bytes(b"CKD2" + raw[4:])
    with pytest.raises(CheckpointError):
        from_bytes(raw[: len(raw) // 2])
    flipped = bytearray(raw)
    flipped[len(raw) // 2] ^= 0xFF
    with pytest.raises(CheckpointError):
        from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        from_bytes(b"CK")


def test_train_config_flat_roundtrip():
    cfg = TrainConfig(epochs=5, milestones=(2, 4), ckd=CkdConfig(temperature=2.0, weight_mode="fixed_beta"))
    assert TrainConfig.from_flat(cfg.to_flat()) == cfg
