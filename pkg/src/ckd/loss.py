"""Correlated knowledge distillation loss.

The distillation target is split in two. TKD compares the binary
(target-class vs. rest) distributions of student and teacher; SKD compares the
distributions over the remaining classes once the target class is removed.
Both comparisons use the normalized squared error of log-probabilities, and
the two terms are combined as ``tkd + w * skd`` where ``w`` is either the
teacher's non-target mass ``1 - p_r`` (adaptive) or a constant ``beta``.

All losses are evaluated from logits in log space, so no probability is ever
rounded to zero before a logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

WEIGHT_MODES = ("adaptive", "fixed_beta")
TEMP_SCALE_MODES = ("squared", "literal_times4")


@dataclass
class CkdConfig:
    temperature: float = 4.0
    alpha: float = 1.0
    beta: float = 8.0
    weight_mode: str = "adaptive"
    warmup_epochs: int = 5
    ce_weight: float = 1.0
    temp_scale_mode: str = "squared"

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.warmup_epochs < 1:
            raise ValueError(f"warmup_epochs must be >= 1, got {self.warmup_epochs}")
        if self.ce_weight < 0:
            raise ValueError(f"ce_weight must be >= 0, got {self.ce_weight}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if self.temp_scale_mode not in TEMP_SCALE_MODES:
            raise ValueError(f"temp_scale_mode must be one of {TEMP_SCALE_MODES}, got {self.temp_scale_mode!r}")

    @property
    def temp_scale(self) -> float:
        if self.temp_scale_mode == "squared":
            return self.temperature**2
        return self.temperature * 4.0


class BinaryProbabilities(NamedTuple):
    p_r: float
    p_nr: float


class MaskedProbabilities(NamedTuple):
    p_hat: np.ndarray
    excluded_index: int


class CkdTerms(NamedTuple):
    total: float
    tkd: float
    skd: float
    weight: float


# -- probability decompositions -----------------------------------------------------


def _logits(values, name: str = "logits") -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError(f"{name}: expected a vector of >= 2 logits, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name}: non-finite logits")
    return v


def _check_index(r: int, n: int) -> int:
    if not 0 <= int(r) < n:
        raise IndexError(f"class index {r} out of range for {n} classes")
    return int(r)


def logsumexp(z: np.ndarray) -> float:
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def _log_normalize(z: np.ndarray) -> np.ndarray:
    # shift before normalizing so large logits do not cost precision
    z = z - np.max(z)
    return z - np.log(np.sum(np.exp(z)))


def log_softmax(logits, temperature: float = 1.0) -> np.ndarray:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    return _log_normalize(_logits(logits) / temperature)


def softmax_probs(logits, temperature: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, temperature))


def binary_probs(probs, relevant: int) -> BinaryProbabilities:
    p = np.asarray(probs, dtype=np.float64)
    r = _check_index(relevant, p.size)
    mask = np.ones(p.size, dtype=bool)
    mask[r] = False
    return BinaryProbabilities(float(p[r]), float(p[mask].sum()))


def _binary_log_probs(logits: np.ndarray, r: int, temperature: float) -> np.ndarray:
    z = logits / temperature
    z = z - np.max(z)
    lse = logsumexp(z)
    rest = logsumexp(np.delete(z, r))
    return np.array([z[r] - lse, rest - lse])


def _masked_log_probs(logits: np.ndarray, r: int, temperature: float) -> np.ndarray:
    return _log_normalize(np.delete(logits / temperature, r))


def masked_probs(logits, relevant: int, temperature: float = 1.0) -> MaskedProbabilities:
    v = _logits(logits)
    r = _check_index(relevant, v.size)
    return MaskedProbabilities(np.exp(_masked_log_probs(v, r, temperature)), r)


def masked_log_probs_offset(logits, relevant: int, temperature: float = 1.0, offset: float = 1000.0) -> np.ndarray:
    """Target exclusion by pushing the target logit down by ``offset``.

    Returns the log-softmax over the non-target classes only. Agrees with
    exact exclusion up to a term of order ``exp(-offset)``.
    """
    v = _logits(logits)
    r = _check_index(relevant, v.size)
    z = v / temperature
    z[r] -= offset
    return np.delete(_log_normalize(z), r)


# -- normalized squared error ------------------------------------------------------------


def log_probs(p) -> np.ndarray:
    """Logarithm of a probability vector; exact zeros are an error."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("probability vector has a zero (or negative) entry; log undefined")
    return np.log(p)


def nse_log(lp1: np.ndarray, lp2: np.ndarray) -> float:
    if lp1.shape != lp2.shape:
        raise ValueError(f"length mismatch: {lp1.shape} vs {lp2.shape}")
    d = lp1 - lp2
    return float(d @ d / d.size)


def nse(p1, p2) -> float:
    """Mean squared difference of log-probabilities."""
    return nse_log(log_probs(p1), log_probs(p2))


# -- loss terms -------------------------------------------------------------------------


def _pair(student, teacher, target):
    s = _logits(student, "student logits")
    t = _logits(teacher, "teacher logits")
    if s.shape != t.shape:
        raise ValueError(f"student has {s.size} classes, teacher {t.size}")
    return s, t, _check_index(target, s.size)


def tkd_loss(student, teacher, target: int, cfg: CkdConfig) -> float:
    s, t, r = _pair(student, teacher, target)
    T = cfg.temperature
    return nse_log(_binary_log_probs(s, r, T), _binary_log_probs(t, r, T)) * cfg.temp_scale


def skd_loss(student, teacher, target: int, cfg: CkdConfig) -> float:
    s, t, r = _pair(student, teacher, target)
    if s.size < 3:
        raise ValueError("SKD needs at least 3 classes")
    T = cfg.temperature
    return nse_log(_masked_log_probs(s, r, T), _masked_log_probs(t, r, T)) * cfg.temp_scale


def skd_weight(teacher, target: int, cfg: CkdConfig) -> float:
    if cfg.weight_mode == "fixed_beta":
        return float(cfg.beta)
    t = _logits(teacher, "teacher logits")
    r = _check_index(target, t.size)
    # 1 - p_r of the temperature-softened teacher, computed as the non-target mass
    return float(np.exp(_binary_log_probs(t, r, cfg.temperature)[1]))


def ckd_loss(student, teacher, target: int, cfg: CkdConfig) -> CkdTerms:
    tkd = tkd_loss(student, teacher, target, cfg)
    if cfg.weight_mode == "fixed_beta":
        tkd *= cfg.alpha
    skd = skd_loss(student, teacher, target, cfg)
    w = skd_weight(teacher, target, cfg)
    return CkdTerms(tkd + w * skd, tkd, skd, w)


def ckd_loss_grad(student, teacher, target: int, cfg: CkdConfig) -> np.ndarray:
    """Gradient of ``ckd_loss(...).total`` w.r.t. the student logits (teacher held constant)."""
    s, t, r = _pair(student, teacher, target)
    T = cfg.temperature
    n = s.size
    p = softmax_probs(s, T)
    notr = np.ones(n, dtype=bool)
    notr[r] = False

    # TKD: d/dz of mean over 2 entries of (b_s - b_t)^2
    db = _binary_log_probs(s, r, T) - _binary_log_probs(t, r, T)
    p_nr = p[notr].sum()
    e_r = np.zeros(n)
    e_r[r] = 1.0
    d_log_pr = e_r - p
    d_log_pnr = np.where(notr, p / p_nr, 0.0) - p
    g_tkd = db[0] * d_log_pr + db[1] * d_log_pnr  # (2/2) * sum_k db_k * d b_k
    g_tkd *= cfg.temp_scale * (cfg.alpha if cfg.weight_mode == "fixed_beta" else 1.0)

    # SKD: mean over N-1 entries of (h_s - h_t)^2 with h the masked log-softmax
    D = _masked_log_probs(s, r, T) - _masked_log_probs(t, r, T)
    p_hat = p[notr] / p_nr
    g_skd = np.zeros(n)
    g_skd[notr] = 2.0 / (n - 1) * (D - p_hat * D.sum())
    g_skd *= cfg.temp_scale

    w = skd_weight(t, r, cfg)
    return (g_tkd + w * g_skd) / T


# -- training objective ------------------------------------------------------------------


def warmup_ramp(epoch: float, warmup_epochs: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(epoch / warmup_epochs, 1.0)


def cross_entropy(logits, target: int) -> float:
    v = _logits(logits)
    return float(-log_softmax(v)[_check_index(target, v.size)])


def cross_entropy_grad(logits, target: int) -> np.ndarray:
    v = _logits(logits)
    g = softmax_probs(v)
    g[_check_index(target, v.size)] -= 1.0
    return g


def total_training_loss(student, teacher, target: int, epoch: float, cfg: CkdConfig) -> float:
    ramp = warmup_ramp(epoch, cfg.warmup_epochs)
    return cfg.ce_weight * cross_entropy(student, target) + ramp * ckd_loss(student, teacher, target, cfg).total


def total_training_loss_grad(student, teacher, target: int, epoch: float, cfg: CkdConfig) -> np.ndarray:
    ramp = warmup_ramp(epoch, cfg.warmup_epochs)
    return cfg.ce_weight * cross_entropy_grad(student, target) + ramp * ckd_loss_grad(student, teacher, target, cfg)


# -- standard KD baseline -------------------------------------------------------------


def kd_loss(student, teacher, temperature: float) -> float:
    """Hinton distillation: T^2 * KL(teacher || student) at temperature T."""
    ls = log_softmax(student, temperature)
    lt = log_softmax(teacher, temperature)
    return float(np.sum(np.exp(lt) * (lt - ls)) * temperature**2)


def kd_loss_grad(student, teacher, temperature: float) -> np.ndarray:
    return temperature * (softmax_probs(student, temperature) - softmax_probs(teacher, temperature))
