"""Forward evaluation of the composite distillation loss.

    total = lambda_cls * CE(student, label)
          + lambda_logits * T^2 * KL(softmax(teacher / T) || softmax(student / T))
          + lambda_feat * MSE(student_feat @ proj, teacher_feat)

Losses are computed in float64 and returned as Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class DistillWeights:
    lambda_cls: float = 1.0
    lambda_logits: float = 1.0
    lambda_feat: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.lambda_cls, self.lambda_logits, self.lambda_feat) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass(frozen=True)
class FeatureProjection:
    matrix: np.ndarray  # (student_dim, teacher_dim)

    @classmethod
    def identity(cls, dim: int) -> "FeatureProjection":
        return cls(np.eye(dim, dtype=np.float32))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def _vector(x, what: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError(f"{what} must be a non-empty finite vector")
    return v


def cross_entropy(logits, label: int) -> float:
    z = _vector(logits, "logits")
    if not 0 <= label < z.size:
        raise IndexError(f"label {label} out of range for {z.size} classes")
    return float(-_log_softmax(z)[label])


def kd_divergence(student_logits, teacher_logits, temperature: float = 1.0) -> float:
    s = _vector(student_logits, "student logits")
    t = _vector(teacher_logits, "teacher logits")
    if s.shape != t.shape:
        raise ShapeError(f"student has {s.size} logits, teacher has {t.size}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_p = _log_softmax(t / temperature)
    log_q = _log_softmax(s / temperature)
    kl = float(np.sum(np.exp(log_p) * (log_p - log_q)))
    # KL >= 0; rounding can leave a tiny negative residue.
    return temperature * temperature * max(kl, 0.0)


def feature_loss(student_feat, teacher_feat, proj: FeatureProjection) -> float:
    s = np.atleast_2d(np.asarray(student_feat, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_feat, dtype=np.float64))
    p = np.asarray(proj.matrix, dtype=np.float64)
    if s.shape[1] != p.shape[0] or (s.shape[0], p.shape[1]) != t.shape:
        raise ShapeError(f"student {s.shape} @ projection {p.shape} does not match teacher {t.shape}")
    diff = s @ p - t
    return float(np.mean(diff * diff))


def total_loss(ce: float, kd: float, feat: float, w: DistillWeights = DistillWeights()) -> float:
    return w.lambda_cls * ce + w.lambda_logits * kd + w.lambda_feat * feat


def distill_loss(student_logits, teacher_logits, label: int, student_feat, teacher_feat,
                 proj: FeatureProjection, w: DistillWeights = DistillWeights()) -> dict[str, float]:
    """All three components and their weighted total."""
    parts = {
        "ce": cross_entropy(student_logits, label),
        "kd": kd_divergence(student_logits, teacher_logits, w.temperature),
        "feat": feature_loss(student_feat, teacher_feat, proj),
    }
    parts["total"] = total_loss(parts["ce"], parts["kd"], parts["feat"], w)
    return parts
