"""Knowledge distillation against cached teacher logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Node


@dataclass
class LogitsCache:
    logits: np.ndarray  # float32 [n_samples, n_classes], dataset order

    def __post_init__(self):
        self.logits = np.ascontiguousarray(self.logits, dtype=np.float32)
        if self.logits.ndim != 2:
            raise DimensionError(f"logits cache must be 2-d, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits cache holds non-finite values")

    @property
    def n_samples(self) -> int:
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        return self.logits.shape[1]

    def rows(self, idx: np.ndarray) -> np.ndarray:
        return self.logits[idx]


@dataclass
class KDTerms:
    total: Node
    hard: Node
    soft: Node


def kd_terms(student_logits: Node, labels, teacher_logits: np.ndarray, kd_alpha: float, temperature: float) -> KDTerms:
    """Hard-label and softened-teacher cross-entropies plus their mixture.

    ``total = (1 - alpha) * hard + alpha * T^2 * soft`` where ``soft`` is the
    cross-entropy of ``log_softmax(student / T)`` against ``softmax(teacher / T)``.
    """
    teacher_logits = np.asarray(teacher_logits)
    if teacher_logits.shape != student_logits.shape:
        raise DimensionError(f"kd_loss: teacher logits {teacher_logits.shape} vs student {student_logits.shape}")
    if temperature < 1:
        raise ValueError("temperature must be >= 1")
    hard = T.cross_entropy_logits(student_logits, labels)
    p_teacher = T.softmax(teacher_logits.astype(np.float64) / temperature, axis=1).astype(student_logits.dtype)
    log_ps = T.log_softmax(student_logits * (1.0 / temperature), axis=1)
    soft = -T.mean_rows(log_ps, p_teacher)
    if kd_alpha == 0.0:
        total = hard
    elif kd_alpha == 1.0:
        total = soft * (temperature**2)
    else:
        total = hard * (1.0 - kd_alpha) + soft * (kd_alpha * temperature**2)
    return KDTerms(total, hard, soft)


def kd_loss(student_logits: Node, labels, teacher_logits: np.ndarray, kd_alpha: float, temperature: float) -> Node:
    return kd_terms(student_logits, labels, teacher_logits, kd_alpha, temperature).total


def predict_whole_dataset(model, images: np.ndarray, batch_size: int = 256) -> LogitsCache:
    """Eval-mode logits of ``model`` for every sample, in dataset order.

    ``model`` is anything with ``predict(batch) -> np.ndarray`` (a dense
    network or a pruned graph).
    """
    n_classes = getattr(model, "num_classes", None)
    out = []
    for start in range(0, len(images), batch_size):
        out.append(np.asarray(model.predict(images[start : start + batch_size]), dtype=np.float32))
    logits = np.concatenate(out, axis=0) if out else np.zeros((0, n_classes or 0), np.float32)
    if n_classes is not None and logits.shape[1] != n_classes:
        raise ConfigError(f"model produced {logits.shape[1]} classes, expected {n_classes}")
    return LogitsCache(logits)
