"""Differentiable losses used by the distillation strategies.

Teacher-side arguments of matching losses are always treated as constants:
they are detached before use, so no gradient ever reaches a teacher.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, LabelError, ParameterError
from .tensor import Tensor

COSINE_EPS = 1e-12
NEG_COSINE_DEFAULT_WEIGHT = 10.0


class LossKind(str, Enum):
    cross_entropy = "cross_entropy"
    mse = "mse"
    kd_kl = "kd_kl"
    neg_cosine = "neg_cosine"
    feature_match = "feature_match"
    distance_penalty = "distance_penalty"


MATCHING_KINDS = (LossKind.mse, LossKind.neg_cosine, LossKind.cross_entropy)


def _const(x) -> Tensor:
    return Tensor(x.data) if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[i, y_i]``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    picked = T.take_along_rows(T.log_softmax(logits), labels)
    return T.neg(T.mean(picked))


def soft_cross_entropy(student_logits: Tensor, teacher_logits) -> Tensor:
    """Mean over the batch of ``-sum_k softmax(o_t)_k log_softmax(o_s)_k``."""
    t = _const(teacher_logits)
    _same_shape(student_logits, t, "soft_cross_entropy")
    target = Tensor(T.softmax(t).data)
    per_row = T.tsum(T.mul(target, T.log_softmax(student_logits)), axis=1)
    return T.neg(T.mean(per_row))


def mse(a: Tensor, b) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    b = T.as_tensor(b)
    _same_shape(a, b, "mse")
    return T.mean(T.square(T.sub(a, b)))


def kd_kl(student_logits: Tensor, teacher_logits, tau: float) -> Tensor:
    """Batch-mean ``KL(softmax(o_t/tau) || softmax(o_s/tau)) * tau**2``."""
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    t = _const(teacher_logits)
    _same_shape(student_logits, t, "kd_kl")
    log_pt = T.log_softmax(T.scale(t, 1.0 / tau)).data
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(T.scale(student_logits, 1.0 / tau))
    # sum_k p_t (log p_t - log p_s); the entropy part is a constant
    cross = T.tsum(T.mul(Tensor(pt), log_ps), axis=1)
    neg_entropy = Tensor((pt * log_pt).sum(axis=1))
    return T.scale(T.mean(T.sub(neg_entropy, cross)), tau * tau)


def neg_cosine(student: Tensor, teacher) -> Tensor:
    """Batch-mean of ``-<a, b> / (|a| |b|)``; the denominator is floored at eps.

    A floor rather than an additive eps keeps the value exactly scale invariant
    for every row whose norm product exceeds eps.
    """
    t = _const(teacher)
    _same_shape(student, t, "neg_cosine")
    dot = T.tsum(T.mul(student, t), axis=1)
    s_norm = T.sqrt(T.tsum(T.square(student), axis=1))
    t_norm = Tensor(np.sqrt((t.data * t.data).sum(axis=1)))
    denom = T.mul(s_norm, t_norm)
    denom = T.add(denom, Tensor(np.maximum(COSINE_EPS - denom.data, 0.0)))
    return T.neg(T.mean(T.div(dot, denom)))


def softmax_regression_loss(kind, student_aux_logits: Tensor, teacher_logits) -> Tensor:
    """Match logits obtained by scoring student features with a teacher classifier."""
    kind = LossKind(kind)
    if kind is LossKind.mse:
        return mse(student_aux_logits, _const(teacher_logits))
    if kind is LossKind.neg_cosine:
        return neg_cosine(student_aux_logits, teacher_logits)
    if kind is LossKind.cross_entropy:
        return soft_cross_entropy(student_aux_logits, teacher_logits)
    raise ConfigurationError(f"{kind.value} is not a logits matching loss; use one of "
                             f"{[k.value for k in MATCHING_KINDS]}")


def feature_match(aligned_student: Tensor, teacher_features) -> Tensor:
    return mse(aligned_student, _const(teacher_features))


def frobenius(diff: Tensor) -> Tensor:
    return T.sqrt(T.tsum(T.square(diff)))


def distance_penalty(w_teacher, w_student: Tensor) -> Tensor:
    """Frobenius norm of ``W_t - W_s``; only ``W_s`` receives gradient."""
    wt = _const(w_teacher)
    if wt.shape != w_student.shape:
        raise ConfigurationError(
            "penalty variant requires equal classifier shapes: "
            f"teacher {wt.shape} vs student {w_student.shape}"
        )
    return frobenius(T.sub(wt, w_student))
