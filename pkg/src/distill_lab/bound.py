"""Empirical check of the teacher-student error bound and joint-classifier fitting.

All risk and disagreement terms are measured in one output space chosen by
``NormKind``: softmax probabilities against one-hot labels under L1 or L2
(``l1_prob``, ``l2_prob``), or raw logits against a scaled one-hot under L1
(``l1_logit``). Because the bound follows from the per-sample triangle
inequality ``|a - y| <= |a - b| + |b - d| + |d - y|`` with ``a = g_s(phi_s)``,
``b = g_t(phi_s)``, ``d = g_t(phi_t)``, it must hold for every sample.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, DivergenceError
from .nn import Classifier, Connector, FeatureExtractor, Network
from .tensor import Tensor
from .trainer import TrainConfig, run_epochs

VIOLATION_SLACK = 1e-9


class NormKind(str, Enum):
    l1_prob = "l1_prob"
    l2_prob = "l2_prob"
    l1_logit = "l1_logit"


@dataclass
class BoundReport:
    eps_teacher: float
    eps_student: float
    delta1: float
    delta2: float
    rhs: float
    holds_aggregate: bool
    per_sample_violations: int
    norm_kind: str
    used_connector_for_delta2: bool

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class JointFitResult:
    classifier: Classifier
    joint_risk: float
    teacher_stream_risk: float
    student_stream_risk: float


# ---------------------------------------------------------------------------
# embedding and norms
# ---------------------------------------------------------------------------

def embed_outputs(logits: np.ndarray, kind, onehot_scale: float = 1.0) -> np.ndarray:
    kind = NormKind(kind)
    if kind is NormKind.l1_logit:
        return np.asarray(logits)
    with T.no_grad():
        return T.softmax(Tensor(logits)).data


def embed_labels(labels: np.ndarray, classes: int, kind, onehot_scale: float = 1.0) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    if NormKind(kind) is NormKind.l1_logit:
        out *= onehot_scale
    return out


def row_norms(diff: np.ndarray, kind) -> np.ndarray:
    if NormKind(kind) is NormKind.l2_prob:
        return np.sqrt(np.sum(diff * diff, axis=1))
    return np.sum(np.abs(diff), axis=1)


# ---------------------------------------------------------------------------
# forward helpers (eval mode, no graph)
# ---------------------------------------------------------------------------

def _eval_call(module, z: Tensor) -> Tensor:
    was = getattr(module, "training", False)
    if hasattr(module, "eval"):
        module.eval()
    try:
        return module(z)
    finally:
        if hasattr(module, "train"):
            module.train(was)


def _features(phi, x: np.ndarray) -> np.ndarray:
    with T.no_grad():
        if isinstance(phi, Network):
            was = phi.training
            phi.eval()
            z = phi.features(Tensor(x))
            phi.train(was)
            return z.data
        return _eval_call(phi, Tensor(x)).data


def _route(g_t: Classifier, z_s: np.ndarray, connector: Optional[Connector]) -> tuple[np.ndarray, bool]:
    """Student features in the teacher classifier's input space."""
    if z_s.shape[1] == g_t.in_features and connector is None:
        return z_s, False
    if connector is None:
        raise ConfigurationError(
            f"student features have width {z_s.shape[1]} but the teacher classifier expects "
            f"{g_t.in_features}; supply a connector"
        )
    if connector.in_width != z_s.shape[1] or connector.out_width != g_t.in_features:
        raise ConfigurationError(
            f"connector maps {connector.in_width}->{connector.out_width}, need "
            f"{z_s.shape[1]}->{g_t.in_features}"
        )
    with T.no_grad():
        return _eval_call(connector, Tensor(z_s)).data, True


def _logits(g: Classifier, z: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return g(Tensor(z)).data


def _mean_norm(a: np.ndarray, b: np.ndarray, kind) -> float:
    return float(np.mean(row_norms(a - b, kind)))


# ---------------------------------------------------------------------------
# risk and disagreement terms
# ---------------------------------------------------------------------------

def empirical_risk(f, data: Dataset, norm_kind="l1_prob", onehot_scale: float = 1.0) -> float:
    """Mean distance between embedded predictions of ``f`` and one-hot labels."""
    from .distillers import predict_logits

    logits = predict_logits(f, data.features)
    out = embed_outputs(logits, norm_kind, onehot_scale)
    y = embed_labels(data.labels, logits.shape[1], norm_kind, onehot_scale)
    return _mean_norm(out, y, norm_kind)


def delta1(g_s: Classifier, g_t: Classifier, phi_s, data: Dataset, norm_kind="l1_prob",
           connector: Optional[Connector] = None, onehot_scale: float = 1.0) -> float:
    """Disagreement of the two classifiers on student features."""
    z_s = _features(phi_s, data.features)
    a = embed_outputs(_logits(g_s, z_s), norm_kind, onehot_scale)
    zb, _ = _route(g_t, z_s, connector)
    b = embed_outputs(_logits(g_t, zb), norm_kind, onehot_scale)
    return _mean_norm(a, b, norm_kind)


def delta2(g_t: Classifier, phi_s, phi_t, data: Dataset, norm_kind="l1_prob",
           connector: Optional[Connector] = None, onehot_scale: float = 1.0) -> float:
    """Disagreement of the teacher classifier across student and teacher features."""
    z_s = _features(phi_s, data.features)
    zb, _ = _route(g_t, z_s, connector)
    b = embed_outputs(_logits(g_t, zb), norm_kind, onehot_scale)
    d = embed_outputs(_logits(g_t, _features(phi_t, data.features)), norm_kind, onehot_scale)
    return _mean_norm(b, d, norm_kind)


def verify_bound(teacher: Network, student: Network, data: Dataset, norm_kind="l1_prob",
                 connector: Optional[Connector] = None, onehot_scale: float = 1.0) -> BoundReport:
    """Compute every bound term in one pass and count per-sample violations."""
    kind = NormKind(norm_kind)
    x = data.features
    z_s = _features(student, x)
    z_t = _features(teacher, x)
    a_logits = _logits(student.g, z_s)
    zb, used = _route(teacher.g, z_s, connector)
    a = embed_outputs(a_logits, kind, onehot_scale)
    b = embed_outputs(_logits(teacher.g, zb), kind, onehot_scale)
    d = embed_outputs(_logits(teacher.g, z_t), kind, onehot_scale)
    y = embed_labels(data.labels, a.shape[1], kind, onehot_scale)
    n_ay = row_norms(a - y, kind)
    n_ab = row_norms(a - b, kind)
    n_bd = row_norms(b - d, kind)
    n_dy = row_norms(d - y, kind)
    violations = int(np.sum(n_ay > n_ab + n_bd + n_dy + VIOLATION_SLACK))
    eps_t, eps_s = float(np.mean(n_dy)), float(np.mean(n_ay))
    d1, d2 = float(np.mean(n_ab)), float(np.mean(n_bd))
    rhs = eps_t + d1 + d2
    return BoundReport(
        eps_teacher=eps_t,
        eps_student=eps_s,
        delta1=d1,
        delta2=d2,
        rhs=rhs,
        holds_aggregate=bool(eps_s <= rhs + VIOLATION_SLACK),
        per_sample_violations=violations,
        norm_kind=kind.value,
        used_connector_for_delta2=used,
    )


def generic_loss_terms(teacher: Network, student: Network, data: Dataset, loss: str = "mse",
                       connector: Optional[Connector] = None) -> dict:
    """Bound terms with a pairwise training loss in place of the norm.

    Informational only: no inequality is claimed for these values.
    """
    x = data.features
    z_s = _features(student, x)
    zb, used = _route(teacher.g, z_s, connector)
    a = Tensor(_logits(student.g, z_s))
    b = Tensor(_logits(teacher.g, zb))
    d = Tensor(_logits(teacher.g, _features(teacher, x)))
    with T.no_grad():
        if loss == "mse":
            d1, d2 = L.mse(a, b).item(), L.mse(b, d).item()
        elif loss == "cross_entropy":
            d1, d2 = L.soft_cross_entropy(a, b).item(), L.soft_cross_entropy(b, d).item()
        else:
            raise ConfigurationError(f"unknown generic loss {loss!r}")
        eps_t = L.cross_entropy(d, data.labels).item()
        eps_s = L.cross_entropy(a, data.labels).item()
    return {"loss": loss, "eps_teacher_ce": eps_t, "eps_student_ce": eps_s,
            "delta1": d1, "delta2": d2, "used_connector_for_delta2": used}


def frobenius_distance(w_a, w_b) -> float:
    """``sqrt(sum((W_a - W_b)**2))``; same arithmetic as the distance penalty loss."""
    a = w_a.data if isinstance(w_a, Tensor) else np.asarray(w_a)
    b = w_b.data if isinstance(w_b, Tensor) else np.asarray(w_b)
    if a.shape != b.shape:
        raise ConfigurationError(f"frobenius distance needs equal shapes, got {a.shape} and {b.shape}")
    diff = a - b
    return float(np.sqrt(np.sum(diff * diff)))


# ---------------------------------------------------------------------------
# joint classifier
# ---------------------------------------------------------------------------

def joint_objective(g: Classifier, z_t: np.ndarray, z_s: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """(teacher-stream CE, student-stream CE) of ``g`` over the whole dataset."""
    with T.no_grad():
        rt = L.cross_entropy(g(Tensor(z_t)), labels).item()
        rs = L.cross_entropy(g(Tensor(z_s)), labels).item()
    return rt, rs


class _JointFit:
    def __init__(self, g: Classifier, z_t: np.ndarray, z_s: np.ndarray):
        self.g, self.z_t, self.z_s = g, z_t, z_s

    def parameters(self):
        return self.g.trainable_parameters()

    def train(self):
        pass

    def eval(self):
        pass

    def loss(self, idx, x, y):
        lt = L.cross_entropy(self.g(Tensor(self.z_t[idx])), y)
        ls = L.cross_entropy(self.g(Tensor(self.z_s[idx])), y)
        return T.add(lt, ls), {"teacher_stream": lt, "student_stream": ls}

    def evaluate(self, data):
        if data is None or len(data) != len(self.z_s):
            return float("nan")
        with T.no_grad():
            o = self.g(Tensor(self.z_s)).data
        return float(np.mean(np.argmax(o, axis=1) == data.labels))

    def frob_dist(self):
        return None


def stream_features(phi_t, phi_s, data: Dataset, connector: Optional[Connector] = None,
                    width: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    z_t = _features(phi_t, data.features)
    z_s = _features(phi_s, data.features)
    if connector is not None:
        with T.no_grad():
            z_s = _eval_call(connector, Tensor(z_s)).data
    if z_s.shape[1] != z_t.shape[1]:
        raise ConfigurationError(
            f"feature widths differ ({z_s.shape[1]} vs {z_t.shape[1]}); supply a connector"
        )
    return z_t, z_s


def fit_joint_classifier(phi_t, phi_s, data: Dataset, train_cfg: TrainConfig,
                         connector: Optional[Connector] = None, seed: Optional[int] = None) -> JointFitResult:
    """Fit a fresh linear classifier to both frozen feature streams (summed CE)."""
    z_t, z_s = stream_features(phi_t, phi_s, data, connector)
    rng = np.random.default_rng(train_cfg.seed if seed is None else seed)
    g = Classifier(z_t.shape[1], data.class_count, rng)
    run_epochs(_JointFit(g, z_t, z_s), data, None, train_cfg)
    rt, rs = joint_objective(g, z_t, z_s, data.labels)
    if not (math.isfinite(rt) and math.isfinite(rs)):
        raise DivergenceError(f"joint classifier fit diverged: risks {rt}, {rs}")
    return JointFitResult(classifier=g, joint_risk=rt + rs, teacher_stream_risk=rt, student_stream_risk=rs)
