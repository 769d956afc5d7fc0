"""Training strategies: CE baseline, KD, SRRL, SimKD and the three IJCKD variants.

Every strategy mutates the modules it is given (like an optimizer would) and
returns a ``DistillOutcome`` carrying the network used at inference time plus
the per-epoch metric trace. Teachers are never updated: their logits and
features over the training split are computed once up front, and any teacher
classifier that takes part in the graph is a frozen copy.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import NamedTuple, Optional, Union

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Dataset
from .errors import ConfigurationError, DimensionError
from .nn import Classifier, Connector, FeatureExtractor, Network, freeze, precompute, unfreeze
from .tensor import Tensor
from .trainer import MetricsRecord, TrainConfig, run_epochs


class StrategyName(str, Enum):
    ce_only = "ce_only"
    kd = "kd"
    srrl = "srrl"
    simkd = "simkd"
    ijckd_reuse = "ijckd_reuse"
    ijckd_joint = "ijckd_joint"
    ijckd_penalty = "ijckd_penalty"


# alpha, beta per strategy when left unset
_DEFAULT_WEIGHTS = {
    "ce_only": (0.0, 0.0),
    "kd": (0.0, 0.0),
    "srrl": (1.0, 1.0),
    "simkd": (0.0, 1.0),
    "ijckd_reuse": (1.0, 0.0),
    "ijckd_joint": (0.2, 1.0),
    "ijckd_penalty": (1.0, 1.0),
}

CONNECTOR_STRATEGIES = ("srrl", "simkd", "ijckd_reuse", "ijckd_joint")


@dataclass
class DistillConfig:
    """Strategy selector plus every loss weight.

    ``alpha``/``beta`` mean different things per strategy:

    ============== ================================ ==============================
    strategy       alpha                            beta
    ============== ================================ ==============================
    srrl           logits-matching weight           feature-matching weight
    ijckd_reuse    logits-matching weight           optional feature-matching
    ijckd_joint    student-stream CE share          logits-matching weight
    ijckd_penalty  logits-matching weight           distance-penalty weight
    ============== ================================ ==============================
    """

    strategy: str = "ijckd_reuse"
    matching_loss: str = "mse"
    lam: float = 1.0
    tau: float = 4.0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    alpha_ce: float = 1.0
    connector_depth: int = 1
    connector_hidden: Optional[int] = None

    def __post_init__(self):
        self.strategy = StrategyName(self.strategy).value
        self.matching_loss = L.LossKind(self.matching_loss).value
        if L.LossKind(self.matching_loss) not in L.MATCHING_KINDS:
            raise ConfigurationError(f"{self.matching_loss} is not a logits matching loss")
        a, b = _DEFAULT_WEIGHTS[self.strategy]
        if self.alpha is None:
            self.alpha = a
        if self.beta is None:
            self.beta = b
        for name in ("lam", "alpha", "beta", "alpha_ce"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.connector_depth not in (1, 2, 3):
            raise ConfigurationError(f"connector_depth must be 1, 2 or 3, got {self.connector_depth}")

    def to_dict(self) -> dict:
        return asdict(self)


class Split(NamedTuple):
    train: Dataset
    test: Optional[Dataset] = None


@dataclass
class DistillOutcome:
    student: Network
    records: list
    config: dict
    seed: int
    connector: Optional[Connector] = None
    frob_initial: Optional[float] = None
    train_config: dict = field(default_factory=dict)

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")

    @property
    def final_train_acc(self) -> float:
        return self.records[-1].train_acc if self.records else float("nan")


def _split(data) -> Split:
    if isinstance(data, Dataset):
        return Split(data, None)
    return Split(*data)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict_logits(model, x: np.ndarray) -> np.ndarray:
    """Eval-mode logits of a ``Network`` or a ``(phi, connector, classifier)`` triple."""
    with T.no_grad():
        if isinstance(model, Network):
            was = model.training
            model.eval()
            o, _ = model(Tensor(x))
            model.train(was)
            return o.data
        phi, conn, g = model
        z = phi(Tensor(x))
        if conn is not None:
            was = conn.training
            conn.eval()
            z = conn(z)
            conn.train(was)
        return g(z).data


def evaluate(model, data: Dataset) -> float:
    """Top-1 accuracy; ties in the argmax go to the lowest class index."""
    logits = predict_logits(model, data.features)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def frobenius_or_none(w_a: np.ndarray, w_b: np.ndarray) -> Optional[float]:
    if w_a.shape != w_b.shape:
        return None
    return float(np.sqrt(np.sum(np.square(w_a - w_b))))


# ---------------------------------------------------------------------------
# strategy runs
# ---------------------------------------------------------------------------

class _Run:
    """Binds an inference network, its trainable set and a loss closure."""

    def __init__(self, net: Network, extra_modules=(), teacher: Optional[Network] = None, train: Optional[Dataset] = None):
        self.net = net
        self.extra = list(extra_modules)
        self.teacher_w = None if teacher is None else teacher.g.weight.data.copy()
        self.cache = None if teacher is None else precompute(teacher, train.features)

    def parameters(self):
        params = self.net.trainable_parameters()
        for m in self.extra:
            params += m.trainable_parameters()
        return params

    def train(self):
        self.net.train()
        for m in self.extra:
            m.train()

    def eval(self):
        self.net.eval()
        for m in self.extra:
            m.eval()

    def evaluate(self, data):
        return evaluate(self.net, data)

    def frob_dist(self):
        if self.teacher_w is None:
            return None
        return frobenius_or_none(self.teacher_w, self.student_classifier_weight())

    def student_classifier_weight(self):
        return self.net.g.weight.data

    def teacher_batch(self, idx):
        return Tensor(self.cache.logits[idx]), Tensor(self.cache.features[idx])

    def loss(self, idx, x, y):
        raise NotImplementedError


class _CEOnly(_Run):
    def loss(self, idx, x, y):
        o, _ = self.net(Tensor(x))
        ce = L.cross_entropy(o, y)
        return ce, {"ce": ce}


class _KD(_Run):
    def __init__(self, net, teacher, train, cfg):
        super().__init__(net, teacher=teacher, train=train)
        self.cfg = cfg

    def loss(self, idx, x, y):
        o, _ = self.net(Tensor(x))
        o_t, _ = self.teacher_batch(idx)
        ce = L.cross_entropy(o, y)
        kd = L.kd_kl(o, o_t, self.cfg.tau)
        return T.add(ce, T.scale(kd, self.cfg.lam)), {"ce": ce, "kd": kd}


class _SRRL(_Run):
    def __init__(self, net, teacher, connector, train, cfg):
        super().__init__(net, extra_modules=[connector], teacher=teacher, train=train)
        self.connector = connector
        self.g_t = _frozen_copy(teacher.g)
        self.cfg = cfg

    def loss(self, idx, x, y):
        o_s, z_s = self.net(Tensor(x))
        o_t, z_t = self.teacher_batch(idx)
        z_al = self.connector(z_s)
        fm = L.feature_match(z_al, z_t)
        lm = L.softmax_regression_loss(self.cfg.matching_loss, self.g_t(z_al), o_t)
        ce = L.cross_entropy(o_s, y)
        total = T.add(T.add(ce, T.scale(lm, self.cfg.alpha)), T.scale(fm, self.cfg.beta))
        return total, {"ce": ce, "lm": lm, "fm": fm}


class _SimKD(_Run):
    def loss(self, idx, x, y):
        _, z_t = self.teacher_batch(idx)
        z_al = self.net.features(Tensor(x))
        fm = L.feature_match(z_al, z_t)
        return fm, {"fm": fm}

    def frob_dist(self):
        return None


class _Reuse(_Run):
    def __init__(self, net, teacher, train, cfg):
        super().__init__(net, teacher=teacher, train=train)
        self.cfg = cfg

    def frob_dist(self):
        return None

    def loss(self, idx, x, y):
        o_t, z_t = self.teacher_batch(idx)
        z_al = self.net.features(Tensor(x))
        o_s = self.net.g(z_al)
        ce = L.cross_entropy(o_s, y)
        lm = L.softmax_regression_loss(self.cfg.matching_loss, o_s, o_t)
        total = T.add(T.scale(ce, self.cfg.alpha_ce), T.scale(lm, self.cfg.alpha))
        terms = {"ce": ce, "lm": lm}
        if self.cfg.beta:
            fm = L.feature_match(z_al, z_t)
            total = T.add(total, T.scale(fm, self.cfg.beta))
            terms["fm"] = fm
        return total, terms


class _Joint(_Run):
    def __init__(self, net, teacher, train, cfg):
        super().__init__(net, teacher=teacher, train=train)
        self.cfg = cfg

    def loss(self, idx, x, y):
        _, z_t = self.teacher_batch(idx)
        g = self.net.g
        o_s = g(self.net.features(Tensor(x)))
        o_t = g(z_t)
        ce_s = L.cross_entropy(o_s, y)
        ce_t = L.cross_entropy(o_t, y)
        # both logits come from the shared classifier, so neither side is detached
        lm = L.mse(o_s, o_t)
        a = self.cfg.alpha
        total = T.add(T.add(T.scale(ce_s, a), T.scale(ce_t, 1.0 - a)), T.scale(lm, self.cfg.beta))
        return total, {"ce_s": ce_s, "ce_t": ce_t, "lm": lm}


class _Penalty(_Run):
    def __init__(self, net, teacher, train, cfg):
        super().__init__(net, teacher=teacher, train=train)
        self.cfg = cfg
        self.w_t = Tensor(teacher.g.weight.data)

    def loss(self, idx, x, y):
        o_s, _ = self.net(Tensor(x))
        o_t, _ = self.teacher_batch(idx)
        ce = L.cross_entropy(o_s, y)
        lm = L.mse(o_s, o_t)
        pen = L.distance_penalty(self.w_t, self.net.g.weight)
        total = T.add(T.add(ce, T.scale(lm, self.cfg.alpha)), T.scale(pen, self.cfg.beta))
        return total, {"ce": ce, "lm": lm, "penalty": pen}


def _frozen_copy(g: Classifier) -> Classifier:
    c = g.clone()
    freeze(c)
    return c


def _check_classes(student_classes: int, teacher: Network) -> None:
    if student_classes != teacher.num_classes:
        raise ConfigurationError(
            f"student has {student_classes} classes but teacher has {teacher.num_classes}"
        )


def _check_connector(phi: FeatureExtractor, teacher: Network, connector: Optional[Connector]) -> None:
    if connector is None:
        raise ConfigurationError("this strategy needs a connector")
    if connector.in_width != phi.feature_dim:
        raise DimensionError(
            f"connector input width {connector.in_width} != student feature width {phi.feature_dim}"
        )
    if connector.out_width != teacher.feature_dim:
        raise DimensionError(
            f"connector output width {connector.out_width} != teacher feature width {teacher.feature_dim}"
        )


def _phi_of(student) -> FeatureExtractor:
    return student.phi if isinstance(student, Network) else student


def _finish(run: _Run, split: Split, cfg: Optional[DistillConfig], train_cfg: TrainConfig, connector=None) -> DistillOutcome:
    frob0 = run.frob_dist()
    records = run_epochs(run, split.train, split.test, train_cfg)
    run.net.eval()
    return DistillOutcome(
        student=run.net,
        records=records,
        config=cfg.to_dict() if cfg is not None else {"strategy": "ce_only"},
        seed=train_cfg.seed,
        connector=connector,
        frob_initial=frob0,
        train_config=train_cfg.to_dict(),
    )


def train_ce_only(student: Network, data, train_cfg: TrainConfig, teacher: Optional[Network] = None) -> DistillOutcome:
    """Hard-label cross-entropy only.

    Passing ``teacher`` only enables Frobenius-distance tracking against its
    classifier; the teacher never enters the loss.
    """
    split = _split(data)
    run = _CEOnly(student)
    if teacher is not None:
        run.teacher_w = teacher.g.weight.data.copy()
    return _finish(run, split, DistillConfig("ce_only"), train_cfg)


def train_kd(student: Network, teacher: Network, data, cfg: DistillConfig, train_cfg: TrainConfig) -> DistillOutcome:
    split = _split(data)
    _check_classes(student.num_classes, teacher)
    return _finish(_KD(student, teacher, split.train, cfg), split, cfg, train_cfg)


def train_srrl(student: Network, teacher: Network, connector: Connector, data, cfg: DistillConfig, train_cfg: TrainConfig) -> DistillOutcome:
    split = _split(data)
    _check_classes(student.num_classes, teacher)
    _check_connector(student.phi, teacher, connector)
    run = _SRRL(student, teacher, connector, split.train, cfg)
    return _finish(run, split, cfg, train_cfg, connector)


def train_simkd(student_phi, teacher: Network, connector: Connector, data, cfg: DistillConfig, train_cfg: TrainConfig) -> DistillOutcome:
    """Feature matching only; inference is ``g_t o connector o phi_s``. Labels are never read."""
    split = _split(data)
    phi = _phi_of(student_phi)
    _check_connector(phi, teacher, connector)
    net = Network(phi, _frozen_copy(teacher.g), connector)
    return _finish(_SimKD(net, teacher=teacher, train=split.train), split, cfg, train_cfg, connector)


def train_ijckd_reuse(student_phi, teacher: Network, connector: Connector, data, cfg: DistillConfig, train_cfg: TrainConfig) -> DistillOutcome:
    """``alpha_ce * CE(o_s, y) + alpha * match(o_s, o_t) [+ beta * fm]`` with
    ``o_s = g_t(connector(phi_s(x)))`` and ``g_t`` frozen."""
    split = _split(data)
    phi = _phi_of(student_phi)
    _check_connector(phi, teacher, connector)
    net = Network(phi, _frozen_copy(teacher.g), connector)
    return _finish(_Reuse(net, teacher, split.train, cfg), split, cfg, train_cfg, connector)


def train_ijckd_joint(
    student_phi,
    teacher: Network,
    connector: Connector,
    data,
    cfg: DistillConfig,
    train_cfg: TrainConfig,
    freeze_joint: bool = False,
) -> DistillOutcome:
    """Online joint classifier shared by the teacher and student feature streams.

    The joint classifier starts as a copy of the teacher classifier.
    """
    split = _split(data)
    phi = _phi_of(student_phi)
    _check_connector(phi, teacher, connector)
    g = teacher.g.clone()
    if freeze_joint:
        freeze(g)
    else:
        unfreeze(g)
    net = Network(phi, g, connector)
    return _finish(_Joint(net, teacher, split.train, cfg), split, cfg, train_cfg, connector)


def train_ijckd_penalty(student: Network, teacher: Network, data, cfg: DistillConfig, train_cfg: TrainConfig) -> DistillOutcome:
    split = _split(data)
    _check_classes(student.num_classes, teacher)
    if student.g.weight.shape != teacher.g.weight.shape:
        raise ConfigurationError(
            "penalty variant requires equal classifier shapes: "
            f"teacher {teacher.g.weight.shape} vs student {student.g.weight.shape}"
        )
    return _finish(_Penalty(student, teacher, split.train, cfg), split, cfg, train_cfg)


def make_connector(student_dim: int, teacher_dim: int, cfg: DistillConfig, seed: int) -> Connector:
    return Connector(student_dim, teacher_dim, depth=cfg.connector_depth, hidden=cfg.connector_hidden, seed=seed)


def distill(
    cfg: DistillConfig,
    student: Network,
    data,
    train_cfg: TrainConfig,
    teacher: Optional[Network] = None,
    connector: Optional[Connector] = None,
    connector_seed: Optional[int] = None,
) -> DistillOutcome:
    """Dispatch on ``cfg.strategy``; builds a connector when one is needed and not given."""
    s = cfg.strategy
    if s == "ce_only":
        return train_ce_only(student, data, train_cfg)
    if teacher is None:
        raise ConfigurationError(f"strategy {s} needs a teacher")
    _check_classes(student.num_classes, teacher)
    if s in CONNECTOR_STRATEGIES and connector is None:
        seed = train_cfg.seed + 1_000_003 if connector_seed is None else connector_seed
        connector = make_connector(student.phi.feature_dim, teacher.feature_dim, cfg, seed)
    if s == "kd":
        return train_kd(student, teacher, data, cfg, train_cfg)
    if s == "srrl":
        return train_srrl(student, teacher, connector, data, cfg, train_cfg)
    if s == "simkd":
        return train_simkd(student.phi, teacher, connector, data, cfg, train_cfg)
    if s == "ijckd_reuse":
        return train_ijckd_reuse(student.phi, teacher, connector, data, cfg, train_cfg)
    if s == "ijckd_joint":
        return train_ijckd_joint(student.phi, teacher, connector, data, cfg, train_cfg)
    return train_ijckd_penalty(student, teacher, data, cfg, train_cfg)
