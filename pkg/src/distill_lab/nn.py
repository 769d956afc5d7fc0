"""Feature extractors, linear classifiers and connectors built on ``Tensor``."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, SpecError
from .tensor import BatchNormState, Tensor


def _uniform_weight(rng: np.random.Generator, fan_out: int, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


class Module:
    """Minimal container protocol: named parameters, named buffers, train/eval."""

    training = True

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        raise NotImplementedError

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.parameters() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def _children(self) -> Sequence["Module"]:
        return ()

    def clone(self):
        return copy.deepcopy(self)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float64):
        self.weight = Tensor(_uniform_weight(rng, out_features, in_features, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"expected input width {self.in_features}, got shape {x.shape}"
            )
        return T.linear(x, self.weight, self.bias)


class Classifier(Linear):
    """Linear map from features to class logits (``W`` is ``C x h``)."""

    @property
    def frozen(self) -> bool:
        return self.weight.frozen and self.bias.frozen

    @property
    def num_classes(self) -> int:
        return self.out_features


class FeatureExtractor(Module):
    """Stack of affine layers, each followed by an activation (``relu`` or ``none``)."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, dtype=np.float64, activation="relu"):
        widths = list(widths)
        if len(widths) < 2:
            raise SpecError(f"a feature extractor needs at least input and output widths, got {widths}")
        if any(int(w) < 1 for w in widths):
            raise SpecError(f"widths must be >= 1, got {widths}")
        if activation not in ("relu", "none"):
            raise SpecError(f"unknown activation {activation!r}")
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.activations = [activation] * len(self.layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_features] + [layer.out_features for layer in self.layers]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_features

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_parameters():
                yield f"layers.{i}.{name}", p

    def __call__(self, x: Tensor) -> Tensor:
        for layer, act in zip(self.layers, self.activations):
            x = layer(x)
            if act == "relu":
                x = T.relu(x)
        return x


# name tags let the optimizer tell normalization parameters apart
BN_GAMMA = "batchnorm.gamma"
BN_BETA = "batchnorm.beta"


class BatchNorm1d(Module):
    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True, name=BN_GAMMA)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True, name=BN_BETA)
        self.state = BatchNormState.fresh(width, momentum, eps, dtype)

    def named_parameters(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.state.running_mean
        yield "running_var", self.state.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm1d(x, self.gamma, self.beta, self.state, self.training)


class ConnectorBlock(Module):
    def __init__(self, in_width: int, out_width: int, rng, batchnorm: bool = True, relu: bool = True, dtype=np.float64):
        self.affine = Linear(in_width, out_width, rng, dtype)
        self.bn = BatchNorm1d(out_width, dtype=dtype) if batchnorm else None
        self.relu = relu

    def _children(self):
        return (self.bn,) if self.bn is not None else ()

    def named_parameters(self):
        for name, p in self.affine.named_parameters():
            yield f"affine.{name}", p
        if self.bn is not None:
            for name, p in self.bn.named_parameters():
                yield f"bn.{name}", p

    def named_buffers(self):
        if self.bn is not None:
            for name, b in self.bn.named_buffers():
                yield f"bn.{name}", b

    def __call__(self, x: Tensor) -> Tensor:
        x = self.affine(x)
        if self.bn is not None:
            x = self.bn(x)
        return T.relu(x) if self.relu else x


class Connector(Module):
    """Vector analogue of the 1x1 / 1x1-1x1 / 1x1-3x3-1x1 conv connectors.

    Every block is affine -> batchnorm -> relu. Depth 2 and 3 connectors route
    through ``hidden`` units (default: the teacher width).
    """

    def __init__(
        self,
        student_dim: int,
        teacher_dim: int,
        depth: int = 1,
        hidden: Optional[int] = None,
        seed: int = 0,
        batchnorm: bool = True,
        relu: bool = True,
        dtype=np.float64,
    ):
        if depth not in (1, 2, 3):
            raise SpecError(f"connector depth must be 1, 2 or 3, got {depth}")
        hidden = teacher_dim if hidden is None else int(hidden)
        widths = [student_dim] + [hidden] * (depth - 1) + [teacher_dim]
        rng = np.random.default_rng(seed)
        self.blocks = [
            ConnectorBlock(a, b, rng, batchnorm=batchnorm, relu=relu, dtype=dtype)
            for a, b in zip(widths[:-1], widths[1:])
        ]
        assert self.out_width == teacher_dim
        self.seed = seed

    @property
    def widths(self) -> list[int]:
        return [self.blocks[0].affine.in_features] + [b.affine.out_features for b in self.blocks]

    @property
    def depth(self) -> int:
        return len(self.blocks)

    @property
    def in_width(self) -> int:
        return self.blocks[0].affine.in_features

    @property
    def out_width(self) -> int:
        return self.blocks[-1].affine.out_features

    @property
    def batchnorm(self) -> bool:
        return self.blocks[0].bn is not None

    @property
    def relu(self) -> bool:
        return self.blocks[0].relu

    def _children(self):
        return self.blocks

    def named_parameters(self):
        for i, block in enumerate(self.blocks):
            for name, p in block.named_parameters():
                yield f"blocks.{i}.{name}", p

    def named_buffers(self):
        for i, block in enumerate(self.blocks):
            for name, b in block.named_buffers():
                yield f"blocks.{i}.{name}", b

    def __call__(self, z: Tensor) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.in_width:
            raise DimensionError(
                f"connector expects student features of width {self.in_width}, got shape {z.shape}"
            )
        for block in self.blocks:
            z = block(z)
        return z


def connect(c: Connector, z_s: Tensor, mode: str = "train") -> Tensor:
    c.train(mode == "train")
    return c(z_s)


class Network(Module):
    """``f = g o phi``, optionally with a connector between ``phi`` and ``g``.

    The connector slot holds students that classify through a reused teacher
    classifier: their effective feature map is ``connector o phi``.
    """

    def __init__(self, phi: FeatureExtractor, g: Classifier, connector: Optional[Connector] = None, seed: Optional[int] = None):
        width = connector.out_width if connector is not None else phi.feature_dim
        if connector is not None and connector.in_width != phi.feature_dim:
            raise DimensionError(
                f"connector input width {connector.in_width} != feature width {phi.feature_dim}"
            )
        if g.in_features != width:
            raise DimensionError(f"classifier input width {g.in_features} != feature width {width}")
        self.phi = phi
        self.g = g
        self.connector = connector
        self.seed = seed
        self.step = 0

    @property
    def num_classes(self) -> int:
        return self.g.num_classes

    @property
    def feature_dim(self) -> int:
        """Width of the features fed to ``g``."""
        return self.g.in_features

    @property
    def widths(self) -> list[int]:
        return self.phi.widths + [self.num_classes]

    def _children(self):
        return (self.connector,) if self.connector is not None else ()

    def named_parameters(self):
        for name, p in self.phi.named_parameters():
            yield f"phi.{name}", p
        if self.connector is not None:
            for name, p in self.connector.named_parameters():
                yield f"connector.{name}", p
        for name, p in self.g.named_parameters():
            yield f"g.{name}", p

    def named_buffers(self):
        if self.connector is not None:
            for name, b in self.connector.named_buffers():
                yield f"connector.{name}", b

    def features(self, x: Tensor) -> Tensor:
        z = self.phi(x)
        if self.connector is not None:
            z = self.connector(z)
        return z

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z = self.features(x)
        return self.g(z), z


def init_network(widths: Sequence[int], classes: int, seed: int, dtype=np.float64) -> Network:
    """MLP whose feature extractor follows ``widths`` and classifier maps to ``classes``.

    ``widths = [2, 8]`` with ``classes = 3`` is one 2->8 affine+relu layer and an
    8->3 classifier. Weights are uniform in ``+-sqrt(1/fan_in)``, biases zero.
    """
    widths = list(widths)
    if not widths:
        raise SpecError("empty width list")
    if len(widths) < 2:
        raise SpecError(f"need an input width and at least one hidden width, got {widths}")
    if classes < 2:
        raise SpecError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    phi = FeatureExtractor(widths, rng, dtype)
    g = Classifier(widths[-1], classes, rng, dtype)
    return Network(phi, g, seed=seed)


def forward(net: Network, x) -> tuple[Tensor, Tensor]:
    return net(T.as_tensor(x))


def freeze(module: Module) -> None:
    """Exclude every parameter of ``module`` from gradients and optimizer updates."""
    for p in module.parameters():
        p.frozen = True
        p.requires_grad = False
        p.grad = None


def unfreeze(module: Module) -> None:
    for p in module.parameters():
        p.frozen = False
        p.requires_grad = True


@dataclass
class ForwardCache:
    """Precomputed outputs of a frozen network over a fixed dataset."""

    logits: np.ndarray
    features: np.ndarray


def precompute(net: Network, x: np.ndarray) -> ForwardCache:
    was = net.training
    net.eval()
    with T.no_grad():
        o, z = net(Tensor(x))
    net.train(was)
    return ForwardCache(o.data, z.data)
