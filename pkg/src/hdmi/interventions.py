"""Hidden-state interventions: margin ascent, its target-only ablation, and probe baselines."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError, InputError, ObjectiveError
from .model import TinyTransformer, forward_capture, forward_patch, patched_logits_graph
from .probes import ProbeHParams, ProbeModel, probe_gradient, train_probe
from .tensor import Tensor


@dataclass(frozen=True)
class MarginObjective:
    """Raise the summed logits of ``targets`` and lower those of ``sources``."""
    targets: tuple[int, ...]
    sources: tuple[int, ...]

    def __post_init__(self):
        t, s = tuple(int(i) for i in self.targets), tuple(int(i) for i in self.sources)
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "sources", s)
        if not t:
            raise ObjectiveError("target set is empty")
        if set(t) & set(s):
            raise ObjectiveError("target and source sets overlap")
        if any(i < 0 for i in t + s):
            raise ObjectiveError("negative token id")

    @classmethod
    def pair(cls, target: int, source: int) -> "MarginObjective":
        return cls((target,), (source,))

    def swapped(self) -> "MarginObjective":
        return MarginObjective(self.sources, self.targets)

    def target_only(self) -> "MarginObjective":
        return MarginObjective(self.targets, ())

    def weights(self, vocab_size: int) -> np.ndarray:
        """``u+ - u-`` as a dense vector over the vocabulary."""
        if max(self.targets + self.sources) >= vocab_size:
            raise ObjectiveError("token id outside the vocabulary")
        u = np.zeros(vocab_size)
        np.add.at(u, list(self.targets), 1.0)
        np.add.at(u, list(self.sources), -1.0)
        return u


def _require_pair(obj: MarginObjective) -> None:
    if not obj.sources:
        raise ObjectiveError("source set is empty")


@dataclass(frozen=True)
class AscentConfig:
    step_size: float = 1.0
    steps: int = 30
    layer: int | None = None  # None means the final layer

    def __post_init__(self):
        if self.step_size < 0:
            raise ConfigurationError("step size must be non-negative")
        if self.steps < 1:
            raise ConfigurationError("at least one ascent step is required")


@dataclass(frozen=True)
class BallConstraint:
    norm: str = "l_inf"
    radius: float = 1.0

    def __post_init__(self):
        if self.norm not in ("l_inf", "l2"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if not self.radius > 0:
            raise ConfigurationError("ball radius must be positive")

    def project(self, x: np.ndarray, center: np.ndarray) -> np.ndarray:
        delta = x - center
        if self.norm == "l_inf":
            return center + np.clip(delta, -self.radius, self.radius)
        n = np.linalg.norm(delta)
        return x if n <= self.radius else center + delta * (self.radius / n)

    def distance(self, x: np.ndarray, center: np.ndarray) -> float:
        delta = np.asarray(x) - np.asarray(center)
        return float(np.max(np.abs(delta)) if self.norm == "l_inf" else np.linalg.norm(delta))


def margin_loss(logits, obj: MarginObjective) -> float:
    """Sum of target logits minus sum of source logits."""
    z = np.asarray(logits, dtype=np.float64)
    return float(z[list(obj.targets)].sum() - z[list(obj.sources)].sum())


def closed_form_final_gradient(model: TinyTransformer, obj: MarginObjective) -> np.ndarray:
    """``W_U^T (u+ - u-)``: the gradient of the objective with respect to the final state."""
    return model.W_U.T @ obj.weights(model.cfg.vocab_size)


def _objective_gradient(model, tokens, layer, u, state) -> np.ndarray:
    if layer == model.cfg.layers:
        return model.W_U.T @ u
    h = Tensor(state)
    logits = patched_logits_graph(model, tokens, layer, h)
    return tc.backward(logits, h, cotangent=u)


def _ascend(model, tokens, obj: MarginObjective, cfg: AscentConfig):
    layer = model.cfg.layers if cfg.layer is None else cfg.layer
    model._check_layer(layer)
    u = obj.weights(model.cfg.vocab_size)
    _, captured = forward_capture(model, tokens, layer)
    h = captured.vector.copy()
    for _ in range(cfg.steps):
        h = h + cfg.step_size * _objective_gradient(model, tokens, layer, u, h)
    return h, forward_patch(model, tokens, layer, h)


def hdmi_ascend(model: TinyTransformer, tokens: Sequence[int], obj: MarginObjective,
                cfg: AscentConfig = AscentConfig()):
    """K steps of gradient ascent on the margin from the captured state.

    Returns the intervened state and the logits with that state patched in.
    """
    _require_pair(obj)
    return _ascend(model, tokens, obj, cfg)


def target_only_ascend(model: TinyTransformer, tokens: Sequence[int], obj: MarginObjective,
                       cfg: AscentConfig = AscentConfig()):
    """Same schedule as :func:`hdmi_ascend` but only the target logits are promoted."""
    return _ascend(model, tokens, obj.target_only(), cfg)


def _sign(g: np.ndarray) -> np.ndarray:
    # sign(0) = +1
    return np.where(g >= 0, 1.0, -1.0)


def _step(g: np.ndarray, norm: str, size: float) -> np.ndarray:
    if norm == "l_inf":
        return size * _sign(g)
    n = np.linalg.norm(g)
    return np.zeros_like(g) if n == 0 else size * g / n


def fgsm(state, probe: ProbeModel, counterfactual_class: int, ball: BallConstraint) -> np.ndarray:
    """Single signed (or normalised, for l2) step toward the counterfactual class.

    A zero gradient under l2 leaves the state unchanged.
    """
    s = np.asarray(state, dtype=np.float64)
    g = probe_gradient(probe, s, counterfactual_class)
    return s + _step(g, ball.norm, ball.radius)


def default_pgd_step(radius: float, steps: int) -> float:
    return 2.5 * radius / steps


def pgd(state, probe: ProbeModel, counterfactual_class: int, ball: BallConstraint,
        steps: int = 40, step_size: float | None = None) -> np.ndarray:
    """Projected gradient ascent on ``log p(counterfactual_class)`` inside the ball."""
    if steps < 1:
        raise ConfigurationError("pgd needs at least one step")
    center = np.asarray(state, dtype=np.float64)
    size = default_pgd_step(ball.radius, steps) if step_size is None else step_size
    x = center.copy()
    for _ in range(steps):
        g = probe_gradient(probe, x, counterfactual_class)
        x = ball.project(x + _step(g, ball.norm, size), center)
    return x


@dataclass(frozen=True)
class NullspaceProjection:
    """INLP result: the projector onto the joint nullspace and the rowspace basis.

    Basis rows are orthonormal and oriented so that the positive side of each
    row points toward class 1.
    """
    projection: np.ndarray
    basis: np.ndarray


def inlp_fit(states, labels, rank: int = 32, seed: int = 0,
             hparams: ProbeHParams | None = None) -> NullspaceProjection:
    """Iterative nullspace projection for a binary concept."""
    X = np.asarray(states, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    D = X.shape[1]
    if rank >= D:
        raise ConfigurationError(f"rank {rank} must be below the dimension {D}")
    if rank < 1:
        raise ConfigurationError("rank must be positive")
    if set(np.unique(y)) != {0, 1}:
        raise InputError("INLP here needs binary labels 0/1")
    hp = hparams or ProbeHParams(epochs=50)
    hp = ProbeHParams(hp.lr, hp.weight_decay, hp.batch_size, hp.epochs, hp.hidden_sizes, 0.0)
    basis = np.zeros((0, D))
    P = np.eye(D)
    for r in range(rank):
        probe = train_probe(X @ P, y, "linear", hp, seed=seed + r, num_classes=2)
        w = probe.params["w"][1] - probe.params["w"][0]
        w = w - basis.T @ (basis @ w)
        n = np.linalg.norm(w)
        if n < 1e-10:
            break
        basis = np.vstack([basis, w / n])
        P = np.eye(D) - basis.T @ basis
    return NullspaceProjection(P, basis)


def alterrep_apply(state, basis, direction_sign: int, strength: float) -> np.ndarray:
    """Replace the rowspace component by a copy pushed to the ``direction_sign`` side.

    ``state = h_null + B^T c`` becomes ``h_null + B^T (s * strength * |c|)``.
    """
    h = np.asarray(state, dtype=np.float64)
    B = np.asarray(basis, dtype=np.float64).reshape(-1, h.size)
    if direction_sign not in (-1, 1):
        raise InputError("direction sign must be -1 or +1")
    if B.shape[0] == 0:
        return h.copy()
    if np.max(np.abs(B @ B.T - np.eye(B.shape[0]))) > 1e-6:
        raise InputError("basis rows must be orthonormal")
    c = B @ h
    return h - B.T @ c + B.T @ (direction_sign * strength * np.abs(c))
