"""Linear and one-hidden-layer MLP probes over hidden states."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import DegenerateLabelError, InputError, ShapeError
from .model import AdamW, read_container, write_container
from .tensor import Tensor

HIDDEN_SIZES = (64, 256, 512)


@dataclass(frozen=True)
class ProbeHParams:
    lr: float = 1e-2
    weight_decay: float = 1e-6
    batch_size: int = 256
    epochs: int = 100
    hidden_sizes: tuple[int, ...] = HIDDEN_SIZES
    holdout_fraction: float = 0.2


@dataclass
class ProbeModel:
    kind: str
    input_dim: int
    num_classes: int
    params: dict[str, np.ndarray]
    trained_on: str = ""
    holdout_accuracy: float = float("nan")
    hidden: int | None = None
    # indices (into the caller's training list) used for fitting / internal holdout
    fit_indices: tuple[int, ...] = field(default=(), repr=False)
    holdout_indices: tuple[int, ...] = field(default=(), repr=False)

    def leaves(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def logits(self, x, P=None) -> Tensor:
        P = P or self.leaves()
        if self.kind == "linear":
            return tc.linear(x, P["w"], P["b"])
        h = tc.relu(tc.linear(x, P["w1"], P["b1"]))
        return tc.linear(h, P["w2"], P["b2"])


def _init(kind: str, d: int, k: int, hidden: int | None, rng) -> dict[str, np.ndarray]:
    if kind == "linear":
        return {"w": np.zeros((k, d)), "b": np.zeros(k)}
    return {"w1": rng.normal(0.0, np.sqrt(2.0 / d), size=(hidden, d)), "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(k, hidden)), "b2": np.zeros(k)}


def _fit(kind, X, y, k, hidden, hp: ProbeHParams, rng) -> dict[str, np.ndarray]:
    params = _init(kind, X.shape[1], k, hidden, rng)
    opt = AdamW(params, lr=hp.lr, weight_decay=hp.weight_decay)
    shell = ProbeModel(kind, X.shape[1], k, params)
    n = len(y)
    for _ in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            P = {name: Tensor(v) for name, v in params.items()}
            logp = tc.log_softmax(shell.logits(Tensor(X[idx]), P))
            picked = tc.take(logp, (np.arange(len(idx)), y[idx]))
            loss = tc.scale(tc.total(picked), -1.0 / len(idx))
            names = list(P)
            grads = tc.gradients(loss, [P[nm] for nm in names])
            opt.step(params, dict(zip(names, grads)))
    return params


def _accuracy(probe: ProbeModel, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    pred = np.argmax(probe.logits(Tensor(X)).data, axis=-1)
    return float(np.mean(pred == y))


def train_probe(states: Sequence[np.ndarray], labels: Sequence[int], kind: str = "linear",
                hparams: ProbeHParams | None = None, seed: int = 0,
                num_classes: int | None = None, trained_on: str = "") -> ProbeModel:
    """Cross-entropy probe with a random internal holdout for accuracy reporting.

    For ``kind="mlp"`` one probe is fitted per hidden width in
    ``hparams.hidden_sizes`` and the best holdout accuracy wins (first on ties).
    """
    hp = hparams or ProbeHParams()
    if kind not in ("linear", "mlp"):
        raise InputError(f"unknown probe kind {kind!r}")
    X = np.asarray(states, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y):
        raise ShapeError("states must be (n, D) with one label each")
    k = int(num_classes if num_classes is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= k:
        raise InputError("labels out of range")
    if len(np.unique(y)) < 2:
        raise DegenerateLabelError("probe training needs at least two classes")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    n_hold = int(round(hp.holdout_fraction * len(y)))
    if len(y) - n_hold < 1:
        raise InputError("not enough samples to fit a probe")
    hold, fit = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    widths = (None,) if kind == "linear" else tuple(hp.hidden_sizes)
    best = None
    for width in widths:
        params = _fit(kind, X[fit], y[fit], k, width, hp, np.random.default_rng(seed + 1))
        probe = ProbeModel(kind, X.shape[1], k, params, trained_on, hidden=width,
                           fit_indices=tuple(int(i) for i in fit),
                           holdout_indices=tuple(int(i) for i in hold))
        acc = _accuracy(probe, X[hold], y[hold]) if n_hold else _accuracy(probe, X[fit], y[fit])
        probe.holdout_accuracy = acc
        if best is None or acc > best.holdout_accuracy:
            best = probe
    return best


def _check_state(probe: ProbeModel, state) -> np.ndarray:
    s = np.asarray(state, dtype=np.float64)
    if s.shape[-1:] != (probe.input_dim,):
        raise ShapeError(f"probe expects dimension {probe.input_dim}, got {s.shape}")
    return s


def probe_predict(probe: ProbeModel, state) -> np.ndarray:
    """Class distribution (softmax of probe logits) for one state or a batch."""
    s = _check_state(probe, state)
    return tc.softmax(probe.logits(Tensor(s))).numpy()


def probe_gradient(probe: ProbeModel, state, target_class: int) -> np.ndarray:
    """Gradient of ``log p(target_class | state)`` with respect to the state."""
    s = _check_state(probe, state)
    if s.ndim != 1:
        raise ShapeError("probe_gradient takes a single state")
    if not 0 <= target_class < probe.num_classes:
        raise InputError("target class out of range")
    x = Tensor(s)
    logp = tc.log_softmax(probe.logits(x))
    return tc.backward(tc.take(logp, target_class), x)


def save_probe(probe: ProbeModel, path: str | Path) -> None:
    header = {"kind": "probe", "probe_kind": probe.kind, "num_classes": probe.num_classes,
              "input_dim": probe.input_dim, "hidden": probe.hidden,
              "trained_on": probe.trained_on, "holdout_accuracy": probe.holdout_accuracy,
              "tensors": [[k, list(v.shape)] for k, v in probe.params.items()]}
    write_container(path, header, probe.params)


def load_probe(path: str | Path) -> ProbeModel:
    header, arrays = read_container(path)
    if header.get("kind") != "probe":
        raise InputError(f"{path}: not a probe checkpoint")
    return ProbeModel(header["probe_kind"], header["input_dim"], header["num_classes"], arrays,
                      header["trained_on"], header["holdout_accuracy"], header["hidden"])
