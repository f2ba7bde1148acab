"""Completeness, selectivity and reliability from probe distributions."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import DomainError, InputError

_ATOL = 1e-6


def _distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise InputError("a distribution must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < -_ATOL) or abs(p.sum() - 1.0) > _ATOL:
        raise InputError("not a probability distribution")
    return p


def tv_distance(p, q) -> float:
    p, q = _distribution(p), _distribution(q)
    if p.shape != q.shape:
        raise InputError("distributions have different lengths")
    return float(min(1.0, max(0.0, 0.5 * np.abs(p - q).sum())))


def completeness(p_after, zprime: int) -> float:
    """``1 - TV(p_after, onehot(zprime))``."""
    p = _distribution(p_after)
    if not 0 <= zprime < p.size:
        raise InputError("counterfactual class out of range")
    target = np.zeros_like(p)
    target[zprime] = 1.0
    return 1.0 - tv_distance(p, target)


def max_tv_shift(p) -> float:
    """Largest TV distance reachable from ``p``: ``max(1 - min p, max p)``."""
    p = _distribution(p)
    if p.size < 2:
        raise DomainError("max_tv_shift needs at least two classes")
    return float(max(1.0 - p.min(), p.max()))


class SelectivityClamps:
    """Counts selectivity values clamped up to zero."""
    count = 0


def selectivity(p_before, p_after) -> float:
    """``1 - TV(after, before) / max_tv_shift(before)``, clamped to [0, 1]."""
    value = 1.0 - tv_distance(p_after, p_before) / max_tv_shift(p_before)
    if value < 0.0:
        SelectivityClamps.count += 1
        return 0.0
    return min(1.0, value)


def reliability(comp: float, sel: float) -> float:
    """Harmonic mean of completeness and selectivity (0 if both are 0)."""
    for v in (comp, sel):
        if not 0.0 <= v <= 1.0:
            raise InputError(f"metric value {v} outside [0, 1]")
    if comp + sel == 0:
        return 0.0
    return 2.0 * comp * sel / (comp + sel)


@dataclass(frozen=True)
class MetricsRecord:
    task: str
    method: str
    completeness: float
    selectivity: float
    reliability: float
    n_samples: int

    def tsv(self) -> str:
        return "\t".join([self.task, self.method, f"{self.completeness:.6f}",
                          f"{self.selectivity:.6f}", f"{self.reliability:.6f}",
                          str(self.n_samples)])

    def json(self) -> str:
        return json.dumps(asdict(self))


TSV_HEADER = "\t".join(f.name for f in fields(MetricsRecord))


def aggregate(task: str, method: str, comps, sels) -> MetricsRecord:
    """Dataset-level record from per-sample scores (unweighted means).

    Reliability is the harmonic mean of the two averaged scores.
    """
    comps, sels = list(comps), list(sels)
    if not comps or len(comps) != len(sels):
        raise InputError("need matching, non-empty per-sample scores")
    c = float(sum(comps) / len(comps))
    s = float(sum(sels) / len(sels))
    return MetricsRecord(task, method, c, s, reliability(c, s), len(comps))
