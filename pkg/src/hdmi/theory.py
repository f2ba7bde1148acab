"""Numeric checks of the margin-versus-target-only optimality result for affine heads.

With logits ``z(h) = W h + b`` the pairwise margin ``m(h) = z_tau - z_sigma``
changes by exactly ``d . delta`` under a perturbation ``delta``, where
``d = w_tau - w_sigma``. Everything here is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInstanceError, InputError


@dataclass(frozen=True)
class TheoremInstance:
    W: np.ndarray
    b: np.ndarray
    h: np.ndarray
    tau: int
    sigma: int
    eps: float
    d: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.tau == self.sigma:
            raise InputError("tau and sigma must differ")
        if self.eps < 0:
            raise InputError("eps must be non-negative")
        object.__setattr__(self, "d", self.W[self.tau] - self.W[self.sigma])

    def logits(self, h=None) -> np.ndarray:
        return self.W @ (self.h if h is None else h) + self.b

    def margin(self, h=None) -> float:
        z = self.logits(h)
        return float(z[self.tau] - z[self.sigma])

    def gain(self, delta) -> float:
        """Margin change ``m(h + delta) - m(h)`` evaluated through the logits."""
        return self.margin(self.h + delta) - self.margin()


def random_instance(rng, D: int = 8, V: int = 16, eps: float | None = None) -> TheoremInstance:
    tau, sigma = rng.choice(V, size=2, replace=False)
    return TheoremInstance(rng.normal(size=(V, D)), rng.normal(size=V), rng.normal(size=D),
                           int(tau), int(sigma), float(rng.uniform(0.1, 2.0) if eps is None else eps))


def optimal_margin_delta(inst: TheoremInstance) -> tuple[np.ndarray, float]:
    """``delta* = eps d / ||d||`` and the optimal gain ``eps ||d||``."""
    norm = np.linalg.norm(inst.d)
    if norm == 0:
        raise DegenerateInstanceError("d = w_tau - w_sigma is zero")
    return inst.eps * inst.d / norm, float(inst.eps * norm)


def target_only_delta(inst: TheoremInstance) -> tuple[np.ndarray, float, float]:
    """Target-only optimum, its margin gain ``eps ||d|| cos(theta)`` and ``cos(theta)``."""
    w = inst.W[inst.tau]
    wn, dn = np.linalg.norm(w), np.linalg.norm(inst.d)
    if wn == 0:
        raise DegenerateInstanceError("w_tau is zero")
    if dn == 0:
        raise DegenerateInstanceError("d = w_tau - w_sigma is zero")
    cos = float(np.clip(inst.d @ w / (dn * wn), -1.0, 1.0))
    return inst.eps * w / wn, float(inst.eps * dn * cos), cos


def build_failure_case(u, eps: float, V: int = 4, tau: int = 0, sigma: int = 1,
                       seed: int = 0) -> TheoremInstance:
    """Instance with ``w_tau = u`` and ``w_sigma = 2u`` (other rows random)."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 1 or not np.any(u):
        raise InputError("u must be a nonzero vector")
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(V, u.size))
    W[tau], W[sigma] = u, 2 * u
    return TheoremInstance(W, rng.normal(size=V), rng.normal(size=u.size), tau, sigma, eps)


def sampled_best_gain(inst: TheoremInstance, n_dirs: int = 10_000, seed: int = 0) -> float:
    """Best margin gain over ``n_dirs`` uniform directions on the eps-sphere."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_dirs, inst.h.size))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    deltas = inst.eps * dirs
    z0 = inst.logits()
    base = z0[inst.tau] - z0[inst.sigma]
    after = (inst.h + deltas) @ inst.W[[inst.tau, inst.sigma]].T + inst.b[[inst.tau, inst.sigma]]
    return float(np.max(after[:, 0] - after[:, 1] - base))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def verify(n_instances: int = 50, seed: int = 0, n_dirs: int = 10_000) -> list[CheckResult]:
    """Run every part of the result on random instances plus the failure construction."""
    rng = np.random.default_rng(seed)
    worst_opt = worst_to = worst_lin = 0.0
    worst_excess = -np.inf
    for i in range(n_instances):
        inst = random_instance(rng, D=int(rng.integers(2, 17)), V=int(rng.integers(2, 33)))
        delta, gain = optimal_margin_delta(inst)
        worst_opt = max(worst_opt, abs(inst.gain(delta) - gain),
                        abs(gain - inst.eps * np.linalg.norm(inst.d)))
        d_to, g_to, cos = target_only_delta(inst)
        worst_to = max(worst_to, abs(inst.gain(d_to) - g_to))
        probe = rng.normal(size=inst.h.size)
        worst_lin = max(worst_lin, abs(inst.gain(probe) - inst.d @ probe))
        worst_excess = max(worst_excess, sampled_best_gain(inst, n_dirs, seed + i) - gain)
    u = rng.normal(size=6)
    eps = 0.7
    fail = build_failure_case(u, eps)
    d_to, g_to, _ = target_only_delta(fail)
    d_opt, g_opt = optimal_margin_delta(fail)
    un = np.linalg.norm(u)
    fail_err = max(abs(fail.gain(d_to) + eps * un), abs(g_to + eps * un),
                   abs(g_opt - eps * un), abs(fail.gain(d_opt) - eps * un))
    return [
        CheckResult("margin-optimal gain = eps*||d||", worst_opt <= 1e-10, f"max err {worst_opt:.2e}"),
        CheckResult("target-only gain = eps*||d||*cos", worst_to <= 1e-10, f"max err {worst_to:.2e}"),
        CheckResult("margin change is linear in delta", worst_lin <= 1e-10, f"max err {worst_lin:.2e}"),
        CheckResult("sampled directions never beat optimum", worst_excess <= 1e-9,
                    f"max excess {worst_excess:.2e}"),
        CheckResult("failure case: target-only gain = -eps*||u||", fail_err <= 1e-10,
                    f"gain {g_to:.6f} vs {-eps * un:.6f}"),
    ]
