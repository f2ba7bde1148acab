"""Analytic gradients against the closed form and central finite differences."""
from __future__ import annotations

import numpy as np

from . import tensor as tc
from .interventions import MarginObjective, closed_form_final_gradient, margin_loss
from .lookahead import EditConfig, EditSpec, initial_state, la_hdmi_step, lookahead_objective
from .model import (ModelConfig, TinyTransformer, forward_capture, forward_patch,
                    patched_logits_graph)
from .tasks import VOCAB
from .tensor import Tensor
from .theory import CheckResult


def _random_model(seed: int) -> TinyTransformer:
    return TinyTransformer(ModelConfig(len(VOCAB), 64, None, 2, 4, 32, seed))


def _random_tokens(rng, vocab: int, lo: int, hi: int) -> list[int]:
    return [VOCAB.bos_id] + [int(t) for t in rng.integers(4, vocab, size=int(rng.integers(lo, hi)))]


def closed_form_vs_vjp(model: TinyTransformer, rng) -> float:
    """Max-abs gap between ``W_U^T (u+ - u-)`` and backprop through the head."""
    V = model.cfg.vocab_size
    tau, sigma = (int(i) for i in rng.choice(V, size=2, replace=False))
    obj = MarginObjective.pair(tau, sigma)
    tokens = _random_tokens(rng, V, 1, 10)
    _, state = forward_capture(model, tokens, model.cfg.layers)
    h = Tensor(state.vector)
    logits = patched_logits_graph(model, tokens, model.cfg.layers, h)
    vjp = tc.backward(logits, h, cotangent=obj.weights(V))
    return float(np.max(np.abs(vjp - closed_form_final_gradient(model, obj))))


def hidden_layer_error(model: TinyTransformer, rng, layer: int) -> float:
    """Relative error of the margin gradient at an intermediate layer."""
    V = model.cfg.vocab_size
    tau, sigma = (int(i) for i in rng.choice(V, size=2, replace=False))
    obj = MarginObjective.pair(tau, sigma)
    tokens = _random_tokens(rng, V, 1, 10)
    _, state = forward_capture(model, tokens, layer)
    h = Tensor(state.vector)
    vjp = tc.backward(patched_logits_graph(model, tokens, layer, h), h, cotangent=obj.weights(V))
    fd = tc.finite_difference_grad(
        lambda x: margin_loss(forward_patch(model, tokens, layer, x), obj), state.vector)
    return tc.relative_error(vjp, fd)


def lookahead_error(model: TinyTransformer, rng, cfg: EditConfig | None = None) -> float:
    """Relative error of the lookahead objective gradient, edits placed beyond the next step."""
    V = model.cfg.vocab_size
    cfg = cfg or EditConfig(horizon=4, lambda_fact=float(rng.uniform(0, 1)), steps=1)
    prefix = _random_tokens(rng, V, 1, 5)
    n = 6
    x = [int(t) for t in rng.integers(4, V, size=n)]
    y = list(x)
    skip = int(rng.integers(0, 2))
    for j in rng.choice(np.arange(skip + 1, n), size=int(rng.integers(1, 3)), replace=False):
        y[j] = int((x[j] - 4 + int(rng.integers(1, V - 4))) % (V - 4) + 4)
    spec = EditSpec(x, y, prefix)
    state = initial_state(model, spec)
    for _ in range(skip):
        _, state, _ = la_hdmi_step(model, state, spec, cfg)
    _, grad = lookahead_objective(model, state, spec, cfg)
    fd = tc.finite_difference_grad(lambda h: lookahead_objective(model, state, spec, cfg, h)[0],
                                   state.h)
    return tc.relative_error(grad, fd)


def run_gradchecks(model: TinyTransformer | None = None, n_cases: int = 20,
                   seed: int = 0) -> list[CheckResult]:
    model = model or _random_model(seed)
    rng = np.random.default_rng(seed)
    closed = max(closed_form_vs_vjp(model, rng) for _ in range(n_cases))
    hidden = max(hidden_layer_error(model, rng, int(rng.integers(1, model.cfg.layers)))
                 for _ in range(n_cases)) if model.cfg.layers > 1 else 0.0
    look = max(lookahead_error(model, rng) for _ in range(n_cases))
    return [
        CheckResult("closed-form final gradient = VJP", closed < 1e-6, f"max abs {closed:.2e}"),
        CheckResult("hidden-layer VJP vs finite differences", hidden < 1e-3, f"max rel {hidden:.2e}"),
        CheckResult("lookahead VJP vs finite differences", look < 1e-3, f"max rel {look:.2e}"),
    ]
