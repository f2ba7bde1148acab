"""Lookahead margin ascent for token-level text editing.

At every decoding step the current last-layer state ``h_t`` is pushed up the
gradient of a cumulative edit margin over the next ``horizon`` positions.
Future positions are reached by unrolling the decoder on expected embeddings
``E^T softmax(phi / beta_g)``, which keeps the chain differentiable. The
committed forward path instead feeds ``E^T softmax(phi' / beta_f)`` with a low
``beta_f``, so generation stays close to ordinary greedy decoding.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .errors import CapacityError, ConfigurationError, InputError
from .model import DecodeCache, TinyTransformer, greedy_decode, start_cache, transition_step
from .tasks import VOCAB
from .tensor import Tensor


@dataclass(frozen=True)
class EditSpec:
    """Input tokens, their edited version and a fixed conditioning prefix.

    Positions are 1-based over the editable region; ``prefix`` (default: the
    BOS token) is fed to the model unchanged before position 1.
    """
    input_tokens: tuple[int, ...]
    edited_tokens: tuple[int, ...]
    prefix: tuple[int, ...] = (VOCAB.bos_id,)
    edits: dict[int, tuple[int, int]] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        for name in ("input_tokens", "edited_tokens", "prefix"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if not self.input_tokens or not self.prefix:
            raise InputError("input tokens and prefix must be non-empty")
        edits = {j + 1: (a, b) for j, (a, b) in enumerate(zip(self.input_tokens, self.edited_tokens))
                 if a != b}
        object.__setattr__(self, "edits", edits)

    @property
    def length(self) -> int:
        return min(len(self.input_tokens), len(self.edited_tokens))

    @classmethod
    def from_text(cls, text: str, edited: str, prefix: str = "") -> "EditSpec":
        return cls(tuple(VOCAB.encode(text, bos=False)), tuple(VOCAB.encode(edited, bos=False)),
                   tuple(VOCAB.encode(prefix)))


@dataclass(frozen=True)
class EditConfig:
    horizon: int = 4
    beta_f: float = 0.05
    beta_g: float = 1.0
    lambda_fact: float = 0.5
    step_size: float = 0.5
    steps: int = 10

    def __post_init__(self):
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if not (0 < self.beta_f < self.beta_g):
            raise ConfigurationError("need 0 < beta_f < beta_g")
        if not 0.0 <= self.lambda_fact <= 1.0:
            raise ConfigurationError("lambda_fact must lie in [0, 1]")
        if self.step_size < 0 or self.steps < 1:
            raise ConfigurationError("step size must be >= 0 and steps >= 1")


@dataclass(frozen=True)
class LookaheadState:
    cache: DecodeCache
    h: np.ndarray
    m: np.ndarray
    t: int


@dataclass
class StepDiagnostics:
    step: int
    objective_before: float
    objective_after: float
    grad_norm: float
    display_token: int
    edit_margin_before: float | None
    edit_margin_after: float | None
    top3: list[tuple[str, float]]

    def record(self) -> dict:
        return {"step": self.step, "objective_before": self.objective_before,
                "objective_after": self.objective_after, "grad_norm": self.grad_norm,
                "display_token": VOCAB.words[self.display_token],
                "edit_margin_before": self.edit_margin_before,
                "edit_margin_after": self.edit_margin_after,
                "top3": [[w, p] for w, p in self.top3]}


def initial_state(model: TinyTransformer, edits: EditSpec) -> LookaheadState:
    h, cache = start_cache(model, edits.prefix)
    return LookaheadState(cache, h.numpy(), model.E[edits.prefix[-1]].copy(), 0)


def _objective_graph(model, state: LookaheadState, edits: EditSpec, cfg: EditConfig,
                     h: Tensor, P) -> Tensor | None:
    t, T = state.t, edits.length
    if t + 1 > T:
        raise InputError(f"step {t} is past the editable length {T}")
    phi = model.head(h, P)
    terms = []
    if cfg.lambda_fact and (t + 1) not in edits.edits:
        terms.append(tc.scale(tc.take(phi, edits.input_tokens[t]), cfg.lambda_fact))
    reach = [s for s in range(1, cfg.horizon + 1) if t + s <= T and (t + s) in edits.edits]
    cache = state.cache
    for s in range(1, (max(reach) if reach else 0) + 1):
        if s > 1:
            y = tc.softmax(phi, cfg.beta_g)
            m = tc.reshape(tc.matmul(tc.reshape(y, (1, -1)), P["tok_emb"]), (-1,))
            h_next, cache = transition_step(model, cache, m, P)
            phi = model.head(h_next, P)
        if (t + s) in edits.edits:
            a, b = edits.edits[t + s]
            terms.append(tc.take(phi, b) - tc.take(phi, a))
    if not terms:
        return None
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


def lookahead_objective(model: TinyTransformer, state: LookaheadState, edits: EditSpec,
                        cfg: EditConfig, h=None) -> tuple[float, np.ndarray]:
    """Value and gradient (w.r.t. the current state) of the lookahead edit objective."""
    P = model.leaves()
    h_leaf = Tensor(state.h if h is None else np.asarray(h, dtype=np.float64))
    J = _objective_graph(model, state, edits, cfg, h_leaf, P)
    if J is None:
        return 0.0, np.zeros(model.cfg.hidden_size)
    return J.item(), tc.backward(J, h_leaf)


def la_hdmi_step(model: TinyTransformer, state: LookaheadState, edits: EditSpec,
                 cfg: EditConfig):
    """Ascend on ``h_t``, pick the display token and commit the low-temperature embedding."""
    h = state.h.copy()
    before, grad = lookahead_objective(model, state, edits, cfg, h)
    grad_norm = float(np.linalg.norm(grad))
    for k in range(cfg.steps):
        if k:
            _, grad = lookahead_objective(model, state, edits, cfg, h)
        h = h + cfg.step_size * grad
    after, _ = lookahead_objective(model, state, edits, cfg, h)

    def edit_margin(vec):
        pos = state.t + 1
        if pos not in edits.edits:
            return None
        a, b = edits.edits[pos]
        z = model.W_U @ vec + model.b
        return float(z[b] - z[a])

    logits = model.W_U @ h + model.b
    y = tc.softmax(logits, cfg.beta_f).numpy()
    token = int(np.argmax(y))
    m = y @ model.E
    probs = tc.softmax(logits).numpy()
    top = np.argsort(-probs, kind="stable")[:3]
    diag = StepDiagnostics(state.t + 1, before, after, grad_norm, token,
                           edit_margin(state.h), edit_margin(h),
                           [(VOCAB.words[i], float(probs[i])) for i in top])
    h_next, cache = transition_step(model, state.cache, m)
    return token, LookaheadState(cache.detached(), h_next.numpy(), m, state.t + 1), diag


def la_hdmi_generate(model: TinyTransformer, edits: EditSpec, cfg: EditConfig = EditConfig()):
    """Generate ``min(T_in, T_ed)`` tokens; returns (tokens, per-step diagnostics)."""
    if len(edits.prefix) + edits.length > model.cfg.max_seq_len:
        raise CapacityError("prefix plus edit length exceeds max_seq_len")
    state = initial_state(model, edits)
    tokens, diags = [], []
    for _ in range(edits.length):
        token, state, diag = la_hdmi_step(model, state, edits, cfg)
        tokens.append(token)
        diags.append(diag)
    return tokens, diags


def single_edit_cases(model: TinyTransformer, prompts: Sequence[Sequence[int]],
                      swap: dict[int, int], length: int = 4):
    """Greedy continuations of ``prompts`` with the first swappable token edited.

    Returns a list of (EditSpec, edit position) for prompts whose continuation
    contains a token listed in ``swap``.
    """
    out = []
    for p in prompts:
        cont = greedy_decode(model, p, length)[len(p):]
        for j, tok in enumerate(cont):
            if tok in swap:
                edited = list(cont)
                edited[j] = swap[tok]
                out.append((EditSpec(tuple(cont), tuple(edited), tuple(p)), j + 1))
                break
    return out
