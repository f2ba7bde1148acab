from functools import lru_cache

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hdmi.tensor as tc
from hdmi.errors import CapacityError, ConfigurationError, InputError
from hdmi.gradcheck import lookahead_error
from hdmi.interventions import MarginObjective, margin_loss
from hdmi.lookahead import (EditConfig, EditSpec, initial_state, la_hdmi_generate, la_hdmi_step,
                            lookahead_objective)
from hdmi.model import ModelConfig, TinyTransformer, forward_logits, greedy_decode
from hdmi.tasks import VOCAB

seeds = st.integers(0, 2**32 - 1)
V = len(VOCAB)


@lru_cache(maxsize=1)
def wide_model():
    """Untrained D=64 model; hypothesis tests cannot take function-scoped fixtures."""
    return TinyTransformer(ModelConfig(V, 64, None, 2, 4, 32, seed=0))


def random_spec(rng, n=5, edit_at=(), prefix_len=3):
    prefix = [VOCAB.bos_id] + [int(t) for t in rng.integers(4, V, size=prefix_len - 1)]
    x = [int(t) for t in rng.integers(4, V, size=n)]
    y = list(x)
    for j in edit_at:
        y[j - 1] = 4 + (x[j - 1] - 4 + int(rng.integers(1, V - 4))) % (V - 4)
    return EditSpec(x, y, prefix)


# -- EditSpec and EditConfig -----------------------------------------------------------------------

def test_edit_set_and_length():
    spec = EditSpec.from_text("the dog was here", "the dogs were here .")
    assert spec.length == 4
    assert spec.edits == {2: (VOCAB.id("dog"), VOCAB.id("dogs")), 3: (VOCAB.id("was"), VOCAB.id("were"))}
    assert spec.prefix == (VOCAB.bos_id,)


def test_empty_edit_set_allowed():
    assert EditSpec.from_text("the dog", "the dog").edits == {}


@pytest.mark.parametrize("kwargs", [dict(horizon=0), dict(beta_f=1.0, beta_g=1.0), dict(beta_f=0.0),
                                    dict(lambda_fact=1.5), dict(step_size=-1.0), dict(steps=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        EditConfig(**kwargs)


def test_empty_input_rejected():
    with pytest.raises(InputError):
        EditSpec((), (5,))


# -- objective --------------------------------------------------------------------------------

def test_empty_edits_objective_is_anchor_logit(tiny_model, rng):
    spec = random_spec(rng)
    state = initial_state(tiny_model, spec)
    value, grad = lookahead_objective(tiny_model, state, spec, EditConfig(lambda_fact=1.0))
    phi = tiny_model.head(tc.as_tensor(state.h)).numpy()
    assert value == phi[spec.input_tokens[0]]
    np.testing.assert_allclose(grad, tiny_model.W_U[spec.input_tokens[0]], atol=1e-14)


def test_single_step_reduces_to_margin(tiny_model, rng):
    spec = random_spec(rng, edit_at=(1,))
    state = initial_state(tiny_model, spec)
    value, _ = lookahead_objective(tiny_model, state, spec, EditConfig(horizon=1, lambda_fact=0.0))
    a, b = spec.edits[1]
    expected = margin_loss(forward_logits(tiny_model, spec.prefix), MarginObjective.pair(b, a))
    assert value == pytest.approx(expected, abs=1e-12)


def test_gradient_reaches_two_steps_ahead(tiny_model, rng):
    spec = random_spec(rng, edit_at=(2,))
    state = initial_state(tiny_model, spec)
    cfg = EditConfig(lambda_fact=0.0)
    value, grad = lookahead_objective(tiny_model, state, spec, cfg)
    assert np.linalg.norm(grad) > 1e-6
    fd = tc.finite_difference_grad(lambda h: lookahead_objective(tiny_model, state, spec, cfg, h)[0], state.h)
    assert tc.relative_error(grad, fd) < 1e-3


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_objective_gradient_matches_fd(seed):
    assert lookahead_error(wide_model(), np.random.default_rng(seed)) < 1e-3


def test_no_edits_no_anchor_is_zero(tiny_model, rng):
    spec = random_spec(rng)
    value, grad = lookahead_objective(tiny_model, initial_state(tiny_model, spec), spec,
                                      EditConfig(lambda_fact=0.0))
    assert value == 0.0 and not np.any(grad)


def test_horizon_limits_reach(tiny_model, rng):
    spec = random_spec(rng, edit_at=(3,))
    state = initial_state(tiny_model, spec)
    value, grad = lookahead_objective(tiny_model, state, spec, EditConfig(horizon=2, lambda_fact=0.0))
    assert value == 0.0 and not np.any(grad)


def test_objective_past_end(tiny_model, rng):
    spec = random_spec(rng, n=1)
    state = initial_state(tiny_model, spec)
    _, state, _ = la_hdmi_step(tiny_model, state, spec, EditConfig())
    with pytest.raises(InputError):
        lookahead_objective(tiny_model, state, spec, EditConfig())


# -- stepping --------------------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(seeds)
def test_zero_step_shows_greedy_token(seed):
    rng = np.random.default_rng(seed)
    model = wide_model()
    spec = random_spec(rng, edit_at=(1, 2))
    token, _, _ = la_hdmi_step(model, initial_state(model, spec), spec, EditConfig(step_size=0.0))
    assert token == greedy_decode(model, list(spec.prefix), 1)[-1]


def test_committed_embedding_is_expected_embedding(desk_model):
    spec = EditSpec.from_text("are here", "is here", "the keys")
    cfg = EditConfig(beta_f=0.01)
    state = initial_state(desk_model, spec)
    for _ in range(spec.length):
        token, nxt, _ = la_hdmi_step(desk_model, state, spec, cfg)
        assert nxt.cache.length == len(spec.prefix) + nxt.t
        y = tc.softmax(desk_model.W_U @ _ascend(desk_model, state, spec, cfg) + desk_model.b, cfg.beta_f).numpy()
        np.testing.assert_allclose(nxt.m, y @ desk_model.E, atol=1e-12)
        if y.max() > 1 - 1e-8:
            assert np.max(np.abs(nxt.m - desk_model.E[token])) < 1e-6
        state = nxt


def _ascend(model, state, spec, cfg):
    h = state.h.copy()
    for _ in range(cfg.steps):
        h = h + cfg.step_size * lookahead_objective(model, state, spec, cfg, h)[1]
    return h


def test_objective_monotone_for_small_steps(desk_model):
    cfg = EditConfig(step_size=1e-2, steps=10)
    for text, edited, prefix in [("is here", "are here", "the key"),
                                 ("was late .", "were late .", "yesterday the dog near the tables"),
                                 ("are ready", "is ready", "today the pilots")]:
        spec = EditSpec.from_text(text, edited, prefix)
        state = initial_state(desk_model, spec)
        for _ in range(spec.length):
            h = state.h.copy()
            values = []
            for _ in range(cfg.steps + 1):
                v, g = lookahead_objective(desk_model, state, spec, cfg, h)
                values.append(v)
                h = h + cfg.step_size * g
            assert all(b >= a for a, b in zip(values, values[1:])), values
            _, state, diag = la_hdmi_step(desk_model, state, spec, cfg)
            assert diag.objective_after >= diag.objective_before


def test_single_edit_was_to_were(desk_model):
    prefix = "yesterday the dog near the table"
    cont = greedy_decode(desk_model, VOCAB.encode(prefix), 3)[-3:]
    assert VOCAB.words[cont[0]] == "was"
    edited = [VOCAB.id("were")] + cont[1:]
    spec = EditSpec(cont, edited, VOCAB.encode(prefix))
    tokens, diags = la_hdmi_generate(desk_model, spec, EditConfig(step_size=1.0))
    assert VOCAB.words[tokens[0]] == "were"
    assert diags[0].edit_margin_after > 0 > diags[0].edit_margin_before


def test_all_positions_edited_with_growing_step(desk_model):
    # every position edited; each swap pair's margin direction ranks the edited token first,
    # so once the step is large enough every display token lands on the edit
    spec = EditSpec.from_text("is are was were", "are is were was")
    assert len(spec.edits) == spec.length
    for a, b in spec.edits.values():
        assert int(np.argmax(desk_model.W_U @ (desk_model.W_U[b] - desk_model.W_U[a]))) == b
    hits = {}
    for alpha in (0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0):
        tokens, _ = la_hdmi_generate(desk_model, spec, EditConfig(step_size=alpha))
        hits[alpha] = sum(t == b for t, b in zip(tokens, spec.edited_tokens))
    assert hits[0.5] < 4
    assert all(hits[a] == 4 for a in (20.0, 50.0, 100.0)), hits


def test_generation_is_deterministic(tiny_model, rng):
    spec = random_spec(rng, edit_at=(2,))
    assert la_hdmi_generate(tiny_model, spec)[0] == la_hdmi_generate(tiny_model, spec)[0]


def test_capacity_error(tiny_model, rng):
    spec = random_spec(rng, n=30, prefix_len=3)
    with pytest.raises(CapacityError):
        la_hdmi_generate(tiny_model, spec)


def test_diagnostics_record(tiny_model, rng):
    spec = random_spec(rng, n=2, edit_at=(1,))
    _, diags = la_hdmi_generate(tiny_model, spec)
    rec = diags[0].record()
    assert set(rec) == {"step", "objective_before", "objective_after", "grad_norm", "display_token",
                        "edit_margin_before", "edit_margin_after", "top3"}
    assert len(rec["top3"]) == 3 and rec["top3"][0][1] >= rec["top3"][1][1] >= rec["top3"][2][1]
    assert diags[1].edit_margin_before is None
