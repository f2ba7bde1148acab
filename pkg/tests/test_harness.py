import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from hdmi.errors import ConfigurationError, LeakageError, ProbeAccuracyError
from hdmi.harness import (METHODS, ExperimentConfig, _assert_disjoint, fit_gated_probe,
                          grid_search, holds_probe, make_intervention, method_grid,
                          pairwise_accuracy, run_pipeline, stage_seed)
from hdmi.interventions import NullspaceProjection
from hdmi.metrics import reliability
from hdmi.probes import ProbeHParams, load_probe, train_probe
from hdmi.tasks import gen_agreement_suite

FAST = dict(n_examples=150, probe_epochs=30, epsilon=(0.5, 1.0), pgd_steps=(20,),
            inlp_rank=(4,), hdmi_inner_steps=(10,))

RESULT_FILES = ("results.tsv", "results.jsonl", "grid.tsv", "interventions.jsonl", "states.bin",
                "manifest.json", "config.txt", "data/lgd_agreement.tsv")


@pytest.fixture(scope="module")
def fast_runs(desk, tmp_path_factory):
    model_path = str(Path(desk.config.output_dir) / "model.bin")
    runs = []
    for name in ("a", "b"):
        cfg = ExperimentConfig(output_dir=str(tmp_path_factory.mktemp(name)), model_path=model_path, **FAST)
        runs.append((cfg, run_pipeline(cfg)))
    return runs


# -- config -------------------------------------------------------------------------------

def test_config_text_round_trip():
    cfg = ExperimentConfig(seed=7, epsilon=(0.25, 2.0), methods=("hdmi", "pgd"))
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg
    assert ExperimentConfig.from_text(cfg.to_text()).digest() == cfg.digest()


def test_config_comments_and_overrides(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("# desk run\nseed = 3\nepsilon = 0.5, 1   # two radii\n\nmethods = hdmi\n")
    cfg = ExperimentConfig.from_file(path, seed="9")
    assert (cfg.seed, cfg.epsilon, cfg.methods) == (9, (0.5, 1.0), ("hdmi",))


@pytest.mark.parametrize("text", ["nonsense = 1", "seed = many", "methods = hdmi,magic",
                                  "epsilon =", "seed"])
def test_config_errors(text):
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_text(text)


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "lm") == stage_seed(0, "lm")
    assert len({stage_seed(0, s) for s in ("lm", "corpus", "init")} | {stage_seed(1, "lm")}) == 4


# -- grid search -----------------------------------------------------------------------------

def test_grid_singleton():
    assert grid_search([{"a": 1}], lambda g: 0.3) == ({"a": 1}, [0.3])


def test_grid_ties_go_first():
    best, _ = grid_search([{"a": 1}, {"a": 2}, {"a": 3}], lambda g: 0.5 if g["a"] > 1 else 0.1)
    assert best == {"a": 2}


def test_fgsm_grid_defaults():
    grid = method_grid(ExperimentConfig(), "fgsm")
    assert [g["epsilon"] for g in grid] == [0.5, 1.0, 10.0]
    assert method_grid(ExperimentConfig(), "hdmi") == [{"alpha": 1.0, "steps": 30}]
    assert len(method_grid(ExperimentConfig(), "pgd")) == 9


def test_grid_choice_is_an_argmax(fast_runs):
    _, result = fast_runs[0]
    for (suite, method), best in result.best.items():
        rows = [(g, r.reliability) for s, m, g, r in result.grid if (s, m) == (suite, method)]
        top = max(r for _, r in rows)
        assert best in [g for g, _ in rows]
        assert dict(rows[[g for g, _ in rows].index(best)][0]) == best
        assert [r for g, r in rows if g == best][0] == top
    fgsm_eps = result.best[("lgd_agreement", "fgsm")]["epsilon"]
    assert fgsm_eps in FAST["epsilon"]


# -- provenance and leakage ----------------------------------------------------------------------

def test_hdmi_closures_hold_no_probe(desk_model, rng):
    X = rng.normal(size=(40, desk_model.cfg.hidden_size))
    probe = train_probe(X, np.arange(40) % 2, hparams=ProbeHParams(epochs=2))
    ns = NullspaceProjection(np.eye(2), np.zeros((0, 2)))
    for method in ("hdmi", "target_only"):
        fn = make_intervention(method, {"alpha": 1.0, "steps": 2}, desk_model, 2, probe, {4: ns})
        assert not holds_probe(fn)
    fn = make_intervention("fgsm", {"epsilon": 1.0, "norm": "l_inf"}, desk_model, 2, probe)
    assert holds_probe(fn)


def test_disjointness_assertion():
    _assert_disjoint("ok", [1, 2], [3])
    with pytest.raises(LeakageError):
        _assert_disjoint("bad", [1, 2], [2, 3])


def test_probe_gate_retry_and_abort(rng):
    events = []
    X = rng.normal(size=(100, 4))
    y = rng.integers(0, 2, size=100)
    with pytest.raises(ProbeAccuracyError):
        fit_gated_probe(X, y, "linear", ProbeHParams(epochs=3), 0, 2, "interventional", 0.9, events)
    assert len(events) == 1 and "retry with 90/10" in events[0]


def test_probe_gate_passes_separable(rng):
    events = []
    y = np.arange(100) % 2
    X = rng.normal(size=(100, 4)) + 4 * y[:, None]
    probe = fit_gated_probe(X, y, "linear", ProbeHParams(epochs=300), 0, 2, "interventional", 0.9, events)
    assert probe.holdout_accuracy >= 0.9 and not events


def test_pairwise_accuracy_range(desk_model):
    acc = pairwise_accuracy(desk_model, gen_agreement_suite(30, seed=8))
    assert 0.0 <= acc <= 1.0


# -- pipeline -------------------------------------------------------------------------------------

def test_runs_are_byte_identical(fast_runs):
    (a, _), (b, _) = fast_runs
    for name in RESULT_FILES:
        if name in ("manifest.json", "config.txt"):
            continue
        assert (Path(a.output_dir) / name).read_bytes() == (Path(b.output_dir) / name).read_bytes(), name
    ma = json.loads((Path(a.output_dir) / "manifest.json").read_text())
    mb = json.loads((Path(b.output_dir) / "manifest.json").read_text())
    assert ma["seeds"] == mb["seeds"] and ma["diagnostics"] == mb["diagnostics"]


def test_output_layout(fast_runs):
    cfg, result = fast_runs[0]
    out = Path(cfg.output_dir)
    for name in RESULT_FILES:
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.digest()
    assert set(manifest["seeds"]) >= {"corpus", "lm", "init", "splits/lgd_agreement"}
    lines = (out / "results.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:2] == ["task", "method"] and len(lines) == 1 + len(METHODS)


def test_intervention_records_point_into_state_file(fast_runs, desk_model):
    cfg, _ = fast_runs[0]
    out = Path(cfg.output_dir)
    records = [json.loads(line) for line in (out / "interventions.jsonl").read_text().splitlines()]
    blob = (out / "states.bin").read_bytes()
    D = desk_model.cfg.hidden_size
    assert len(blob) == 8 * D * len(records)
    assert set(records[0]) == {"suite", "sample_id", "method", "margin_pre", "margin_post",
                               "argmax_pre", "argmax_post", "state_offset"}
    for k, rec in enumerate(records):
        assert rec["state_offset"] == 8 * D * k
    state = np.frombuffer(blob, dtype="<f8", count=D, offset=records[0]["state_offset"])
    assert np.all(np.isfinite(state))


def test_single_method_single_row(desk_model, tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), methods=("hdmi",), **FAST)
    result = run_pipeline(cfg, model=desk_model)
    assert len(result.records) == 1
    rec = result.records[0]
    assert rec.method == "hdmi"
    assert all(0.0 <= v <= 1.0 for v in (rec.completeness, rec.selectivity, rec.reliability))
    assert not (tmp_path / "probes" / "lgd_agreement.interventional.bin").exists()


def test_all_methods_rows_are_consistent(desk):
    records = desk.result.records
    assert [r.method for r in records] == list(METHODS)
    for r in records:
        assert abs(r.reliability - reliability(r.completeness, r.selectivity)) <= 1e-6


def test_causalgym_suite_runs(desk_model, tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), suites=("agr_gender",),
                           methods=("hdmi", "target_only"), **FAST)
    result = run_pipeline(cfg, model=desk_model)
    assert [r.task for r in result.records] == ["agr_gender", "agr_gender"]


def test_validation_probes_are_tagged(fast_runs):
    cfg, _ = fast_runs[0]
    probes = Path(cfg.output_dir) / "probes"
    assert load_probe(probes / "lgd_agreement.validation_zc.bin").trained_on == "validation_probe"
    assert load_probe(probes / "lgd_agreement.validation_ze.bin").trained_on == "validation_probe"
    assert load_probe(probes / "lgd_agreement.interventional.bin").trained_on == "interventional"


def test_unknown_method_rejected():
    with pytest.raises(ConfigurationError):
        replace(ExperimentConfig(), methods=("hdmi", "steer"))
