"""End-to-end experiment pipeline: data, LM, probes, grid search, test evaluation."""
from __future__ import annotations

import hashlib
import itertools
import json
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .errors import ConfigurationError, LeakageError, ProbeAccuracyError
from .interventions import (AscentConfig, BallConstraint, MarginObjective, NullspaceProjection,
                            alterrep_apply, fgsm, hdmi_ascend, inlp_fit, margin_loss, pgd,
                            target_only_ascend)
from .metrics import TSV_HEADER, MetricsRecord, aggregate, completeness, selectivity
from .model import (ModelConfig, TinyTransformer, forward_capture, forward_logits, forward_patch,
                    load_model, round_to_float32, save_model, train_lm)
from .probes import ProbeHParams, ProbeModel, probe_predict, save_probe, train_probe
from .tasks import (AGREEMENT, SUITES, VOCAB, LabeledExample, gen_corpus, gen_suite,
                    make_splits, write_corpus, write_dataset)

METHODS = ("hdmi", "target_only", "fgsm", "pgd", "alterrep")
PROBE_METHODS = ("fgsm", "pgd")


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment settings; list-valued keys are comma-separated in the config file."""
    seed: int = 0
    output_dir: str = "runs/default"
    suites: tuple[str, ...] = (AGREEMENT,)
    n_examples: int = 600
    corpus_size: int = 3000
    split_fractions: tuple[float, ...] = (0.4, 0.3, 0.3)
    methods: tuple[str, ...] = METHODS
    # language model
    model_path: str = ""
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    max_seq_len: int = 32
    lm_epochs: int = 10
    lm_lr: float = 1e-3
    lm_batch_size: int = 32
    lm_weight_decay: float = 1e-6
    # interventions; layer 0 means the final layer
    intervention_layer: int = 0
    hdmi_alpha: tuple[float, ...] = (1.0,)
    hdmi_inner_steps: tuple[int, ...] = (30,)
    epsilon: tuple[float, ...] = (0.5, 1.0, 10.0)
    gbi_norm: tuple[str, ...] = ("l_inf",)
    pgd_steps: tuple[int, ...] = (40, 50, 100)
    inlp_rank: tuple[int, ...] = (32,)
    alterrep_alpha: tuple[float, ...] = (0.1, 0.5)
    # probes
    probe_lr: float = 1e-2
    probe_weight_decay: float = 1e-6
    probe_batch_size: int = 256
    probe_epochs: int = 100
    probe_hidden_sizes: tuple[int, ...] = (64, 256, 512)
    interventional_probe_kind: str = "linear"
    validation_probe_kind: str = "linear"
    probe_gate: float = 0.9
    # keep only the first N interventional examples (0 keeps all)
    interventional_limit: int = 0

    def __post_init__(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ConfigurationError(f"unknown methods: {sorted(unknown)}")
        for suite in self.suites:
            if suite not in (AGREEMENT,) + SUITES:
                raise ConfigurationError(f"unknown suite {suite!r}")
        for name in ("hdmi_alpha", "hdmi_inner_steps", "epsilon", "gbi_norm", "pgd_steps",
                     "inlp_rank", "alterrep_alpha", "suites", "methods"):
            if not getattr(self, name):
                raise ConfigurationError(f"{name} must not be empty")
        if len(self.split_fractions) != 3:
            raise ConfigurationError("split_fractions needs three values")
        if self.interventional_limit < 0:
            raise ConfigurationError("interventional_limit must be >= 0")

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ExperimentConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        values.update({k: str(v) for k, v in overrides.items()})
        return cls.from_strings(values)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "ExperimentConfig":
        defaults = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        parsed = {k: _parse_like(getattr(defaults, k), v, k) for k, v in values.items()}
        return replace(defaults, **parsed)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _parse_like(default, text: str, key: str):
    try:
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(kind(s.strip()) for s in text.split(",") if s.strip())
        return type(default)(text)
    except ValueError as exc:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from exc


def stage_seed(master: int, stage: str) -> int:
    """Seed for a named pipeline stage, derived from the master seed."""
    ss = np.random.SeedSequence([master, zlib.crc32(stage.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seeds: dict[str, int] = field(default_factory=dict)
    paths: dict[str, str] = field(default_factory=dict)
    events: list[str] = field(default_factory=list)
    diagnostics: dict[str, float] = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


@dataclass
class PipelineResult:
    records: list[MetricsRecord]
    manifest: RunManifest
    best: dict[tuple[str, str], dict]
    grid: list[tuple[str, str, dict, MetricsRecord]]


# -- helpers ---------------------------------------------------------------------------

def grid_search(grid: Sequence[dict], score: Callable[[dict], float]):
    """Setting with the highest score (first listed on ties) and all scores."""
    if not grid:
        raise ConfigurationError("empty grid")
    scores = [score(g) for g in grid]
    best = int(np.argmax(scores))
    return grid[best], scores


def method_grid(cfg: ExperimentConfig, method: str) -> list[dict]:
    axes = {
        "hdmi": {"alpha": cfg.hdmi_alpha, "steps": cfg.hdmi_inner_steps},
        "target_only": {"alpha": cfg.hdmi_alpha, "steps": cfg.hdmi_inner_steps},
        "fgsm": {"epsilon": cfg.epsilon, "norm": cfg.gbi_norm},
        "pgd": {"epsilon": cfg.epsilon, "norm": cfg.gbi_norm, "steps": cfg.pgd_steps},
        "alterrep": {"rank": cfg.inlp_rank, "alpha": cfg.alterrep_alpha},
    }[method]
    return [dict(zip(axes, combo)) for combo in itertools.product(*axes.values())]


def pairwise_accuracy(model: TinyTransformer, examples: Sequence[LabeledExample]) -> float:
    """Share of prompts where the correct inflection outscores the other one."""
    hits = [(z := forward_logits(model, e.prompt))[e.source_token] > z[e.target_token]
            for e in examples]
    return float(np.mean(hits))


def holds_probe(fn, _depth: int = 0) -> bool:
    """True if a callable closes over a probe or a nullspace projection."""
    if _depth > 4:
        return False
    items = [c.cell_contents for c in (getattr(fn, "__closure__", None) or ())]
    while items:
        obj = items.pop()
        if isinstance(obj, (ProbeModel, NullspaceProjection)):
            return True
        if isinstance(obj, dict):
            items.extend(obj.values())
        elif isinstance(obj, (list, tuple, set)):
            items.extend(obj)
        elif callable(obj) and hasattr(obj, "__closure__") and holds_probe(obj, _depth + 1):
            return True
    return False


def _assert_disjoint(what: str, a, b) -> None:
    if set(a) & set(b):
        raise LeakageError(f"{what}: index sets overlap")


def fit_gated_probe(X, y, kind: str, hp: ProbeHParams, seed: int, num_classes: int,
                    trained_on: str, gate: float, events: list[str]) -> ProbeModel:
    """Train a probe; if it misses the accuracy gate, retry once with a 90/10 split."""
    probe = train_probe(X, y, kind, hp, seed, num_classes, trained_on)
    if probe.holdout_accuracy >= gate:
        return probe
    events.append(f"{trained_on} probe at {probe.holdout_accuracy:.4f} < {gate}; retry with 90/10")
    probe = train_probe(X, y, kind, replace(hp, holdout_fraction=0.1), seed, num_classes, trained_on)
    if probe.holdout_accuracy < gate:
        raise ProbeAccuracyError(
            f"{trained_on} probe holdout accuracy {probe.holdout_accuracy:.4f} below {gate} after retry")
    return probe


# -- interventions as closures ------------------------------------------------------------

Intervention = Callable[[LabeledExample, np.ndarray], np.ndarray]


def make_intervention(method: str, params: dict, model: TinyTransformer, layer: int,
                      probe: ProbeModel | None = None,
                      inlp: dict[int, NullspaceProjection] | None = None) -> Intervention:
    """Map (example, clean state) to the intervened state for one method and setting."""
    if method in ("hdmi", "target_only"):
        ascend = hdmi_ascend if method == "hdmi" else target_only_ascend
        acfg = AscentConfig(params["alpha"], params["steps"], layer)

        def run(e, h0):
            return ascend(model, e.prompt, MarginObjective.pair(e.target_token, e.source_token),
                          acfg)[0]
        return run
    if method in PROBE_METHODS:
        if probe is None:
            raise ConfigurationError(f"{method} needs an interventional probe")
        ball = BallConstraint(params["norm"], params["epsilon"])
        if method == "fgsm":
            return lambda e, h0: fgsm(h0, probe, 1 - e.z_c, ball)
        return lambda e, h0: pgd(h0, probe, 1 - e.z_c, ball, params["steps"])
    if method == "alterrep":
        basis = inlp[params["rank"]].basis
        return lambda e, h0: alterrep_apply(h0, basis, 1 if e.z_c == 0 else -1, params["alpha"])
    raise ConfigurationError(f"unknown method {method!r}")


@dataclass
class _SuiteContext:
    suite: str
    model: TinyTransformer
    layer: int
    examples: list[LabeledExample]
    probe_c: ProbeModel
    probe_e: ProbeModel
    states: dict[int, np.ndarray] = field(default_factory=dict)

    def state(self, i: int) -> np.ndarray:
        if i not in self.states:
            self.states[i] = forward_capture(self.model, self.examples[i].prompt, self.layer)[1].vector
        return self.states[i]


def _score(ctx: _SuiteContext, method: str, fn: Intervention, indices, sink=None) -> MetricsRecord:
    comps, sels = [], []
    for i in indices:
        e, h0 = ctx.examples[i], ctx.state(i)
        h1 = fn(e, h0)
        comps.append(completeness(probe_predict(ctx.probe_c, h1), 1 - e.z_c))
        sels.append(selectivity(probe_predict(ctx.probe_e, h0), probe_predict(ctx.probe_e, h1)))
        if sink is not None:
            sink(i, e, h0, h1)
    return aggregate(ctx.suite, method, comps, sels)


# -- the pipeline ------------------------------------------------------------------------

def _stage_names(cfg: ExperimentConfig) -> list[str]:
    names = ["corpus", "lm", "init"]
    for s in cfg.suites:
        names += [f"data/{s}", f"splits/{s}", f"probe_intervention/{s}",
                  f"probe_validation_c/{s}", f"probe_validation_e/{s}", f"inlp/{s}"]
    return names


def _prepare_model(cfg: ExperimentConfig, out: Path, seeds, manifest: RunManifest):
    if cfg.model_path:
        manifest.paths["model"] = str(cfg.model_path)
        return load_model(cfg.model_path)
    corpus = gen_corpus(cfg.corpus_size, seeds["corpus"])
    write_corpus(out / "data" / "corpus.txt", corpus)
    mcfg = ModelConfig(len(VOCAB), cfg.hidden_size, None, cfg.layers, cfg.heads,
                       cfg.max_seq_len, seeds["init"])
    model, losses = train_lm(TinyTransformer(mcfg), corpus, cfg.lm_epochs, cfg.lm_lr,
                             cfg.lm_batch_size, seeds["lm"], weight_decay=cfg.lm_weight_decay)
    model = round_to_float32(model)
    save_model(model, out / "model.bin")
    manifest.paths.update(corpus="data/corpus.txt", model="model.bin")
    manifest.diagnostics["lm_final_loss"] = float(np.mean(losses[-10:]))
    return model


def run_pipeline(cfg: ExperimentConfig, model: TinyTransformer | None = None) -> PipelineResult:
    """Run every stage and write results, records and the manifest under ``output_dir``.

    Passing ``model`` skips training (the manifest then records ``<in-memory>``).
    """
    out = Path(cfg.output_dir)
    (out / "data").mkdir(parents=True, exist_ok=True)
    (out / "probes").mkdir(exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    seeds = {name: stage_seed(cfg.seed, name) for name in _stage_names(cfg)}
    manifest = RunManifest(cfg.digest(), __version__, seeds, {"config": "config.txt"})
    if model is None:
        model = _prepare_model(cfg, out, seeds, manifest)
    else:
        manifest.paths["model"] = "<in-memory>"
    layer = cfg.intervention_layer or model.cfg.layers
    hp = ProbeHParams(cfg.probe_lr, cfg.probe_weight_decay, cfg.probe_batch_size,
                      cfg.probe_epochs, cfg.probe_hidden_sizes)

    records, grid_rows, best_params = [], [], {}
    sample_lines = []
    state_blob = bytearray()
    for suite in cfg.suites:
        examples = gen_suite(suite, cfg.n_examples, seeds[f"data/{suite}"])
        write_dataset(out / "data" / f"{suite}.tsv", examples)
        manifest.paths[f"data/{suite}"] = f"data/{suite}.tsv"
        split = make_splits(examples, cfg.split_fractions, seeds[f"splits/{suite}"])
        inter = list(split.interventional)
        if cfg.interventional_limit:
            inter = inter[:cfg.interventional_limit]
        manifest.diagnostics[f"{suite}/interventional_size"] = len(inter)
        val, test = list(split.validation_probe), list(split.test)
        _assert_disjoint("interventional vs validation", inter, val)
        _assert_disjoint("interventional vs test", inter, test)
        _assert_disjoint("validation vs test", val, test)
        manifest.diagnostics[f"{suite}/pairwise_accuracy_test"] = pairwise_accuracy(
            model, [examples[i] for i in test])

        k_e = 3 if suite == AGREEMENT else 5
        ctx_states: dict[int, np.ndarray] = {}

        def clean(indices):
            for i in indices:
                if i not in ctx_states:
                    ctx_states[i] = forward_capture(model, examples[i].prompt, layer)[1].vector
            return np.array([ctx_states[i] for i in indices])

        Xv = clean(val)
        probe_c = train_probe(Xv, [examples[i].z_c for i in val], cfg.validation_probe_kind, hp,
                              seeds[f"probe_validation_c/{suite}"], 2, "validation_probe")
        probe_e = train_probe(Xv, [examples[i].z_e for i in val], cfg.validation_probe_kind, hp,
                              seeds[f"probe_validation_e/{suite}"], k_e, "validation_probe")
        for name, p in (("validation_zc", probe_c), ("validation_ze", probe_e)):
            save_probe(p, out / "probes" / f"{suite}.{name}.bin")
            manifest.paths[f"probe/{suite}/{name}"] = f"probes/{suite}.{name}.bin"
            manifest.diagnostics[f"{suite}/{name}_holdout_accuracy"] = p.holdout_accuracy
        ctx = _SuiteContext(suite, model, layer, examples, probe_c, probe_e, ctx_states)

        inter_probe, inlp = None, {}
        if any(m in PROBE_METHODS for m in cfg.methods):
            inter_probe = fit_gated_probe(clean(inter), [examples[i].z_c for i in inter],
                                          cfg.interventional_probe_kind, hp,
                                          seeds[f"probe_intervention/{suite}"], 2,
                                          "interventional", cfg.probe_gate, manifest.events)
            save_probe(inter_probe, out / "probes" / f"{suite}.interventional.bin")
            manifest.paths[f"probe/{suite}/interventional"] = f"probes/{suite}.interventional.bin"
            manifest.diagnostics[f"{suite}/interventional_holdout_accuracy"] = \
                inter_probe.holdout_accuracy
        if "alterrep" in cfg.methods:
            for rank in cfg.inlp_rank:
                inlp[rank] = inlp_fit(clean(inter), [examples[i].z_c for i in inter], rank,
                                      seeds[f"inlp/{suite}"])

        for method in cfg.methods:
            def build(params, method=method):
                fn = make_intervention(method, params, model, layer, inter_probe, inlp)
                if method in ("hdmi", "target_only") and holds_probe(fn):
                    raise LeakageError(f"{method} intervention holds a probe handle")
                return fn

            grid = method_grid(cfg, method)
            scored = {}

            def score(params):
                rec = _score(ctx, method, build(params), inter)
                scored[len(scored)] = rec
                return rec.reliability

            best, _ = grid_search(grid, score)
            grid_rows += [(suite, method, g, scored[j]) for j, g in enumerate(grid)]
            best_params[(suite, method)] = best

            def sink(i, e, h0, h1, method=method):
                obj = MarginObjective.pair(e.target_token, e.source_token)
                before = forward_logits(model, e.prompt)
                after = forward_patch(model, e.prompt, layer, h1)
                sample_lines.append(json.dumps({
                    "suite": suite, "sample_id": i, "method": method,
                    "margin_pre": margin_loss(before, obj), "margin_post": margin_loss(after, obj),
                    "argmax_pre": VOCAB.words[int(np.argmax(before))],
                    "argmax_post": VOCAB.words[int(np.argmax(after))],
                    "state_offset": len(state_blob)}, sort_keys=True))
                state_blob.extend(np.asarray(h1, dtype="<f8").tobytes())

            records.append(_score(ctx, method, build(best), test, sink))

    (out / "results.tsv").write_text(
        "\n".join([TSV_HEADER] + [r.tsv() for r in records]) + "\n", encoding="utf-8")
    (out / "results.jsonl").write_text("".join(r.json() + "\n" for r in records), encoding="utf-8")
    (out / "grid.tsv").write_text(
        "\n".join(["suite\tmethod\tsetting\treliability"] +
                  [f"{s}\t{m}\t{json.dumps(g, sort_keys=True)}\t{r.reliability:.6f}"
                   for s, m, g, r in grid_rows]) + "\n", encoding="utf-8")
    (out / "interventions.jsonl").write_text("".join(line + "\n" for line in sample_lines),
                                             encoding="utf-8")
    (out / "states.bin").write_bytes(bytes(state_blob))
    manifest.paths.update(results="results.tsv", records="results.jsonl", grid="grid.tsv",
                          interventions="interventions.jsonl", states="states.bin",
                          manifest="manifest.json")
    manifest.write(out / "manifest.json")
    return PipelineResult(records, manifest, best_params, grid_rows)
