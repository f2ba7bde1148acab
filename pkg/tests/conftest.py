import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pytest

from hdmi.harness import ExperimentConfig, PipelineResult, run_pipeline
from hdmi.model import ModelConfig, TinyTransformer, load_model
from hdmi.tasks import VOCAB

DATA = Path(__file__).parent / "data"


@dataclass
class DeskRun:
    config: ExperimentConfig
    result: PipelineResult
    model: TinyTransformer
    seconds: float


@pytest.fixture(scope="session")
def desk(tmp_path_factory) -> DeskRun:
    """Default pipeline from scratch: corpus, LM training, probes, all five methods."""
    out = tmp_path_factory.mktemp("desk")
    cfg = ExperimentConfig(output_dir=str(out))
    start = time.perf_counter()
    result = run_pipeline(cfg)
    seconds = time.perf_counter() - start
    return DeskRun(cfg, result, load_model(out / "model.bin"), seconds)


@pytest.fixture(scope="session")
def desk_model(desk) -> TinyTransformer:
    return desk.model


@pytest.fixture(scope="session")
def desk_limited(desk, tmp_path_factory) -> DeskRun:
    """Same seeds and checkpoint, interventional split cut to 10 examples."""
    out = tmp_path_factory.mktemp("desk_limited")
    cfg = replace(desk.config, output_dir=str(out), interventional_limit=10,
                  model_path=str(Path(desk.config.output_dir) / "model.bin"))
    start = time.perf_counter()
    result = run_pipeline(cfg)
    return DeskRun(cfg, result, desk.model, time.perf_counter() - start)


@pytest.fixture(scope="session")
def tiny_model() -> TinyTransformer:
    """Untrained 2-layer model over the task vocabulary (D=16, fast)."""
    return TinyTransformer(ModelConfig(len(VOCAB), 16, None, 2, 2, 32, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
