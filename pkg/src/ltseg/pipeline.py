"""Programmatic experiment pipeline: evaluation under every combiner and distribution setting."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ensemble, metrics
from .synthgen import (
    CategoryGrouping,
    ExplicitCounts,
    GeneratorConfig,
    SceneSample,
    compute_frequency,
    generate_dataset,
    make_grouping,
    stack,
    uniform_resample,
)
from .training import TrainConfig, TrainedModel, expert_probabilities, train_stage1, train_stage2_moe

COMBINERS = ("moe", "oracle", "softmax", "argmax", "group-avg", "single:<k>", "average")
TEST_STREAM = 1


class MissingCalibration(ValueError):
    pass


def parse_combiner(name: str, K: int) -> tuple[str, int | None]:
    if name.startswith("single:"):
        k = int(name.split(":", 1)[1])
        if not 1 <= k <= K:
            raise ValueError(f"expert index {k} out of range 1..{K}")
        return "single", k - 1
    if name not in COMBINERS:
        raise ValueError(f"unknown combiner {name!r}; expected one of {COMBINERS}")
    return name, None


def combine(model: TrainedModel, probs: list[np.ndarray], combiner: str, labels: np.ndarray | None = None) -> np.ndarray:
    """Combined output for one batch of expert probabilities: a probability grid or a label grid."""
    kind, k = parse_combiner(combiner, model.K)
    if kind == "single":
        return probs[k]
    if kind == "moe":
        if model.calibration is None:
            raise MissingCalibration("combiner 'moe' needs a calibrated checkpoint; run train-moe first")
        return ensemble.moe_combine(probs, model.calibration)
    if kind == "average":
        return ensemble.moe_combine(probs, ensemble.CalibrationParams.identity(model.K, model.c))
    if kind == "oracle":
        if labels is None:
            raise ValueError("the oracle combiner needs ground-truth labels")
        return ensemble.oracle_combine(probs, labels, model.grouping)
    return ensemble.aggregate_baseline(probs, kind, model.grouping)


def predict(model: TrainedModel, features: np.ndarray, combiner: str, labels: np.ndarray | None = None) -> np.ndarray:
    out = combine(model, expert_probabilities(model, features), combiner, labels)
    if np.issubdtype(out.dtype, np.floating):
        return np.argmax(out, axis=-1)
    return out


def evaluate(
    model: TrainedModel,
    dataset: Sequence[SceneSample],
    combiner: str = "moe",
    distribution: str = "longtail",
    resample_seed: int = 0,
    chunk: int = 8,
) -> metrics.MetricsReport:
    if distribution == "uniform":
        dataset = uniform_resample(dataset, "auto", resample_seed)
    elif distribution != "longtail":
        raise ValueError(f"unknown evaluation distribution {distribution!r}")
    feats, labels = stack(dataset)
    cm = np.zeros((model.c, model.c), dtype=np.int64)
    # the oracle reads the unmasked labels only to pick experts; scoring uses the evaluated labels
    for s in range(0, len(dataset), chunk):
        y = labels[s : s + chunk]
        pred = predict(model, feats[s : s + chunk], combiner, y)
        cm += metrics.confusion(pred, y, model.c)
    return metrics.report(cm, model.grouping, model.profile)


@dataclass
class Benchmark:
    gen: GeneratorConfig
    train: list[SceneSample]
    test: list[SceneSample]
    grouping: CategoryGrouping

    @property
    def profile(self):
        return compute_frequency(self.train, self.gen.c)


def make_benchmark(gen: GeneratorConfig | None = None, n_test: int = 50) -> Benchmark:
    gen = gen or GeneratorConfig()
    train = generate_dataset(gen)
    test_cfg = GeneratorConfig(**{**gen.__dict__, "n_scenes": n_test})
    test = generate_dataset(test_cfg, stream=TEST_STREAM)
    profile = compute_frequency(train, gen.c)
    grouping = make_grouping(profile, ExplicitCounts(gen.n_head, gen.n_body, gen.n_tail))
    return Benchmark(gen, train, test, grouping)


def train_full(bench: Benchmark, cfg: TrainConfig) -> TrainedModel:
    """Stage 1, then stage 2 when the model has more than one expert."""
    model = train_stage1(bench.train, bench.grouping, cfg, bench.profile)
    if model.K > 1:
        model.calibration = train_stage2_moe(model, bench.train, cfg)
    return model
