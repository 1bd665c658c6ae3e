"""Desk-scale experiments on the synthetic benchmark: learning oracle and ablation rows."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import pipeline
from . import textbank as tb
from .dataio.manifest import Dataset, load_manifest
from .dataio.synth import SynthCorpus, SynthSpec, generate_synthetic_benchmark
from .metrics import evaluate, top1_accuracy
from .model import Anomize, ModelConfig
from .training import TextContext, TrainConfig, Trainer


def desk_model_config(d: int = 16, **overrides) -> ModelConfig:
    return ModelConfig(d=d, heads=4, K=5, **overrides)


def desk_train_config(seed: int = 0, **overrides) -> TrainConfig:
    base = dict(lr=1e-2, lr_stage2=1e-3, batch_size=8, epochs_stage1=30, epochs_stage2=40, seed=seed)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class Benchmark:
    corpus: SynthCorpus
    dataset: Dataset
    grouped: TextContext
    ungrouped: TextContext

    def text(self, group_guided: bool = True) -> TextContext:
        return self.grouped if group_guided else self.ungrouped


def build_benchmark(spec: SynthSpec, root) -> Benchmark:
    """Generate the corpus and encode both description fixtures with the generator's embedder."""
    corpus = generate_synthetic_benchmark(spec, root)
    dataset = load_manifest(corpus.paths["manifest"], corpus.labels)
    provider = tb.PseudoEmbedder(spec.d, spec.embed_seed)
    concepts = tb.FixtureSource(corpus.paths["concept_fixture"])
    ctx = {}
    for guided, key in ((True, "desc_fixture"), (False, "desc_fixture_ungrouped")):
        assets = pipeline.build_assets(corpus.labels, tb.FixtureSource(corpus.paths[key]), concepts, provider,
                                       group_guided=guided)
        ctx[guided] = assets.context()
    return Benchmark(corpus, dataset, ctx[True], ctx[False])


@dataclass
class OracleRun:
    seed: int
    train_acc: float
    novel_acc_grouped: float
    novel_acc_ungrouped: float
    auc: float


@dataclass
class OracleResult:
    runs: list[OracleRun] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def train_acc(self) -> float:
        return min(r.train_acc for r in self.runs)

    @property
    def auc(self) -> float:
        return float(np.mean([r.auc for r in self.runs]))

    @property
    def novel_grouped(self) -> float:
        return float(np.mean([r.novel_acc_grouped for r in self.runs]))

    @property
    def novel_ungrouped(self) -> float:
        return float(np.mean([r.novel_acc_ungrouped for r in self.runs]))


def learning_oracle(bench: Benchmark, seeds: Sequence[int] = range(5), mcfg: ModelConfig | None = None,
                    tcfg: TrainConfig | None = None, log=None) -> OracleResult:
    """Paired runs per seed: stage 1 with and without group guidance, stage 2 on the guided model.

    Categorization only depends on stage-1 parameters, so novel Top-1 is
    read right after stage 1.
    """
    mcfg = mcfg or desk_model_config(bench.dataset.train[0].features.shape[1])
    start = time.perf_counter()
    result = OracleResult()
    for seed in seeds:
        cfg = replace(tcfg or desk_train_config(), seed=seed)
        accs = {}
        for guided in (True, False):
            text = bench.text(guided)
            model = Anomize(mcfg, seed=seed)
            trainer = Trainer(model, bench.dataset.train, text, cfg)
            trainer.run("1", cfg.epochs_stage1)
            _, records = evaluate(model, bench.dataset.test, text)
            accs[guided] = top1_accuracy(records, "novel")
            if guided:
                _, train_records = evaluate(model, bench.dataset.train, text)
                train_acc = top1_accuracy(train_records, "all")
                trainer.run("2", cfg.epochs_stage2)
                report, _ = evaluate(model, bench.dataset.test, text)
                auc = report["AUC"]
        run = OracleRun(seed, train_acc, accs[True], accs[False], auc)
        result.runs.append(run)
        if log is not None:
            log(run)
    result.seconds = time.perf_counter() - start
    return result


ABLATIONS = {
    "full": ({}, {}),
    "dynamic_only": ({"streams": "dynamic"}, {}),
    "static_only": ({"streams": "static"}, {}),
    "no_text_augment": ({"text_augment": False}, {}),
    "joint": ({}, {"segmented": False}),
}
ABLATION_FLAGS = ("dynamic", "static", "augment", "segmented")


def ablation_flags(model_kw: dict, train_kw: dict) -> dict:
    streams = model_kw.get("streams", "both")
    return {"dynamic": streams in ("both", "dynamic"), "static": streams in ("both", "static"),
            "augment": model_kw.get("text_augment", True), "segmented": train_kw.get("segmented", True)}


def run_ablations(bench: Benchmark, names: Sequence[str] = tuple(ABLATIONS), seed: int = 0,
                  epochs_stage1: int | None = None, epochs_stage2: int | None = None) -> list[tuple[str, dict, dict]]:
    """Train and evaluate each named variant; returns (name, flags, report) rows."""
    d = bench.dataset.train[0].features.shape[1]
    rows = []
    for name in names:
        model_kw, train_kw = ABLATIONS[name]
        tcfg = desk_train_config(seed=seed, **train_kw)
        if epochs_stage1 is not None:
            tcfg = replace(tcfg, epochs_stage1=epochs_stage1)
        if epochs_stage2 is not None:
            tcfg = replace(tcfg, epochs_stage2=epochs_stage2)
        _, _, report, _ = pipeline.train_and_evaluate(bench.dataset, bench.grouped, desk_model_config(d, **model_kw),
                                                      tcfg)
        rows.append((name, ablation_flags(model_kw, train_kw), report))
    return rows

