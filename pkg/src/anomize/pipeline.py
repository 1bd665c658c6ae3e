"""Glue between text assets, datasets, training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import textbank as tb
from .dataio.manifest import Dataset
from .metrics import evaluate
from .model import Anomize, ModelConfig
from .training import TextContext, TrainConfig, Trainer

ASSET_FILES = ("descriptions.json", "concepts.json", "embeddings.azf", "embeddings.ids.json")


@dataclass
class TextAssets:
    descriptions: tb.DescriptionSet
    concepts: tb.ConceptLibrary
    table: tb.TextEncodingTable

    def context(self) -> TextContext:
        return TextContext(self.table.t_desc, self.concepts.embeddings)


def build_assets(labels: tb.LabelSpace, desc_source, concept_source, provider, *, group_guided: bool = True,
                 L: int | None = None, check_length: bool = True) -> TextAssets:
    desc = tb.build_text_assets(labels, desc_source, group_guided=group_guided, check_length=check_length)
    table = tb.encode_descriptions(desc, provider, labels.count)
    lib = tb.build_concept_library(labels, concept_source, provider, L=L)
    return TextAssets(desc, lib, table)


def write_assets(assets: TextAssets, labels: tb.LabelSpace, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    assets.descriptions.save(out / "descriptions.json")
    assets.concepts.save(out / "concepts.json")
    texts = assets.descriptions.ordered(labels.count) + list(assets.concepts.nouns)
    matrix = np.vstack([assets.table.t_desc, assets.concepts.embeddings])
    tb.write_embedding_file(out / "embeddings.azf", texts, matrix)
    return {name: out / name for name in ASSET_FILES}


def load_assets(assets_dir, labels: tb.LabelSpace) -> TextAssets:
    """Read prepared assets back, looking every text up in the embedding file."""
    root = Path(assets_dir)
    provider = tb.FileEmbedder(root / "embeddings.azf")
    desc = tb.DescriptionSet.load(root / "descriptions.json")
    desc.validate(labels)
    table = tb.encode_descriptions(desc, provider, labels.count)
    lib = tb.load_concept_library(root / "concepts.json", provider)
    return TextAssets(desc, lib, table)


def train_and_evaluate(dataset: Dataset, text: TextContext, mcfg: ModelConfig, tcfg: TrainConfig,
                       *, init_seed: int | None = None, **trainer_kw):
    """Segmented (or joint) training followed by test-set evaluation."""
    model = Anomize(mcfg, seed=tcfg.seed if init_seed is None else init_seed)
    trainer = Trainer(model, dataset.train, text, tcfg, **trainer_kw)
    if tcfg.segmented:
        trainer.run("1", tcfg.epochs_stage1)
        trainer.run("2", tcfg.epochs_stage2)
    else:
        trainer.run("joint", tcfg.epochs_stage1 + tcfg.epochs_stage2)
    report, records = evaluate(model, dataset.test, text)
    return model, trainer.history, report, records
