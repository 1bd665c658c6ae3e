"""Synthetic open-vocabulary benchmark.

Visual features and text live in one token space: every token owns a fixed
pseudo-embedding vector, a class's visual direction is built from its group
trait tokens and its own tokens, and its description uses the same tokens.
Grouped descriptions share the group's trait tokens; the ungrouped fixture
swaps them for tokens no other description (and no frame) uses.

Normal frames follow an AR(1) Gaussian process around a per-video background
mean. Anomalous videos carry one contiguous burst whose mean moves from the
background toward the class cluster center by the fraction ``separation``;
``separation=0`` leaves the burst indistinguishable from background.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import textbank as tb
from .features import atomic_write_bytes, write_feature_file
from .manifest import manifest_row, write_manifest


class SynthSpecError(ValueError):
    pass


def default_classes() -> list[dict]:
    return [
        {"name": "normal", "split": "normal", "group": "normal"},
        {"name": "fighting", "split": "base", "group": "violence"},
        {"name": "car accident", "split": "base", "group": "traffic"},
        {"name": "riot", "split": "novel", "group": "violence"},
        {"name": "explosion", "split": "novel", "group": "blast"},
    ]


@dataclass
class SynthSpec:
    seed: int = 7
    d: int = 16
    classes: list[dict] = field(default_factory=default_classes)
    train_per_class: int = 20
    test_per_class: int = 10
    n_min: int = 32
    n_max: int = 128
    burst_min: int = 8
    burst_max: int = 32
    separation: float = 0.7
    proximity: float = 0.5
    noise: float = 0.15
    ar: float = 0.5
    background_scale: float = 1.0
    feature_scale: float = 4.0
    normal_grounding: float = 0.5
    video_jitter: float = 0.2
    embed_seed: int = 0
    tokens_per_group: int = 6
    tokens_per_class: int = 6
    concept_count: int | None = None

    def validate(self) -> None:
        splits = [c.get("split") for c in self.classes]
        if not splits or splits[0] != "normal" or splits.count("normal") != 1:
            raise SynthSpecError("classes must start with exactly one normal class")
        if "base" not in splits:
            raise SynthSpecError("synthetic spec needs at least one base class")
        if "novel" not in splits:
            raise SynthSpecError("synthetic spec needs at least one novel class")
        if not 1 <= self.n_min <= self.n_max:
            raise SynthSpecError(f"bad frame range [{self.n_min}, {self.n_max}]")
        if not 1 <= self.burst_min <= self.burst_max:
            raise SynthSpecError(f"bad burst range [{self.burst_min}, {self.burst_max}]")
        if not 0.0 <= self.proximity <= 1.0:
            raise SynthSpecError(f"proximity {self.proximity} outside [0, 1]")
        if not 0.0 <= self.normal_grounding <= 1.0:
            raise SynthSpecError(f"normal_grounding {self.normal_grounding} outside [0, 1]")
        if self.separation < 0 or self.noise < 0:
            raise SynthSpecError("separation and noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "SynthSpec":
        return cls(**{k: v for k, v in payload.items() if k in cls.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "SynthSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


class _WordMint:
    """Unique pronounceable pseudo-words from a seeded generator."""

    def __init__(self, rng: np.random.Generator, reserved=()):
        self.rng = rng
        self.used = set(reserved) | set(tb.STOPWORDS)

    def take(self, k: int) -> list[str]:
        out = []
        while len(out) < k:
            syl = int(self.rng.integers(2, 4))
            word = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS)) for _ in range(syl))
            if word not in self.used:
                self.used.add(word)
                out.append(word)
        return out


_MIN_WORDS = 52
_FILLERS = ("the", "a", "with", "of", "in", "during", "while", "and", "at", "by")


def _sentence(tokens: list[str], rng: np.random.Generator) -> str:
    words = []
    for tok in tokens:
        words += [str(rng.choice(_FILLERS)), str(rng.choice(_FILLERS)), tok, str(rng.choice(_FILLERS))]
    k = 0
    while len(words) < _MIN_WORDS:  # stopwords only, so embeddings are unaffected
        words.append(_FILLERS[k % len(_FILLERS)])
        k += 1
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


@dataclass
class SynthCorpus:
    root: Path
    labels: tb.LabelSpace
    rows: list[dict]
    features: dict[str, np.ndarray]
    frame_gt: dict[str, np.ndarray]
    class_directions: np.ndarray
    paths: dict[str, Path]


def _vocabulary(spec: SynthSpec, labels: tb.LabelSpace, rng: np.random.Generator) -> dict:
    names = {tok for lb in labels.labels for tok in tb.tokenize(lb.name)}
    mint = _WordMint(rng, names)
    groups = sorted({lb.group for lb in labels.anomaly_labels})
    vocab = {
        "generic": mint.take(2),
        "background": mint.take(spec.tokens_per_group),
        "abstract": mint.take(spec.tokens_per_group),
        "group": {g: mint.take(spec.tokens_per_group) for g in groups},
        "own": {lb.index: mint.take(spec.tokens_per_class) for lb in labels.anomaly_labels},
        "private": {lb.index: mint.take(spec.tokens_per_group) for lb in labels.anomaly_labels},
        "objects": mint.take(40),
    }
    return vocab


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _directions(spec: SynthSpec, labels: tb.LabelSpace, vocab: dict, emb: tb.PseudoEmbedder) -> np.ndarray:
    dirs = np.zeros((labels.count, spec.d))
    dirs[0] = emb.embed(" ".join(vocab["background"] + tb.tokenize(labels.labels[0].name)))
    for lb in labels.anomaly_labels:
        shared = emb.embed(" ".join(vocab["group"][lb.group]))
        own = emb.embed(" ".join(tb.tokenize(lb.name) + vocab["own"][lb.index]))
        dirs[lb.index] = _unit(spec.proximity * shared + (1.0 - spec.proximity) * own)
    return dirs


def _descriptions(labels: tb.LabelSpace, vocab: dict, rng: np.random.Generator, grouped: bool,
                  grounding: float) -> dict[int, str]:
    out = {}
    normal = labels.labels[0]
    # the normal label is described vaguely: only part of the background is named
    keep = int(round(len(vocab["background"]) * grounding))
    abstract = vocab["abstract"][:len(vocab["background"]) - keep]
    out[0] = _sentence(vocab["generic"] + tb.tokenize(normal.name) + vocab["background"][:keep] + abstract, rng)
    groups = labels.groups()
    for lb in labels.anomaly_labels:
        traits = vocab["group"][lb.group]
        if not grouped:
            # disjoint share of the group's traits, topped up with private tokens
            members = groups[lb.group]
            traits = traits[members.index(lb.index)::len(members)]
            traits = traits + vocab["private"][lb.index][:len(vocab["group"][lb.group]) - len(traits)]
        tokens = vocab["generic"] + traits + tb.tokenize(lb.name) + vocab["own"][lb.index]
        out[lb.index] = _sentence(tokens, rng)
    return out


def _concept_nouns(labels: tb.LabelSpace, vocab: dict, L: int, rng: np.random.Generator) -> list[str]:
    per_class = {}
    for lb in labels.anomaly_labels:
        per_class[lb.index] = tb.tokenize(lb.name) + vocab["group"][lb.group] + vocab["own"][lb.index]
    pools = list(per_class.values()) + [vocab["background"]]
    nouns, seen = [], set()
    k = 0
    while len(nouns) < L:
        pool = pools[k % len(pools)]
        k += 1
        a = str(rng.choice(pool))
        b = str(rng.choice(pool + vocab["objects"]))
        if a == b:
            continue
        phrase = f"{a} {b}"
        if phrase not in seen:
            seen.add(phrase)
            nouns.append(phrase)
    return nouns


def _video(spec: SynthSpec, n: int, direction: np.ndarray | None, background: np.ndarray,
           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    d = spec.d
    mean = spec.background_scale * background + spec.video_jitter * rng.standard_normal(d) / np.sqrt(d)
    eps = np.empty((n, d))
    eps[0] = rng.standard_normal(d)
    scale = np.sqrt(1 - spec.ar ** 2)
    for t in range(1, n):
        eps[t] = spec.ar * eps[t - 1] + scale * rng.standard_normal(d)
    x = mean + spec.noise * eps
    gt = np.zeros(n, dtype=np.int8)
    if direction is not None:
        length = int(rng.integers(spec.burst_min, min(spec.burst_max, n) + 1))
        start = int(rng.integers(0, n - length + 1))
        center = spec.background_scale * direction
        x[start:start + length] += spec.separation * (center - mean)
        gt[start:start + length] = 1
    return (spec.feature_scale * x).astype(np.float32), gt


def _fixture(prompts_to_responses: list[tuple[str, dict]]) -> tb.Fixture:
    fx = tb.Fixture()
    for prompt, response in prompts_to_responses:
        fx.add(prompt, response)
    return fx


def generate_synthetic_benchmark(spec: SynthSpec, out_dir) -> SynthCorpus:
    """Write labels, manifest, AZF1 features and text fixtures under ``out_dir``."""
    spec.validate()
    root = Path(out_dir)
    rng = np.random.default_rng(spec.seed)
    labels = tb.LabelSpace([tb.Label(i, c["name"], c["split"], c.get("group") or c["name"])
                            for i, c in enumerate(spec.classes)])
    vocab = _vocabulary(spec, labels, np.random.default_rng([spec.seed, 1]))
    emb = tb.PseudoEmbedder(spec.d, spec.embed_seed)
    dirs = _directions(spec, labels, vocab, emb)

    # text fixtures
    text_rng = np.random.default_rng([spec.seed, 2])
    grouped = _descriptions(labels, vocab, text_rng, grouped=True, grounding=spec.normal_grounding)
    ungrouped = _descriptions(labels, vocab, text_rng, grouped=False, grounding=spec.normal_grounding)
    names = {lb.index: lb.name for lb in labels.labels}
    anomaly_names = [lb.name for lb in labels.anomaly_labels]
    group_reply = {"groups": {g: [names[i] for i in members] for g, members in sorted(labels.groups().items())}}
    desc_pairs = [(tb.render_group_prompt(anomaly_names), group_reply),
                  (tb.render_desc_prompt([names[0]]), {"descriptions": {names[0]: grouped[0]}})]
    for _, members in sorted(labels.groups().items()):
        desc_pairs.append((tb.render_desc_prompt([names[i] for i in members]),
                           {"descriptions": {names[i]: grouped[i] for i in members}}))
    plain_pairs = [(tb.render_group_prompt(anomaly_names), group_reply)]
    for lb in labels.labels:
        plain_pairs.append((tb.render_desc_prompt([lb.name]), {"descriptions": {lb.name: ungrouped[lb.index]}}))
    L = spec.concept_count or tb.default_concept_count(labels)
    nouns = _concept_nouns(labels, vocab, L, np.random.default_rng([spec.seed, 3]))
    concept_pairs = [(tb.render_concept_prompt(anomaly_names, L), {"nouns": nouns})]

    paths = {
        "labels": root / "labels.json",
        "manifest": root / "manifest.jsonl",
        "desc_fixture": root / "fixtures" / "descriptions.fixture.json",
        "desc_fixture_ungrouped": root / "fixtures" / "descriptions_ungrouped.fixture.json",
        "concept_fixture": root / "fixtures" / "concepts.fixture.json",
        "spec": root / "synth_spec.json",
    }
    labels.save(paths["labels"])
    _fixture(desc_pairs).save(paths["desc_fixture"])
    _fixture(plain_pairs).save(paths["desc_fixture_ungrouped"])
    _fixture(concept_pairs).save(paths["concept_fixture"])
    atomic_write_bytes(paths["spec"], (json.dumps(spec.to_dict(), indent=2) + "\n").encode("utf-8"))

    # videos
    vid_rng = np.random.default_rng([spec.seed, 4])
    rows, feats, gts = [], {}, {}
    for lb in labels.labels:
        for split, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
            if split == "train" and lb.split == "novel":
                continue
            for k in range(count):
                vid = f"{split}_{lb.index:02d}_{k:03d}"
                n = int(vid_rng.integers(spec.n_min, spec.n_max + 1))
                x, gt = _video(spec, n, None if lb.index == 0 else dirs[lb.index], dirs[0], vid_rng)
                rel = f"features/{vid}.azf"
                write_feature_file(root / rel, x)
                rows.append(manifest_row(vid, rel, lb.index, split, gt))
                feats[vid], gts[vid] = x, gt
    write_manifest(paths["manifest"], rows)
    return SynthCorpus(root, labels, rows, feats, gts, dirs, paths)
