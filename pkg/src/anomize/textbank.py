"""Label space, LLM-generated text assets, and the text embedding provider.

Text assets (label groups, per-label descriptions, concept nouns) come from a
``TextSource``: either an offline fixture file keyed by the SHA-256 digest of
the rendered prompt, or an HTTP client. Embeddings come from a deterministic
pseudo encoder or from a precomputed AZF1 matrix with an id sidecar.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import time
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .dataio.features import atomic_write_bytes, read_feature_file, write_feature_file

log = logging.getLogger(__name__)

SPLITS = ("normal", "base", "novel")


class SchemaError(ValueError):
    pass


class AssetValidationError(ValueError):
    pass


class AssetWarning(UserWarning):
    pass


class TransportError(RuntimeError):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class LLMConfigError(RuntimeError):
    pass


class FixtureMissError(KeyError):
    pass


# --------------------------------------------------------------- label space


@dataclass(frozen=True)
class Label:
    index: int
    name: str
    split: str
    group: str


@dataclass
class LabelSpace:
    labels: list[Label]

    def __post_init__(self):
        _validate_labels(self.labels)

    @property
    def count(self) -> int:
        return len(self.labels)

    @property
    def names(self) -> list[str]:
        return [lb.name for lb in self.labels]

    def indices(self, split: str) -> list[int]:
        return [lb.index for lb in self.labels if lb.split == split]

    @property
    def anomaly_labels(self) -> list[Label]:
        return [lb for lb in self.labels if lb.split != "normal"]

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for lb in self.anomaly_labels:
            out.setdefault(lb.group, []).append(lb.index)
        return out

    def split_of(self, index: int) -> str:
        return self.labels[index].split

    def to_json(self) -> dict:
        return {"labels": [dict(index=lb.index, name=lb.name, split=lb.split, group=lb.group)
                           for lb in self.labels]}

    def save(self, path) -> None:
        _write_json(path, self.to_json())

    @classmethod
    def from_json(cls, payload: dict) -> "LabelSpace":
        try:
            rows = payload["labels"]
        except (KeyError, TypeError):
            raise SchemaError("labels file needs a top-level 'labels' list") from None
        labels = []
        for pos, row in enumerate(rows):
            try:
                labels.append(Label(int(row["index"]), str(row["name"]), str(row["split"]), str(row["group"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"label entry #{pos} is malformed: {row!r} ({exc})") from None
        return cls(sorted(labels, key=lambda lb: lb.index))


def _validate_labels(labels: list[Label]) -> None:
    seen: dict[int, Label] = {}
    for lb in labels:
        if lb.index in seen:
            raise SchemaError(f"duplicate label index {lb.index}: {seen[lb.index].name!r} and {lb.name!r}")
        if lb.split not in SPLITS:
            raise SchemaError(f"label {lb.name!r} has unknown split {lb.split!r}")
        seen[lb.index] = lb
    if sorted(seen) != list(range(len(labels))):
        raise SchemaError(f"label indices must be contiguous from 0, got {sorted(seen)}")
    if [lb.index for lb in labels] != list(range(len(labels))):
        raise SchemaError("labels must be ordered by index")
    normals = [lb for lb in labels if lb.split == "normal"]
    if not labels or labels[0].split != "normal":
        raise SchemaError("index 0 must be the normal label")
    if len(normals) != 1:
        raise SchemaError(f"exactly one normal label expected, found {[lb.name for lb in normals]}")
    names = Counter(lb.name for lb in labels)
    dupes = [n for n, k in names.items() if k > 1]
    if dupes:
        raise SchemaError(f"duplicate label names {dupes}")
    if any(not lb.group for lb in labels):
        raise SchemaError("every label needs a group id")


def load_label_space(path) -> LabelSpace:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return LabelSpace.from_json(payload)


# ------------------------------------------------------------- prompt layer

GROUP_TEMPLATE = (
    "Group the following anomaly labels: {labels}. Organize them based on similarities in "
    "visual characteristics, where behaviors with comparable actions, activities, or scene "
    "contexts during the anomaly are placed in the same group."
)
DESC_TEMPLATE = (
    "Describe the anomaly of {labels}. Begin each description with one or two sentences that "
    "emphasize the common traits shared among all behaviors, followed by one or two sentences "
    "detailing the unique characteristics specific to each behavior. Ensure the descriptions "
    "clearly capture significant details of the anomaly, such as actions, movements, and scene "
    "context. Maintain a consistent sentence structure for each description, with word counts "
    "between 50 and 70 words."
)
CONCEPT_TEMPLATE = (
    "Given the anomaly labels: {labels}, generate {L} noun phrases that accurately capture the "
    "key scene characteristics associated with each label. These phrases should be well-suited "
    "for CLIP model encoding and designed to complement visual features, enhancing the "
    "effectiveness of model in anomaly detection."
)
# machine-readable reply contracts appended to every prompt
GROUP_FORMAT = ' Reply with JSON: {"groups": {"<group id>": ["<label>", ...]}}.'
DESC_FORMAT = ' Reply with JSON: {"descriptions": {"<label>": "<description>"}}.'
CONCEPT_FORMAT = ' Reply with JSON: {"nouns": ["<noun phrase>", ...]}.'


def _join(names: Iterable[str]) -> str:
    return ", ".join(names)


def render_group_prompt(names: Iterable[str]) -> str:
    return GROUP_TEMPLATE.format(labels=_join(names)) + GROUP_FORMAT


def render_desc_prompt(names: Iterable[str]) -> str:
    return DESC_TEMPLATE.format(labels=_join(names)) + DESC_FORMAT


def render_concept_prompt(names: Iterable[str], L: int) -> str:
    return CONCEPT_TEMPLATE.format(labels=_join(names), L=L) + CONCEPT_FORMAT


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def default_concept_count(labels: LabelSpace) -> int:
    return 200 if len(labels.anomaly_labels) <= 6 else 500


# ----------------------------------------------------------------- sources


class TextSource(Protocol):
    def complete(self, prompt: str) -> dict: ...


Transport = Callable[[str, dict, dict], dict]


def _requests_transport(url: str, headers: dict, body: dict) -> dict:
    import requests

    try:
        resp = requests.post(url, headers=headers, json=body, timeout=120)
    except requests.RequestException as exc:
        raise TransportError(f"POST {url} failed: {exc}") from exc
    if resp.status_code >= 500 or resp.status_code == 429:
        raise TransportError(f"POST {url} returned {resp.status_code}")
    if resp.status_code >= 400:
        raise TransportError(f"POST {url} returned {resp.status_code}: {resp.text[:200]}", retryable=False)
    return resp.json()


class LLMClient:
    """Sequential JSON-over-HTTP completion client.

    Request body ``{"prompt": str}``; the reply must carry ``{"response": obj}``
    where obj is the JSON answer or a string containing it. Each exchange is
    appended to ``capture_path`` in fixture format so the run can be replayed.
    """

    def __init__(self, endpoint: str | None = None, key: str | None = None, *,
                 transport: Transport | None = None, capture_path=None,
                 max_retries: int = 3, backoff: float = 1.0):
        self.endpoint = endpoint if endpoint is not None else os.environ.get("ANOMIZE_LLM_ENDPOINT")
        self.key = key if key is not None else os.environ.get("ANOMIZE_LLM_KEY")
        if not self.endpoint:
            raise LLMConfigError("LLM client needs an endpoint (ANOMIZE_LLM_ENDPOINT)")
        if not self.key:
            raise LLMConfigError("LLM client needs an API key (ANOMIZE_LLM_KEY)")
        self.transport = transport or _requests_transport
        self.capture_path = Path(capture_path) if capture_path else None
        self.max_retries = max_retries
        self.backoff = backoff

    def complete(self, prompt: str) -> dict:
        body = {"prompt": prompt}
        headers = {"Authorization": f"Bearer {self.key}", "Content-Type": "application/json"}
        attempt = 0
        while True:
            try:
                reply = self.transport(self.endpoint, headers, body)
                break
            except TransportError as exc:
                attempt += 1
                if not exc.retryable or attempt > self.max_retries:
                    raise
                log.warning("LLM call failed (%s); retry %d/%d", exc, attempt, self.max_retries)
                time.sleep(self.backoff * attempt)
        response = reply.get("response") if isinstance(reply, dict) else None
        if isinstance(response, str):
            try:
                response = json.loads(response)
            except json.JSONDecodeError:
                raise AssetValidationError(f"LLM reply is not JSON: {response[:120]!r}") from None
        if not isinstance(response, dict):
            raise AssetValidationError(f"LLM reply lacks a 'response' object: {reply!r}")
        if self.capture_path is not None:
            fixture = Fixture.load(self.capture_path) if self.capture_path.exists() else Fixture()
            fixture.add(prompt, response)
            fixture.save(self.capture_path)
        return response


@dataclass
class Fixture:
    """Canned prompt -> response pairs, keyed by prompt digest."""

    responses: dict[str, dict] = field(default_factory=dict)

    def add(self, prompt: str, response: dict) -> None:
        self.responses[prompt_digest(prompt)] = {"prompt": prompt, "response": response}

    def to_json(self) -> dict:
        return {"responses": {k: self.responses[k] for k in sorted(self.responses)}}

    def save(self, path) -> None:
        _write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "Fixture":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(dict(json.load(fh)["responses"]))


class FixtureSource:
    """Replay responses from fixture files; optionally defer misses to a client."""

    def __init__(self, *paths, fallback: TextSource | None = None):
        self.fixture = Fixture()
        for p in paths:
            self.fixture.responses.update(Fixture.load(p).responses)
        self.fallback = fallback

    def complete(self, prompt: str) -> dict:
        hit = self.fixture.responses.get(prompt_digest(prompt))
        if hit is not None:
            return hit["response"]
        if self.fallback is None:
            raise FixtureMissError(f"no fixture for prompt {prompt[:80]!r}...")
        return self.fallback.complete(prompt)


# -------------------------------------------------------------- descriptions


@dataclass
class DescriptionSet:
    groups: dict[str, list[int]]
    descriptions: dict[int, str]

    def ordered(self, count: int) -> list[str]:
        return [self.descriptions[i] for i in range(count)]

    def to_json(self) -> dict:
        return {
            "groups": {g: list(v) for g, v in sorted(self.groups.items())},
            "descriptions": {str(i): self.descriptions[i] for i in sorted(self.descriptions)},
        }

    def save(self, path) -> None:
        _write_json(path, self.to_json())

    @classmethod
    def from_json(cls, payload: dict) -> "DescriptionSet":
        return cls({str(g): [int(i) for i in v] for g, v in payload["groups"].items()},
                   {int(i): str(t) for i, t in payload["descriptions"].items()})

    @classmethod
    def load(cls, path) -> "DescriptionSet":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def validate(self, labels: LabelSpace) -> None:
        owner: dict[int, str] = {}
        for gid, members in self.groups.items():
            for i in members:
                if i in owner:
                    raise AssetValidationError(f"label {i} appears in groups {owner[i]!r} and {gid!r}")
                owner[i] = gid
        expected = {lb.index for lb in labels.anomaly_labels}
        if set(owner) != expected:
            raise AssetValidationError(
                f"groups must cover anomaly labels exactly; missing {sorted(expected - set(owner))}, "
                f"unexpected {sorted(set(owner) - expected)}")
        missing = [labels.labels[i].name for i in range(labels.count) if i not in self.descriptions]
        if missing:
            raise AssetValidationError(f"descriptions missing for labels {missing}")


def _parse_groups(response: dict, labels: LabelSpace) -> dict[str, list[int]]:
    by_name = {lb.name.lower(): lb.index for lb in labels.anomaly_labels}
    raw = response.get("groups")
    if isinstance(raw, list):
        raw = {f"g{k}": v for k, v in enumerate(raw)}
    if not isinstance(raw, dict):
        raise AssetValidationError(f"group response lacks a 'groups' mapping: {response!r}")
    groups: dict[str, list[int]] = {}
    seen: set[int] = set()
    for gid, members in raw.items():
        idx = []
        for name in members:
            key = str(name).lower()
            if key not in by_name:
                raise AssetValidationError(f"group {gid!r} names unknown label {name!r}")
            if by_name[key] in seen:
                raise AssetValidationError(f"label {name!r} placed in more than one group")
            seen.add(by_name[key])
            idx.append(by_name[key])
        groups[str(gid)] = sorted(idx)
    missing = [lb.name for lb in labels.anomaly_labels if lb.index not in seen]
    if missing:
        raise AssetValidationError(f"grouping response is missing labels {missing}")
    return groups


def _check_length(name: str, text: str, lo: int = 50, hi: int = 70) -> None:
    words = len(text.split())
    if not lo <= words <= hi:
        warnings.warn(f"description for {name!r} has {words} words (expected {lo}-{hi})", AssetWarning,
                      stacklevel=3)


def build_text_assets(labels: LabelSpace, source: TextSource, *, prefer_label_groups: bool = True,
                      group_guided: bool = True, check_length: bool = True) -> DescriptionSet:
    """Group the anomaly labels, then describe each group (and the normal label).

    With ``prefer_label_groups`` the group ids in the labels file override the
    source's grouping, which is how manual refinement is applied. With
    ``group_guided=False`` every label is described on its own.
    """
    anomaly_names = [lb.name for lb in labels.anomaly_labels]
    groups = _parse_groups(source.complete(render_group_prompt(anomaly_names)), labels)
    if prefer_label_groups:
        file_groups = labels.groups()
        if sorted(map(sorted, file_groups.values())) != sorted(map(sorted, groups.values())):
            log.info("labels file grouping overrides generated grouping")
        groups = file_groups

    descriptions: dict[int, str] = {}
    if group_guided:
        batches = [[labels.labels[0]]] + [[labels.labels[i] for i in members] for _, members in sorted(groups.items())]
    else:
        batches = [[lb] for lb in labels.labels]
    for batch in batches:
        names = [lb.name for lb in batch]
        reply = source.complete(render_desc_prompt(names))
        texts = {str(k).lower(): v for k, v in (reply.get("descriptions") or {}).items()}
        missing = [n for n in names if n.lower() not in texts]
        if missing:
            raise AssetValidationError(f"description response is missing labels {missing}")
        for lb in batch:
            text = str(texts[lb.name.lower()]).strip()
            if check_length:
                _check_length(lb.name, text)
            descriptions[lb.index] = text
    out = DescriptionSet(groups, descriptions)
    out.validate(labels)
    return out


# --------------------------------------------------------------- embeddings

_TOKEN = re.compile(r"[a-z0-9]+")
STOPWORDS = frozenset(
    "a an the of and or in on at to for with by from as is are was were be been this that these "
    "those it its their there while during into over under each all any one two such".split())


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN.findall(text.lower()) if t not in STOPWORDS]


def text_id(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:20]


class PseudoEmbedder:
    """Seeded Gaussian random projection of a text's token multiset, unit-normalized.

    Every token maps to a fixed N(0, I_d) vector derived from (seed, token), so
    texts that share tokens have correlated embeddings.
    """

    mode = "pseudo"

    def __init__(self, d: int, seed: int = 0):
        self.d = d
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            h = hashlib.sha256(f"{self.seed}\x00{token}".encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(h[:8], "little"))
            vec = rng.standard_normal(self.d)
            self._cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        counts = Counter(tokenize(text))
        if not counts:
            raise AssetValidationError(f"text has no tokens to embed: {text!r}")
        v = np.zeros(self.d)
        for tok in sorted(counts):
            v += counts[tok] * self.token_vector(tok)
        norm = np.linalg.norm(v)
        if norm <= 1e-12:
            raise AssetValidationError(f"degenerate embedding for {text!r}")
        return (v / norm).astype(np.float32)

    def embed_many(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


class FileEmbedder:
    """Look up precomputed embeddings (AZF1 matrix + ``{"ids": [...]}`` sidecar) by text id."""

    mode = "file"

    def __init__(self, matrix_path, ids_path=None):
        matrix_path = Path(matrix_path)
        ids_path = Path(ids_path) if ids_path else sidecar_path(matrix_path)
        self.matrix = read_feature_file(matrix_path)
        with open(ids_path, "r", encoding="utf-8") as fh:
            ids = json.load(fh)["ids"]
        if len(ids) != self.matrix.shape[0]:
            raise SchemaError(f"{ids_path}: {len(ids)} ids for {self.matrix.shape[0]} rows")
        self.rows = {tid: k for k, tid in enumerate(ids)}
        self.d = self.matrix.shape[1]

    def embed(self, text: str) -> np.ndarray:
        tid = text_id(text)
        if tid not in self.rows:
            raise LookupError(f"no embedding for text id {tid} ({text[:60]!r})")
        return self.matrix[self.rows[tid]].copy()

    def embed_many(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


EmbeddingProvider = PseudoEmbedder | FileEmbedder


def sidecar_path(matrix_path) -> Path:
    p = Path(matrix_path)
    return p.with_name(p.stem + ".ids.json")


def write_embedding_file(path, texts: list[str], matrix: np.ndarray) -> None:
    ids = [text_id(t) for t in texts]
    keep = {}
    for k, tid in enumerate(ids):
        keep.setdefault(tid, k)
    order = list(keep.values())
    write_feature_file(path, np.asarray(matrix, dtype=np.float32)[order])
    _write_json(sidecar_path(path), {"ids": [ids[k] for k in order]})


@dataclass
class TextEncodingTable:
    t_desc: np.ndarray
    provenance: list[str]


def encode_descriptions(desc: DescriptionSet, provider, count: int | None = None,
                        d: int | None = None) -> TextEncodingTable:
    count = len(desc.descriptions) if count is None else count
    if d is not None and provider.d != d:
        raise SchemaError(f"embedding provider dim {provider.d} != model dim {d}")
    texts = desc.ordered(count)
    table = provider.embed_many(texts).astype(np.float32)
    norms = np.linalg.norm(table, axis=1)
    if np.any(norms <= 1e-12):
        raise AssetValidationError(f"zero-norm description embeddings at rows {np.flatnonzero(norms <= 1e-12)}")
    return TextEncodingTable(table, [provider.mode] * count)


# ----------------------------------------------------------- concept library


@dataclass
class ConceptLibrary:
    nouns: list[str]
    embeddings: np.ndarray
    provenance: list[str]

    @property
    def m(self) -> int:
        return len(self.nouns)

    def to_json(self) -> dict:
        return {"nouns": list(self.nouns)}

    def save(self, path) -> None:
        _write_json(path, self.to_json())


def load_concept_nouns(path) -> list[str]:
    with open(path, "r", encoding="utf-8") as fh:
        return [str(n) for n in json.load(fh)["nouns"]]


def _dedupe(nouns: Iterable[str]) -> list[str]:
    out, seen, dropped = [], set(), []
    for noun in nouns:
        noun = str(noun).strip()
        key = noun.lower()
        if not noun:
            continue
        if key in seen:
            dropped.append(noun)
            continue
        seen.add(key)
        out.append(noun)
    if dropped:
        warnings.warn(f"collapsed {len(dropped)} duplicate concept nouns: {dropped[:5]}", AssetWarning,
                      stacklevel=3)
    return out


def build_concept_library(labels: LabelSpace, source: TextSource | None, provider,
                          L: int | None = None, nouns: list[str] | None = None) -> ConceptLibrary:
    """Generate (or take) concept nouns for the anomaly labels and embed them."""
    if nouns is None:
        L = default_concept_count(labels) if L is None else L
        reply = source.complete(render_concept_prompt([lb.name for lb in labels.anomaly_labels], L))
        nouns = reply.get("nouns") or []
        if len(nouns) != L:
            log.warning("concept prompt asked for %d nouns, got %d", L, len(nouns))
    nouns = _dedupe(nouns)
    if not nouns:
        raise AssetValidationError("concept response contained no nouns")
    emb = provider.embed_many(nouns).astype(np.float32)
    return ConceptLibrary(nouns, emb, [provider.mode] * len(nouns))


def load_concept_library(path, provider) -> ConceptLibrary:
    return build_concept_library(None, None, provider, nouns=load_concept_nouns(path))


def _write_json(path, payload) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=False) + "\n").encode("utf-8"))
