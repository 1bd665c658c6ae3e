"""JSON-lines video manifests and the open-set training protocol."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .features import atomic_write_bytes, read_feature_file

if TYPE_CHECKING:
    from ..textbank import LabelSpace


class ManifestError(ValueError):
    pass


class ProtocolError(ManifestError):
    """A row breaks the open-set rule (only normal and base videos may train)."""


def rle_encode(mask) -> list[int]:
    """Alternating run lengths, starting with a (possibly empty) run of zeros."""
    mask = np.asarray(mask).astype(bool).reshape(-1)
    runs, current, length = [], False, 0
    for v in mask:
        if v == current:
            length += 1
        else:
            runs.append(length)
            current, length = v, 1
    runs.append(length)
    return runs


def rle_decode(runs) -> np.ndarray:
    out = []
    for k, r in enumerate(runs):
        if int(r) < 0:
            raise ManifestError(f"negative run length {r}")
        out.extend([k % 2] * int(r))
    return np.asarray(out, dtype=np.int8)


@dataclass
class VideoRecord:
    video_id: str
    features: np.ndarray
    label: int
    split: str                      # train | test
    category: str                   # normal | base | novel
    frame_gt: np.ndarray | None = None
    feature_path: str = ""

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def anomalous(self) -> bool:
        return self.label != 0


@dataclass
class Dataset:
    labels: LabelSpace
    train: list[VideoRecord] = field(default_factory=list)
    test: list[VideoRecord] = field(default_factory=list)

    @property
    def N(self) -> int:
        return sum(not v.anomalous for v in self.train)

    @property
    def A(self) -> int:
        return sum(v.anomalous for v in self.train)


def manifest_row(video_id: str, feature_path: str, label_index: int, split: str, frame_gt=None) -> dict:
    row = {"video_id": video_id, "feature_path": feature_path, "label_index": int(label_index), "split": split}
    if frame_gt is not None:
        row["frame_gt"] = rle_encode(frame_gt)
    return row


def write_manifest(path, rows: list[dict]) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    atomic_write_bytes(path, text.encode("utf-8"))


def read_manifest_rows(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ManifestError(f"{path}:{lineno}: bad JSON ({exc})") from None
    return rows


def validate_row(row: dict, labels: LabelSpace, n: int | None = None) -> None:
    vid = row.get("video_id", "?")
    for key in ("video_id", "feature_path", "label_index", "split"):
        if key not in row:
            raise ManifestError(f"row {vid!r} lacks {key!r}")
    label = row["label_index"]
    if not isinstance(label, int) or not 0 <= label < labels.count:
        raise ManifestError(f"row {vid!r}: label_index {label!r} outside label space of {labels.count}")
    if row["split"] not in ("train", "test"):
        raise ManifestError(f"row {vid!r}: split must be train or test, got {row['split']!r}")
    category = labels.split_of(label)
    if row["split"] == "train" and category == "novel":
        raise ProtocolError(f"row {vid!r}: novel label {labels.labels[label].name!r} in the training split")
    if "frame_gt" in row:
        gt = rle_decode(row["frame_gt"])
        if n is not None and gt.size != n:
            raise ManifestError(f"row {vid!r}: frame_gt covers {gt.size} frames, features have {n}")
        if category == "normal" and gt.any():
            raise ManifestError(f"row {vid!r}: normal video marks anomalous frames")
        if category != "normal" and not gt.any():
            raise ManifestError(f"row {vid!r}: anomalous video has no anomalous frame")


def load_manifest(path, labels: LabelSpace, root=None) -> Dataset:
    """Load every row, reading feature files relative to ``root`` (default: manifest dir)."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    data = Dataset(labels)
    seen: set[str] = set()
    for row in read_manifest_rows(path):
        validate_row(row, labels)
        vid = row["video_id"]
        if vid in seen:
            raise ManifestError(f"duplicate video_id {vid!r}")
        seen.add(vid)
        fpath = root / row["feature_path"]
        if not fpath.exists():
            raise FileNotFoundError(f"row {vid!r}: feature file {fpath} not found")
        x = read_feature_file(fpath)
        validate_row(row, labels, n=x.shape[0])
        gt = rle_decode(row["frame_gt"]) if "frame_gt" in row else None
        rec = VideoRecord(vid, x, row["label_index"], row["split"], labels.split_of(row["label_index"]), gt,
                          row["feature_path"])
        (data.train if rec.split == "train" else data.test).append(rec)
    return data
