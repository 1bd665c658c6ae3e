"""Frame-level detection metrics and video-level Top-1 categorization accuracy."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 0.5)."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Mean over positives of precision at their rank; descending sort, ties by lower index."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores vs {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    tp = np.cumsum(hits)
    ranks = np.arange(1, y.size + 1)
    return float(np.sum(tp[hits] / ranks[hits]) / n_pos)


@dataclass
class EvalRecord:
    video_id: str
    s: np.ndarray
    frame_gt: np.ndarray | None
    p_video: int
    label: int
    split: str  # normal | base | novel
    s_dyn: np.ndarray | None = None
    s_sta: np.ndarray | None = None
    p_avg: np.ndarray | None = None


SPLIT_FILTERS = ("all", "base", "novel")


def top1_accuracy(records: Iterable[EvalRecord], split: str = "all") -> float:
    if split not in SPLIT_FILTERS:
        raise ValueError(f"split filter must be one of {SPLIT_FILTERS}")
    chosen = [r for r in records if r.split != "normal" and (split == "all" or r.split == split)]
    if not chosen:
        raise UndefinedMetricError(f"no anomalous videos for split filter {split!r}")
    return sum(r.p_video == r.label for r in chosen) / len(chosen)


def _pooled(records: Sequence[EvalRecord], keep: set[str]):
    pool = [r for r in records if r.split in keep and r.frame_gt is not None]
    if not pool:
        return np.zeros(0), np.zeros(0)
    return (np.concatenate([r.s.reshape(-1) for r in pool]),
            np.concatenate([r.frame_gt.reshape(-1) for r in pool]))


POOLS = {"": {"normal", "base", "novel"}, "_b": {"normal", "base"}, "_n": {"normal", "novel"}}
REPORT_KEYS = ("AP", "AP_b", "AP_n", "AUC", "AUC_b", "AUC_n", "ACC", "ACC_b", "ACC_n")


def summarize(records: Sequence[EvalRecord]) -> dict:
    """Metric report; undefined entries become ``None`` with a reason in ``reasons``.

    Detection pools: overall = every video, ``_b`` = normal + base, ``_n`` =
    normal + novel, all over concatenated frames.
    """
    report: dict = {}
    reasons: dict[str, str] = {}
    for suffix, keep in POOLS.items():
        split_name = {"": "all", "_b": "base", "_n": "novel"}[suffix]
        has_anom = any(r.split == split_name or (split_name == "all" and r.split != "normal") for r in records)
        s, y = _pooled(records, keep)
        for key, fn in (("AP", average_precision), ("AUC", roc_auc)):
            name = key + suffix
            if not has_anom:
                report[name] = None
                reasons[name] = f"no {split_name} anomalous videos"
                continue
            try:
                report[name] = fn(s, y)
            except UndefinedMetricError as exc:
                report[name] = None
                reasons[name] = str(exc)
        name = "ACC" + suffix
        try:
            report[name] = top1_accuracy(records, split_name)
        except UndefinedMetricError as exc:
            report[name] = None
            reasons[name] = str(exc)
    report["reasons"] = reasons
    report["videos"] = len(records)
    return {k: report[k] for k in (*REPORT_KEYS, "reasons", "videos")}


def evaluate(model, videos, text, *, use_split_beta: bool = False) -> tuple[dict, list[EvalRecord]]:
    """Score every test video with test-time settings and summarise.

    ``text`` is a :class:`~anomize.training.TextContext`. With
    ``use_split_beta`` the config's per-split beta overrides are applied,
    which assumes the video's category split is known at test time.
    """
    records = []
    for v in videos:
        out = model.forward(v.features, text.t_desc, text.concepts, train=False,
                            split=v.category if use_split_beta else None)
        records.append(EvalRecord(
            v.video_id, out.s.data.reshape(-1).astype(np.float64), v.frame_gt, out.p_video, v.label, v.category,
            None if out.s_dyn is None else out.s_dyn.data.reshape(-1).astype(np.float64),
            None if out.s_sta is None else out.s_sta.data.reshape(-1).astype(np.float64),
            out.p_avg.data.astype(np.float64)))
    return summarize(records), records


def _fmt(v) -> str:
    return "null" if v is None else f"{100 * v:6.2f}"


def format_report(report: dict, title: str = "") -> str:
    head = "  ".join(f"{k:>6}" for k in REPORT_KEYS)
    row = "  ".join(f"{_fmt(report[k]):>6}" for k in REPORT_KEYS)
    lines = ([title] if title else []) + [head, row]
    for k, why in sorted(report.get("reasons", {}).items()):
        lines.append(f"  {k}: {why}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def records_csv(records: Sequence[EvalRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["video_id", "split", "label", "p_video", "n_frames", "max_score", "mean_score"])
    for r in records:
        w.writerow([r.video_id, r.split, r.label, r.p_video, r.s.size, f"{r.s.max():.6f}", f"{r.s.mean():.6f}"])
    return buf.getvalue()


def ablation_table(rows: Sequence[tuple[dict, dict]], flag_names: Sequence[str]) -> str:
    """Flag columns (check / cross) followed by the nine metric columns, one row per run."""
    head = "  ".join([f"{f:>8}" for f in flag_names] + [f"{k:>6}" for k in REPORT_KEYS])
    lines = [head]
    for flags, rep in rows:
        cells = [f"{'yes' if flags.get(f) else 'no':>8}" for f in flag_names]
        cells += [f"{_fmt(rep[k]):>6}" for k in REPORT_KEYS]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"
