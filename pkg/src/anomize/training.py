"""Objectives and the two-stage optimisation protocol."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .dataio.checkpoint import save_checkpoint
from .dataio.manifest import VideoRecord
from .model import Anomize, ConceptSelection, num_top, retrieve_concepts, subsample_frames
from .tensorcore import Tensor

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


@dataclass
class TrainConfig:
    lr: float = 2e-5
    lr_stage2: float | None = None  # None reuses lr
    batch_size: int = 32
    epochs_stage1: int = 16
    epochs_stage2: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    eps_log: float = 1e-7
    # ablation switches
    sep_loss: bool = True
    loss_weight: bool = True
    segmented: bool = True

    def __post_init__(self):
        if self.lr < 0 or (self.lr_stage2 is not None and self.lr_stage2 < 0):
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be non-negative")

    def stage_lr(self, stage: str) -> float:
        return self.lr_stage2 if stage == "2" and self.lr_stage2 is not None else self.lr

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in payload.items() if k in cls.__dataclass_fields__})


@dataclass
class BatchLabels:
    g: np.ndarray   # (N, c) one-hot
    q: np.ndarray   # (N,) anomaly flags
    w: np.ndarray   # (N,) loss weights

    @property
    def N(self) -> int:
        return len(self.q)

    @classmethod
    def from_labels(cls, labels: Sequence[int], c: int, weighted: bool = True) -> "BatchLabels":
        labels = np.asarray(labels, dtype=int)
        g = np.zeros((len(labels), c))
        g[np.arange(len(labels)), labels] = 1.0
        q = (labels != 0).astype(float)
        w = compute_loss_weights(q) if weighted else np.ones(len(labels))
        return cls(g, q, w)


# ------------------------------------------------------------------ losses


def _stack_rows(rows: Sequence[Tensor]) -> Tensor:
    return tc.concat([tc.reshape(r, (1, -1)) for r in rows], axis=0)


def loss_categorization(p_avg: Sequence[Tensor] | Tensor, g, eps_log: float = 1e-7,
                        use_sep: bool = True) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy on video-level label probabilities plus the normal/anomaly gap penalty.

    Returns ``(L_cat, L_ce, L_sep)``; ``L_sep`` is 1 minus the mean absolute gap
    between the normal probability and the best anomaly probability.
    """
    P = p_avg if isinstance(p_avg, Tensor) else _stack_rows(p_avg)
    g = np.asarray(g, dtype=P.dtype)
    if P.data.ndim == 1:
        P = tc.reshape(P, (1, -1))
        g = g.reshape(1, -1)
    N, c = P.shape
    if c < 2:
        raise ValueError("categorization loss needs at least one anomaly label besides normal")
    logp = tc.log(tc.clip(P, eps_log, 1.0))
    L_ce = tc.scale(tc.reduce_sum(tc.mul(logp, g)), -1.0 / N)
    gaps = []
    for i in range(N):
        row = P[i]
        gaps.append(tc.absolute(tc.sub(tc.reduce_max(row[1:]), row[0])))
    gap_sum = gaps[0]
    for gp in gaps[1:]:
        gap_sum = tc.add(gap_sum, gp)
    L_sep = tc.add(tc.scale(gap_sum, -1.0 / N), 1.0)
    L_cat = tc.add(L_ce, L_sep) if use_sep else L_ce
    return L_cat, L_ce, L_sep


def video_level_mil(s, topm_divisor: int = 16) -> Tensor:
    """Mean of the top-M frame scores, M = max(1, floor(n / divisor))."""
    s = tc.as_tensor(s)
    flat = tc.reshape(s, (-1,))
    return tc.topm_mean(flat, num_top(flat.shape[0], topm_divisor))


def _bce(qhat: Sequence[Tensor], q, w, eps_log: float) -> Tensor:
    qh = tc.clip(tc.concat([tc.reshape(x, (1,)) for x in qhat], axis=0), eps_log, 1.0 - eps_log)
    q = np.asarray(q, dtype=qh.dtype)
    w = np.asarray(w, dtype=qh.dtype)
    pos = tc.mul(tc.log(qh), q)
    neg = tc.mul(tc.log(tc.sub(1.0, qh)), 1.0 - q)
    return tc.scale(tc.reduce_sum(tc.mul(tc.add(pos, neg), w)), -1.0 / len(q))


def loss_detection_mil(qhat_dyn: Sequence[Tensor] | None, qhat_sta: Sequence[Tensor] | None, q, w,
                       eps_log: float = 1e-7) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Weighted binary cross-entropy per stream; returns ``(L_det, L_D_MIL, L_S_MIL)``."""
    L_d = _bce(qhat_dyn, q, w, eps_log) if qhat_dyn else None
    L_s = _bce(qhat_sta, q, w, eps_log) if qhat_sta else None
    parts = [x for x in (L_d, L_s) if x is not None]
    if not parts:
        raise ValueError("detection loss needs at least one stream")
    L_det = parts[0] if len(parts) == 1 else tc.add(parts[0], parts[1])
    return L_det, L_d, L_s


def compute_loss_weights(q) -> np.ndarray:
    """Anomalous samples get (#normal / #anomalous); normal ones get 1."""
    q = np.asarray(q).astype(bool)
    n_anom = int(q.sum())
    n_norm = int(q.size - n_anom)
    w = np.ones(q.size)
    if n_anom and n_norm:
        w[q] = n_norm / n_anom
    return w


# --------------------------------------------------------------- optimiser


class AdamW:
    """Adam with decoupled weight decay; only trainable parameters move."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        if self.lr == 0:
            return
        self.t += 1
        bc1 = 1 - self.beta1 ** self.t
        bc2 = 1 - self.beta2 ** self.t
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.wd) - self.lr * update).astype(p.dtype)


# ---------------------------------------------------------------- training


@dataclass
class TextContext:
    """Frozen text-side inputs shared by every video."""

    t_desc: np.ndarray
    concepts: np.ndarray | None = None


@dataclass
class TrainResult:
    model: Anomize
    log: list[dict] = field(default_factory=list)


def _param_norms(model: Anomize) -> dict[str, float]:
    return {p.name: float(np.linalg.norm(p.data)) for p in model.parameters()}


def _batches(n: int, size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


class Trainer:
    """Runs stage 1 (categorization), stage 2 (detection) or the joint ablation."""

    def __init__(self, model: Anomize, videos: Sequence[VideoRecord], text: TextContext, cfg: TrainConfig,
                 *, checkpoint_dir=None, log_path=None):
        self.model = model
        self.videos = list(videos)
        self.text = text
        self.cfg = cfg
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        self.rng = np.random.default_rng(cfg.seed)
        self.history: list[dict] = []
        self._frames = [subsample_frames(v.features, model.config.max_train_frames) for v in self.videos]
        self._selections: dict[int, ConceptSelection] = {}
        self.c = text.t_desc.shape[0]

    def _selection(self, k: int) -> ConceptSelection | None:
        if self.text.concepts is None or self.model.config.streams == "dynamic":
            return None
        if k not in self._selections:
            x = self._frames[k].astype(self.model.dtype)
            self._selections[k] = retrieve_concepts(x, self.text.concepts, self.model.config.K)
        return self._selections[k]

    def _batch_losses(self, idx: np.ndarray, stage: str) -> dict[str, Tensor]:
        cfg, mcfg = self.cfg, self.model.config
        labels = [self.videos[k].label for k in idx]
        bl = BatchLabels.from_labels(labels, self.c, weighted=cfg.loss_weight)
        categorize = stage in ("1", "joint")
        detect = stage in ("2", "joint")
        p_avgs, q_dyn, q_sta = [], [], []
        for k in idx:
            out = self.model.forward(self._frames[k], self.text.t_desc, self.text.concepts, train=True,
                                     categorize=categorize, detect=detect, selection=self._selection(k))
            if categorize:
                p_avgs.append(out.p_avg)
            if detect:
                if out.s_dyn is not None:
                    q_dyn.append(video_level_mil(out.s_dyn, mcfg.topm_divisor))
                if out.s_sta is not None:
                    q_sta.append(video_level_mil(out.s_sta, mcfg.topm_divisor))
        losses: dict[str, Tensor] = {}
        total = None
        if categorize:
            L_cat, L_ce, L_sep = loss_categorization(p_avgs, bl.g, cfg.eps_log, cfg.sep_loss)
            losses.update(L_cat=L_cat, L_ce=L_ce, L_sep=L_sep)
            total = L_cat
        if detect:
            L_det, L_d, L_s = loss_detection_mil(q_dyn, q_sta, bl.q, bl.w, cfg.eps_log)
            losses["L_det"] = L_det
            if L_d is not None:
                losses["L_D_MIL"] = L_d
            if L_s is not None:
                losses["L_S_MIL"] = L_s
            total = L_det if total is None else tc.add(total, L_det)
        losses["total"] = total
        return losses

    def run(self, stage: str, epochs: int) -> TrainResult:
        """Train ``epochs`` epochs with the freeze mask for ``stage`` ('1', '2', 'joint')."""
        cfg = self.cfg
        self.model.set_stage(stage)
        trainable = self.model.parameters(trainable_only=True)
        opt = AdamW(trainable, cfg.stage_lr(stage), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        log_rows = []
        for epoch in range(1, epochs + 1):
            start = time.perf_counter()
            sums: dict[str, float] = {}
            count = 0
            for b, idx in enumerate(_batches(len(self.videos), cfg.batch_size, self.rng)):
                self.model.zero_grad()
                losses = self._batch_losses(idx, stage)
                values = {k: float(v.data) for k, v in losses.items()}
                if not all(np.isfinite(list(values.values()))):
                    diag = {"stage": stage, "epoch": epoch, "batch": b,
                            "videos": [self.videos[k].video_id for k in idx],
                            "losses": values, "param_norms": _param_norms(self.model)}
                    self._dump(diag)
                    raise TrainingAbort(f"non-finite loss in stage {stage}, epoch {epoch}, batch {b}", diag)
                if trainable:
                    losses["total"].backward()
                    opt.step()
                for k, v in values.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                count += len(idx)
            row = {"stage": stage, "epoch": epoch}
            row.update({k: v / max(count, 1) for k, v in sums.items() if k != "total"})
            row["wall_ms"] = round((time.perf_counter() - start) * 1000, 3)
            log_rows.append(row)
            self._log(row)
            if self.checkpoint_dir is not None:
                save_checkpoint(self.checkpoint_dir / f"stage{stage}_epoch{epoch:03d}.json", self.model,
                                stage=stage, epoch=epoch)
        self.model.freeze_all()
        self.history.extend(log_rows)
        return TrainResult(self.model, log_rows)

    def _log(self, row: dict) -> None:
        log.info("%s", row)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def _dump(self, diag: dict) -> None:
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            path = self.checkpoint_dir / "abort_diagnostic.json"
            path.write_text(json.dumps(diag, indent=1))
            diag["path"] = str(path)


def run_stage1(model: Anomize, videos, text: TextContext, cfg: TrainConfig, **kw) -> TrainResult:
    return Trainer(model, videos, text, cfg, **kw).run("1", cfg.epochs_stage1)


def run_stage2(model: Anomize, videos, text: TextContext, cfg: TrainConfig, **kw) -> TrainResult:
    return Trainer(model, videos, text, cfg, **kw).run("2", cfg.epochs_stage2)


def run_joint(model: Anomize, videos, text: TextContext, cfg: TrainConfig, epochs: int | None = None,
              **kw) -> TrainResult:
    """Single-phase ablation: both losses, every active module trainable."""
    epochs = cfg.epochs_stage1 + cfg.epochs_stage2 if epochs is None else epochs
    return Trainer(model, videos, text, cfg, **kw).run("joint", epochs)


def train_all(model: Anomize, videos, text: TextContext, cfg: TrainConfig, **kw) -> TrainResult:
    """Segmented protocol (stage 1 then stage 2), or the joint ablation when not segmented."""
    if not cfg.segmented:
        return run_joint(model, videos, text, cfg, **kw)
    trainer = Trainer(model, videos, text, cfg, **kw)
    trainer.run("1", cfg.epochs_stage1)
    trainer.run("2", cfg.epochs_stage2)
    return TrainResult(model, trainer.history)
