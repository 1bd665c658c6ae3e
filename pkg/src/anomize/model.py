"""Forward path: temporal encoding, text-aligned categorization, dual-stream scoring."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensorcore as tc
from .tensorcore import Parameter, Tensor


class ConfigError(ValueError):
    pass


STREAMS = ("both", "dynamic", "static")


@dataclass
class ModelConfig:
    d: int = 512
    heads: int = 4
    alpha_train: float = 1.0
    alpha_test: float = 2.0
    beta: float = 0.5
    K: int = 5
    tau: float = 1.0
    topm_divisor: int = 16
    max_train_frames: int = 256
    # ablation switches
    streams: str = "both"
    text_augment: bool = True
    temporal_encoder: bool = True
    visual_fusion: bool = True
    beta_overrides: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        for name, b in [("beta", self.beta), *((f"beta_overrides[{k}]", v) for k, v in self.beta_overrides.items())]:
            if not 0.0 <= b <= 1.0:
                raise ConfigError(f"{name}={b} outside [0, 1]")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.topm_divisor < 1:
            raise ConfigError(f"topm_divisor must be >= 1, got {self.topm_divisor}")
        if self.streams not in STREAMS:
            raise ConfigError(f"streams must be one of {STREAMS}, got {self.streams!r}")

    def effective_beta(self, split: str | None = None) -> float:
        if self.streams == "dynamic":
            return 1.0
        if self.streams == "static":
            return 0.0
        if split is not None and split in self.beta_overrides:
            return float(self.beta_overrides[split])
        return float(self.beta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        known = {k: v for k, v in payload.items() if k in cls.__dataclass_fields__}
        return cls(**known)


def num_top(n: int, divisor: int) -> int:
    """M = max(1, floor(n / divisor))."""
    return max(1, n // divisor)


def subsample_frames(x: np.ndarray, limit: int) -> np.ndarray:
    """Uniformly pick ``limit`` frames when a sequence is longer than ``limit``."""
    n = x.shape[0]
    if n <= limit:
        return x
    idx = np.floor(np.arange(limit) * (n / limit)).astype(int)
    return x[idx]


# ------------------------------------------------------------------ params


def _uniform(rng, shape, bound, dtype):
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _linear_params(rng, prefix: str, fan_in: int, fan_out: int, dtype) -> list[Parameter]:
    bound = 1.0 / math.sqrt(fan_in)
    return [Parameter(f"{prefix}.weight", _uniform(rng, (fan_in, fan_out), bound, dtype)),
            Parameter(f"{prefix}.bias", np.zeros(fan_out, dtype=dtype))]


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Parameter]:
    rng = np.random.default_rng(seed)
    d = cfg.d
    bound = 1.0 / math.sqrt(d)
    params = [
        Parameter("temporal.lstm.w_in", _uniform(rng, (d, 4 * d), bound, dtype)),
        Parameter("temporal.lstm.w_rec", _uniform(rng, (d, 4 * d), bound, dtype)),
        Parameter("temporal.lstm.bias", np.zeros(4 * d, dtype=dtype)),
    ]
    for stream in ("dyn", "sta"):
        aug = f"{stream}.augmenter"
        for proj in ("q", "k", "v", "o"):
            params += _linear_params(rng, f"{aug}.attn.{proj}", d, d, dtype)
        params += _linear_params(rng, f"{aug}.fc", d, d, dtype)
        params += _linear_params(rng, f"{aug}.mlp.0", 2 * d, d, dtype)
        params += _linear_params(rng, f"{aug}.mlp.1", d, d, dtype)
        det = f"{stream}.detector"
        params += _linear_params(rng, f"{det}.mlp.0", d, d, dtype)
        params += _linear_params(rng, f"{det}.mlp.1", d, d, dtype)
        params += _linear_params(rng, f"{det}.fc", d, 1, dtype)
    return {p.name: p for p in params}


def stage_mask(name: str, stage: str, streams: str = "both") -> bool:
    """Whether parameter ``name`` is trainable in ``stage`` ('1', '2' or 'joint')."""
    is_temporal = name.startswith("temporal.")
    active = {"both": ("dyn.", "sta."), "dynamic": ("dyn.",), "static": ("sta.",)}[streams]
    in_stream = name.startswith(active)
    if stage == "1":
        return is_temporal
    if stage == "2":
        return in_stream
    if stage == "joint":
        return is_temporal or in_stream
    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------- forward ops


def temporal_encode(x_f, params: dict[str, Parameter]) -> Tensor:
    x_f = tc.as_tensor(x_f)
    if x_f.shape[0] == 0:
        raise ValueError("temporal_encode needs at least one frame")
    return tc.lstm(x_f, params["temporal.lstm.w_in"], params["temporal.lstm.w_rec"], params["temporal.lstm.bias"])


def fuse_visual(x_tem, x_f, alpha: float) -> Tensor:
    x_tem, x_f = tc.as_tensor(x_tem), tc.as_tensor(x_f)
    if x_tem.shape != x_f.shape:
        raise tc.DimensionError(f"cannot fuse {x_tem.shape} with {x_f.shape}")
    if alpha == 0:
        return x_tem
    return tc.add(x_tem, tc.scale(x_f, alpha))


def align_frames(x_fused, t_desc) -> Tensor:
    """Raw frame-label cosines, (n, c). Temperature is applied in aggregation."""
    return tc.cosine_sim_matrix(x_fused, t_desc)


def aggregate_topM(p_frame, topm_divisor: int = 16, tau: float = 1.0) -> Tensor:
    p_frame = tc.as_tensor(p_frame)
    m = num_top(p_frame.shape[0], topm_divisor)
    pooled = tc.topm_mean(p_frame, m)
    if tau != 1.0:
        pooled = tc.scale(pooled, 1.0 / tau)
    return tc.softmax(pooled, axis=-1)


def predict_video(p_avg) -> int:
    v = np.asarray(p_avg.data if isinstance(p_avg, Tensor) else p_avg).reshape(-1)
    return int(np.argmax(v))


def _p(params, prefix):
    return params[f"{prefix}.weight"], params[f"{prefix}.bias"]


def _mlp(x, params, prefix) -> Tensor:
    h = tc.gelu(tc.linear(x, *_p(params, f"{prefix}.0")))
    return tc.linear(h, *_p(params, f"{prefix}.1"))


def augment(e_visual, e_text, params: dict[str, Parameter], prefix: str, heads: int,
            text_augment: bool = True, return_weights: bool = False):
    """Inject attended text features into visual features; returns (q, d).

    ``e_text`` of shape (k, d) is shared by every query row; shape (q, k, d)
    gives each query row its own keys.
    """
    e_visual = tc.as_tensor(e_visual)
    if e_visual.shape[-1] % heads:
        raise ConfigError(f"d={e_visual.shape[-1]} not divisible by heads={heads}")
    weights = None
    if text_augment:
        attn = f"{prefix}.attn"
        res = tc.multi_head_attention(
            e_visual, e_text, *_p(params, f"{attn}.q"), *_p(params, f"{attn}.k"),
            *_p(params, f"{attn}.v"), *_p(params, f"{attn}.o"), heads=heads, return_weights=return_weights)
        e_refine, weights = res if return_weights else (res, None)
    else:
        e_refine = Tensor(np.zeros_like(e_visual.data))
    projected = tc.linear(e_visual, *_p(params, f"{prefix}.fc"))
    e_aug = _mlp(tc.concat([e_refine, projected], axis=-1), params, f"{prefix}.mlp")
    if return_weights:
        return e_aug, e_refine, weights
    return e_aug


def _detector(feat, params, prefix) -> Tensor:
    residual = tc.add(feat, _mlp(feat, params, f"{prefix}.mlp"))
    return tc.sigmoid(tc.linear(residual, *_p(params, f"{prefix}.fc")))


def dynamic_score(x_tem, t_desc, params, heads: int, text_augment: bool = True) -> tuple[Tensor, Tensor]:
    """Returns (s_dyn, f_aug)."""
    f_aug = augment(x_tem, tc.as_tensor(t_desc), params, "dyn.augmenter", heads, text_augment)
    return _detector(f_aug, params, "dyn.detector"), f_aug


@dataclass
class ConceptSelection:
    indices: np.ndarray   # (n, K)
    h_f: np.ndarray       # (n, K, d)
    s_f: np.ndarray       # (n, K)
    weights: np.ndarray   # (n, K)
    h_f_new: np.ndarray   # (n, K, d)


def retrieve_concepts(x_f, library: np.ndarray, K: int) -> ConceptSelection:
    """Per frame, the K most cosine-similar concept rows, softmax-weighted by similarity."""
    x = np.asarray(x_f.data if isinstance(x_f, Tensor) else x_f)
    lib = np.asarray(library.embeddings if hasattr(library, "embeddings") else library, dtype=x.dtype)
    if not 1 <= K <= lib.shape[0]:
        raise ValueError(f"K={K} must be in [1, {lib.shape[0]}] for this concept library")
    sim = tc.cosine_sim_matrix(x, lib).data
    idx = np.argsort(-sim, axis=1, kind="stable")[:, :K]
    s_f = np.take_along_axis(sim, idx, axis=1)
    e = np.exp(s_f - s_f.max(axis=1, keepdims=True))
    w = e / e.sum(axis=1, keepdims=True)
    h_f = lib[idx]
    return ConceptSelection(idx, h_f, s_f, w, w[..., None] * h_f)


def static_score(x_f, library, K: int, params, heads: int, text_augment: bool = True,
                 selection: ConceptSelection | None = None) -> tuple[Tensor, Tensor]:
    """Returns (s_sta, x_aug)."""
    sel = selection if selection is not None else retrieve_concepts(x_f, library, K)
    x_aug = augment(x_f, Tensor(sel.h_f_new.astype(tc.as_tensor(x_f).dtype)), params, "sta.augmenter",
                    heads, text_augment)
    return _detector(x_aug, params, "sta.detector"), x_aug


def fuse_scores(s_dyn, s_sta, beta: float) -> Tensor:
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta={beta} outside [0, 1]")
    if beta == 1.0:
        return tc.as_tensor(s_dyn)
    if beta == 0.0:
        return tc.as_tensor(s_sta)
    return tc.add(tc.scale(s_dyn, beta), tc.scale(s_sta, 1.0 - beta))


# ------------------------------------------------------------------ model


@dataclass
class ForwardOutput:
    x_tem: Tensor | None = None
    x_fused: Tensor | None = None
    p_frame: Tensor | None = None
    p_avg: Tensor | None = None
    M: int | None = None
    s_dyn: Tensor | None = None
    s_sta: Tensor | None = None
    s: Tensor | None = None
    f_aug: Tensor | None = None
    x_aug: Tensor | None = None

    @property
    def p_video(self) -> int:
        return predict_video(self.p_avg)


class Anomize:
    """Parameter container plus the full forward pass."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32,
                 params: dict[str, Parameter] | None = None):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed, dtype)

    # parameter management
    def parameters(self, trainable_only: bool = False) -> list[Parameter]:
        ps = [self.params[k] for k in sorted(self.params)]
        return [p for p in ps if p.trainable] if trainable_only else ps

    def set_stage(self, stage: str) -> None:
        for name, p in self.params.items():
            p.trainable = stage_mask(name, stage, self.config.streams)
            if not self.config.temporal_encoder and name.startswith("temporal."):
                p.trainable = False

    def freeze_all(self) -> None:
        for p in self.params.values():
            p.trainable = False

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in sorted(self.params)}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state/parameter name mismatch: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise tc.DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype)

    def astype(self, dtype) -> "Anomize":
        params = {k: Parameter(k, p.data.astype(dtype), p.trainable) for k, p in self.params.items()}
        return Anomize(replace(self.config), params=params)

    def copy(self) -> "Anomize":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.params["temporal.lstm.w_in"].dtype

    # forward
    def encode(self, x_f: Tensor) -> Tensor:
        if not self.config.temporal_encoder:
            return x_f
        return temporal_encode(x_f, self.params)

    def forward(self, x_f, t_desc, concepts=None, *, train: bool = False,
                categorize: bool = True, detect: bool = True, split: str | None = None,
                selection: ConceptSelection | None = None) -> ForwardOutput:
        cfg = self.config
        x = np.asarray(x_f.data if isinstance(x_f, Tensor) else x_f, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != cfg.d:
            raise tc.DimensionError(f"features of shape {x.shape} do not match d={cfg.d}")
        x_f = Tensor(x)
        t_desc = Tensor(np.asarray(t_desc, dtype=self.dtype))
        out = ForwardOutput()
        need_tem = categorize or (detect and cfg.streams != "static")
        if need_tem:
            out.x_tem = self.encode(x_f)
        if categorize:
            alpha = (cfg.alpha_train if train else cfg.alpha_test) if cfg.visual_fusion else 0.0
            out.x_fused = fuse_visual(out.x_tem, x_f, alpha)
            out.p_frame = align_frames(out.x_fused, t_desc)
            out.M = num_top(x.shape[0], cfg.topm_divisor)
            out.p_avg = aggregate_topM(out.p_frame, cfg.topm_divisor, cfg.tau)
        if detect:
            if cfg.streams != "static":
                out.s_dyn, out.f_aug = dynamic_score(out.x_tem, t_desc, self.params, cfg.heads, cfg.text_augment)
            if cfg.streams != "dynamic":
                if concepts is None:
                    raise ValueError("static stream needs a concept library")
                out.s_sta, out.x_aug = static_score(x_f, concepts, cfg.K, self.params, cfg.heads,
                                                    cfg.text_augment, selection)
            beta = cfg.effective_beta(split)
            if cfg.streams == "dynamic":
                out.s = out.s_dyn
            elif cfg.streams == "static":
                out.s = out.s_sta
            else:
                out.s = fuse_scores(out.s_dyn, out.s_sta, beta)
        return out

    __call__ = forward

