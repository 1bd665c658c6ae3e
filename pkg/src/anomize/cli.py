"""Command-line entry point: prepare-text, train, eval, score, synth.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime
abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from . import textbank as tb
from .dataio.checkpoint import (CheckpointCorruptError, CheckpointMigrationError, restore_model,
                                save_checkpoint)
from .dataio.features import FeatureFormatError, atomic_write_bytes, read_feature_file
from .dataio.manifest import ManifestError, ProtocolError, load_manifest
from .dataio.synth import SynthSpec, SynthSpecError, generate_synthetic_benchmark
from .metrics import evaluate, format_report, records_csv, report_json
from .model import Anomize, ConfigError, ModelConfig
from .training import TrainConfig, Trainer, TrainingAbort

log = logging.getLogger("anomize")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4
WORKSPACE_CONFIG = "anomize.json"
# fields that only act at inference; eval and score take them from the run config
INFERENCE_FIELDS = ("alpha_test", "beta", "beta_overrides")


class PreconditionError(RuntimeError):
    pass


@dataclass
class PathConfig:
    labels: str = "labels.json"
    manifest: str = "manifest.jsonl"
    assets: str = "assets"
    checkpoints: str = "checkpoints"
    runs: str = "runs"
    desc_fixtures: list[str] = field(default_factory=lambda: ["fixtures/descriptions.fixture.json"])
    concept_fixtures: list[str] = field(default_factory=lambda: ["fixtures/concepts.fixture.json"])
    capture: str = "assets/llm_capture.fixture.json"
    embeddings: str | None = None  # AZF1 text-embedding matrix; None selects the pseudo embedder


@dataclass
class TextConfig:
    mode: str = "fixture"  # fixture | client
    group_guided: bool = True
    concept_count: int | None = None
    embed_seed: int = 0
    check_length: bool = True


@dataclass
class RunConfig:
    workspace: str = "."
    seed: int = 0
    threads: int | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    text: TextConfig = field(default_factory=TextConfig)

    def path(self, key: str) -> Path:
        return self.resolve(getattr(self.paths, key))

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.workspace) / p

    def to_dict(self) -> dict:
        return {"workspace": self.workspace, "seed": self.seed, "threads": self.threads,
                "model": self.model.to_dict(), "train": self.train.to_dict(),
                "paths": asdict(self.paths), "text": asdict(self.text)}


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "paths": PathConfig, "text": TextConfig}
_TOP = ("workspace", "seed", "threads")


def _check_keys(section: str, payload: dict) -> None:
    known = {f.name for f in fields(_SECTIONS[section])}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")


def _merge(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            base.setdefault(key, {}).update(value)
        elif key in _TOP:
            base[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items) -> dict:
    """``section.key=value`` strings to a nested dict; values parse as JSON when possible."""
    out: dict = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        parts = key.strip().split(".")
        if len(parts) == 1:
            out[parts[0]] = _parse_value(value)
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = _parse_value(value)
        else:
            raise ConfigError(f"override key {key!r} must be 'key' or 'section.key'")
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return payload


def build_run_config(config_path=None, workspace=None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file (or the workspace's anomize.json) < flag overrides, validated."""
    ws = workspace or os.environ.get("ANOMIZE_WORKSPACE") or "."
    merged: dict = {"workspace": ws}
    if config_path is None and (Path(ws) / WORKSPACE_CONFIG).is_file():
        config_path = Path(ws) / WORKSPACE_CONFIG
    if config_path is not None:
        _merge(merged, load_config_file(config_path))
        if workspace:
            merged["workspace"] = workspace
    _merge(merged, overrides or {})
    for section in _SECTIONS:
        _check_keys(section, merged.get(section, {}))
    try:
        cfg = RunConfig(
            workspace=str(merged["workspace"]),
            seed=int(merged.get("seed", 0)),
            threads=merged.get("threads"),
            model=ModelConfig(**merged.get("model", {})),
            train=TrainConfig(**{"seed": int(merged.get("seed", 0)), **merged.get("train", {})}),
            paths=PathConfig(**merged.get("paths", {})),
            text=TextConfig(**merged.get("text", {})),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.text.mode not in ("fixture", "client"):
        raise ConfigError(f"text.mode must be 'fixture' or 'client', got {cfg.text.mode!r}")
    if cfg.threads is not None and int(cfg.threads) < 1:
        raise ConfigError(f"threads must be >= 1, got {cfg.threads}")
    return cfg


def echo_config(cfg: RunConfig, run_dir: Path, argv) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    payload = {"argv": list(argv), "config": cfg.to_dict()}
    path = run_dir / "config.json"
    atomic_write_bytes(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path


# ------------------------------------------------------------------ commands


def _labels(cfg: RunConfig) -> tb.LabelSpace:
    return tb.load_label_space(cfg.path("labels"))


def _provider(cfg: RunConfig):
    if cfg.paths.embeddings:
        return tb.FileEmbedder(cfg.resolve(cfg.paths.embeddings))
    return tb.PseudoEmbedder(cfg.model.d, cfg.text.embed_seed)


def _sources(cfg: RunConfig):
    if cfg.text.mode == "client":
        client = tb.LLMClient(capture_path=cfg.path("capture"))
        return client, client
    desc = tb.FixtureSource(*[cfg.resolve(p) for p in cfg.paths.desc_fixtures])
    concept = tb.FixtureSource(*[cfg.resolve(p) for p in cfg.paths.concept_fixtures])
    return desc, concept


def cmd_prepare_text(cfg: RunConfig, args) -> int:
    labels = _labels(cfg)
    desc_source, concept_source = _sources(cfg)
    assets = pipeline.build_assets(labels, desc_source, concept_source, _provider(cfg),
                                   group_guided=cfg.text.group_guided, L=cfg.text.concept_count,
                                   check_length=cfg.text.check_length)
    written = pipeline.write_assets(assets, labels, cfg.path("assets"))
    for p in written.values():
        print(p)
    return EXIT_OK


def _final_checkpoint(cfg: RunConfig, stage: str) -> Path:
    return cfg.path("checkpoints") / f"stage{stage}.json"


def cmd_train(cfg: RunConfig, args) -> int:
    labels = _labels(cfg)
    dataset = load_manifest(cfg.path("manifest"), labels, root=cfg.workspace)
    text = pipeline.load_assets(cfg.path("assets"), labels).context()
    ckpt_dir = cfg.path("checkpoints")
    run_dir = cfg.path("runs") / "train"
    log_path = run_dir / "log.jsonl"
    if log_path.exists():
        log_path.unlink()
    epoch_dir = ckpt_dir / "epochs"
    stages = ["joint"] if args.joint else (["1", "2"] if args.stage == "all" else [args.stage])

    if stages[0] == "2" and not args.from_scratch:
        src = _final_checkpoint(cfg, "1")
        if not src.is_file():
            raise PreconditionError(f"stage 2 needs a stage-1 checkpoint at {src} (or pass --from-scratch)")
        model, _ = restore_model(src, cfg.model.to_dict())
        for name in INFERENCE_FIELDS:
            setattr(model.config, name, getattr(cfg.model, name))
    else:
        model = Anomize(cfg.model, seed=cfg.seed)
    trainer = Trainer(model, dataset.train, text, cfg.train, checkpoint_dir=epoch_dir, log_path=log_path)
    for stage in stages:
        epochs = {"1": cfg.train.epochs_stage1, "2": cfg.train.epochs_stage2,
                  "joint": cfg.train.epochs_stage1 + cfg.train.epochs_stage2}[stage]
        trainer.run(stage, epochs)
        final = _final_checkpoint(cfg, stage)
        save_checkpoint(final, model, stage=stage, epoch=epochs)
        print(final)
    return EXIT_OK


def _default_checkpoint(cfg: RunConfig) -> Path:
    for stage in ("2", "joint", "1"):
        p = _final_checkpoint(cfg, stage)
        if p.is_file():
            return p
    raise PreconditionError(f"no trained checkpoint under {cfg.path('checkpoints')}")


def _load_for_inference(cfg: RunConfig, checkpoint) -> Anomize:
    path = Path(checkpoint) if checkpoint else _default_checkpoint(cfg)
    model, _ = restore_model(path, {"d": cfg.model.d, "heads": cfg.model.heads})
    for name in INFERENCE_FIELDS:
        setattr(model.config, name, getattr(cfg.model, name))
    model.config.validate()
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    labels = _labels(cfg)
    dataset = load_manifest(cfg.path("manifest"), labels, root=cfg.workspace)
    if not dataset.test:
        raise ManifestError("manifest has no test videos")
    text = pipeline.load_assets(cfg.path("assets"), labels).context()
    model = _load_for_inference(cfg, args.checkpoint)
    report, records = evaluate(model, dataset.test, text, use_split_beta=args.split_beta)
    out = Path(args.out) if args.out else cfg.path("runs") / "eval"
    out.mkdir(parents=True, exist_ok=True)
    text_report = format_report(report)
    atomic_write_bytes(out / "report.json", report_json(report).encode("utf-8"))
    atomic_write_bytes(out / "report.txt", text_report.encode("utf-8"))
    atomic_write_bytes(out / "videos.csv", records_csv(records).encode("utf-8"))
    sys.stdout.write(text_report)
    return EXIT_OK


def score_csv(out) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame_index", "s_dyn", "s_sta", "s"])
    n = out.s.data.size
    s_dyn = None if out.s_dyn is None else out.s_dyn.data.reshape(-1)
    s_sta = None if out.s_sta is None else out.s_sta.data.reshape(-1)
    s = out.s.data.reshape(-1)
    for i in range(n):
        w.writerow([i, "" if s_dyn is None else repr(float(s_dyn[i])),
                    "" if s_sta is None else repr(float(s_sta[i])), repr(float(s[i]))])
    return buf.getvalue()


def cmd_score(cfg: RunConfig, args) -> int:
    labels = _labels(cfg)
    model = _load_for_inference(cfg, args.checkpoint)
    x = read_feature_file(args.features)
    if x.shape[1] != model.config.d:
        raise ConfigError(f"feature dimension {x.shape[1]} does not match model d={model.config.d}")
    text = pipeline.load_assets(cfg.path("assets"), labels).context()
    out = model.forward(x, text.t_desc, text.concepts, train=False)
    label = out.p_video
    summary = {"label_index": label, "label": labels.labels[label].name,
               "p_avg": [float(v) for v in out.p_avg.data.reshape(-1)]}
    table = score_csv(out)
    if args.out:
        atomic_write_bytes(Path(args.out), table.encode("utf-8"))
        print(json.dumps(summary))
    else:
        sys.stdout.write(table)
        sys.stderr.write(json.dumps(summary) + "\n")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    spec = SynthSpec.load(args.spec) if args.spec else SynthSpec()
    if args.seed is not None:
        spec.seed = args.seed
    out = Path(args.out) if args.out else Path(cfg.workspace)
    corpus = generate_synthetic_benchmark(spec, out)
    ws_cfg = out / WORKSPACE_CONFIG
    if not ws_cfg.exists():
        payload = {"model": {"d": spec.d}, "text": {"embed_seed": spec.embed_seed}}
        atomic_write_bytes(ws_cfg, (json.dumps(payload, indent=2) + "\n").encode("utf-8"))
    print(f"{len(corpus.rows)} videos written under {out}")
    return EXIT_OK


COMMANDS = {"prepare-text": cmd_prepare_text, "train": cmd_train, "eval": cmd_eval,
            "score": cmd_score, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (default: <workspace>/anomize.json when present)")
    common.add_argument("--workspace", help="workspace root (env ANOMIZE_WORKSPACE, default '.')")
    common.add_argument("--seed", type=int, help="seed for initialisation and batch order")
    common.add_argument("--threads", type=int, help="BLAS thread cap; 1 gives bitwise-reproducible runs")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=[],
                        help="override a config entry, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="anomize", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-text", parents=[common], help="build descriptions, concepts and embeddings")
    p.add_argument("--mode", choices=("fixture", "client"))
    p.add_argument("--ungrouped", action="store_true", help="describe every label on its own")

    p = sub.add_parser("train", parents=[common], help="run training stages")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.add_argument("--joint", action="store_true", help="single-phase training of every module")
    p.add_argument("--from-scratch", action="store_true", help="start stage 2 from a fresh model")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs-stage1", type=int)
    p.add_argument("--epochs-stage2", type=int)

    p = sub.add_parser("eval", parents=[common], help="metric report on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="report directory (default <workspace>/runs/eval)")
    p.add_argument("--split-beta", action="store_true", help="apply per-split beta overrides")

    p = sub.add_parser("score", parents=[common], help="per-frame scores for one feature file")
    p.add_argument("features")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--spec", help="JSON generator spec")
    p.add_argument("--out", help="output directory (default the workspace)")
    return parser


def _flag_overrides(args) -> dict:
    out = parse_overrides(args.set)
    if args.seed is not None and args.command != "synth":
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    train = {"lr": getattr(args, "lr", None), "batch_size": getattr(args, "batch_size", None),
             "epochs_stage1": getattr(args, "epochs_stage1", None),
             "epochs_stage2": getattr(args, "epochs_stage2", None)}
    train = {k: v for k, v in train.items() if v is not None}
    if train:
        out.setdefault("train", {}).update(train)
    text = {}
    if getattr(args, "mode", None):
        text["mode"] = args.mode
    if getattr(args, "ungrouped", False):
        text["group_guided"] = False
    if text:
        out.setdefault("text", {}).update(text)
    return out


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, (CheckpointCorruptError, FeatureFormatError)):
        return EXIT_IO
    if isinstance(exc, (ConfigError, tb.LLMConfigError, PreconditionError, ProtocolError, ManifestError,
                        SynthSpecError, CheckpointMigrationError, tb.SchemaError, tb.AssetValidationError,
                        tb.FixtureMissError, ValueError)):
        return EXIT_CONFIG
    if isinstance(exc, (TrainingAbort, tb.TransportError)):
        return EXIT_RUNTIME
    if isinstance(exc, OSError):
        return EXIT_IO
    return None


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_run_config(args.config, args.workspace, _flag_overrides(args))
        echo_config(cfg, cfg.path("runs") / args.command, ["anomize", *argv])
        limit = threadpool_limits(limits=int(cfg.threads)) if cfg.threads else nullcontext()
        with limit:
            return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # mapped to the exit-code contract below
        code = _exit_code(exc)
        if code is None:
            raise
        detail = ""
        if isinstance(exc, TrainingAbort) and "path" in exc.diagnostic:
            detail = f" (diagnostic: {exc.diagnostic['path']})"
        print(f"anomize {args.command}: {type(exc).__name__}: {exc}{detail}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
