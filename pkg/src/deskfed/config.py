"""Experiment configuration: plain-text key=value files.

Schema: one `key = value` per line, `#` starts a comment, blank lines
ignored. Every key matches a field of ExperimentConfig below; unknown and
duplicate keys are rejected by name. Fields left out fall back to the
defaults and are echoed to the log so a run's effective configuration is
always visible. serialize_config(parse_config(p)) round-trips exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

from .defects import KINDS
from .nets import LayerSpec

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "rule_based", "dearfsac", "dearfsac_nodefect_shadow")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "synthetic"          # synthetic | idx
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    synth_classes: int = 10
    synth_per_class: int = 100
    synth_features: int = 784
    synth_sigma: float = 0.1
    partition: str = "iid"              # iid | noniid
    shards_per_client: int = 2
    val_holdout: int = 1000

    # federation
    num_clients: int = 20
    select_k: int = 5
    model_layers: str = "784,32,10"     # dims; relu hidden, softmax final
    rounds: int = 30
    repeats: int = 3
    local_epochs: int = 1
    local_batch: int = 32
    local_lr: float = 0.05

    # defects
    defect_m: int = 0
    defect_degree: float = 0.0
    defect_kinds: str = "data_contamination,comm_loss,label_shuffle"

    # strategy / checkpoints
    strategy: str = "fedavg"
    quality_checkpoint: str = ""
    agent_checkpoint: str = ""

    # parameter auto-encoder
    embed_dim: int = 64
    enc_hidden: int = 256
    quality_hidden: int = 32
    quality_epochs: int = 60
    quality_lr: float = 1e-3
    quality_batch: int = 32
    quality_lam2: float = 0.5           # mark-loss weight vs reconstruction
    corpus_models: int = 200
    corpus_degree: float = 0.5

    # rewards
    loss_clip: float = 5.0
    kappa: float = 64.0
    target_delta: float = 0.95
    beta1: float = 0.5
    beta2: float = 0.4
    beta3: float = 0.1

    # replay
    buffer_capacity: int = 100_000
    buffer_eta: float = 0.996
    buffer_c_min: int = 2500
    buffer_nu: float = 0.6
    buffer_epsilon: float = 1e-3

    # agent
    episodes: int = 60
    agent_hidden: int = 256
    agent_lr: float = 3e-4
    gamma: float = 0.99
    rho: float = 0.995
    target_entropy: str = "auto"        # auto -> -K, or a float
    updates_per_round: int = 1
    update_batch: int = 64
    agent_warmup: int = 500             # critic-only steps before actor moves

    seed: int = 0

    # -- derived views --

    def kinds_tuple(self) -> tuple:
        raw = self.defect_kinds.strip()
        return tuple(k.strip() for k in raw.split(",")) if raw else ()

    def beta(self) -> tuple:
        return (self.beta1, self.beta2, self.beta3)

    def client_manifest(self) -> tuple:
        dims = [int(x) for x in self.model_layers.split(",")]
        if len(dims) < 2:
            raise ConfigError("model_layers needs at least two dims")
        specs = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            act = "softmax" if i == len(dims) - 2 else "relu"
            specs.append(LayerSpec(a, b, act))
        return tuple(specs)

    def resolved_target_entropy(self) -> float:
        if self.target_entropy == "auto":
            return -float(self.select_k)
        return float(self.target_entropy)


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(
            f"config key {name!r}: cannot read {raw!r} as {kind.__name__}"
        ) from exc


def parse_config_text(text: str) -> ExperimentConfig:
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    # dataclass stores annotations as strings under future-annotations
    kind_of = {"int": int, "float": float, "str": str, "bool": bool}
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, raw = body.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        kind = types[key] if isinstance(types[key], type) else kind_of[types[key]]
        seen[key] = _coerce(key, kind, raw)
    cfg = ExperimentConfig(**seen)
    for f in fields(ExperimentConfig):
        if f.name not in seen:
            log.info("config default: %s = %r", f.name, getattr(cfg, f.name))
    validate_config(cfg)
    return cfg


def parse_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float)
                     else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: ExperimentConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(ExperimentConfig)}


def validate_config(cfg: ExperimentConfig) -> None:
    def bad(msg):
        raise ConfigError(msg)

    if cfg.dataset not in ("synthetic", "idx"):
        bad(f"dataset must be synthetic or idx, got {cfg.dataset!r}")
    if cfg.dataset == "idx":
        for name in ("idx_train_images", "idx_train_labels",
                     "idx_test_images", "idx_test_labels"):
            if not getattr(cfg, name):
                bad(f"dataset=idx requires {name}")
    if cfg.partition not in ("iid", "noniid"):
        bad(f"partition must be iid or noniid, got {cfg.partition!r}")
    if cfg.strategy not in STRATEGIES:
        bad(f"strategy {cfg.strategy!r} not one of {STRATEGIES}")
    if cfg.num_clients < 1:
        bad("num_clients must be >= 1")
    if not 1 <= cfg.select_k <= cfg.num_clients:
        bad(f"select_k={cfg.select_k} must lie in [1, num_clients="
            f"{cfg.num_clients}]")
    if cfg.rounds < 1:
        bad("rounds must be >= 1")
    if cfg.repeats < 1 or cfg.episodes < 1:
        bad("repeats and episodes must be >= 1")
    if not 0 <= cfg.defect_m <= cfg.num_clients:
        bad(f"defect_m={cfg.defect_m} must lie in [0, num_clients="
            f"{cfg.num_clients}]")
    if not 0.0 <= cfg.defect_degree <= 1.0:
        bad("defect_degree must lie in [0, 1]")
    unknown = [k for k in cfg.kinds_tuple() if k not in KINDS]
    if unknown:
        bad(f"defect_kinds contains unknown kinds {unknown}")
    if cfg.defect_m > 0 and not cfg.kinds_tuple():
        bad("defect_kinds must be non-empty when defect_m > 0")
    cfg.client_manifest()  # raises ConfigError on malformed dims
    for name in ("local_epochs", "local_batch", "val_holdout", "embed_dim",
                 "enc_hidden", "quality_hidden", "quality_epochs",
                 "quality_batch", "corpus_models", "agent_hidden",
                 "updates_per_round", "update_batch", "buffer_capacity",
                 "buffer_c_min", "synth_classes", "synth_per_class",
                 "synth_features", "shards_per_client"):
        if getattr(cfg, name) < 1:
            bad(f"{name} must be >= 1")
    for name in ("local_lr", "quality_lr", "agent_lr", "loss_clip",
                 "buffer_epsilon"):
        if getattr(cfg, name) <= 0:
            bad(f"{name} must be > 0")
    if cfg.quality_lam2 < 0:
        bad("quality_lam2 must be >= 0")
    if cfg.kappa <= 1.0:
        bad("kappa must be > 1")
    if not 0.0 < cfg.target_delta <= 1.0:
        bad("target_delta must lie in (0, 1]")
    if min(cfg.beta()) < 0:
        bad("beta weights must be >= 0")
    if not 0.0 < cfg.buffer_eta <= 1.0:
        bad("buffer_eta must lie in (0, 1]")
    if cfg.agent_warmup < 0:
        bad("agent_warmup must be >= 0")
    if cfg.buffer_c_min > cfg.buffer_capacity:
        bad("buffer_c_min cannot exceed buffer_capacity")
    if not 0.0 <= cfg.gamma <= 1.0:
        bad("gamma must lie in [0, 1]")
    if not 0.0 < cfg.rho < 1.0:
        bad("rho must lie in (0, 1)")
    if not 0.0 <= cfg.corpus_degree <= 1.0:
        bad("corpus_degree must lie in [0, 1]")
    if cfg.target_entropy != "auto":
        try:
            float(cfg.target_entropy)
        except ValueError:
            bad("target_entropy must be 'auto' or a number")
