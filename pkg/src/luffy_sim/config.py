"""Domain types and configuration for the modeled cluster, model and batch."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import yaml

GATE_WEIGHT_TOL = 1e-6


class ConfigError(ValueError):
    """Raised when a configuration file or override cannot be applied."""


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    d_model: int = 64
    d_hidden: int = 128
    experts_per_layer: int = 8
    top_k: int = 2
    bytes_per_scalar: int = 4
    # forward + backward ~ 3x forward
    train_multiplier: float = 3.0

    @property
    def token_bytes(self) -> int:
        return self.d_model * self.bytes_per_scalar


# Model shapes used in the evaluation (blocks, d_model, d_hidden).
PAPER_MODELS: Dict[str, Dict[str, int]] = {
    "transformer-xl": dict(num_blocks=18, d_model=1024, d_hidden=4096),
    "bert-large": dict(num_blocks=24, d_model=768, d_hidden=3072),
    "gpt2": dict(num_blocks=12, d_model=768, d_hidden=3072),
}


def default_placement(experts_per_layer: int, num_devices: int) -> Dict[int, int]:
    """Round-robin expert placement: expert ``e`` lives on device ``e % num_devices``."""
    if experts_per_layer < 1 or num_devices < 1:
        raise ValueError("experts_per_layer and num_devices must be >= 1")
    return {e: e % num_devices for e in range(experts_per_layer)}


@dataclass(frozen=True)
class ClusterConfig:
    num_devices: int = 8
    compute_speed: float = 1.0e7  # ops per ms
    link_bandwidth: float = 1.0e5  # bytes per ms
    # None -> resolved per batch, see effective_capacity()
    device_capacity: Optional[int] = None
    expert_placement: Optional[Dict[int, int]] = None

    def placement(self, experts_per_layer: int) -> Dict[int, int]:
        if self.expert_placement is None:
            return default_placement(experts_per_layer, self.num_devices)
        return dict(self.expert_placement)

    def effective_capacity(self, total_tokens: int) -> int:
        if self.device_capacity is not None:
            return self.device_capacity
        return math.ceil(total_tokens / self.num_devices * 1.5)


@dataclass(frozen=True)
class TokenRecord:
    token_id: int
    seq_id: int
    position: int
    embedding: Tuple[float, ...]
    gates: Tuple[Tuple[int, float], ...]

    @property
    def experts(self) -> Tuple[int, ...]:
        return tuple(e for e, _ in self.gates)


@dataclass(frozen=True)
class SequenceRecord:
    seq_id: int
    home_device: int
    token_ids: Tuple[int, ...]
    # per-expert routing preference; None when unknown (e.g. external traces)
    affinity: Optional[Tuple[float, ...]] = None

    @property
    def length(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class BatchState:
    sequences: Tuple[SequenceRecord, ...]
    tokens: Tuple[TokenRecord, ...]
    block_index: int = 0
    loss_initial: float = 1.0
    loss_prev: float = 1.0

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)

    def token_index(self) -> Dict[int, int]:
        return {t.token_id: i for i, t in enumerate(self.tokens)}


def validate(model: ModelConfig, cluster: ClusterConfig) -> List[str]:
    """Return every violated invariant as a message; an empty list means valid."""
    problems: List[str] = []
    for name in ("num_blocks", "d_model", "d_hidden", "experts_per_layer", "top_k"):
        if getattr(model, name) < 1:
            problems.append(f"{name} must be >= 1")
    if model.top_k > model.experts_per_layer:
        problems.append("top_k exceeds experts")
    if model.bytes_per_scalar not in (2, 4):
        problems.append("bytes_per_scalar must be 2 or 4")
    if model.train_multiplier < 1:
        problems.append("train_multiplier must be >= 1")

    if cluster.num_devices < 1:
        problems.append("num_devices must be >= 1")
    if not cluster.compute_speed > 0:
        problems.append("compute_speed must be > 0")
    if not cluster.link_bandwidth > 0:
        problems.append("link_bandwidth must be > 0")
    if cluster.device_capacity is not None and cluster.device_capacity < 1:
        problems.append("device_capacity must be >= 1")

    if cluster.num_devices >= 1 and model.experts_per_layer >= 1:
        placement = cluster.placement(model.experts_per_layer)
        for e in range(model.experts_per_layer):
            if e not in placement:
                problems.append(f"expert {e} has no device")
            elif not 0 <= placement[e] < cluster.num_devices:
                problems.append(f"expert {e} placed on unknown device {placement[e]}")
        for e in placement:
            if not 0 <= e < model.experts_per_layer:
                problems.append(f"placement names unknown expert {e}")
    return problems


def validate_batch(batch: BatchState, model: ModelConfig, cluster: ClusterConfig) -> List[str]:
    """Check batch-level invariants against the configs."""
    problems: List[str] = []
    placement = cluster.placement(model.experts_per_layer)
    seq_ids = {s.seq_id for s in batch.sequences}
    by_id = batch.token_index()
    if batch.block_index < 0:
        problems.append("block_index must be >= 0")
    if not (batch.loss_initial > 0 and batch.loss_prev > 0):
        problems.append("losses must be > 0")
    for s in batch.sequences:
        if s.length < 1:
            problems.append(f"sequence {s.seq_id} is empty")
        if not 0 <= s.home_device < cluster.num_devices:
            problems.append(f"sequence {s.seq_id} has unknown home device {s.home_device}")
        positions = sorted(batch.tokens[by_id[t]].position for t in s.token_ids if t in by_id)
        if positions != list(range(s.length)):
            problems.append(f"sequence {s.seq_id} positions are not 0..{s.length - 1}")
    for t in batch.tokens:
        if t.seq_id not in seq_ids:
            problems.append(f"token {t.token_id} references unknown sequence {t.seq_id}")
        if len(t.embedding) != model.d_model:
            problems.append(f"token {t.token_id} embedding has length {len(t.embedding)}")
        experts = t.experts
        if len(experts) != model.top_k or len(set(experts)) != len(experts):
            problems.append(f"token {t.token_id} needs {model.top_k} distinct experts")
        if any(e not in placement for e in experts):
            problems.append(f"token {t.token_id} routes to an unplaced expert")
        weights = [w for _, w in t.gates]
        if any(w <= 0 for w in weights) or abs(sum(weights) - 1.0) > GATE_WEIGHT_TOL:
            problems.append(f"token {t.token_id} gate weights invalid")
    return problems


# ---------------------------------------------------------------------------
# Simulation-wide settings and config file handling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkloadSpec:
    batch_size: int = 64
    length_min: int = 16
    length_max: int = 128
    length_shape: str = "uniform"  # or "bimodal"
    bias_concentration: float = 0.1
    cluster_count: int = 2
    cluster_tightness: float = 0.9
    drift: float = 0.02
    # chance that a token's gate is re-drawn from its sequence affinity at a new block
    regate_prob: float = 0.05
    seed: int = 0

    def problems(self) -> List[str]:
        out = []
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not 1 <= self.length_min <= self.length_max:
            out.append("length bounds must satisfy 1 <= min <= max")
        if self.length_shape not in ("uniform", "bimodal"):
            out.append(f"unknown length_shape {self.length_shape!r}")
        if not self.bias_concentration > 0:
            out.append("bias_concentration must be > 0")
        if self.cluster_count < 1:
            out.append("cluster_count must be >= 1")
        if not 0 < self.cluster_tightness < 1:
            out.append("cluster_tightness must be in (0, 1)")
        if self.drift < 0:
            out.append("drift must be >= 0")
        if not 0 <= self.regate_prob <= 1:
            out.append("regate_prob must be in [0, 1]")
        return out


@dataclass(frozen=True)
class LossModel:
    l_ini: float = 10.0
    l_final: float = 2.0
    kappa: float = 0.05
    trace: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not (self.l_ini >= self.l_final > 0):
            raise ValueError("loss model needs l_ini >= l_final > 0")
        if not self.kappa > 0:
            raise ValueError("loss decay kappa must be > 0")

    def loss(self, t: int) -> float:
        if self.trace is not None and t < len(self.trace):
            return float(self.trace[t])
        if math.isinf(self.kappa):
            return self.l_final if t > 0 else self.l_ini
        return self.l_final + (self.l_ini - self.l_final) * math.exp(-self.kappa * t)


@dataclass(frozen=True)
class SimConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    loss: LossModel = field(default_factory=LossModel)
    # cost
    alpha: float = 0.44
    latency_ms: float = 0.0
    # migration
    q: int = 2
    migration_objective: str = "min"
    # condensation
    S1: float = 0.8
    S2: float = 0.2
    history_max_age: int = 2
    threshold_mode: str = "adaptive"
    # baselines
    hyt_top_m: int = 1

    def problems(self) -> List[str]:
        out = validate(self.model, self.cluster) + self.workload.problems()
        if self.alpha < 0:
            out.append("alpha must be >= 0")
        if self.latency_ms < 0:
            out.append("latency_ms must be >= 0")
        if self.q < 1:
            out.append("q must be >= 1")
        if self.migration_objective not in ("min", "max"):
            out.append("migration_objective must be 'min' or 'max'")
        if not 0 <= self.S2 < self.S1 <= 1:
            out.append("need 0 <= S2 < S1 <= 1")
        if self.history_max_age < 0:
            out.append("history_max_age must be >= 0")
        if self.hyt_top_m < 0:
            out.append("hyt_top_m must be >= 0")
        try:
            parse_threshold_mode(self.threshold_mode)
        except ValueError as exc:
            out.append(str(exc))
        return out

    def to_dict(self) -> Dict[str, Any]:
        """Flat dict using the config-file key names."""
        out: Dict[str, Any] = {}
        for sub in (self.model, self.cluster):
            for f in fields(sub):
                out[f.name] = getattr(sub, f.name)
        if out.get("expert_placement") is not None:
            out["expert_placement"] = {str(k): v for k, v in out["expert_placement"].items()}
        for name in _SIM_KEYS:
            out[name] = getattr(self, name)
        out["workload"] = {f.name: getattr(self.workload, f.name) for f in fields(self.workload)}
        loss = {f.name: getattr(self.loss, f.name) for f in fields(self.loss)}
        if loss["trace"] is not None:
            loss["trace"] = list(loss["trace"])
        out["loss"] = loss
        return out


_MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))
_CLUSTER_KEYS = tuple(f.name for f in fields(ClusterConfig))
_SIM_KEYS = ("alpha", "latency_ms", "q", "migration_objective", "S1", "S2",
             "history_max_age", "threshold_mode", "hyt_top_m")


def parse_threshold_mode(mode: str) -> Optional[float]:
    """``adaptive`` -> None, ``fixed:<h>`` -> h."""
    if mode == "adaptive":
        return None
    if mode.startswith("fixed:"):
        try:
            value = float(mode.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad threshold_mode {mode!r}") from None
        if not 0 <= value <= 1:
            raise ValueError(f"fixed threshold must be in [0, 1], got {value}")
        return value
    raise ValueError(f"bad threshold_mode {mode!r}")


def _coerce(value: Any, like: Any) -> Any:
    if isinstance(value, str) and not isinstance(like, str):
        value = yaml.safe_load(value)
    if isinstance(like, bool):
        return bool(value)
    if isinstance(like, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(like, float) and isinstance(value, int):
        return float(value)
    return value


def _typed_replace(obj, updates: Dict[str, Any]):
    kwargs = {}
    for key, value in updates.items():
        current = getattr(obj, key)
        kwargs[key] = _coerce(value, current) if current is not None else (
            yaml.safe_load(value) if isinstance(value, str) else value)
    return replace(obj, **kwargs)


def config_from_dict(data: Dict[str, Any], base: Optional[SimConfig] = None) -> SimConfig:
    """Build a SimConfig from a flat mapping; unknown keys raise ConfigError."""
    cfg = base or SimConfig()
    data = dict(data)
    model_up, cluster_up, sim_up = {}, {}, {}
    workload_up = dict(data.pop("workload", None) or {})
    loss_up = dict(data.pop("loss", None) or {})
    for key, value in data.items():
        if key.startswith("workload."):
            workload_up[key.split(".", 1)[1]] = value
        elif key.startswith("loss."):
            loss_up[key.split(".", 1)[1]] = value
        elif key in _MODEL_KEYS:
            model_up[key] = value
        elif key in _CLUSTER_KEYS:
            cluster_up[key] = value
        elif key in _SIM_KEYS:
            sim_up[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if "expert_placement" in cluster_up and cluster_up["expert_placement"] is not None:
        raw = cluster_up["expert_placement"]
        if isinstance(raw, str):
            raw = yaml.safe_load(raw)
        if isinstance(raw, list):
            raw = dict(enumerate(raw))
        cluster_up["expert_placement"] = {int(k): int(v) for k, v in raw.items()}
    for key in workload_up:
        if not hasattr(cfg.workload, key):
            raise ConfigError(f"unknown workload key {key!r}")
    for key in loss_up:
        if not hasattr(cfg.loss, key):
            raise ConfigError(f"unknown loss key {key!r}")
    try:
        model = _typed_replace(cfg.model, model_up)
        cluster = cluster_up.pop("expert_placement", cfg.cluster.expert_placement)
        cluster = replace(_typed_replace(cfg.cluster, cluster_up), expert_placement=cluster)
        workload = _typed_replace(cfg.workload, workload_up)
        if loss_up.get("trace") is not None:
            loss_up["trace"] = tuple(float(x) for x in loss_up["trace"])
        loss = _typed_replace(cfg.loss, loss_up)
        return _typed_replace(replace(cfg, model=model, cluster=cluster, workload=workload,
                                      loss=loss), sim_up)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def read_config_file(path: str | Path) -> Dict[str, Any]:
    """Parse a JSON (``.json``) or YAML config file into a mapping."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping")
    return data


def parse_overrides(overrides: Sequence[str]) -> Dict[str, str]:
    out = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = (),
                data: Optional[Dict[str, Any]] = None) -> SimConfig:
    """Build a validated SimConfig from a file (or mapping) plus ``key=value`` overrides."""
    if data is None:
        data = read_config_file(path) if path is not None else {}
    cfg = config_from_dict(data)
    extra = parse_overrides(overrides)
    if extra:
        cfg = config_from_dict(extra, base=cfg)
    problems = cfg.problems()
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg
