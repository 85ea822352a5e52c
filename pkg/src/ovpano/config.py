"""Pipeline configuration: one TOML file with a flat table per stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .embed import DEFAULT_LOGIT_SCALE, DEFAULT_THRESHOLD, NEGATIVE_PROMPTS, POSITIVE_PROMPTS
from .model import ConfigError, MoeConfig


@dataclass
class PathsConfig:
    workdir: str = "run"
    cloud: str = "scene.ply"
    views: str = "views"
    features: str = "features"
    filter: str = "filter.json"
    field: str = "field.hff"
    coverage_views: str = "coverage_views"
    labels: str = "labels.ply"
    hierarchy: str = "hierarchy"
    checkpoint: str = "model.hck"
    train_log: str = "train_log.jsonl"
    prediction: str = "prediction.ply"
    pred_field: str = "prediction.hff"
    query: str = "query.ply"
    scores: str = "scores.json"

    def resolve(self, name: str) -> Path:
        """Artifact path; relative entries live under ``workdir``."""
        p = Path(getattr(self, name))
        return p if p.is_absolute() else Path(self.workdir) / p


@dataclass
class CloudConfig:
    voxel: float = 0.0  # 0 keeps every point


@dataclass
class ProviderConfig:
    kind: str = "mock"  # "mock" or "directory"
    seed: int = 0
    dim: int = 256
    palette: Dict[str, str] = field(default_factory=lambda: {"0,0,0": "a blank image"})
    traits: Dict[str, List[str]] = field(default_factory=dict)


@dataclass
class RenderConfig:
    spacing: float = 4.0
    margin: float = 1.2
    width: int = 96
    height: int = 96
    fx: float = 48.0
    fy: float = 48.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    splat_px: int = 3


@dataclass
class FilterConfig:
    positives: List[str] = field(default_factory=lambda: list(POSITIVE_PROMPTS))
    negatives: List[str] = field(default_factory=lambda: list(NEGATIVE_PROMPTS))
    threshold: float = DEFAULT_THRESHOLD
    logit_scale: float = DEFAULT_LOGIT_SCALE


@dataclass
class LiftConfig:
    tau_rel: float = 0.05
    target_coverage: float = 0.90
    max_rounds: int = 5
    cube_radius: float = 2.0


@dataclass
class LabelConfig:
    k: int = 2
    eps_scale: float = 2.0
    base_minpts: int = 4
    max_iter: int = 100


@dataclass
class SuperpointConfig:
    levels: int = 3
    lams: List[float] = field(default_factory=lambda: [0.01, 0.1, 1.0])
    k_nn: int = 10
    color_weight: float = 1.0


@dataclass
class ModelConfig:
    hidden: int = 32
    n_experts: int = 4
    heads: int = 2
    head_layers: int = 3
    margin: float = 0.2
    w_rec: float = 1.0
    w_tri: float = 0.5
    w_bal: float = 0.01
    w_aff: float = 1.0
    lr: float = 0.05
    steps: int = 200


@dataclass
class InferConfig:
    affinity_threshold: float = 0.5


@dataclass
class QueryConfig:
    text: str = ""
    threshold: float = 0.5


@dataclass
class EvalConfig:
    label_set: List[str] = field(default_factory=list)


SECTIONS = {
    "paths": PathsConfig, "cloud": CloudConfig, "provider": ProviderConfig, "render": RenderConfig,
    "filter": FilterConfig, "lift": LiftConfig, "label": LabelConfig,
    "superpoint": SuperpointConfig, "model": ModelConfig, "infer": InferConfig,
    "query": QueryConfig, "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    lift: LiftConfig = field(default_factory=LiftConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    superpoint: SuperpointConfig = field(default_factory=SuperpointConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    defaults: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("defaults")
        return d

    def moe(self, levels: int, feat_dim: int) -> MoeConfig:
        m = self.model
        return MoeConfig(levels=levels, hidden=m.hidden, feat_dim=feat_dim, n_experts=m.n_experts,
                         heads=m.heads, head_layers=m.head_layers, margin=m.margin,
                         w_rec=m.w_rec, w_tri=m.w_tri, w_bal=m.w_bal, w_aff=m.w_aff,
                         lr=m.lr, seed=self.seed)

    def palette(self) -> Dict[Tuple[int, int, int], str]:
        out = {}
        for key, token in self.provider.palette.items():
            try:
                rgb = tuple(int(c) for c in key.split(","))
            except ValueError:
                raise ConfigError(f"palette key {key!r} is not 'r,g,b'") from None
            if len(rgb) != 3 or not all(0 <= c <= 255 for c in rgb):
                raise ConfigError(f"palette key {key!r} is not an 8-bit 'r,g,b' triple")
            out[rgb] = token
        return out


def _coerce(section: str, name: str, value, default):
    if default is None or isinstance(value, type(default)):
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"{section}.{name}: expected {type(default).__name__}, got {value!r}")


def build_config(data: dict) -> PipelineConfig:
    """Fill a :class:`PipelineConfig` from parsed TOML, recording every default used."""
    data = dict(data)
    cfg = PipelineConfig()
    if "seed" in data:
        cfg.seed = _coerce("", "seed", data.pop("seed"), 0)
    else:
        cfg.defaults.append("seed")
    for section, cls in SECTIONS.items():
        given = data.pop(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a table")
        obj = getattr(cfg, section)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(given) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
        for f in fields(cls):
            if f.name in given:
                setattr(obj, f.name, _coerce(section, f.name, given[f.name], getattr(obj, f.name)))
            else:
                cfg.defaults.append(f"{section}.{f.name}")
    if data:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(data))}")
    validate(cfg)
    return cfg


def validate(cfg: PipelineConfig) -> None:
    if cfg.provider.kind not in ("mock", "directory"):
        raise ConfigError(f"provider.kind must be 'mock' or 'directory', not {cfg.provider.kind!r}")
    if not 0 < cfg.filter.threshold < 1:
        raise ConfigError("filter.threshold must lie in (0, 1)")
    if len(cfg.superpoint.lams) < cfg.superpoint.levels:
        raise ConfigError("superpoint.lams needs one value per level")
    if cfg.label.k < 1:
        raise ConfigError("label.k must be >= 1")
    if not cfg.cloud.voxel >= 0:
        raise ConfigError("cloud.voxel must be >= 0")
    if cfg.model.steps < 0:
        raise ConfigError("model.steps must be >= 0")
    if not 0 < cfg.infer.affinity_threshold < 1:
        raise ConfigError("infer.affinity_threshold must lie in (0, 1)")
    cfg.palette()


def parse_override(text: str) -> Tuple[str, object]:
    """``section.key=value``; the value is read as TOML, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        try:
            data = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return build_config(data)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} as TOML")


def dump_config(cfg: PipelineConfig) -> str:
    """TOML text that :func:`load_config` reads back into an equal config."""
    lines = [f"seed = {cfg.seed}"]
    for section in SECTIONS:
        values = asdict(getattr(cfg, section))
        tables = {k: v for k, v in values.items() if isinstance(v, dict)}
        lines.append(f"\n[{section}]")
        for k, v in values.items():
            if v is None or k in tables:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        for k, v in tables.items():
            lines.append(f"\n[{section}.{k}]")
            lines.extend(f"{json.dumps(kk)} = {_toml_value(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"
