"""Pipeline configuration and its flat ``key = value`` text format."""

from dataclasses import dataclass, field, fields, asdict


@dataclass
class PipelineConfig:
    # grouping
    sigma: float = 0.4
    patch_size: float = 1.0
    K: int = 32
    strict_grouping: bool = False
    # sampling
    T_s: int = 256
    lam: float = 0.18
    delta: float = 50.0
    hash_capacity: int = 4099
    sampling: str = "dfvs"
    voxel_size: float = 0.18
    random_representative: bool = False
    # graph
    r: float = 0.4
    pointnet_channels: list = field(default_factory=lambda: [16, 16])
    k: int = 8
    T: int = 3
    iter_dims: list = field(default_factory=lambda: [32, 32, 64])
    # head
    embed_dim: int = 256
    att_hidden: int = 64
    head_hidden: int = 256
    dropout: float = 0.1
    aggregation: str = "max"
    # objectives
    alpha: float = 1.0
    positive_iou: float = 0.55
    # fusion
    fusion: bool = False
    image_channels: int = 32
    fusion_mid: int = 64
    # reproducibility
    seed: int = 0

    def __post_init__(self):
        positive = ["patch_size", "K", "T_s", "lam", "delta", "hash_capacity", "r", "k", "embed_dim",
                    "att_hidden", "head_hidden", "voxel_size", "image_channels", "fusion_mid"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.T < 0 or len(self.iter_dims) != self.T:
            raise ValueError("iter_dims must list one output width per graph iteration")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def replace(self, **changes):
        d = asdict(self)
        d.update(changes)
        return PipelineConfig(**d)


_TYPES = {f.name: f.type for f in fields(PipelineConfig)}


def _parse_value(name, raw):
    kind = _TYPES[name]
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (list, "list"):
        return [int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip()]
    return raw


def parse_overrides(pairs):
    """``{"key": "raw string"}`` -> typed values; unknown keys are errors."""
    out = {}
    for key, raw in pairs.items():
        if key not in _TYPES:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def loads_config(text, base=None):
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        pairs[key.strip()] = raw
    base = base or PipelineConfig()
    return base.replace(**parse_overrides(pairs))


def load_config(path, base=None):
    with open(path) as fh:
        return loads_config(fh.read(), base)


def dumps_config(cfg):
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"

