"""Flat ``key=value`` configuration shared by the CLI and the checkpoint header.

Blank lines and lines starting with ``#`` are ignored. Unknown keys are an
error, so typos never silently fall back to defaults.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .dmt import ConfigError, DmtConfig
from .numerics import SlidingWindowSpec


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyper-parameters; grid size is derived from the input frames."""

    L: int = 4
    d: int = 64
    heads: int = 4
    ffn_hidden: int = 256
    K: int = 13
    warp_k: int = 3
    warp_s: int = 1
    warp_p: int = 1
    C: int = 32
    token_selection: bool = True
    mask_activation: bool = True
    use_rfc: bool = True

    def __post_init__(self):
        if self.C < 2:
            raise ConfigError(f"C must be >= 2, got {self.C}")
        self.dmt()  # validates the transformer part

    def dmt(self, grid_dims=None) -> DmtConfig:
        return DmtConfig(
            L=self.L,
            d=self.d,
            heads=self.heads,
            ffn_hidden=self.ffn_hidden,
            K=self.K,
            warp_spec=SlidingWindowSpec(self.warp_k, self.warp_s, self.warp_p),
            grid_dims=grid_dims,
            token_selection=self.token_selection,
            mask_activation=self.mask_activation,
            use_rfc=self.use_rfc,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation and synthetic-data settings."""

    lr: float = 1e-4
    pretrain_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_rec: float = 1.0
    lambda_mig: float = 0.1
    batch: int = 2
    H: int = 16
    W: int = 16
    T: int = 4
    clips: int = 64
    mask_kind: str = "freeform"
    mask_ratio: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.lambda_rec < 0 or self.lambda_mig < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.H % 4 or self.W % 4:
            raise ConfigError(f"frame size {self.H}x{self.W} must be divisible by 4")
        if self.T < 1 or self.batch < 1 or self.clips < 1:
            raise ConfigError("T, batch and clips must be positive")


def _coerce(kind, raw: str, key: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


_KEYS = {f.name: ("model", f.type) for f in fields(ModelConfig)}
_KEYS.update({f.name: ("train", f.type) for f in fields(TrainConfig)})


def parse_config_text(text: str) -> dict:
    """Parse ``key=value`` lines into a dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _coerce(_KEYS[key][1], raw, key)
    return out


def split_config(values: dict) -> tuple[ModelConfig, TrainConfig]:
    model = {k: v for k, v in values.items() if _KEYS[k][0] == "model"}
    train = {k: v for k, v in values.items() if _KEYS[k][0] == "train"}
    return ModelConfig(**model), TrainConfig(**train)


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    with open(path, encoding="utf-8") as fh:
        return split_config(parse_config_text(fh.read()))


def model_config_text(config: ModelConfig) -> str:
    lines = []
    for key, value in asdict(config).items():
        lines.append(f"{key}={int(value) if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


def parse_model_config(text: str) -> ModelConfig:
    values = parse_config_text(text)
    extra = [k for k in values if _KEYS[k][0] != "model"]
    if extra:
        raise ConfigError(f"model config block holds non-model keys {extra}")
    return ModelConfig(**values)
