"""Model/runtime configuration: a documented key=value text format.

Lines are KEY=VALUE, '#' starts a comment. Unknown keys are rejected. The same
text travels inside model containers (entry "__config__") so a saved model is
self-describing; a config file on the command line overrides runtime keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

from .codebook import DEFAULT_BASES, ApotCodebook, build_codebook

VARIANT_WIDTHS = {"tiny": 192, "small": 384, "base": 768}


@dataclass(frozen=True)
class ModelConfig:
    # architecture
    variant: str = "tiny"
    d_model: int = 0  # 0 = from variant table
    depth: int = 24
    state_dim: int = 16
    expand: int = 2
    dt_rank: int = 0  # 0 = ceil(d_model / 16)
    conv_kernel: int = 4
    patch: int = 16
    n_classes: int = 1000
    norm: str = "rms"  # rms | layer
    norm_eps: float = 1e-5
    cls_position: str = "middle"  # middle | integer index
    # quantization
    weight_bits: int = 4
    block_size: int = 32
    coarse_exponents: tuple[int, ...] = ()  # () = default basis for weight_bits
    fine_exponents: tuple[int, ...] = ()
    alpha: float = 0.5
    smooth: bool = True
    act_mode: str = "dynamic"  # dynamic | static
    act_granularity: str = "per_token"  # per_token | per_tensor
    calib_samples: int = 8
    # engine
    tile: int = 32
    preshift: int = 8
    act_entries: int = 256
    act_range: float = 8.0
    exp_mode: str = "exact"
    n_b: int = 16

    def __post_init__(self) -> None:
        if self.variant not in VARIANT_WIDTHS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.norm not in ("rms", "layer"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.depth < 1 or self.patch < 1 or self.block_size < 1:
            raise ValueError("depth, patch and block_size must be positive")

    @property
    def width(self) -> int:
        return self.d_model if self.d_model else VARIANT_WIDTHS[self.variant]

    @property
    def e_dim(self) -> int:
        return self.expand * self.width

    @property
    def dt_rank_eff(self) -> int:
        return self.dt_rank if self.dt_rank else math.ceil(self.width / 16)

    def codebook(self) -> ApotCodebook:
        if self.coarse_exponents or self.fine_exponents:
            return build_codebook(self.coarse_exponents, self.fine_exponents)
        return build_codebook(*DEFAULT_BASES[self.weight_bits])

    def tokens(self, resolution: int) -> int:
        if resolution % self.patch:
            raise ValueError(f"resolution {resolution} not divisible by patch {self.patch}")
        return (resolution // self.patch) ** 2 + 1  # patches + CLS


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def config_to_text(cfg: ModelConfig, extra: dict[str, str] | None = None) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}" for f in fields(cfg)]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> tuple[ModelConfig, dict[str, str]]:
    """Parse key=value text; returns (config, leftover non-config keys)."""
    field_types = {f.name: f for f in fields(ModelConfig)}
    kwargs: dict = {}
    extra: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected KEY=VALUE, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in field_types:
            extra[key] = value
            continue
        default = field_types[key].default
        if isinstance(default, bool):
            if value not in ("true", "false"):
                raise ValueError(f"config key {key}: expected true/false, got {value!r}")
            kwargs[key] = value == "true"
        elif isinstance(default, int):
            kwargs[key] = int(value)
        elif isinstance(default, float):
            kwargs[key] = float(value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(int(x) for x in value.split(",") if x.strip())
        else:
            kwargs[key] = value
    return ModelConfig(**kwargs), extra


def load_config_file(path: str, base: ModelConfig | None = None) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        cfg, extra = parse_config_text(fh.read())
    if extra:
        unknown = ", ".join(sorted(extra))
        raise ValueError(f"{path}: unknown config keys: {unknown}")
    if base is not None:
        overrides = {}
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh.read().splitlines():
                line = raw.split("#", 1)[0].strip()
                if line and "=" in line:
                    overrides[line.split("=", 1)[0].strip()] = None
        cfg = replace(base, **{k: getattr(cfg, k) for k in overrides})
    return cfg
