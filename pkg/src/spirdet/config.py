"""Model configuration and the four published variants."""
from dataclasses import dataclass, fields
from typing import Tuple


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# Blocks per stage, read from the variant table row by row (512, 256, 128, 64,
# 32); '-' rows are absent stages.  Stage 1 sits at the input resolution.
VARIANT_BLOCKS = {
    "lr": (4, 2, 2, 1),   # 256 / 128 / 64 / 32
    "t": (1, 2, 2, 1),    # 512 / 256 / 128 / 64
    "s": (1, 4, 4, 1),
    "m": (2, 6, 8, 1),
}
VARIANT_INPUT = {"lr": 256, "t": 512, "s": 512, "m": 512}
VARIANT_SPARSE_CONVS = {"lr": 2, "t": 4, "s": 4, "m": 4}
VARIANT_CHANNELS = {
    "lr": (16, 32, 64, 128),
    "t": (16, 32, 64, 128),
    "s": (16, 32, 64, 96),
    "m": (16, 32, 48, 96),
}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "lr"
    blocks_per_stage: Tuple[int, ...] = VARIANT_BLOCKS["lr"]
    channels_per_stage: Tuple[int, ...] = VARIANT_CHANNELS["lr"]
    K: int = 4
    alpha: float = 0.005
    sparse_convs: int = 2
    input_size: Tuple[int, int] = (256, 256)
    coarse_ratio: int = 8
    fine_ratio: int = 4
    coarse_hidden: int = 0          # 0 -> half the coarse-level width
    head_channels: int = 0          # 0 -> the fine-level width

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "channels_per_stage", tuple(int(c) for c in self.channels_per_stage))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        self.validate()

    @property
    def n_stages(self) -> int:
        return len(self.blocks_per_stage)

    def level_of_ratio(self, ratio: int) -> int:
        """0-based pyramid level whose resolution is 1/ratio of the input."""
        return ratio.bit_length() - 1

    @property
    def coarse_level(self) -> int:
        return self.level_of_ratio(self.coarse_ratio)

    @property
    def fine_level(self) -> int:
        return self.level_of_ratio(self.fine_ratio)

    @property
    def coarse_shape(self):
        return self.input_size[0] // self.coarse_ratio, self.input_size[1] // self.coarse_ratio

    @property
    def fine_shape(self):
        return self.input_size[0] // self.fine_ratio, self.input_size[1] // self.fine_ratio

    def coarse_width(self) -> int:
        return self.coarse_hidden or max(1, self.channels_per_stage[self.coarse_level] // 2)

    def head_width(self) -> int:
        return self.head_channels or self.channels_per_stage[self.fine_level]

    def validate(self):
        if self.variant not in VARIANT_BLOCKS and self.variant != "custom":
            raise ConfigError("variant", f"unknown variant {self.variant!r}")
        if not 1 <= self.n_stages <= 5:
            raise ConfigError("blocks_per_stage", "need 1 to 5 stages")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage", "every present stage needs at least one block")
        if len(self.channels_per_stage) != self.n_stages:
            raise ConfigError("channels_per_stage", f"need {self.n_stages} widths, got {len(self.channels_per_stage)}")
        if any(c < 1 for c in self.channels_per_stage):
            raise ConfigError("channels_per_stage", "widths must be positive")
        if self.K < 1:
            raise ConfigError("K", "need at least one parallel branch")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha", "retention ratio must lie in (0, 1]")
        if self.sparse_convs < 1:
            raise ConfigError("sparse_convs", "need at least one sparse conv")
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ConfigError("input_size", "need (H, W) with positive entries")
        for name in ("coarse_ratio", "fine_ratio"):
            r = getattr(self, name)
            if r < 1 or r & (r - 1):
                raise ConfigError(name, "must be a power of two")
        if self.coarse_ratio != 2 * self.fine_ratio:
            raise ConfigError("coarse_ratio", "must equal 2 * fine_ratio")
        if self.coarse_level > self.n_stages - 1:
            raise ConfigError("coarse_ratio", f"no pyramid level at 1/{self.coarse_ratio} with {self.n_stages} stages")
        div = 2 ** (self.n_stages - 1)
        if self.input_size[0] % div or self.input_size[1] % div:
            raise ConfigError("input_size", f"must be divisible by {div}")
        hc, wc = self.coarse_shape
        if self.alpha * hc * wc < 1:
            raise ConfigError("alpha", f"alpha * {hc} * {wc} < 1 keeps no coarse cell")
        if self.coarse_hidden < 0 or self.head_channels < 0:
            raise ConfigError("coarse_hidden", "widths must be non-negative")


def variant_config(name: str, **overrides) -> ModelConfig:
    if name not in VARIANT_BLOCKS:
        raise ConfigError("variant", f"unknown variant {name!r}")
    size = VARIANT_INPUT[name]
    base = dict(variant=name, blocks_per_stage=VARIANT_BLOCKS[name], channels_per_stage=VARIANT_CHANNELS[name],
                sparse_convs=VARIANT_SPARSE_CONVS[name], input_size=(size, size))
    base.update(overrides)
    return ModelConfig(**base)


def toy_config(**overrides) -> ModelConfig:
    """The ``lr`` block layout scaled down for 64x64 synthetic training."""
    base = dict(input_size=(64, 64), channels_per_stage=(4, 8, 16, 32), alpha=0.05,
                coarse_ratio=4, fine_ratio=2)
    base.update(overrides)
    return variant_config("lr", **base)


CONFIG_FIELDS = tuple(f.name for f in fields(ModelConfig))
