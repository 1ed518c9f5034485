"""A small U-shaped encoder-decoder with PIP instances on its skip connections."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .layers import Conv1x1, Conv3x3, ConvBlock, Module
from .pip import PIPBlock, PipConfig


@dataclass
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    blocks_per_level: int = 2
    image_size: int = 64
    T: int = 5
    bypass_pip: bool = False
    # One PipConfig per skip; empty means "derive from the level shapes".
    pip_configs: list = field(default_factory=list)

    def __post_init__(self):
        if self.levels < 2:
            raise ContractError("levels must be >= 2")
        if self.base_channels < 1 or self.blocks_per_level < 0:
            raise ContractError("channel and block counts must be positive")
        self.pip_configs = [p if isinstance(p, PipConfig) else PipConfig(**p) for p in self.pip_configs]
        if self.pip_configs and len(self.pip_configs) != self.n_skips:
            raise ContractError(f"need one PipConfig per skip ({self.n_skips}), got {len(self.pip_configs)}")

    @property
    def n_skips(self) -> int:
        return self.levels - 1

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def skip_pip_configs(self) -> list[PipConfig]:
        if self.pip_configs:
            return self.pip_configs
        out = []
        for level in range(self.n_skips):
            side = max(self.image_size // (4 * 2 ** level), 1)
            out.append(PipConfig(c=self.channels(level), h=side, w=side, T=self.T))
        return out


class UNet(Module):
    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        L = config.levels
        ch = config.channels
        self.stem = Conv3x3(3, ch(0), rng)
        self.enc = [[ConvBlock(ch(l), rng) for _ in range(config.blocks_per_level)] for l in range(L - 1)]
        self.down = [Conv3x3(ch(l), ch(l + 1), rng, stride=2) for l in range(L - 1)]
        self.mid = [ConvBlock(ch(L - 1), rng) for _ in range(config.blocks_per_level)]
        self.up = [Conv3x3(ch(l + 1), ch(l), rng) for l in range(L - 1)]
        self.fuse = [Conv1x1(2 * ch(l), ch(l), rng) for l in range(L - 1)]
        self.dec = [[ConvBlock(ch(l), rng) for _ in range(config.blocks_per_level)] for l in range(L - 1)]
        self.head = Conv3x3(ch(0), 3, rng)
        self.head.weight.data *= 0.1
        if config.bypass_pip:
            self.pips = []
        else:
            self.pips = [PIPBlock(ch(l), pc, rng) for l, pc in enumerate(config.skip_pip_configs())]

    def named_parameters(self, prefix: str = ""):
        # nested block lists are flattened level by level
        for name, value in vars(self).items():
            if name in ("enc", "dec"):
                for l, blocks in enumerate(value):
                    for i, blk in enumerate(blocks):
                        yield from blk.named_parameters(f"{prefix}{name}.{l}.{i}.")
        yield from super().named_parameters(prefix)

    def check_input(self, shape) -> None:
        H, W = shape[-2:]
        k = 2 ** (self.config.levels - 1)
        if H % k or W % k:
            raise ContractError(f"image {H}x{W} must be divisible by {k}; pad to "
                                f"{-(-H // k) * k}x{-(-W // k) * k}")

    def __call__(self, x: Tensor, omega=None, skip_hook=None) -> Tensor:
        """Restore ``x`` (3 x H x W or N x 3 x H x W) under control weights ``omega``.

        ``skip_hook(level, z_in, z_out)``, when given, observes every skip
        tensor before and after its PIP instance.
        """
        self.check_input(x.shape)
        L = self.config.levels
        h = self.stem(x)
        skips = []
        for l in range(L - 1):
            for blk in self.enc[l]:
                h = blk(h)
            skips.append(h)
            h = self.down[l](h)
        for blk in self.mid:
            h = blk(h)
        for l in reversed(range(L - 1)):
            s = skips[l]
            if self.pips:
                s_out = self.pips[l](s, omega)
                if skip_hook is not None:
                    skip_hook(l, s, s_out)
                s = s_out
            H, W = s.shape[-2:]
            h = self.up[l](ad.nearest_upsample(h, H, W))
            h = self.fuse[l](ad.concat([h, s], axis=-3))
            for blk in self.dec[l]:
                h = blk(h)
        return ad.add(x, self.head(h))

    def ddl(self, theta_thre: float) -> Tensor:
        """``ddl_loss`` averaged over PIP instances that own a prompt bank."""
        terms = [p.ddl(theta_thre) for p in self.pips if p.bank is not None]
        if not terms:
            return ad.Tensor(np.zeros(()))
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.scale(total, 1.0 / len(terms))

    def banks(self) -> list[np.ndarray]:
        return [p.bank.data for p in self.pips if p.bank is not None]


def param_census(model: Module) -> list[tuple[str, int]]:
    """Parameter counts per top-level component, then backbone/PIP totals."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".")[0]
        counts[top] = counts.get(top, 0) + p.data.size
    rows = list(counts.items())
    pip = counts.get("pips", 0)
    backbone = sum(v for k, v in counts.items() if k != "pips")
    rows += [("backbone_total", backbone), ("pip_total", pip), ("total", backbone + pip)]
    return rows


def format_census(rows: list[tuple[str, int]]) -> str:
    d = dict(rows)
    lines = [f"{name:<16}{count:>10d}" for name, count in rows]
    if d.get("backbone_total"):
        lines.append(f"{'pip_overhead_%':<16}{100.0 * d['pip_total'] / d['backbone_total']:>10.2f}")
    return "\n".join(lines)
