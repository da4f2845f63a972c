"""Four-stage asymmetric dual-branch encoder-decoder assembly.

The primary branch runs attention blocks over the RGB stream; the secondary
branch shares one set of weights across all non-RGB modalities, merges them
through the per-stage self-query hub, and refines the merged feature with
pooling-mixer blocks. The two branches meet in a per-stage fusion pair, and
every modality stream is restored between stages by adding the fused feature.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .blocks import (FusionPair, MHSABlock, MLPDecoder, Module, PatchEmbed,
                     PPXBlock, SelfQueryHub)
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor
from . import tsrio

STRIDES = (4, 8, 16, 32)


@dataclass
class ModelConfig:
    stage_channels: tuple[int, ...] = (16, 32, 48, 64)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    modalities: tuple[str, ...] = ("rgb",)
    num_classes: int = 25
    pool_sizes: tuple[int, ...] = (3, 7, 11)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    decoder_embed_dim: int = 64
    ffn_expansion: int = 4
    se_reduction: int = 4
    seed: int = 0

    REFERENCE_CHANNELS = (64, 128, 320, 512)

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.stage_depths = tuple(self.stage_depths)
        self.modalities = tuple(self.modalities)
        self.pool_sizes = tuple(self.pool_sizes)
        self.sr_ratios = tuple(self.sr_ratios)
        self.heads = tuple(self.heads)
        if len(self.stage_channels) != 4 or len(self.stage_depths) != 4:
            raise ConfigurationError("config needs exactly 4 stage channels and depths")
        if not self.modalities:
            raise ConfigurationError("modalities must be nonempty")
        if self.modalities[0] != "rgb":
            raise ConfigurationError("first modality must be 'rgb'")
        if len(set(self.modalities)) != len(self.modalities):
            raise ConfigurationError("modalities must be distinct")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be positive")
        for c, h in zip(self.stage_channels, self.heads):
            if c % h != 0:
                raise ConfigurationError(f"stage channels {c} not divisible by heads {h}")

    @property
    def num_secondary(self) -> int:
        return len(self.modalities) - 1

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def with_modalities(self, modalities: Sequence[str]) -> "ModelConfig":
        return dataclasses.replace(self, modalities=tuple(modalities))


class _ZeroRng:
    """Stand-in generator for structure-only model construction (counting)."""

    def normal(self, loc=0.0, scale=1.0, size=None):
        return np.zeros(size if size is not None else ())


class CMNeXtModel(Module):
    def __init__(self, config: ModelConfig, _rng=None):
        super().__init__()
        self.config = config
        rng = _rng if _rng is not None else np.random.default_rng(config.seed)
        m_sec = config.num_secondary
        embed_specs = [(7, 4), (3, 2), (3, 2), (3, 2)]
        for l in range(4):
            c_in = 3 if l == 0 else config.stage_channels[l - 1]
            c = config.stage_channels[l]
            k, s = embed_specs[l]
            self.add_module(f"rgb_embed{l}", PatchEmbed(c_in, c, k, s, rng))
            for i in range(config.stage_depths[l]):
                self.add_module(f"mhsa{l}_{i}", MHSABlock(
                    c, config.heads[l], config.sr_ratios[l], config.ffn_expansion, rng))
            if m_sec > 0:
                self.add_module(f"sec_embed{l}", PatchEmbed(c_in, c, k, s, rng))
                self.add_module(f"hub{l}", SelfQueryHub(c, m_sec, rng))
                for i in range(config.stage_depths[l]):
                    self.add_module(f"ppx{l}_{i}", PPXBlock(
                        c, config.pool_sizes, config.ffn_expansion, config.se_reduction, rng))
                self.add_module(f"fusion{l}", FusionPair(c, rng))
        self.add_module("decoder", MLPDecoder(
            config.stage_channels, config.decoder_embed_dim, config.num_classes, rng))

    def forward(self, frames: Sequence[Tensor], record: dict | None = None) -> Tensor:
        cfg = self.config
        if len(frames) != len(cfg.modalities):
            raise UsageError(
                f"expected {len(cfg.modalities)} frames for modalities {cfg.modalities}, got {len(frames)}"
            )
        for i, f in enumerate(frames):
            if f.data.ndim != 3 or f.shape[0] != 3:
                raise DimensionError(f"frame {i}: expected 3xHxW, got {f.shape}")
        h, w = frames[0].shape[1], frames[0].shape[2]
        if h % 32 or w % 32:
            raise DimensionError(f"spatial size {h}x{w} must be divisible by 32")
        m_sec = cfg.num_secondary
        feats = list(frames)
        fused_feats = []
        for l in range(4):
            rgb = self._mods[f"rgb_embed{l}"].forward(feats[0])
            for i in range(cfg.stage_depths[l]):
                rgb = self._mods[f"mhsa{l}_{i}"].forward(rgb)
            if m_sec > 0:
                sec = [self._mods[f"sec_embed{l}"].forward(feats[m]) for m in range(1, m_sec + 1)]
                f_q = self._mods[f"hub{l}"].forward(sec)
                for i in range(cfg.stage_depths[l]):
                    f_q = self._mods[f"ppx{l}_{i}"].forward(f_q)
                _, _, f_l = self._mods[f"fusion{l}"].forward(rgb, f_q)
                new_feats = [rgb + f_l] + [s + f_l for s in sec]
            else:
                f_l = rgb
                new_feats = [rgb]
            if record is not None:
                record.setdefault("pre_restore", []).append(
                    [rgb.data.copy()] + ([s.data.copy() for s in sec] if m_sec > 0 else []))
                record.setdefault("fused", []).append(f_l.data.copy())
                record.setdefault("post_restore", []).append([f.data.copy() for f in new_feats])
            fused_feats.append(f_l)
            feats = new_feats
        return self._mods["decoder"].forward(fused_feats)

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        tsrio.write_archive(path, self.state())

    @classmethod
    def load(cls, path, config: ModelConfig) -> "CMNeXtModel":
        state = tsrio.read_archive(path)
        model = cls(config, _rng=_ZeroRng())
        model.load_state(state)
        return model


# -- accounting --------------------------------------------------------------


def count_params(config: ModelConfig) -> dict:
    """Total scalar parameters plus the exact cost of one more modality."""
    base = CMNeXtModel(config, _rng=_ZeroRng()).num_params()
    plus = config.with_modalities(config.modalities + ("_extra",))
    total_plus = CMNeXtModel(plus, _rng=_ZeroRng()).num_params()
    return {"total": base, "per_modality_increment": total_plus - base}


def count_flops(config: ModelConfig, height: int, width: int) -> int:
    """Analytic multiply-accumulate count for one forward pass."""
    if height % 32 or width % 32:
        raise DimensionError(f"spatial size {height}x{width} must be divisible by 32")
    m_sec = config.num_secondary
    embed_specs = [(7, 4), (3, 2), (3, 2), (3, 2)]
    total = 0
    for l in range(4):
        c_in = 3 if l == 0 else config.stage_channels[l - 1]
        c = config.stage_channels[l]
        k, _ = embed_specs[l]
        h, w = height // STRIDES[l], width // STRIDES[l]
        n = h * w
        embed = n * c * c_in * k * k
        total += embed * (1 + m_sec)
        # attention blocks on the RGB stream
        sr = config.sr_ratios[l]
        nr = n // (sr * sr)
        hid = c * config.ffn_expansion
        attn = (3 * n * c * c            # q,k,v (k,v on reduced tokens bounded by n)
                + 2 * n * nr * c         # logits and context
                + n * c * c              # proj
                + (n * c * c * sr * sr if sr > 1 else 0)
                + 2 * n * c * hid + n * hid * 9)
        total += config.stage_depths[l] * attn
        if m_sec > 0:
            hub = m_sec * (n * c * 9 + n * c)  # per-modality DW 3x3 + score conv
            ppx = (n * c * 49 + sum(n * c * kk * kk for kk in config.pool_sizes)
                   + n * c * c + 2 * n * c * hid
                   + 2 * c * max(1, c // config.se_reduction))
            fusion = (2 * c * 2 * c * 2 + n * 2 * c * 2 * c * 9 // (2 * c)  # gates
                      + n * 2 * c * 2 * c + n * c * 2 * c)
            total += hub + config.stage_depths[l] * ppx + fusion
            total += (2 + m_sec) * n * c  # restoration adds
    # decoder
    e = config.decoder_embed_dim
    n4 = (height // 4) * (width // 4)
    total += sum(n4 // ((STRIDES[l] // 4) ** 2) * config.stage_channels[l] * e for l in range(4))
    total += n4 * 4 * e * e + n4 * e * config.num_classes
    return total


def flops_increment_per_modality(config: ModelConfig, height: int, width: int) -> int:
    plus = config.with_modalities(config.modalities + ("_extra",))
    return count_flops(plus, height, width) - count_flops(config, height, width)
