"""Neural building blocks: self-query hub, parallel pooling mixer, efficient
multi-head self-attention, dual-branch fusion pair, patch embedding, and the
all-MLP decoder head.

All blocks operate on single-sample CxHxW tensors. Parameters are float64
Tensors registered on a small Module base so they can be enumerated, counted,
and serialized by qualified name.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor


# -- parameter container -----------------------------------------------------


class Module:
    """Flat parameter registry with hierarchical naming."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._mods: dict[str, "Module"] = {}

    def add_param(self, name: str, arr: np.ndarray) -> Tensor:
        t = Tensor(arr, requires_grad=True)
        self._params[name] = t
        return t

    def add_module(self, name: str, mod: "Module") -> "Module":
        self._mods[name] = mod
        return mod

    def named_parameters(self, prefix: str = ""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for name, mod in self._mods.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        from .errors import FormatError

        own = dict(self.named_parameters())
        for name in own:
            if name not in state:
                raise FormatError(f"missing tensor {name!r} in archive")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise FormatError(f"shape mismatch for {name!r}: archive {arr.shape}, model {t.data.shape}")
            t.data = arr.copy()


# -- initializers ------------------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    return np.clip(rng.normal(0.0, std, size=shape), -2.0 * std, 2.0 * std)


def conv_weight(rng: np.random.Generator, shape) -> np.ndarray:
    # fan-out scaled normal, fan_out = O * k * k
    o, _, kh, kw = shape
    std = math.sqrt(2.0 / (o * kh * kw))
    return rng.normal(0.0, std, size=shape)


def _check_chw(x: Tensor, what: str) -> tuple[int, int, int]:
    if x.data.ndim != 3:
        raise DimensionError(f"{what}: expected CxHxW input, got rank {x.data.ndim}")
    return x.shape


def chw_to_hwc(x: Tensor) -> Tensor:
    return T.transpose(x, (1, 2, 0))


def hwc_to_chw(x: Tensor) -> Tensor:
    return T.transpose(x, (2, 0, 1))


# -- self-query hub ----------------------------------------------------------


class SelfQueryHub(Module):
    """Per-modality scoring followed by hard per-pixel winner selection.

    Each modality owns one depthwise 3x3 conv and one channel-to-scalar score
    conv: exactly 11*C + 1 parameters per modality. Adding a modality adds
    one such record and nothing else.
    """

    def __init__(self, channels: int, modalities: int, rng: np.random.Generator):
        super().__init__()
        if modalities < 1:
            raise UsageError("SelfQueryHub needs at least one modality")
        self.channels = channels
        self.modalities = modalities
        for m in range(modalities):
            self.add_param(f"m{m}.dw_w", conv_weight(rng, (channels, 1, 3, 3)))
            self.add_param(f"m{m}.dw_b", np.zeros(channels))
            self.add_param(f"m{m}.score_w", conv_weight(rng, (1, channels, 1, 1)))
            self.add_param(f"m{m}.score_b", np.zeros(1))

    def candidates(self, features: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        """Per-modality (candidate, score) pairs before selection."""
        if len(features) == 0:
            raise UsageError("SelfQueryHub: empty modality list")
        if len(features) != self.modalities:
            raise UsageError(
                f"SelfQueryHub: got {len(features)} features for {self.modalities} modalities"
            )
        shape0 = features[0].shape
        for i, f in enumerate(features):
            if f.shape != shape0:
                raise DimensionError(f"SelfQueryHub: feature {i} shape {f.shape} != {shape0}")
        cands, scores = [], []
        for m, f in enumerate(features):
            fhat = T.conv2d(f, self._params[f"m{m}.dw_w"], self._params[f"m{m}.dw_b"],
                            stride=1, padding=1, groups=self.channels)
            q = T.sigmoid(T.conv2d(fhat, self._params[f"m{m}.score_w"],
                                   self._params[f"m{m}.score_b"]))
            cands.append(f + q * fhat)
            scores.append(q)
        return cands, scores

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        cands, scores = self.candidates(features)
        if len(cands) == 1:
            return cands[0]
        # hard selection: per pixel the highest-score modality wins, lowest
        # index on ties; gradient flows only through the winner's candidate
        q_stack = np.stack([q.data[0] for q in scores])
        winner = np.argmax(q_stack, axis=0)
        out = None
        for m, cand in enumerate(cands):
            mask = Tensor((winner == m).astype(np.float64)[None, :, :])
            term = mask * cand
            out = term if out is None else out + term
        return out


# -- parallel pooling mixer --------------------------------------------------


class PPXBlock(Module):
    """Shape-preserving mixer: 7x7 depthwise conv, parallel same-shape average
    pools summed with the residual, sigmoid gating, then FFN + SE mixing."""

    def __init__(self, channels: int, pool_sizes: Sequence[int] = (3, 7, 11),
                 ffn_expansion: int = 4, se_reduction: int = 4,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        for k in pool_sizes:
            if k % 2 == 0 or k < 1:
                raise ConfigurationError(f"PPXBlock: pooling size {k} must be odd positive")
        self.channels = channels
        self.pool_sizes = tuple(pool_sizes)
        hidden = channels * ffn_expansion
        squeezed = max(1, channels // se_reduction)
        c = channels
        self.add_param("dw_w", conv_weight(rng, (c, 1, 7, 7)))
        self.add_param("dw_b", np.zeros(c))
        self.add_param("mix_w", conv_weight(rng, (c, c, 1, 1)))
        self.add_param("mix_b", np.zeros(c))
        self.add_param("ln_g", np.ones(c))
        self.add_param("ln_b", np.zeros(c))
        self.add_param("ffn_w1", trunc_normal(rng, (c, hidden)))
        self.add_param("ffn_b1", np.zeros(hidden))
        self.add_param("ffn_w2", trunc_normal(rng, (hidden, c)))
        self.add_param("ffn_b2", np.zeros(c))
        self.add_param("se_w1", trunc_normal(rng, (c, squeezed)))
        self.add_param("se_b1", np.zeros(squeezed))
        self.add_param("se_w2", trunc_normal(rng, (squeezed, c)))
        self.add_param("se_b2", np.zeros(c))

    def se_gate(self, x: Tensor) -> Tensor:
        p = self._params
        g = T.linear(T.global_avg_pool(x), p["se_w1"], p["se_b1"])
        g = T.relu(g)
        return T.sigmoid(T.linear(g, p["se_w2"], p["se_b2"]))

    def forward(self, f_q: Tensor) -> Tensor:
        c, h, w = _check_chw(f_q, "PPXBlock")
        if c != self.channels:
            raise DimensionError(f"PPXBlock: channel axis is {c}, block built for {self.channels}")
        p = self._params
        fhat = T.conv2d(f_q, p["dw_w"], p["dw_b"], stride=1, padding=3, groups=c)
        pooled = fhat
        for k in self.pool_sizes:
            pooled = pooled + T.avg_pool_same(fhat, k)
        gate = T.sigmoid(T.conv2d(pooled, p["mix_w"], p["mix_b"]))
        f_w = gate * f_q + f_q
        # mixing: pre-norm FFN plus squeeze-excitation of the raw gated feature
        tok = T.layer_norm(chw_to_hwc(f_w), p["ln_g"], p["ln_b"])
        tok = T.linear(tok, p["ffn_w1"], p["ffn_b1"])
        tok = T.gelu(tok)
        tok = T.linear(tok, p["ffn_w2"], p["ffn_b2"])
        ffn_out = hwc_to_chw(tok)
        se_out = T.reshape(self.se_gate(f_w), (c, 1, 1)) * f_w
        return ffn_out + se_out


# -- efficient multi-head self-attention -------------------------------------


class MHSABlock(Module):
    """Pre-norm transformer block with spatially reduced keys/values and a
    depthwise-conv-mixing FFN."""

    def __init__(self, channels: int, heads: int, sr_ratio: int = 1,
                 ffn_expansion: int = 4, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if channels % heads != 0:
            raise ConfigurationError(f"MHSABlock: channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        self.sr_ratio = sr_ratio
        c = channels
        hidden = c * ffn_expansion
        self.add_param("ln1_g", np.ones(c))
        self.add_param("ln1_b", np.zeros(c))
        for nm in ("q", "k", "v", "proj"):
            self.add_param(f"{nm}_w", trunc_normal(rng, (c, c)))
            self.add_param(f"{nm}_b", np.zeros(c))
        if sr_ratio > 1:
            self.add_param("sr_w", conv_weight(rng, (c, c, sr_ratio, sr_ratio)))
            self.add_param("sr_b", np.zeros(c))
            self.add_param("srln_g", np.ones(c))
            self.add_param("srln_b", np.zeros(c))
        self.add_param("ln2_g", np.ones(c))
        self.add_param("ln2_b", np.zeros(c))
        self.add_param("ffn_w1", trunc_normal(rng, (c, hidden)))
        self.add_param("ffn_b1", np.zeros(hidden))
        self.add_param("ffn_dw_w", conv_weight(rng, (hidden, 1, 3, 3)))
        self.add_param("ffn_dw_b", np.zeros(hidden))
        self.add_param("ffn_w2", trunc_normal(rng, (hidden, c)))
        self.add_param("ffn_b2", np.zeros(c))

    def forward(self, x: Tensor, return_attn: bool = False):
        c, h, w = _check_chw(x, "MHSABlock")
        if c != self.channels:
            raise DimensionError(f"MHSABlock: channel axis is {c}, block built for {self.channels}")
        sr = self.sr_ratio
        if sr > 1 and (h % sr or w % sr):
            raise DimensionError(f"MHSABlock: spatial {h}x{w} not divisible by sr_ratio {sr}")
        p = self._params
        heads, dh = self.heads, c // self.heads
        n = h * w

        tok = T.transpose(T.reshape(x, (c, n)), (1, 0))
        y = T.layer_norm(tok, p["ln1_g"], p["ln1_b"])
        q = T.transpose(T.reshape(T.linear(y, p["q_w"], p["q_b"]), (n, heads, dh)), (1, 0, 2))
        if sr > 1:
            red = T.conv2d(hwc_to_chw(T.reshape(y, (h, w, c))), p["sr_w"], p["sr_b"], stride=sr)
            z = T.transpose(T.reshape(red, (c, (h // sr) * (w // sr))), (1, 0))
            z = T.layer_norm(z, p["srln_g"], p["srln_b"])
        else:
            z = y
        nr = z.shape[0]
        k = T.transpose(T.reshape(T.linear(z, p["k_w"], p["k_b"]), (nr, heads, dh)), (1, 0, 2))
        v = T.transpose(T.reshape(T.linear(z, p["v_w"], p["v_b"]), (nr, heads, dh)), (1, 0, 2))
        logits = T.matmul(q, T.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        attn = T.softmax_lastdim(logits)
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (1, 0, 2)), (n, c))
        tok = tok + T.linear(ctx, p["proj_w"], p["proj_b"])

        y2 = T.layer_norm(tok, p["ln2_g"], p["ln2_b"])
        a = T.linear(y2, p["ffn_w1"], p["ffn_b1"])
        hidden = a.shape[-1]
        sp = hwc_to_chw(T.reshape(a, (h, w, hidden)))
        sp = T.conv2d(sp, p["ffn_dw_w"], p["ffn_dw_b"], stride=1, padding=1, groups=hidden)
        a = T.gelu(T.reshape(chw_to_hwc(sp), (n, hidden)))
        tok = tok + T.linear(a, p["ffn_w2"], p["ffn_b2"])

        out = T.reshape(T.transpose(tok, (1, 0)), (c, h, w))
        if return_attn:
            return out, attn
        return out


# -- cross-branch fusion pair ------------------------------------------------


class FusionPair(Module):
    """Gated cross-rectification of the two branch features followed by a
    channel-mixing fusion. With all gates at zero the rectification step is
    the identity on both inputs."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = channels
        self.channels = c
        self.add_param("lam", np.asarray(0.5))
        self.add_param("cg_w1", trunc_normal(rng, (2 * c, 2 * c)))
        self.add_param("cg_b1", np.zeros(2 * c))
        self.add_param("cg_w2", trunc_normal(rng, (2 * c, 2 * c)))
        self.add_param("cg_b2", np.zeros(2 * c))
        self.add_param("sg_w", conv_weight(rng, (2, 2 * c, 3, 3)))
        self.add_param("sg_b", np.zeros(2))
        self.add_param("mix_w", trunc_normal(rng, (2 * c, 2 * c)))
        self.add_param("mix_b", np.zeros(2 * c))
        self.add_param("out_w", conv_weight(rng, (c, 2 * c, 1, 1)))
        self.add_param("out_b", np.zeros(c))

    def forward(self, f_rgb: Tensor, f_x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        c, h, w = _check_chw(f_rgb, "FusionPair")
        if f_x.shape != f_rgb.shape:
            raise DimensionError(f"FusionPair: branch shapes differ: {f_rgb.shape} vs {f_x.shape}")
        if c != self.channels:
            raise DimensionError(f"FusionPair: channel axis is {c}, pair built for {self.channels}")
        p = self._params
        cat = T.concat([f_rgb, f_x], axis=0)
        gv = T.relu(T.linear(T.global_avg_pool(cat), p["cg_w1"], p["cg_b1"]))
        gv = T.sigmoid(T.linear(gv, p["cg_w2"], p["cg_b2"]))
        gc_x = T.reshape(T.narrow(gv, 0, 0, c), (c, 1, 1))
        gc_rgb = T.reshape(T.narrow(gv, 0, c, c), (c, 1, 1))
        gs = T.sigmoid(T.conv2d(cat, p["sg_w"], p["sg_b"], stride=1, padding=1))
        gs_x = T.narrow(gs, 0, 0, 1)
        gs_rgb = T.narrow(gs, 0, 1, 1)
        lam = p["lam"]
        rect_rgb = f_rgb + lam * (gc_x * (gs_x * f_x))
        rect_x = f_x + lam * (gc_rgb * (gs_rgb * f_rgb))
        mixed = T.gelu(T.linear(chw_to_hwc(T.concat([rect_rgb, rect_x], axis=0)),
                                p["mix_w"], p["mix_b"]))
        fused = T.conv2d(hwc_to_chw(mixed), p["out_w"], p["out_b"])
        return rect_rgb, rect_x, fused


# -- patch embedding ---------------------------------------------------------


class PatchEmbed(Module):
    """Overlapping conv downsampler with a token layer norm."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.kernel = kernel
        self.padding = kernel // 2
        self.add_param("w", conv_weight(rng, (c_out, c_in, kernel, kernel)))
        self.add_param("b", np.zeros(c_out))
        self.add_param("ln_g", np.ones(c_out))
        self.add_param("ln_b", np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        p = self._params
        y = T.conv2d(x, p["w"], p["b"], stride=self.stride, padding=self.padding)
        return hwc_to_chw(T.layer_norm(chw_to_hwc(y), p["ln_g"], p["ln_b"]))


# -- decoder -----------------------------------------------------------------


class MLPDecoder(Module):
    """SegFormer-style head: project each stage to a common width, upsample to
    quarter resolution, concatenate, fuse, classify, upsample x4."""

    STRIDES = (4, 8, 16, 32)

    def __init__(self, stage_channels: Sequence[int], embed_dim: int, num_classes: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stage_channels = tuple(stage_channels)
        self.embed_dim = embed_dim
        self.num_classes = num_classes
        for l, c in enumerate(stage_channels):
            self.add_param(f"proj{l}_w", trunc_normal(rng, (c, embed_dim)))
            self.add_param(f"proj{l}_b", np.zeros(embed_dim))
        self.add_param("fuse_w", trunc_normal(rng, (4 * embed_dim, embed_dim)))
        self.add_param("fuse_b", np.zeros(embed_dim))
        self.add_param("cls_w", conv_weight(rng, (num_classes, embed_dim, 1, 1)))
        self.add_param("cls_b", np.zeros(num_classes))

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        if len(features) != 4:
            raise DimensionError(f"MLPDecoder: expected 4 stage features, got {len(features)}")
        h4, w4 = features[0].shape[1], features[0].shape[2]
        p = self._params
        ups = []
        for l, f in enumerate(features):
            c, h, w = _check_chw(f, f"MLPDecoder stage {l}")
            factor = self.STRIDES[l] // 4
            if (h * factor, w * factor) != (h4, w4):
                raise DimensionError(
                    f"MLPDecoder: stage {l} spatial {h}x{w} inconsistent with stage 0 {h4}x{w4}"
                )
            if c != self.stage_channels[l]:
                raise DimensionError(f"MLPDecoder: stage {l} has {c} channels, expected {self.stage_channels[l]}")
            y = hwc_to_chw(T.linear(chw_to_hwc(f), p[f"proj{l}_w"], p[f"proj{l}_b"]))
            ups.append(T.bilinear_upsample(y, factor))
        cat = T.concat(ups, axis=0)
        fused = hwc_to_chw(T.relu(T.linear(chw_to_hwc(cat), p["fuse_w"], p["fuse_b"])))
        logits = T.conv2d(fused, p["cls_w"], p["cls_b"])
        return T.bilinear_upsample(logits, 4)
