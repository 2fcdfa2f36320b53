"""Full interpolation model: RGB codec, guided sparse-to-dense codec, refinement."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .ops import concat_channels, conv2d, conv2d_transpose, conv_flops, conv_transpose_flops, crop, relu
from .optim import init_weights
from .propagation import (AffinityField, cspn_refine, predict_affinity, propagate,
                          propagation_flops, stability_flops)
from .sparse import (MaskedFeature, crop_masked, nn_upsample, sparse_avg_pool, sparse_conv2d,
                     sparse_conv_flops, sparse_pool_flops, sparse_skip_merge)
from .tensor import DTYPE, Parameter, ShapeError, Tensor

GUIDANCE_MODES = ("none", "enc", "dec", "full")
# starting kernels of the affinity heads: every off-center weight 1 (plain
# average of the valid window) or 0 (center only)
AFFINITY_INITS = ("uniform", "center")
TASK_CHANNELS = {"depth": 1, "optical_flow": 2, "scene_flow": 4}


@dataclass
class ModelConfig:
    levels: int = 6
    kernel: int = 3
    channels: list[int] = field(default_factory=lambda: [32, 32, 48, 64, 80, 96, 128])
    out_channels: int = 2
    guidance: str = "full"
    sparse_aware: bool = True
    flat_affinity: bool = True
    refine: bool = True
    refine_iterations: int = 10
    affinity_init: str = "uniform"

    def __post_init__(self):
        self.channels = [int(c) for c in self.channels]
        if self.levels < 1:
            raise cfgio.ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels + 1:
            raise cfgio.ConfigError(
                f"channels needs levels + 1 = {self.levels + 1} entries, got {len(self.channels)}")
        if min(self.channels) <= 0:
            raise cfgio.ConfigError(f"channel depths must be positive: {self.channels}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise cfgio.ConfigError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.guidance not in GUIDANCE_MODES:
            raise cfgio.ConfigError(f"guidance must be one of {GUIDANCE_MODES}, got {self.guidance!r}")
        if self.out_channels < 1:
            raise cfgio.ConfigError(f"out_channels must be >= 1, got {self.out_channels}")
        if self.refine_iterations < 0:
            raise cfgio.ConfigError("refine_iterations must be >= 0")
        if self.affinity_init not in AFFINITY_INITS:
            raise cfgio.ConfigError(
                f"affinity_init must be one of {AFFINITY_INITS}, got {self.affinity_init!r}")
        if self.refine and self.guidance == "none":
            raise cfgio.ConfigError("refinement needs image features; use guidance != none")

    @property
    def guide_encoder(self) -> bool:
        return self.guidance in ("enc", "full")

    @property
    def guide_decoder(self) -> bool:
        return self.guidance in ("dec", "full")

    def to_text(self) -> str:
        return cfgio.format_items(asdict(self))

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        return cfgio.build(cls, values)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(cfgio.read_file(path))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def toy_config(**overrides) -> ModelConfig:
    """Desk-scale config: three levels, schedule 8-12-16-24."""
    base = dict(levels=3, channels=[8, 12, 16, 24], refine_iterations=10)
    base.update(overrides)
    return ModelConfig(**base)


def guidenet_like(**overrides) -> ModelConfig:
    base = dict(guidance="enc", sparse_aware=False, flat_affinity=False, refine=False)
    base.update(overrides)
    return ModelConfig(**base)


class Conv:
    """Weight + bias pair; ``transpose`` stores ``[C_in, C_out, k, k]``."""

    def __init__(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                 init: str = "relu_scaled", transpose: bool = False, bias_value: float = 0.0):
        shape = (cin, cout, k, k) if transpose else (cout, cin, k, k)
        self.name, self.cin, self.cout, self.k = name, cin, cout, k
        self.weight = init_weights(shape, cin * k * k, init, rng, f"{name}.weight")
        self.bias = Parameter(np.full(cout, bias_value, dtype=DTYPE), name=f"{name}.bias")

    @property
    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class ModelOutput:
    dense: Tensor
    final_mask: Tensor
    pre_refine: Tensor


class Model:
    """Parameter container built by :func:`build_model`; call :meth:`forward`."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.layers: dict[str, Conv] = {}
        rng = np.random.default_rng(seed)
        c = config
        ch, l, kk = c.channels, c.levels, c.kernel ** 2

        def conv(name, cin, cout, k, init="relu_scaled", transpose=False, bias_value=0.0):
            self.layers[name] = Conv(name, cin, cout, k, rng, init, transpose, bias_value)

        if c.guidance != "none":
            conv("rgb.pre", 3, ch[0], 1)
            for i in range(l):
                conv(f"rgb.down{i}.conv1", ch[i], ch[i + 1], 3)
                for n in (2, 3, 4):
                    conv(f"rgb.down{i}.conv{n}", ch[i + 1], ch[i + 1], 3)
            conv("rgb.bottleneck", ch[l], ch[l], 3)
            for j in range(l, 0, -1):
                conv(f"rgb.up{j}.conv1", ch[j], ch[j], 3)
                conv(f"rgb.up{j}.conv2", ch[j], ch[j - 1], 3, transpose=True)
                conv(f"rgb.up{j}.conv3", 2 * ch[j - 1], ch[j - 1], 3)
                conv(f"rgb.up{j}.conv4", ch[j - 1], ch[j - 1], 3)
            for level, side in self.affinity_sites():
                n_out = (kk - 1) * (1 if c.flat_affinity else ch[level])
                conv(f"aff.{side}{level}.pre", ch[level], ch[level], 3)
                conv(f"aff.{side}{level}.head", ch[level], n_out, 3, init="zeros",
                     bias_value=1.0 if c.affinity_init == "uniform" else 0.0)

        conv("sp.pre", c.out_channels, ch[0], 1)
        for i in range(l):
            conv(f"sp.down{i}", ch[i], ch[i + 1], 1 if c.guide_encoder else 3)
        conv("sp.bottleneck", ch[l], ch[l], 3)
        for j in range(l, 0, -1):
            conv(f"sp.up{j}", ch[j], ch[j - 1], 1 if c.guide_decoder else 3)
            conv(f"sp.up{j}.merge", ch[j - 1], ch[j - 1], 3)
        conv("sp.final", ch[0], ch[0], 1 if c.guide_decoder else 3)
        conv("sp.head1", ch[0], ch[0], 3)
        conv("sp.head2", ch[0], ch[0], 3)
        conv("sp.head3", ch[0], c.out_channels, 1)
        if c.refine:
            conv("refine.head", ch[0], c.out_channels * (kk - 1), 3, init="small")

        self.params: list[Parameter] = [p for layer in self.layers.values() for p in layer.params]

    def affinity_sites(self) -> list[tuple[int, str]]:
        """(RGB decoder level, 'enc'|'dec') for every affinity block."""
        c = self.config
        sites = []
        if c.guide_encoder:
            sites += [(i, "enc") for i in range(c.levels)]
        if c.guide_decoder:
            sites += [(j, "dec") for j in range(c.levels, -1, -1)]
        return sites

    def named_params(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    # -- forward ----------------------------------------------------------

    def _rgb_decoder(self, image: Tensor) -> dict[int, Tensor]:
        L = self.layers
        l = self.config.levels

        def run(name, x, stride=1):
            return conv2d(x, L[name].weight, L[name].bias, stride=stride)

        enc = [run("rgb.pre", image)]
        x = enc[0]
        for i in range(l):
            x = run(f"rgb.down{i}.conv1", x)
            x = run(f"rgb.down{i}.conv2", x)
            x = run(f"rgb.down{i}.conv3", x, stride=2)
            x = run(f"rgb.down{i}.conv4", x)
            enc.append(x)
        x = run("rgb.bottleneck", x)
        dec = {l: x}
        for j in range(l, 0, -1):
            skip = enc[j - 1]
            x = run(f"rgb.up{j}.conv1", x)
            up = L[f"rgb.up{j}.conv2"]
            x = relu(conv2d_transpose(x, up.weight, up.bias))
            x = crop(x, skip.shape[1], skip.shape[2])
            x = concat_channels(x, skip)
            x = run(f"rgb.up{j}.conv3", x)
            x = run(f"rgb.up{j}.conv4", x)
            dec[j - 1] = x
        return dec

    def _affinities(self, dec: dict[int, Tensor]) -> dict[tuple[int, str], AffinityField]:
        out = {}
        for level, side in self.affinity_sites():
            pre = self.layers[f"aff.{side}{level}.pre"]
            head = self.layers[f"aff.{side}{level}.head"]
            out[(level, side)] = predict_affinity(dec[level], pre.weight, pre.bias,
                                                  head.weight, head.bias, self.config.kernel)
        return out

    def _guided(self, x: MaskedFeature, name: str, affinity: AffinityField | None,
                sparse: bool) -> MaskedFeature:
        """Guided propagation + 1x1 mix, or a plain sparse 3x3 conv when unguided."""
        layer = self.layers[name]
        if affinity is not None:
            x = propagate(x, affinity, sparse)
        return sparse_conv2d(x, layer.weight, layer.bias, sparse=sparse)

    def forward(self, image: Tensor, sparse_input: MaskedFeature) -> ModelOutput:
        c = self.config
        l, sa = c.levels, c.sparse_aware
        if image.data.ndim != 3 or image.shape[0] != 3:
            raise ShapeError(f"image must be [3, H, W], got {image.shape}")
        if sparse_input.shape[1:] != image.shape[1:]:
            raise ShapeError(
                f"sparse input {sparse_input.shape[1:]} not aligned with image {image.shape[1:]}")
        if sparse_input.shape[0] != c.out_channels:
            raise ShapeError(
                f"sparse input has {sparse_input.shape[0]} channels, model expects {c.out_channels}")
        h, w = image.shape[1:]
        mult = 2 ** l
        hp, wp = -(-h // mult) * mult, -(-w // mult) * mult
        pad = ((0, 0), (0, hp - h), (0, wp - w))
        img = Tensor(np.pad(image.data, pad, mode="edge"))
        feats = Tensor(np.pad(sparse_input.features.data, pad))
        mask = np.pad(sparse_input.mask.data, pad)
        if not sa:
            mask = np.ones_like(mask)
        x = MaskedFeature(feats, Tensor(mask))

        rgb = self._rgb_decoder(img) if c.guidance != "none" else {}
        aff = self._affinities(rgb) if rgb else {}
        L = self.layers

        x = sparse_conv2d(x, L["sp.pre"].weight, L["sp.pre"].bias, sparse=sa)
        skips = [x]
        for i in range(l):
            x = self._guided(x, f"sp.down{i}", aff.get((i, "enc")), sa)
            x = sparse_avg_pool(x, sa)
            skips.append(x)
        x = sparse_conv2d(x, L["sp.bottleneck"].weight, L["sp.bottleneck"].bias, sparse=sa)
        for j in range(l, 0, -1):
            skip = skips[j - 1]
            x = self._guided(x, f"sp.up{j}", aff.get((j, "dec")), sa)
            x = crop_masked(nn_upsample(x), skip.shape[1], skip.shape[2])
            merge = L[f"sp.up{j}.merge"]
            x = sparse_skip_merge(x, skip, merge.weight, merge.bias, sparse=sa)
        x = self._guided(x, "sp.final", aff.get((0, "dec")), sa)
        x = sparse_conv2d(x, L["sp.head1"].weight, L["sp.head1"].bias, sparse=sa)
        x = sparse_conv2d(x, L["sp.head2"].weight, L["sp.head2"].bias, linear=True, sparse=sa)
        x = sparse_conv2d(x, L["sp.head3"].weight, L["sp.head3"].bias, linear=True, sparse=sa)

        pre_refine = x.features
        dense = pre_refine
        if c.refine:
            head = L["refine.head"]
            dense = cspn_refine(pre_refine, rgb[0], head.weight, head.bias,
                                c.refine_iterations, c.kernel)
        return ModelOutput(crop(dense, h, w), Tensor(x.mask.data[:, :h, :w].copy()),
                           crop(pre_refine, h, w))

    __call__ = forward


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def forward(model: Model, image: Tensor, sparse_input: MaskedFeature) -> ModelOutput:
    return model.forward(image, sparse_input)


def count_params(model: Model) -> int:
    return int(sum(p.size for p in model.params))


def count_flops(model: Model, height: int, width: int) -> int:
    """Analytic FLOPs of one forward pass at ``height x width``.

    Two FLOPs per multiply-accumulate, one per bias add, and one per element
    for masking and normalization; activations, copies and padding are free.
    Counted on the internally padded size (next multiple of ``2**levels``).
    """
    c = model.config
    if height < 1 or width < 1:
        raise ValueError(f"invalid size {height}x{width}")
    l, ch, k, sa = c.levels, c.channels, c.kernel, c.sparse_aware
    kk = k * k
    mult = 2 ** l
    H, W = -(-height // mult) * mult, -(-width // mult) * mult

    def res(level):
        return H // 2 ** level, W // 2 ** level

    total = 0
    if c.guidance != "none":
        total += conv_flops(3, ch[0], 1, H, W)
        for i in range(l):
            h, w = res(i)
            total += conv_flops(ch[i], ch[i + 1], 3, h, w) + conv_flops(ch[i + 1], ch[i + 1], 3, h, w)
            total += 2 * conv_flops(ch[i + 1], ch[i + 1], 3, h // 2, w // 2)
        total += conv_flops(ch[l], ch[l], 3, *res(l))
        for j in range(l, 0, -1):
            h, w = res(j)
            total += conv_flops(ch[j], ch[j], 3, h, w)
            total += conv_transpose_flops(ch[j], ch[j - 1], 3, h, w)
            total += conv_flops(2 * ch[j - 1], ch[j - 1], 3, 2 * h, 2 * w)
            total += conv_flops(ch[j - 1], ch[j - 1], 3, 2 * h, 2 * w)
        for level, _ in model.affinity_sites():
            n_out = (kk - 1) * (1 if c.flat_affinity else ch[level])
            total += conv_flops(ch[level], ch[level], 3, *res(level))
            total += conv_flops(ch[level], n_out, 3, *res(level))

    def guided(cin, cout, level, guided_here):
        h, w = res(level)
        if guided_here:
            return propagation_flops(cin, h, w, k, sa) + sparse_conv_flops(cin, cout, 1, h, w, sparse=sa)
        return sparse_conv_flops(cin, cout, 3, h, w, sparse=sa)

    total += sparse_conv_flops(c.out_channels, ch[0], 1, H, W, sparse=sa)
    for i in range(l):
        total += guided(ch[i], ch[i + 1], i, c.guide_encoder)
        total += sparse_pool_flops(ch[i + 1], *res(i), sparse=sa)
    total += sparse_conv_flops(ch[l], ch[l], 3, *res(l), sparse=sa)
    for j in range(l, 0, -1):
        total += guided(ch[j], ch[j - 1], j, c.guide_decoder)
        h, w = res(j - 1)
        total += ch[j - 1] * h * w  # skip sum
        total += sparse_conv_flops(ch[j - 1], ch[j - 1], 3, h, w, sparse=sa)
    total += guided(ch[0], ch[0], 0, c.guide_decoder)
    total += 2 * sparse_conv_flops(ch[0], ch[0], 3, H, W, sparse=sa)
    total += sparse_conv_flops(ch[0], c.out_channels, 1, H, W, sparse=sa)
    if c.refine and c.refine_iterations:
        total += conv_flops(ch[0], c.out_channels * (kk - 1), 3, H, W)
        total += stability_flops(c.out_channels, H, W, k)
        total += c.refine_iterations * 2 * kk * c.out_channels * H * W
    return total
