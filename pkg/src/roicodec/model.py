"""ROI-conditioned Swin hyperprior codec: configuration, assembly, λ-map."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .entropy import FactorizedPrior, gaussian_likelihood, quantize, scale_from_raw, factorized_likelihood
from .layers import GDN, SFT, MaskFusion, PatchDownsample, PatchUpsample, SwinBlock, SwinBlockPair, mask_condition_path, validate_mask
from .nn import Conv2d, Linear, Module, Parameter, count_params
from .tensor import DimensionError, Tensor, conv_transpose2d, no_grad, upsample_nearest

PAD_MULTIPLE = 64
MAIN_FACTOR = 16
HYPER_FACTOR = 64
CONTEXT_MODES = ("none", "checkerboard")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters that fully determine the network and its parameter count."""

    stem_kernel: int = 5
    stem_stride: int = 2
    widths: tuple[int, ...] = (96, 128, 160)
    depths: tuple[int, ...] = (1, 1, 1)
    main_window: int = 8
    hyper_window: int = 4
    latent_channels: int = 192
    hyper_channels: int = 128
    hyper_width: int = 192
    hyper_depths: tuple[int, ...] = (1, 1)
    head_dim: int = 32
    ffn_ratio: float = 2.0
    cond_channels: int = 64
    fusion_depth: int = 2
    context_mode: str = "none"
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 3 or len(self.depths) != 3:
            raise ValueError("the main path has exactly three stages")
        if len(self.hyper_depths) != 2:
            raise ValueError("the hyper path has exactly two stages")
        if self.stem_stride != 2:
            raise ValueError("stem stride must be 2 (main path downsamples by 16)")
        if self.stem_kernel % 2 == 0:
            raise ValueError("stem kernel must be odd")
        sizes = (*self.widths, self.latent_channels, self.hyper_channels, self.hyper_width, self.cond_channels)
        if min(sizes) <= 0 or self.head_dim <= 0 or self.ffn_ratio <= 0:
            raise ValueError("all widths must be positive")
        for w in (*self.widths, self.latent_channels, self.hyper_width):
            if w % self.head_dim:
                raise ValueError(f"width {w} is not a multiple of head_dim {self.head_dim}")
        if min(self.depths + self.hyper_depths) < 0:
            raise ValueError("block counts must be >= 0")
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"context_mode must be one of {CONTEXT_MODES}")
        if self.fusion_depth < 1:
            raise ValueError("fusion_depth must be >= 1")

    def to_text(self) -> str:
        """Canonical ``key=value`` lines in field order."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            if key not in defaults:
                raise ValueError(f"unknown model config key {key!r}")
            kind = type(defaults[key])
            if kind is tuple:
                kw[key] = tuple(int(x) for x in val.split(",") if x)
            else:
                kw[key] = kind(val)
        return cls(**kw)


PRESETS = {
    # desk-scale model for 64x64 crops
    "toy": ModelConfig(
        widths=(32, 32, 48),
        latent_channels=48,
        hyper_channels=32,
        hyper_width=32,
        head_dim=16,
        cond_channels=16,
    ),
    # sized to the roughly 15.8M-parameter budget of the full model
    "full": ModelConfig(
        widths=(128, 192, 224),
        depths=(2, 2, 2),
        latent_channels=320,
        hyper_channels=192,
        hyper_width=224,
        hyper_depths=(1, 1),
        cond_channels=64,
    ),
}


def lambda_map(mask, alpha: float = 0.001, omega: float = 0.0) -> np.ndarray:
    """Per-pixel Lagrange weight ``alpha * exp(omega * m) * 255**2``."""
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    validate_mask(m)
    return alpha * np.exp(omega * m) * 255.0**2


@dataclass
class Geometry:
    height: int
    width: int
    padded_height: int
    padded_width: int

    @classmethod
    def for_size(cls, h: int, w: int) -> "Geometry":
        ph = -(-h // PAD_MULTIPLE) * PAD_MULTIPLE
        pw = -(-w // PAD_MULTIPLE) * PAD_MULTIPLE
        return cls(h, w, ph, pw)

    @property
    def y_shape(self) -> tuple[int, int]:
        return self.padded_height // MAIN_FACTOR, self.padded_width // MAIN_FACTOR

    @property
    def z_shape(self) -> tuple[int, int]:
        return self.padded_height // HYPER_FACTOR, self.padded_width // HYPER_FACTOR


@dataclass
class LatentPair:
    y_hat: Tensor
    z_hat: Tensor
    geometry: Geometry


def _nchw(x: Tensor) -> Tensor:
    return x.transpose(0, 3, 1, 2)


def _nhwc(x: Tensor) -> Tensor:
    return x.transpose(0, 2, 3, 1)


def checkerboard(h: int, w: int) -> np.ndarray:
    """1 at anchor positions (``(i + j)`` even), 0 elsewhere."""
    i, j = np.indices((h, w))
    return ((i + j) % 2 == 0).astype(np.float64)


class EncoderStage(Module):
    def __init__(self, c_in: int, c_out: int, depth: int, cfg: ModelConfig, rng):
        if depth:
            self.blocks = [SwinBlockPair(c_in, c_in // cfg.head_dim, cfg.main_window, cfg.ffn_ratio, rng) for _ in range(depth)]
        else:
            self.blocks = []
        self.down = PatchDownsample(c_in, c_out, rng)
        self.gdn = GDN(c_out)
        self.sft = SFT(c_out, cfg.cond_channels, rng)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        """``x`` channel-last in, channel-first out."""
        for blk in self.blocks:
            x = blk(x)
        x = _nchw(self.down(x))
        return self.sft(self.gdn(x), cond)


class DecoderStage(Module):
    def __init__(self, c_in: int, c_out: int, depth: int, cfg: ModelConfig, rng):
        self.igdn = GDN(c_in, inverse=True)
        self.up = PatchUpsample(c_in, c_out, rng)
        if depth:
            self.blocks = [SwinBlockPair(c_out, c_out // cfg.head_dim, cfg.main_window, cfg.ffn_ratio, rng) for _ in range(depth)]
        else:
            self.blocks = []
        self.sft = SFT(c_out, cfg.cond_channels, rng)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        """Channel-first in and out."""
        x = self.up(_nhwc(self.igdn(x)))
        for blk in self.blocks:
            x = blk(x)
        return self.sft(_nchw(x), cond)


class HyperStage(Module):
    def __init__(self, c_in: int, c_out: int, depth: int, up: bool, cfg: ModelConfig, rng):
        self.up = up
        if up:
            self.resample = PatchUpsample(c_in, c_out, rng)
        width = c_out if up else c_in
        if depth:
            self.blocks = [SwinBlockPair(width, max(width // cfg.head_dim, 1), cfg.hyper_window, cfg.ffn_ratio, rng) for _ in range(depth)]
        else:
            self.blocks = []
        if not up:
            self.resample = PatchDownsample(c_in, c_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.up:
            x = self.resample(x)
        for blk in self.blocks:
            x = blk(x)
        if not self.up:
            x = self.resample(x)
        return x


class ConditionHead(Module):
    """Derives decoder-side conditions from the hyper-latent."""

    def __init__(self, c_in: int, c_cond: int, depth: int, rng):
        chans = [c_in] + [c_cond] * depth
        self.convs = [Conv2d(a, b, 3, rng) for a, b in zip(chans[:-1], chans[1:])]

    def forward(self, z_hat: Tensor) -> Tensor:
        x = z_hat
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = x.gelu()
        return x


# Initial scale of y. Without it y starts with about the spread of the
# uniform quantization noise and the codec needs many steps to separate them.
LATENT_GAIN = 8.0


class RoiCodec(Module):
    """Main/hyper analysis and synthesis transforms with SFT conditioning.

    Encoder conditions come from the (image, mask) fusion path, decoder
    conditions from the quantized hyper-latent only.
    """

    # downsampling factors of the encoder-side SFT sites
    ENCODER_SITES = (2, 4, 8, 16, 64)
    # decoder-side sites: hyper decoder input, then main decoder /16, /8, /4, /2
    DECODER_SITES = (64, 16, 8, 4, 2)

    def __init__(self, config: ModelConfig | None = None):
        cfg = config or ModelConfig()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        c0, c1, c2 = cfg.widths
        cy, cz, ch = cfg.latent_channels, cfg.hyper_channels, cfg.hyper_width

        self.fusion = MaskFusion(cfg.cond_channels, cfg.fusion_depth, rng)
        self.stem = Conv2d(3, c0, cfg.stem_kernel, rng, stride=cfg.stem_stride)
        self.stem_sft = SFT(c0, cfg.cond_channels, rng)
        outs = (c1, c2, cy)
        self.encoder = [EncoderStage(cin, cout, d, cfg, rng) for cin, cout, d in zip(cfg.widths, outs, cfg.depths)]
        self.encoder[-1].sft.gamma_head.bias.data[:] = LATENT_GAIN
        self.hyper_encoder = [
            HyperStage(cy, ch, cfg.hyper_depths[0], False, cfg, rng),
            HyperStage(ch, cz, cfg.hyper_depths[1], False, cfg, rng),
        ]
        self.hyper_sft = SFT(cz, cfg.cond_channels, rng)
        self.prior = FactorizedPrior(cz, rng=rng)

        self.z_condition = ConditionHead(cz, cfg.cond_channels, cfg.fusion_depth, rng)
        self.hyper_decoder_sft = SFT(cz, cfg.cond_channels, rng)
        self.hyper_decoder = [
            HyperStage(cz, ch, cfg.hyper_depths[1], True, cfg, rng),
            HyperStage(ch, ch, cfg.hyper_depths[0], True, cfg, rng),
        ]
        self.entropy_params = Linear(ch, 2 * cy, rng, std=0.02)
        # start the predicted scales near the initial spread of y
        self.entropy_params.bias.data[cy:] = np.log(np.expm1(LATENT_GAIN / 4))
        if cfg.context_mode == "checkerboard":
            self.context = Conv2d(cy, 2 * cy, 5, rng)
            self.context.weight.data *= 0.1

        self.latent_sft = SFT(cy, cfg.cond_channels, rng)
        self.latent_sft.gamma_head.bias.data[:] = 1.0 / LATENT_GAIN
        self.decoder = [
            DecoderStage(cin, cout, d, cfg, rng) for cin, cout, d in reversed(list(zip(outs, cfg.widths, cfg.depths)))
        ]
        k = cfg.stem_kernel
        self.synthesis_weight = Parameter(rng.uniform(-1, 1, size=(c0, 3, k, k)) / np.sqrt(c0 * k * k / 4))
        self.synthesis_bias = Parameter(np.full(3, 0.5))

    # -- analysis -------------------------------------------------------------
    def encoder_conditions(self, image: Tensor, mask: Tensor) -> list[Tensor]:
        return mask_condition_path(image, mask, self.fusion, list(self.ENCODER_SITES))

    def analysis(self, image: Tensor, conds: list[Tensor]) -> Tensor:
        x = self.stem_sft(self.stem(image), conds[0])
        for stage, cond in zip(self.encoder, conds[1:4]):
            x = stage(_nhwc(x), cond)
        return x

    def hyper_analysis(self, y: Tensor, cond: Tensor) -> Tensor:
        x = _nhwc(y)
        for stage in self.hyper_encoder:
            x = stage(x)
        return self.hyper_sft(_nchw(x), cond)

    # -- synthesis --------------------------------------------------------------
    def decoder_conditions(self, z_hat: Tensor) -> list[Tensor]:
        base = self.z_condition(z_hat)
        return [upsample_nearest(base, HYPER_FACTOR // f) for f in self.DECODER_SITES]

    def hyper_synthesis(self, z_hat: Tensor, cond: Tensor) -> Tensor:
        x = _nhwc(self.hyper_decoder_sft(z_hat, cond))
        for stage in self.hyper_decoder:
            x = stage(x)
        return _nchw(self.entropy_params(x))

    def entropy_parameters(self, z_hat: Tensor, cond: Tensor | None = None, y_anchor: Tensor | None = None):
        """Per-element (mu, sigma) for y; see :func:`hyper_analysis_params`."""
        if cond is None:
            cond = self.decoder_conditions(z_hat)[0]
        raw = self.hyper_synthesis(z_hat, cond)
        cy = self.config.latent_channels
        if self.config.context_mode == "checkerboard":
            h, w = raw.shape[2:]
            anchors = checkerboard(h, w).astype(raw.dtype)
            if y_anchor is None:
                ctx_in = Tensor(np.zeros((raw.shape[0], cy, h, w), dtype=raw.dtype))
            else:
                ctx_in = y_anchor * anchors
            raw = raw + self.context(ctx_in) * (1.0 - anchors)
        mu = raw[:, :cy]
        sigma = scale_from_raw(raw[:, cy:])
        return mu, sigma

    def synthesis(self, y_hat: Tensor, conds: list[Tensor]) -> Tensor:
        x = self.latent_sft(y_hat, conds[1])
        for stage, cond in zip(self.decoder, conds[2:]):
            x = stage(x, cond)
        k = self.config.stem_kernel
        return conv_transpose2d(x, self.synthesis_weight, self.synthesis_bias, stride=2, pad=k // 2, output_pad=1)

    # -- training forward ---------------------------------------------------------
    def forward(self, image: Tensor, mask: Tensor, rng: np.random.Generator) -> dict:
        """Noise-quantized pass used for training; reconstruction is not clamped."""
        conds = self.encoder_conditions(image, mask)
        y = self.analysis(image, conds)
        z = self.hyper_analysis(y, conds[4])
        z_tilde = quantize(z, "noise", rng=rng)
        y_tilde = quantize(y, "noise", rng=rng)
        dconds = self.decoder_conditions(z_tilde)
        mu, sigma = self.entropy_parameters(z_tilde, dconds[0], y_tilde)
        lk_y = gaussian_likelihood(y_tilde, mu, sigma)
        lk_z = factorized_likelihood(z_tilde, self.prior)
        x_hat = self.synthesis(y_tilde, dconds)
        return {"x_hat": x_hat, "likelihoods": (lk_y, lk_z), "y": y, "z": z}

    def num_parameters(self) -> int:
        return count_params(self)

    def attention_sites(self) -> dict[str, tuple[SwinBlock, int]]:
        """Every Swin block in forward order, with its downsampling factor."""
        sites: dict[str, tuple[SwinBlock, int]] = {}

        def add(prefix, stages, factors):
            k = 0
            for stage, f in zip(stages, factors):
                for pair in stage.blocks:
                    for blk in (pair.w_block, pair.sw_block):
                        sites[f"{prefix}.{k}"] = (blk, f)
                        k += 1

        add("encoder", self.encoder, (2, 4, 8))
        add("decoder", self.decoder, (8, 4, 2))
        add("hyper_encoder", self.hyper_encoder, (16, 32))
        add("hyper_decoder", self.hyper_decoder, (32, 16))
        return sites


def build_model(preset_or_config: str | ModelConfig = "toy", **overrides) -> RoiCodec:
    cfg = PRESETS[preset_or_config] if isinstance(preset_or_config, str) else preset_or_config
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return RoiCodec(cfg)


def count_model_params(model: RoiCodec) -> int:
    return count_params(model)


# -- inference ---------------------------------------------------------------------


def pad_to_multiple(x: Tensor | np.ndarray, geometry: Geometry) -> Tensor:
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    ph = geometry.padded_height - d.shape[2]
    pw = geometry.padded_width - d.shape[3]
    if ph == 0 and pw == 0:
        return Tensor(d)
    return Tensor(np.pad(d, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge"))


def _check_image(image: Tensor, mask: Tensor) -> None:
    if image.ndim != 4 or image.size == 0:
        raise ValueError("image must be a non-empty [N, 3, H, W] tensor")
    if image.shape[1] != 3:
        raise ValueError(f"image must have 3 channels, got {image.shape[1]}")
    if mask.ndim != 4 or mask.shape[1] != 1 or mask.shape[2:] != image.shape[2:] or mask.shape[0] != image.shape[0]:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape}")
    validate_mask(mask)


def hyper_analysis_params(z_hat: Tensor, model: RoiCodec, y_anchor: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Gaussian mean and scale for every element of y.

    In checkerboard mode, anchors get hyper-only parameters; non-anchors also
    see ``y_anchor`` restricted to the anchor positions.
    """
    return model.entropy_parameters(z_hat, None, y_anchor)


def quantize_latents(y: Tensor, z: Tensor, model: RoiCodec) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Round z, then mean-centre-round y. Returns (y_hat, z_hat, mu, sigma)."""
    z_hat = quantize(z, "round")
    mu, sigma = hyper_analysis_params(z_hat, model)
    y_hat = quantize(y, "round", offset=mu)
    if model.config.context_mode == "checkerboard":
        anchors = checkerboard(*y.shape[2:]).astype(y.dtype)
        mu, sigma = hyper_analysis_params(z_hat, model, y_anchor=Tensor(y_hat.data * anchors))
        y_non = quantize(y, "round", offset=mu)
        y_hat = Tensor(np.where(anchors > 0, y_hat.data, y_non.data))
    return y_hat, z_hat, mu, sigma


def encode_latents(image, mask, model: RoiCodec) -> tuple[LatentPair, list[Tensor]]:
    """Pad, analyse and quantize. Returns the quantized latents and the encoder pyramid."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    _check_image(image, mask)
    dtype = model.synthesis_bias.dtype
    geom = Geometry.for_size(image.shape[2], image.shape[3])
    with no_grad():
        x = Tensor(pad_to_multiple(image, geom).data.astype(dtype))
        m = Tensor(pad_to_multiple(mask, geom).data.astype(dtype))
        conds = model.encoder_conditions(x, m)
        y = model.analysis(x, conds)
        z = model.hyper_analysis(y, conds[4])
        y_hat, z_hat, _, _ = quantize_latents(y, z, model)
    return LatentPair(y_hat, z_hat, geom), conds


def decode_latents(y_hat: Tensor, z_hat: Tensor, model: RoiCodec, geometry: Geometry) -> Tensor:
    """Reconstruct ``[N, 3, H, W]`` in [0, 1] from the quantized latents alone."""
    if tuple(y_hat.shape[2:]) != geometry.y_shape or tuple(z_hat.shape[2:]) != geometry.z_shape:
        raise DimensionError(
            f"latents {y_hat.shape[2:]}/{z_hat.shape[2:]} do not match geometry {geometry.y_shape}/{geometry.z_shape}"
        )
    with no_grad():
        conds = model.decoder_conditions(z_hat)
        x = model.synthesis(y_hat, conds)
    out = np.clip(x.data, 0.0, 1.0)[:, :, : geometry.height, : geometry.width]
    return Tensor(np.ascontiguousarray(out))
