"""Query-conditioned residual U-Net predicting a complex ratio mask.

Input is the mixture STFT magnitude, optionally with SSL feature columns
appended, treated as a one-channel (frames x features) image. Every
residual block normalises, modulates with FiLM, applies ReLU and convolves,
twice. The head emits three channels per time-frequency cell: a bounded
magnitude and an unnormalised (cos, sin) pair. The mask covers the STFT
columns only; SSL columns are input-only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .data import AudioClip
from .dsp import ComplexMask, StftConfig, apply_mask_tensor, istft_tensor, stft_tensor
from .query_embed import QueryEmbedding

PHASE_EPS = 1e-8


@dataclass(frozen=True)
class SeparatorConfig:
    encoder_blocks: int = 4
    channels: tuple[int, ...] = (16, 32, 64, 128)
    stft_bins: int = 513
    ssl_dim: int = 0  # 0 = no fusion
    embed_dim: int = 128
    magnitude_cap: float = 2.0
    log_compress: bool = True

    def __post_init__(self):
        if len(self.channels) != self.encoder_blocks:
            raise ValueError("need one channel count per encoder block")
        if self.magnitude_cap <= 0:
            raise ValueError("magnitude_cap must be positive")

    @property
    def fusion(self) -> bool:
        return self.ssl_dim > 0

    @property
    def input_width(self) -> int:
        return self.stft_bins + self.ssl_dim

    @classmethod
    def desk(cls, stft_bins: int, ssl_dim: int = 0, embed_dim: int = 128) -> "SeparatorConfig":
        return cls(4, (8, 16, 32, 64), stft_bins, ssl_dim, embed_dim)

    @classmethod
    def full_scale(cls, ssl_dim: int = 768, embed_dim: int = 2048) -> "SeparatorConfig":
        return cls(6, (32, 64, 128, 256, 384, 384), 513, ssl_dim, embed_dim)


# --------------------------------------------------------------------------
# Blocks


class FiLM(nn.Module):
    """Per-channel affine modulation: (1 + Wγ e) ⊙ h + Wβ e.

    Projections start at zero so the block is the identity at initialisation.
    """

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.gamma = nn.Linear(embed_dim, channels)
        self.beta = nn.Linear(embed_dim, channels)
        numerics.init_zero(self.gamma)
        numerics.init_zero(self.beta)

    def forward(self, h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.embed_dim:
            raise ValueError(f"embedding dim {e.shape[-1]} != FiLM dim {self.embed_dim}")
        g = 1.0 + self.gamma(e)
        b = self.beta(e)
        return h * g[:, :, None, None] + b[:, :, None, None]


def film(features: torch.Tensor, e, block: FiLM) -> torch.Tensor:
    if isinstance(e, QueryEmbedding):
        e = torch.from_numpy(e.vector)[None].to(features.dtype)
    return block(features, e)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int):
        super().__init__()
        self.bn1 = numerics.batch_norm(c_in)
        self.film1 = FiLM(c_in, embed_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn2 = numerics.batch_norm(c_out)
        self.film2 = FiLM(c_out, embed_dim)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        numerics.init_kaiming(self.conv1)
        numerics.init_kaiming(self.conv2)
        self.shortcut = None
        if c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1)
            numerics.init_xavier(self.shortcut)

    def forward(self, x, e):
        h = self.conv1(F.relu(self.film1(self.bn1(x), e)))
        h = self.conv2(F.relu(self.film2(self.bn2(h), e)))
        return h + (x if self.shortcut is None else self.shortcut(x))


class MaskHead(nn.Module):
    """1x1 conv to (z_mag, z_cos, z_sin), mapped to a bounded polar mask.

    Weights start at zero with bias (0, 1, 0): magnitude cap/2, zero phase.
    """

    def __init__(self, c_in: int, magnitude_cap: float):
        super().__init__()
        self.cap = magnitude_cap
        self.conv = nn.Conv2d(c_in, 3, 1)
        numerics.init_zero(self.conv)
        with torch.no_grad():
            self.conv.bias[1] = 1.0

    def forward(self, h):
        z = self.conv(h)
        return mask_from_logits(z[:, 0], z[:, 1], z[:, 2], self.cap)


def mask_from_logits(z_mag, z_cos, z_sin, cap: float):
    magnitude = cap * torch.sigmoid(z_mag)
    norm = torch.sqrt(z_cos**2 + z_sin**2).clamp_min(PHASE_EPS)
    return magnitude, z_cos / norm, z_sin / norm


class ResUNet(nn.Module):
    def __init__(self, config: SeparatorConfig):
        super().__init__()
        self.config = config
        ch = config.channels
        de = config.embed_dim
        self.pre = nn.Conv2d(1, ch[0], 1)
        numerics.init_xavier(self.pre)
        self.encoder = nn.ModuleList()
        c = ch[0]
        for co in ch:
            self.encoder.append(ResBlock(c, co, de))
            c = co
        self.bottleneck = ResBlock(c, 2 * c, de)
        c = 2 * c
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for co in reversed(ch):
            up = nn.ConvTranspose2d(c, co, 2, stride=2)
            numerics.init_kaiming(up)
            self.up.append(up)
            self.decoder.append(ResBlock(2 * co, co, de))
            c = co
        self.head = MaskHead(c, config.magnitude_cap)
        # NHWC convolutions are markedly faster on CPU for these shapes
        self.to(memory_format=torch.channels_last)

    def forward(self, x: torch.Tensor, e: torch.Tensor):
        """(B, T, F_in) fused input → polar mask over (B, T, stft_bins)."""
        b, t, f_in = x.shape
        if f_in != self.config.input_width:
            raise ValueError(f"input width {f_in} != configured {self.config.input_width}")
        k = 2 ** self.config.encoder_blocks
        pt, pf = (-t) % k, (-f_in) % k
        h = F.pad(x, (0, pf, 0, pt))[:, None].contiguous(memory_format=torch.channels_last)
        h = self.pre(h)
        skips = []
        for blk in self.encoder:
            h = blk(h, e)
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = self.bottleneck(h, e)
        for up, blk, skip in zip(self.up, self.decoder, reversed(skips)):
            h = blk(torch.cat([up(h), skip], dim=1), e)
        mag, cos, sin = self.head(h)
        bins = self.config.stft_bins
        return mag[:, :t, :bins], cos[:, :t, :bins], sin[:, :t, :bins]


# --------------------------------------------------------------------------
# Pipeline


def build_input(magnitude: torch.Tensor, ssl: torch.Tensor | None, log_compress: bool = True) -> torch.Tensor:
    """[magnitude | ssl] along the feature axis; (..., T, F) and (..., T, D)."""
    mag = torch.log1p(magnitude) if log_compress else magnitude
    if ssl is None:
        return mag
    if ssl.shape[-2] != mag.shape[-2]:
        raise ValueError(f"SSL features have {ssl.shape[-2]} frames, STFT has {mag.shape[-2]}")
    return torch.cat([mag, ssl.to(mag.dtype)], dim=-1)


class QuerySeparator(nn.Module):
    """Waveform mixture + query embedding → waveform estimate."""

    def __init__(self, config: SeparatorConfig, stft_config: StftConfig, ssl=None):
        super().__init__()
        if stft_config.n_bins != config.stft_bins:
            raise ValueError(f"STFT gives {stft_config.n_bins} bins, separator expects {config.stft_bins}")
        if stft_config.pad_to_frames is None:
            raise ValueError("separator STFT config must set pad_to_frames")
        if (ssl is None) == config.fusion:
            raise ValueError("fusion flag and SSL front-end disagree")
        if ssl is not None:
            if ssl.dim != config.ssl_dim:
                raise ValueError(f"SSL model gives {ssl.dim}-d features, config expects {config.ssl_dim}")
            if ssl.target_frames != stft_config.pad_to_frames:
                raise ValueError("SSL front-end frame count differs from the STFT frame count")
        self.config = config
        self.stft_config = stft_config
        self.unet = ResUNet(config)
        self.ssl = ssl

    @property
    def strategy(self) -> str | None:
        return None if self.ssl is None else self.ssl.strategy

    def mask(self, wave: torch.Tensor, e: torch.Tensor):
        spec = stft_tensor(wave, self.stft_config)
        ssl = self.ssl(wave) if self.ssl is not None else None
        dtype = self.unet.pre.weight.dtype
        x = build_input(spec.abs().to(dtype), ssl, self.config.log_compress)
        return spec, self.unet(x, e.to(dtype))

    def forward(self, wave: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        spec, (mag, cos, sin) = self.mask(wave, e)
        n = self.stft_config.n_frames(wave.shape[-1])
        out = apply_mask_tensor(spec[:, :n], mag[:, :n].to(spec.real.dtype),
                                cos[:, :n].to(spec.real.dtype), sin[:, :n].to(spec.real.dtype))
        return istft_tensor(out, self.stft_config, wave.shape[-1])

    def separator_parameters(self) -> dict[str, torch.Tensor]:
        return numerics.trainable(self.unet, "unet.")

    def trainable_parameters(self) -> dict[str, torch.Tensor]:
        return numerics.trainable(self)


def separate(mix: AudioClip, e: QueryEmbedding, model: QuerySeparator) -> AudioClip:
    """Evaluation-mode separation of one mixture."""
    if mix.sample_rate != model.stft_config.sample_rate:
        raise ValueError(f"mixture at {mix.sample_rate} Hz, model expects {model.stft_config.sample_rate}")
    if e.dim != model.config.embed_dim:
        raise ValueError(f"query dim {e.dim} != model embedding dim {model.config.embed_dim}")
    model.eval()
    dtype = model.unet.pre.weight.dtype
    with torch.no_grad():
        wave = torch.from_numpy(np.asarray(mix.samples)).to(dtype)[None]
        out = model(wave, torch.from_numpy(e.vector)[None].to(dtype))
    return AudioClip(out[0].numpy(), mix.sample_rate, e.class_id, name=f"{mix.name}:sep")


def predict_mask(mix: AudioClip, e: QueryEmbedding, model: QuerySeparator) -> ComplexMask:
    model.eval()
    dtype = model.unet.pre.weight.dtype
    with torch.no_grad():
        wave = torch.from_numpy(np.asarray(mix.samples)).to(dtype)[None]
        _, (mag, cos, sin) = model.mask(wave, torch.from_numpy(e.vector)[None].to(dtype))
    return ComplexMask(mag[0].double().numpy(), cos[0].double().numpy(), sin[0].double().numpy(),
                       model.config.magnitude_cap)


def separator_meta(model: QuerySeparator) -> dict:
    return {
        "kind": "separator",
        "config": asdict(model.config),
        "stft_config": asdict(model.stft_config),
        "fusion": model.config.fusion,
        "strategy": model.strategy,
    }
