"""Masked autoencoder over log-mel spectrogram patches.

Pretraining hides most patches and reconstructs them from the rest. For
separation the decoder is dropped and encoder features are pooled to a short
sequence, tiled back to the STFT frame count and concatenated with the
mixture magnitude.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import numerics
from .dsp import StftConfig, log_mel_tensor

STRATEGIES = ("frozen", "updated")


@dataclass(frozen=True)
class MaeConfig:
    patch_time: int = 16
    patch_mel: int = 16
    n_mels: int = 64
    embed_dim: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 2
    decoder_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.8
    pooled_len: int = 32
    decoder_heads: int | None = None  # defaults to ``heads``

    def __post_init__(self):
        if self.n_mels % self.patch_mel:
            raise ValueError(f"n_mels={self.n_mels} not divisible by patch_mel={self.patch_mel}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if self.embed_dim % self.heads or self.decoder_dim % self.n_decoder_heads:
            raise ValueError("heads must divide embed_dim and decoder_dim")
        if self.embed_dim % 4 or self.decoder_dim % 4:
            raise ValueError("2-D sin-cos positions need dims divisible by 4")

    @classmethod
    def full_scale(cls) -> "MaeConfig":
        """ViT-B geometry: 768-d, 12 encoder and 8 decoder layers, 128 mels."""
        return cls(n_mels=128, embed_dim=768, encoder_layers=12, decoder_layers=8,
                   decoder_dim=512, heads=12, decoder_heads=16)

    @property
    def n_decoder_heads(self) -> int:
        return self.heads if self.decoder_heads is None else self.decoder_heads

    @property
    def patch_dim(self) -> int:
        return self.patch_time * self.patch_mel

    def grid_dims(self, n_frames: int) -> tuple[int, int]:
        return -(-n_frames // self.patch_time), self.n_mels // self.patch_mel


@dataclass
class PatchGrid:
    patches: np.ndarray  # (P, patch_time * patch_mel)
    time_patches: int
    mel_patches: int
    n_frames: int  # before zero-padding
    patch_time: int
    patch_mel: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def positions(self) -> np.ndarray:
        """(P, 2) grid coordinates (time index, mel index), time-major order."""
        t, m = np.meshgrid(np.arange(self.time_patches), np.arange(self.mel_patches),
                           indexing="ij")
        return np.stack([t.ravel(), m.ravel()], axis=1)


@dataclass
class SslFeatures:
    sequence: torch.Tensor  # (..., L, D)
    layer_outputs: list[torch.Tensor] | None = None


# --------------------------------------------------------------------------
# Patches and positions


def patchify_tensor(x: torch.Tensor, patch_time: int, patch_mel: int) -> torch.Tensor:
    """(..., T, M) → (..., P, patch_time*patch_mel); T is zero-padded up."""
    t, m = x.shape[-2:]
    if m % patch_mel:
        raise ValueError(f"{m} mel bins not divisible by patch_mel={patch_mel}")
    pad = (-t) % patch_time
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
    nt, nm = x.shape[-2] // patch_time, m // patch_mel
    lead = x.shape[:-2]
    x = x.reshape(*lead, nt, patch_time, nm, patch_mel)
    x = x.transpose(-3, -2)
    return x.reshape(*lead, nt * nm, patch_time * patch_mel)


def unpatchify_tensor(p: torch.Tensor, time_patches: int, patch_time: int, patch_mel: int) -> torch.Tensor:
    lead = p.shape[:-2]
    nm = p.shape[-2] // time_patches
    x = p.reshape(*lead, time_patches, nm, patch_time, patch_mel).transpose(-3, -2)
    return x.reshape(*lead, time_patches * patch_time, nm * patch_mel)


def patchify(mel_spec: np.ndarray, config: MaeConfig) -> PatchGrid:
    mel_spec = np.asarray(mel_spec)
    if mel_spec.ndim != 2:
        raise ValueError("expected a (T, M) matrix")
    t, m = mel_spec.shape
    if m % config.patch_mel:
        raise ValueError(f"{m} mel bins not divisible by patch_mel={config.patch_mel}")
    patches = patchify_tensor(torch.from_numpy(mel_spec), config.patch_time, config.patch_mel)
    nt = -(-t // config.patch_time)
    return PatchGrid(patches.numpy(), nt, m // config.patch_mel, t, config.patch_time,
                     config.patch_mel)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    x = unpatchify_tensor(torch.from_numpy(grid.patches), grid.time_patches,
                          grid.patch_time, grid.patch_mel)
    return x.numpy()[: grid.n_frames]


def _sincos_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2) / (dim / 2.0))
    out = positions[:, None] * omega[None, :]
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


@lru_cache(maxsize=32)
def sincos_2d(time_patches: int, mel_patches: int, dim: int) -> np.ndarray:
    """Fixed (P, dim) embedding: half the channels encode time, half mel."""
    t, m = np.meshgrid(np.arange(time_patches, dtype=np.float64),
                       np.arange(mel_patches, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(t.ravel(), dim // 2), _sincos_1d(m.ravel(), dim // 2)],
                         axis=1)
    emb.setflags(write=False)
    return emb


def mask_count(n_patches: int, ratio: float) -> int:
    return int(np.floor(ratio * n_patches + 0.5))


def random_mask(grid, mask_ratio: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Uniform draw without replacement of ``round(ratio * P)`` masked patches.

    ``grid`` may be a :class:`PatchGrid` or a patch count. Returns sorted
    (visible, masked) index arrays.
    """
    if not 0.0 < mask_ratio < 1.0:
        raise ValueError("mask_ratio must lie in (0, 1)")
    n = grid.n_patches if isinstance(grid, PatchGrid) else int(grid)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    order = rng.permutation(n)
    k = mask_count(n, mask_ratio)
    return np.sort(order[k:]), np.sort(order[:k])


# --------------------------------------------------------------------------
# Transformer


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        numerics.init_xavier(self.qkv)
        numerics.init_xavier(self.proj)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = numerics.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)
        numerics.init_kaiming(self.fc1)
        numerics.init_xavier(self.fc2)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.relu(self.fc1(self.norm2(x))))


class MaskedAutoencoder(nn.Module):
    def __init__(self, config: MaeConfig = MaeConfig()):
        super().__init__()
        self.config = config
        c = config
        self.patch_embed = nn.Linear(c.patch_dim, c.embed_dim)
        numerics.init_xavier(self.patch_embed)
        self.blocks = nn.ModuleList(
            TransformerBlock(c.embed_dim, c.heads, c.mlp_ratio) for _ in range(c.encoder_layers)
        )
        self.norm = nn.LayerNorm(c.embed_dim)
        self.decoder_embed = nn.Linear(c.embed_dim, c.decoder_dim)
        numerics.init_xavier(self.decoder_embed)
        self.mask_token = nn.Parameter(torch.randn(1, 1, c.decoder_dim) * 0.02)
        self.decoder_blocks = nn.ModuleList(
            TransformerBlock(c.decoder_dim, c.n_decoder_heads, c.mlp_ratio) for _ in range(c.decoder_layers)
        )
        self.decoder_norm = nn.LayerNorm(c.decoder_dim)
        self.head = nn.Linear(c.decoder_dim, c.patch_dim)
        numerics.init_zero(self.head)
        # input standardisation, fitted on the pretraining set
        self.register_buffer("norm_mean", torch.zeros(()))
        self.register_buffer("norm_std", torch.ones(()))

    def standardize(self, log_mel: torch.Tensor) -> torch.Tensor:
        return (log_mel - self.norm_mean) / self.norm_std

    def _pos(self, nt: int, nm: int, dim: int, like: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(np.array(sincos_2d(nt, nm, dim))).to(like.dtype)

    def encode(self, x: torch.Tensor, visible: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Encoder block outputs for (B, T, M) input.

        With ``visible`` (B, n_vis) only those patches are embedded.
        """
        c = self.config
        nt, nm = c.grid_dims(x.shape[-2])
        if x.shape[-1] != c.n_mels:
            raise ValueError(f"expected {c.n_mels} mel bins, got {x.shape[-1]}")
        tokens = self.patch_embed(patchify_tensor(x, c.patch_time, c.patch_mel))
        tokens = tokens + self._pos(nt, nm, c.embed_dim, tokens)
        if visible is not None:
            tokens = torch.gather(tokens, 1, visible[..., None].expand(-1, -1, c.embed_dim))
        outputs = []
        h = tokens
        for blk in self.blocks:
            h = blk(h)
            outputs.append(h)
        return outputs

    def reconstruct(self, x: torch.Tensor, visible: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """Predicted patches (B, P, patch_dim) from the visible subset."""
        c = self.config
        nt, nm = c.grid_dims(x.shape[-2])
        n_patches = nt * nm
        latent = self.norm(self.encode(x, visible)[-1])
        vis = self.decoder_embed(latent)
        b = x.shape[0]
        full = self.mask_token.expand(b, n_patches, c.decoder_dim).clone()
        full = full.scatter(1, visible[..., None].expand(-1, -1, c.decoder_dim), vis)
        h = full + self._pos(nt, nm, c.decoder_dim, full)
        for blk in self.decoder_blocks:
            h = blk(h)
        return self.head(self.decoder_norm(h))

    def encoder_parameters(self) -> dict[str, torch.Tensor]:
        names = ("patch_embed.", "blocks.")
        return {n: p for n, p in self.named_parameters() if n.startswith(names)}


def masked_patch_loss(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked patches only."""
    idx = masked[..., None].expand(-1, -1, pred.shape[-1])
    return ((torch.gather(pred, 1, idx) - torch.gather(target, 1, idx)) ** 2).mean()


def draw_masks(batch: int, n_patches: int, ratio: float, rng) -> tuple[torch.Tensor, torch.Tensor]:
    vis, msk = zip(*(random_mask(n_patches, ratio, rng) for _ in range(batch)))
    return torch.from_numpy(np.stack(vis)), torch.from_numpy(np.stack(msk))


def mae_loss(model: MaskedAutoencoder, batch: torch.Tensor, visible, masked) -> torch.Tensor:
    c = model.config
    target = patchify_tensor(batch, c.patch_time, c.patch_mel)
    pred = model.reconstruct(batch, visible, masked)
    return masked_patch_loss(pred, target, masked)


def mae_pretrain_step(batch: torch.Tensor, model: MaskedAutoencoder, optimizer: numerics.Adam,
                      rng: np.random.Generator) -> float:
    """One masked-reconstruction Adam step on standardised (B, T, M) log-mels."""
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError("expected a non-empty (B, T, M) batch")
    c = model.config
    nt, nm = c.grid_dims(batch.shape[-2])
    visible, masked = draw_masks(batch.shape[0], nt * nm, c.mask_ratio, rng)
    model.train()
    return optimizer.step(mae_loss(model, batch, visible, masked))


# --------------------------------------------------------------------------
# Downstream features


class LayerWeights(nn.Module):
    """Learned softmax weighting over encoder layer outputs."""

    def __init__(self, n_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_layers))

    def weights(self) -> torch.Tensor:
        return F.softmax(self.logits, dim=0)

    def forward(self, layers: list[torch.Tensor]) -> torch.Tensor:
        w = self.weights()
        return sum(w[i] * h for i, h in enumerate(layers))


def extract_features(mel_spec: torch.Tensor, model: MaskedAutoencoder, strategy: str,
                     layer_weights: LayerWeights | None = None) -> SslFeatures:
    """Encoder features of standardised log-mels with every patch visible.

    ``frozen`` returns the last block's output with no gradient path into
    the encoder. ``updated`` returns the softmax-weighted sum of all block
    outputs and keeps the graph.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    squeeze = mel_spec.ndim == 2
    if squeeze:
        mel_spec = mel_spec[None]
    if strategy == "frozen":
        with torch.no_grad():
            layers = model.encode(mel_spec)
        seq = layers[-1]
    else:
        if layer_weights is None:
            layer_weights = LayerWeights(len(model.blocks))
        layers = model.encode(mel_spec)
        seq = layer_weights(layers)
    if squeeze:
        seq = seq[0]
        layers = [h[0] for h in layers]
    return SslFeatures(seq, layers)


def average_max_pool(seq, pooled_len: int):
    """Non-overlapping windows along the sequence; (window mean + window max) / 2.

    The sequence tail is zero-padded to a multiple of ``pooled_len``.
    Accepts (..., L, D) tensors or arrays.
    """
    as_numpy = isinstance(seq, np.ndarray)
    x = torch.from_numpy(seq) if as_numpy else seq
    length = x.shape[-2]
    if pooled_len < 1 or pooled_len > length:
        raise ValueError(f"pooled_len={pooled_len} must lie in [1, {length}]")
    pad = (-length) % pooled_len
    if pad:
        x = F.pad(x, (0, 0, 0, pad))
    win = x.shape[-2] // pooled_len
    x = x.reshape(*x.shape[:-2], pooled_len, win, x.shape[-1])
    out = 0.5 * (x.mean(dim=-2) + x.amax(dim=-2))
    return out.numpy() if as_numpy else out


def duplicate_to_frames(pooled, target_t: int):
    """Tile the whole pooled sequence along time and truncate to ``target_t``."""
    as_numpy = isinstance(pooled, np.ndarray)
    x = torch.from_numpy(pooled) if as_numpy else pooled
    length = x.shape[-2]
    if target_t < length:
        raise ValueError(f"target_t={target_t} shorter than pooled length {length}")
    reps = -(-target_t // length)
    tiled = x.repeat(*([1] * (x.ndim - 2)), reps, 1)[..., :target_t, :]
    return tiled.numpy() if as_numpy else tiled


class SslFrontend(nn.Module):
    """Waveform → (B, frames, D) SSL features ready for concatenation."""

    def __init__(self, mae: MaskedAutoencoder, mel_config: StftConfig, strategy: str,
                 target_frames: int):
        super().__init__()
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.mae = mae
        self.mel_config = mel_config
        self.strategy = strategy
        self.target_frames = target_frames
        self.layer_weights = LayerWeights(len(mae.blocks))
        if strategy == "frozen":
            for p in self.mae.parameters():
                p.requires_grad_(False)
            self.layer_weights.logits.requires_grad_(False)
        else:
            # only the encoder feeds the separator; the reconstruction branch stays fixed
            encoder = set(map(id, mae.encoder_parameters().values()))
            for p in self.mae.parameters():
                if id(p) not in encoder:
                    p.requires_grad_(False)

    @property
    def dim(self) -> int:
        return self.mae.config.embed_dim

    def train(self, mode: bool = True):
        super().train(mode)
        if self.strategy == "frozen":
            self.mae.eval()
        return self

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        mel = self.mae.standardize(log_mel_tensor(wave, self.mel_config, self.mae.config.n_mels))
        mel = mel.to(next(self.mae.parameters()).dtype)
        feats = extract_features(mel, self.mae, self.strategy, self.layer_weights)
        pooled = average_max_pool(feats.sequence, self.mae.config.pooled_len)
        return duplicate_to_frames(pooled, self.target_frames)


def mae_meta(model: MaskedAutoencoder, mel_config: StftConfig) -> dict:
    return {"kind": "mae", "mae_config": asdict(model.config), "mel_config": asdict(mel_config)}
