"""Double-precision gradient checks of the separator and MAE building blocks.

Each check builds a small fragment with random (non-zero) parameters and
compares reverse-mode gradients against central finite differences of a
random linear read-out of the fragment's output.
"""

from __future__ import annotations

import time

import torch

from . import numerics
from .separator import FiLM, MaskHead, ResUNet, SeparatorConfig
from .ssl_mae import MaeConfig, MaskedAutoencoder


def _randomise(module: torch.nn.Module, gen: torch.Generator, scale: float = 0.5) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


def _readout(out: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(out.shape, generator=gen, dtype=out.dtype)


def _params_with_inputs(module, **inputs) -> dict[str, torch.Tensor]:
    params = numerics.trainable(module)
    params.update(inputs)
    return params


def check_film(seed: int = 0, tolerance: float = 1e-4):
    gen = torch.Generator().manual_seed(seed)
    block = FiLM(3, 5).double()
    _randomise(block, gen)
    h = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64, requires_grad=True)
    e = torch.randn(2, 5, generator=gen, dtype=torch.float64, requires_grad=True)
    w = _readout(block(h, e), gen)
    return numerics.gradient_check(lambda: (block(h, e) * w).sum(),
                                   _params_with_inputs(block, h=h, e=e),
                                   tolerance=tolerance, seed=seed, name="film")


def check_resunet(seed: int = 0, tolerance: float = 1e-4):
    gen = torch.Generator().manual_seed(seed)
    cfg = SeparatorConfig(encoder_blocks=1, channels=(2,), stft_bins=5, ssl_dim=2, embed_dim=3)
    net = ResUNet(cfg).double()
    _randomise(net, gen)
    net.train()
    x = torch.randn(2, 6, 7, generator=gen, dtype=torch.float64, requires_grad=True)
    e = torch.randn(2, 3, generator=gen, dtype=torch.float64, requires_grad=True)

    def fn():
        mag, cos, sin = net(x, e)
        return (torch.stack([mag, cos, sin]) * w).sum()

    w = _readout(torch.stack(net(x, e)), gen)
    return numerics.gradient_check(fn, _params_with_inputs(net, x=x, e=e),
                                   tolerance=tolerance, seed=seed, name="resunet_1block")


def check_mae_encoder(seed: int = 0, tolerance: float = 1e-4):
    gen = torch.Generator().manual_seed(seed)
    cfg = MaeConfig(patch_time=2, patch_mel=4, n_mels=8, embed_dim=8, encoder_layers=1,
                    decoder_layers=1, decoder_dim=8, heads=2, pooled_len=2)
    mae = MaskedAutoencoder(cfg).double()
    _randomise(mae, gen, scale=0.3)
    x = torch.randn(2, 6, 8, generator=gen, dtype=torch.float64, requires_grad=True)
    w = _readout(mae.encode(x)[-1], gen)
    params = mae.encoder_parameters()
    params["x"] = x
    return numerics.gradient_check(lambda: (mae.encode(x)[-1] * w).sum(), params,
                                   tolerance=tolerance, seed=seed, name="mae_encoder_1layer")


def check_mask_head(seed: int = 0, tolerance: float = 1e-4):
    gen = torch.Generator().manual_seed(seed)
    head = MaskHead(4, 2.0).double()
    _randomise(head, gen)
    h = torch.randn(2, 4, 3, 5, generator=gen, dtype=torch.float64, requires_grad=True)

    def fn():
        return (torch.stack(head(h)) * w).sum()

    w = _readout(torch.stack(head(h)), gen)
    return numerics.gradient_check(fn, _params_with_inputs(head, h=h),
                                   tolerance=tolerance, seed=seed, name="mask_head")


CHECKS = {
    "film": check_film,
    "resunet_1block": check_resunet,
    "mae_encoder_1layer": check_mae_encoder,
    "mask_head": check_mask_head,
}


def run_all(seed: int = 0, tolerance: float = 1e-4) -> tuple[list[numerics.GradCheckReport], float]:
    """Every registered check; returns the reports and the wall time in seconds."""
    t0 = time.perf_counter()
    reports = [fn(seed, tolerance) for fn in CHECKS.values()]
    return reports, time.perf_counter() - t0


def format_table(reports) -> str:
    rows = [("fragment", "status", "max_rel_err", "entries")]
    for r in reports:
        rows.append((r.name, "PASS" if r.passed else "FAIL", f"{r.max_rel_error:.3e}",
                     str(r.n_checked)))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)
