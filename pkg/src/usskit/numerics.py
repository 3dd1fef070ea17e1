"""Tensor plumbing shared by every trainable model.

Autograd and dense kernels come from torch. This module adds the pieces the
rest of the package relies on: a checked reverse-mode entry point, a plain
Adam implementation, a finite-difference gradient checker, weight
initialisation rules and a self-describing checkpoint archive.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHIVE_MAGIC = "USSKIT-ARCHIVE"
ARCHIVE_VERSION = 1

# Precision modes: training runs in single, verification in double.
TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class NumericFailure(FloatingPointError):
    """A NaN or Inf appeared while evaluating or differentiating a graph."""

    def __init__(self, primitive: str, detail: str = ""):
        self.primitive = primitive
        msg = f"non-finite value in primitive '{primitive}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def _primitive_name(grad_fn) -> str:
    if grad_fn is None:
        return "leaf"
    name = type(grad_fn).__name__
    return re.sub(r"Backward\d*$", "", name).lower() or name


def forward_backward(
    output: torch.Tensor, params: Mapping[str, torch.Tensor]
) -> dict[str, torch.Tensor]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. named parameters.

    Gradients are returned, never accumulated into ``.grad``, so leaves that
    are not listed in ``params`` are left untouched. Parameters that do not
    influence ``output`` get a zero gradient.

    Raises:
        ValueError: ``output`` is not a single-element tensor.
        NumericFailure: the forward value or any backward intermediate is
            non-finite. The failing primitive is named in the exception.
    """
    if output.numel() != 1:
        raise ValueError(f"output must be scalar, got shape {tuple(output.shape)}")
    output = output.reshape(())
    if not torch.isfinite(output.detach()):
        raise NumericFailure(_primitive_name(output.grad_fn), "forward value")
    names = list(params)
    tensors = [params[n] for n in names]
    # Plain backward first; the graph is kept so that a non-finite result can
    # be replayed under anomaly detection to name the offending primitive.
    grads = torch.autograd.grad(output, tensors, allow_unused=True, retain_graph=True)
    bad = [n for n, g in zip(names, grads) if g is not None and not torch.isfinite(g).all()]
    if bad:
        _locate_backward_failure(output, tensors)
        raise NumericFailure("backward", f"gradient of '{bad[0]}'")
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}


def _locate_backward_failure(output: torch.Tensor, tensors: list[torch.Tensor]) -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            with torch.autograd.set_detect_anomaly(True, check_nan=True):
                torch.autograd.grad(output, tensors, allow_unused=True)
        except RuntimeError as exc:
            match = re.search(r"Function '(\w+)' returned nan", str(exc))
            if match is None:
                raise
            prim = re.sub(r"Backward\d*$", "", match.group(1)).lower()
            raise NumericFailure(prim, "backward pass") from exc


# --------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_arrays(self, prefix: str = "optim") -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.exp_avg.items():
            out[f"{prefix}/m/{name}"] = t.detach().cpu().numpy()
        for name, t in self.exp_avg_sq.items():
            out[f"{prefix}/v/{name}"] = t.detach().cpu().numpy()
        return out

    def hyper(self) -> dict:
        return {
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }

    @classmethod
    def from_arrays(
        cls, hyper: Mapping, arrays: Mapping[str, np.ndarray], prefix: str = "optim"
    ) -> "OptimizerState":
        state = cls(**hyper)
        for key, arr in arrays.items():
            if key.startswith(f"{prefix}/m/"):
                state.exp_avg[key[len(prefix) + 3 :]] = torch.from_numpy(arr.copy())
            elif key.startswith(f"{prefix}/v/"):
                state.exp_avg_sq[key[len(prefix) + 3 :]] = torch.from_numpy(arr.copy())
        return state


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: OptimizerState,
) -> tuple[Mapping[str, torch.Tensor], OptimizerState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if state.step < 0:
        raise ValueError("optimizer step counter must be >= 0")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if tuple(g.shape) != tuple(params[name].shape):
            raise ValueError(
                f"shape mismatch for '{name}': param {tuple(params[name].shape)}, "
                f"grad {tuple(g.shape)}"
            )
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for name, g in grads.items():
            p = params[name]
            m = state.exp_avg.get(name)
            if m is None:
                m = state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            v = state.exp_avg_sq[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m / bc1, denom, value=-state.lr)
    return params, state


class Adam:
    """Adam over a fixed set of named parameters."""

    def __init__(self, params: Mapping[str, torch.Tensor], lr: float = 1e-3, **kw):
        self.params = dict(params)
        self.state = OptimizerState(lr=lr, **kw)

    def step(self, loss: torch.Tensor) -> float:
        grads = forward_backward(loss, self.params)
        adam_step(self.params, grads, self.state)
        return float(loss.detach())


def trainable(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {
        prefix + n: p for n, p in module.named_parameters() if p.requires_grad
    }


# --------------------------------------------------------------------------
# Gradient checking


@dataclass
class GradCheckReport:
    name: str
    passed: bool
    max_rel_error: float
    tolerance: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name}: max_rel_err={self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.n_checked} entries, worst "
            f"{self.worst_param}{list(self.worst_index)})"
        )


def relative_error(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_per_param: int = 12,
    seed: int = 0,
    name: str = "fragment",
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``fn`` recomputes the scalar from scratch on every call; ``params`` must
    be double precision. A random subsample of at most ``max_per_param``
    entries per tensor is checked. The relative error of an entry is taken
    against max(|analytic|, |numeric|, 1e-3 * largest |gradient| of that
    tensor), so entries that are vanishingly small next to their neighbours
    are judged on the tensor's scale rather than on round-off.
    """
    for n, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"gradient check needs float64, '{n}' is {p.dtype}")
    analytic = forward_backward(fn(), params)
    rng = np.random.default_rng(seed)
    worst = (0.0, "", (), 0.0, 0.0)
    count = 0
    for pname, p in params.items():
        flat_n = p.numel()
        scale = max(1e-7, 1e-3 * float(analytic[pname].abs().max())) if flat_n else 1e-7
        picks = rng.choice(flat_n, size=min(max_per_param, flat_n), replace=False)
        for flat in picks:
            idx = np.unravel_index(int(flat), tuple(p.shape))
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + step
                f_plus = fn().item()
                p[idx] = orig - step
                f_minus = fn().item()
                p[idx] = orig
            numeric = (f_plus - f_minus) / (2 * step)
            a = analytic[pname][idx].item()
            err = relative_error(a, numeric, floor=scale)
            count += 1
            if err >= worst[0]:
                worst = (err, pname, tuple(int(i) for i in idx), a, numeric)
    return GradCheckReport(
        name=name,
        passed=worst[0] < tolerance,
        max_rel_error=worst[0],
        tolerance=tolerance,
        worst_param=worst[1],
        worst_index=worst[2],
        analytic=worst[3],
        numeric=worst[4],
        n_checked=count,
    )


# --------------------------------------------------------------------------
# Primitives not provided as a single torch call


def scaled_dot_product_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor
) -> torch.Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return F.softmax(scores, dim=-1) @ v


# --------------------------------------------------------------------------
# Initialisation


def init_kaiming(layer: nn.Module) -> None:
    """Kaiming-uniform weights, zero bias: for layers whose output feeds a ReLU."""
    nn.init.kaiming_uniform_(layer.weight, nonlinearity="relu")
    if getattr(layer, "bias", None) is not None:
        nn.init.zeros_(layer.bias)


def init_xavier(layer: nn.Module) -> None:
    nn.init.xavier_uniform_(layer.weight)
    if getattr(layer, "bias", None) is not None:
        nn.init.zeros_(layer.bias)


def init_zero(layer: nn.Module) -> None:
    nn.init.zeros_(layer.weight)
    if getattr(layer, "bias", None) is not None:
        nn.init.zeros_(layer.bias)


def batch_norm(channels: int) -> nn.BatchNorm2d:
    # torch's momentum is the weight on the new batch statistic, so a running
    # average that keeps 0.9 of its previous value is momentum=0.1 here.
    return nn.BatchNorm2d(channels, momentum=0.1)


def state_checksum(module_or_tensors) -> str:
    """Stable hash of a module's parameters and buffers (or a tensor mapping)."""
    if isinstance(module_or_tensors, nn.Module):
        items = module_or_tensors.state_dict().items()
    else:
        items = dict(module_or_tensors).items()
    h = hashlib.sha256()
    for name, t in sorted(items):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# Checkpoint archive
#
# Layout: a text header of newline-terminated lines, then one flat binary
# blob. Offsets in the header are relative to the start of the blob.
#
#   USSKIT-ARCHIVE 1
#   meta <json>
#   tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
#   ...
#   end
#   <blob>

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


class ArchiveError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    # ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(value)
    if not arr.flags.c_contiguous:
        arr = arr.copy(order="C")
    if arr.dtype.name not in _DTYPES:
        raise ArchiveError(f"unsupported dtype {arr.dtype}")
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(path, tensors: Mapping[str, object], meta: Mapping | None = None) -> None:
    lines = [f"{ARCHIVE_MAGIC} {ARCHIVE_VERSION}", "meta " + json.dumps(meta or {}, sort_keys=True)]
    blobs = []
    offset = 0
    for name in tensors:
        if any(c.isspace() for c in name):
            raise ArchiveError(f"tensor name may not contain whitespace: {name!r}")
        arr = _as_array(tensors[name])
        raw = arr.tobytes()
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.dtype.name} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    atomic_write_bytes(Path(path), header + b"".join(blobs))


def read_archive_header(path) -> tuple[dict, list[tuple], int]:
    data = Path(path).read_bytes()
    return _parse_header(data, path)[:3]


def _parse_header(data: bytes, path) -> tuple[dict, list[tuple], int, bytes]:
    end_marker = b"\nend\n"
    pos = data.find(end_marker)
    if pos < 0:
        raise ArchiveError(f"{path}: header terminator not found")
    blob_start = pos + len(end_marker)
    try:
        lines = data[:pos].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise ArchiveError(f"{path}: header is not valid text ({exc})") from None
    first = lines[0].split()
    if len(first) != 2 or first[0] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic line {lines[0]!r}")
    if first[1] != str(ARCHIVE_VERSION):
        raise ArchiveError(f"{path}: unsupported archive version {first[1]}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise ArchiveError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[1][5:])
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{path}: meta is not valid JSON ({exc})") from None
    entries = []
    blob_len = len(data) - blob_start
    for ln, line in enumerate(lines[2:], start=3):
        parts = line.split(" ")
        if len(parts) != 6 or parts[0] != "tensor":
            raise ArchiveError(f"{path}: malformed header line {ln}: {line!r}")
        _, name, dtype, shape_s, off_s, nb_s = parts
        if dtype not in _DTYPES:
            raise ArchiveError(f"{path}: unknown dtype {dtype!r} for '{name}'")
        try:
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            off, nbytes = int(off_s), int(nb_s)
        except ValueError:
            raise ArchiveError(f"{path}: non-integer field on header line {ln}") from None
        expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
        if nbytes != expected or off < 0 or off + nbytes > blob_len:
            raise ArchiveError(
                f"{path}: tensor '{name}' extent inconsistent with blob "
                f"(offset {off}, {nbytes} bytes, blob {blob_len} bytes)"
            )
        entries.append((name, dtype, shape, off, nbytes))
    return meta, entries, blob_start, data


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    meta, entries, blob_start, data = _parse_header(path.read_bytes(), path)
    tensors = {}
    for name, dtype, shape, off, nbytes in entries:
        start = blob_start + off
        arr = np.frombuffer(data, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"),
                            count=nbytes // np.dtype(_DTYPES[dtype]).itemsize, offset=start)
        tensors[name] = arr.reshape(shape).astype(_DTYPES[dtype])
    return tensors, meta


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    own = module.state_dict()
    missing = [k for k in own if prefix + k not in arrays]
    if missing:
        raise ArchiveError(f"checkpoint lacks tensors: {missing[:5]}")
    state = {}
    for k, ref in own.items():
        arr = arrays[prefix + k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ArchiveError(
                f"shape mismatch for '{prefix + k}': checkpoint {tuple(arr.shape)}, "
                f"model {tuple(ref.shape)}"
            )
        state[k] = torch.from_numpy(np.array(arr))
    module.load_state_dict(state)


def named_subset(tensors: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
