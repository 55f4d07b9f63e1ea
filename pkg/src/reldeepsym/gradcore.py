"""Differentiable-computation layer: tensors, parameters, MLPs, gradients, checkpoints.

Tensors are plain ``torch.Tensor`` objects; this module adds the pieces the
models need on top of them: a named, deterministically initialised
parameter store, shape-checked primitives, a finite-difference gradient
checker and a byte-stable checkpoint container.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float64

CHECKPOINT_MAGIC = b"RDSYMCK\x00"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


def tensor(data, requires_grad: bool = False, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=dtype).clone()
    t.requires_grad_(requires_grad)
    return t


# primitives ---------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def concat(parts: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    return torch.cat(list(parts), dim=dim)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def mean(x: torch.Tensor) -> torch.Tensor:
    return x.mean()


def square(x: torch.Tensor) -> torch.Tensor:
    return x * x


def total(x: torch.Tensor) -> torch.Tensor:
    return x.sum()


def scale(x: torch.Tensor, c: float) -> torch.Tensor:
    return x * c


# parameters ---------------------------------------------------------------

def path_rng(seed: int, path: str) -> np.random.Generator:
    """Independent RNG stream for one parameter path."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(path.encode())))


class ParameterSet:
    """Named map of trainable tensors, iterated in sorted path order."""

    def __init__(self, rng_seed: int = 0, dtype: torch.dtype = DEFAULT_DTYPE):
        self.rng_seed = int(rng_seed)
        self.dtype = dtype
        self._params: dict[str, torch.Tensor] = {}

    def __getitem__(self, path: str) -> torch.Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, torch.Tensor]]:
        return [(k, self._params[k]) for k in self.names()]

    def tensors(self) -> list[torch.Tensor]:
        return [self._params[k] for k in self.names()]

    def set(self, path: str, value) -> torch.Tensor:
        t = torch.as_tensor(value, dtype=self.dtype).detach().clone()
        t.requires_grad_(True)
        self._params[path] = t
        return t

    def add(self, path: str, shape: Sequence[int], fan_in: int | None = None) -> torch.Tensor:
        """Register a parameter; weights uniform in +-1/sqrt(fan_in), biases (fan_in None) zero."""
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        if fan_in is None:
            data = np.zeros(tuple(shape))
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = path_rng(self.rng_seed, path).uniform(-bound, bound, size=tuple(shape))
        return self.set(path, data)

    def add_linear(self, prefix: str, d_in: int, d_out: int) -> None:
        self.add(f"{prefix}.weight", (d_in, d_out), fan_in=d_in)
        self.add(f"{prefix}.bias", (d_out,))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> list[torch.Tensor]:
        return [t.grad if t.grad is not None else torch.zeros_like(t) for t in self.tensors()]

    def to(self, dtype: torch.dtype) -> "ParameterSet":
        out = ParameterSet(self.rng_seed, dtype)
        for k, v in self.items():
            out.set(k, v.detach().to(dtype))
        return out

    def copy(self) -> "ParameterSet":
        return self.to(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.items()}


def linear(params: ParameterSet, prefix: str, x: torch.Tensor) -> torch.Tensor:
    w = params[f"{prefix}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(
            f"{prefix}: input width {x.shape[-1]} does not match weight {tuple(w.shape)}")
    return x @ w + params[f"{prefix}.bias"]


def init_mlp(params: ParameterSet, prefix: str, layer_spec: Sequence[int]) -> None:
    for i, (d_in, d_out) in enumerate(zip(layer_spec[:-1], layer_spec[1:])):
        params.add_linear(f"{prefix}.{i}", d_in, d_out)


def mlp_forward(params: ParameterSet, x: torch.Tensor, layer_spec: Sequence[int],
                prefix: str = "mlp") -> torch.Tensor:
    """Row-wise MLP with ReLU hidden layers and a linear output layer."""
    if x.shape[-1] != layer_spec[0]:
        raise DimensionError(
            f"{prefix}: input width {x.shape[-1]} does not match layer spec {tuple(layer_spec)}")
    n_layers = len(layer_spec) - 1
    for i in range(n_layers):
        x = linear(params, f"{prefix}.{i}", x)
        if i < n_layers - 1:
            x = torch.relu(x)
    return x


# gradients ----------------------------------------------------------------

def backward(loss: torch.Tensor, params: ParameterSet) -> list[torch.Tensor]:
    """Accumulate dloss/dparam into ``.grad`` of every parameter; returns the grads in path order."""
    if loss.dim() != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    tensors = params.tensors()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = []
    for t, g in zip(tensors, grads):
        if g is None:
            g = torch.zeros_like(t)
        t.grad = g.detach() if t.grad is None else t.grad + g.detach()
        out.append(t.grad)
    return out


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    # (analytic, numeric) max-norms per parameter
    norms: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self) -> str:
        return "\n".join(f"{k}\t{v:.3e}" for k, v in sorted(self.errors.items()))


def grad_check(f: Callable[[ParameterSet], torch.Tensor], params: ParameterSet,
               eps: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(params)`` with central differences.

    The error for a parameter is max|analytic - numeric| divided by the larger
    of the two gradients' max-norms (floored at 1e-12), so zero gradients do
    not inflate it.
    """
    params.zero_grad()
    backward(f(params), params)
    report = GradCheckReport()
    with torch.no_grad():
        for name, p in params.items():
            analytic = p.grad.detach().clone().reshape(-1)
            numeric = torch.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f(params).item()
                flat[i] = orig - eps
                down = f(params).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * eps)
            norms = (analytic.abs().max().item(), numeric.abs().max().item())
            report.norms[name] = norms
            report.errors[name] = (analytic - numeric).abs().max().item() / max(*norms, 1e-12)
    params.zero_grad()
    return report


# checkpoints ----------------------------------------------------------------

def encode_checkpoint(params: ParameterSet, descriptor: dict) -> bytes:
    """Serialise parameters as float32 with a JSON header.

    Layout: magic(8) | u32 version | u32 header length | header JSON |
    float32 little-endian payloads in header order.
    """
    names = params.names()
    header = {
        "descriptor": descriptor,
        "rng_seed": params.rng_seed,
        "tensors": [{"name": k, "shape": list(params[k].shape)} for k in names],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for k in names:
        buf.write(params[k].detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def decode_checkpoint(blob: bytes, dtype: torch.dtype = torch.float32) -> tuple[ParameterSet, dict]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, head_len = struct.unpack("<II", blob[8:16])
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + head_len].decode())
    params = ParameterSet(header["rng_seed"], dtype)
    offset = 16 + head_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        params.set(entry["name"], arr.astype(np.float32))
    if offset != len(blob):
        raise ContractError("trailing bytes in checkpoint")
    return params, header["descriptor"]


def save_checkpoint(path, params: ParameterSet, descriptor: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, descriptor))


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[ParameterSet, dict]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), dtype)
