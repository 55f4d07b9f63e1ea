"""Effect predictors with discrete object symbols.

Three architectures share one interface, ``forward(ckpt, features, action,
mask, mode, rng)``:

relational
    Encoder (features -> 4-bit symbol per object) and a query/key network
    (features -> k binary relation matrices) run side by side. Symbols
    concatenated with the action go through an MLP, are mixed by each
    relation matrix, concatenated over heads and decoded per object.
deepsym
    Fixed-size baseline: objects reordered as [grasped, target, rest...],
    flattened, encoded to 4 * n_max bits, decoded with the action to
    n_max x 6 effects.
attentive
    Per-object symbols followed by ordinary softmax multi-head attention
    over the symbols, then a per-object decoder.

``mode="soft"`` draws Gumbel-sigmoid samples (training); ``mode="hard"``
thresholds logits at zero and runs without autograd (evaluation).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import gradcore
from .gradcore import ContractError, DimensionError, ParameterSet, linear, mlp_forward

ARCHITECTURES = ("relational", "deepsym", "attentive")
FEATURE_DIM = 6
ACTION_DIM = 6
EFFECT_DIM = 6


class CapacityError(ValueError):
    pass


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    straight_through: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")


@dataclass(frozen=True)
class ModelConfig:
    architecture: str = "relational"
    d_z: int = 4
    heads: int = 4
    hidden: int = 128
    d_attn: int = 128
    agg_width: int = 128
    n_max: int = 4
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["gumbel"] = GumbelConfig(**d.get("gumbel", {}))
        return cls(**d)


@dataclass
class ForwardOutput:
    effects: torch.Tensor  # (B, n, 6)
    symbols: torch.Tensor | None = None  # (B, n, d_z) or (B, 4*n_max) for deepsym
    relations: torch.Tensor | None = None  # (B, k, n, n)
    attention: torch.Tensor | None = None  # attentive softmax weights (B, k, n, n)


class ModelCheckpoint:
    """Architecture descriptor plus its parameters and training seed."""

    def __init__(self, config: ModelConfig, params: ParameterSet, seed: int = 0):
        self.config = config
        self.params = params
        self.seed = seed
        missing = [p for p in required_paths(config) if p not in params]
        if missing:
            raise ContractError(f"{config.architecture} checkpoint lacks parameters {missing[:3]}")

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype: torch.dtype = gradcore.DEFAULT_DTYPE):
        params = ParameterSet(seed, dtype)
        for prefix, spec in layer_specs(config).items():
            gradcore.init_mlp(params, prefix, spec)
        if config.architecture == "relational":
            params.add_linear("attention.query", config.hidden, config.heads * config.d_attn)
            params.add_linear("attention.key", config.hidden, config.heads * config.d_attn)
        elif config.architecture == "attentive":
            for name in ("query", "key", "value"):
                params.add_linear(f"attention.{name}", config.d_z, config.heads * config.d_attn)
        return cls(config, params, seed)

    def descriptor(self) -> dict:
        return {"config": self.config.to_dict(), "seed": self.seed}

    def to_bytes(self) -> bytes:
        return gradcore.encode_checkpoint(self.params, self.descriptor())

    @classmethod
    def from_bytes(cls, blob: bytes, dtype: torch.dtype = torch.float32) -> "ModelCheckpoint":
        params, desc = gradcore.decode_checkpoint(blob, dtype)
        return cls(ModelConfig.from_dict(desc["config"]), params, desc["seed"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path, dtype: torch.dtype = torch.float32) -> "ModelCheckpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dtype)

    def to(self, dtype: torch.dtype) -> "ModelCheckpoint":
        return ModelCheckpoint(self.config, self.params.to(dtype), self.seed)

    @property
    def architecture(self) -> str:
        return self.config.architecture


def layer_specs(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    h = cfg.hidden
    if cfg.architecture == "relational":
        return {
            "encoder": (FEATURE_DIM, h, h, cfg.d_z),
            "attention.trunk": (FEATURE_DIM, h, h),
            "aggregate": (cfg.d_z + ACTION_DIM, h, h, cfg.agg_width),
            "decoder": (cfg.heads * cfg.agg_width, h, h, EFFECT_DIM),
        }
    if cfg.architecture == "deepsym":
        bits = cfg.d_z * cfg.n_max
        return {
            "encoder": (FEATURE_DIM * cfg.n_max, h, h, bits),
            "decoder": (bits + ACTION_DIM, h, h, EFFECT_DIM * cfg.n_max),
        }
    return {
        "encoder": (FEATURE_DIM, h, h, cfg.d_z),
        "decoder": (cfg.heads * cfg.d_attn + ACTION_DIM, h, h, EFFECT_DIM),
    }


def required_paths(cfg: ModelConfig) -> list[str]:
    paths = []
    for prefix, spec in layer_specs(cfg).items():
        for i in range(len(spec) - 1):
            paths += [f"{prefix}.{i}.weight", f"{prefix}.{i}.bias"]
    extra = {"relational": ("query", "key"), "attentive": ("query", "key", "value")}
    for name in extra.get(cfg.architecture, ()):
        paths += [f"attention.{name}.weight", f"attention.{name}.bias"]
    return paths


# discretisation -------------------------------------------------------------

def gumbel_sigmoid(logits: torch.Tensor, cfg: GumbelConfig, mode: str,
                   rng: np.random.Generator | None = None) -> torch.Tensor:
    """Relaxed Bernoulli sample (soft) or the threshold 1[logit > 0] (hard)."""
    if mode == "hard":
        if torch.is_grad_enabled() and logits.requires_grad:
            raise ContractError("hard-threshold mode is not differentiable; use it under no_grad")
        return (logits > 0).to(logits.dtype)
    if mode != "soft":
        raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")
    if rng is None:
        raise ContractError("soft mode needs a noise generator")
    shape = tuple(logits.shape)
    noise = rng.gumbel(size=shape) - rng.gumbel(size=shape)
    y = torch.sigmoid((logits + torch.as_tensor(noise, dtype=logits.dtype)) / cfg.tau)
    if cfg.straight_through:
        y = (y > 0.5).to(y.dtype) + (y - y.detach())
    return y


# building blocks ------------------------------------------------------------

def ordered_sum(terms: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum after sorting along ``dim`` so the result does not depend on object order.

    Plain reductions round differently when the summands are permuted, which
    would break bitwise permutation equivariance.
    """
    return torch.sort(terms, dim=dim).values.sum(dim=dim)


def _as_inputs(ckpt: ModelCheckpoint, features, action, mask):
    dtype = ckpt.params.dtype
    x = torch.as_tensor(np.asarray(features, dtype=np.float64), dtype=dtype)
    a = torch.as_tensor(np.asarray(action, dtype=np.float64), dtype=dtype)
    if x.dim() == 2:
        x, a = x[None], a[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    if x.shape[-1] != FEATURE_DIM:
        raise DimensionError(f"feature rows must be {FEATURE_DIM} wide, got {tuple(x.shape)}")
    if mask is None:
        m = torch.ones(x.shape[:2], dtype=dtype)
    else:
        m = torch.as_tensor(np.asarray(mask, dtype=np.float64), dtype=dtype)
    return x, a, m


def encode(ckpt: ModelCheckpoint, features: torch.Tensor, mode: str, rng=None) -> torch.Tensor:
    cfg = ckpt.config
    logits = mlp_forward(ckpt.params, features, layer_specs(cfg)["encoder"], "encoder")
    return gumbel_sigmoid(logits, cfg.gumbel, mode, rng)


def relation_logits(ckpt: ModelCheckpoint, features: torch.Tensor) -> torch.Tensor:
    """Scaled query-key products, shape (B, k, n, n)."""
    cfg, p = ckpt.config, ckpt.params
    trunk = torch.relu(mlp_forward(p, features, layer_specs(cfg)["attention.trunk"], "attention.trunk"))
    b, n = features.shape[:2]
    q = linear(p, "attention.query", trunk).reshape(b, n, cfg.heads, cfg.d_attn).transpose(1, 2)
    k = linear(p, "attention.key", trunk).reshape(b, n, cfg.heads, cfg.d_attn).transpose(1, 2)
    return gradcore.matmul(q, k.transpose(-1, -2)) / math.sqrt(cfg.d_attn)


def attention_weights(ckpt: ModelCheckpoint, features: torch.Tensor, mask: torch.Tensor,
                      mode: str, rng=None) -> torch.Tensor:
    a = gumbel_sigmoid(relation_logits(ckpt, features), ckpt.config.gumbel, mode, rng)
    pair = mask[:, None, :, None] * mask[:, None, None, :]
    return a * pair


def aggregate(ckpt: ModelCheckpoint, z: torch.Tensor, relations: torch.Tensor,
              action: torch.Tensor) -> torch.Tensor:
    """Mix per-object (symbol, action) embeddings through every relation head."""
    cfg = ckpt.config
    b, n = z.shape[:2]
    if relations.shape[-1] != n or relations.shape[-2] != n:
        raise DimensionError(
            f"relations {tuple(relations.shape)} do not match {n} objects")
    zbar = torch.cat([z, action[:, None, :].expand(b, n, action.shape[-1])], dim=-1)
    m = mlp_forward(ckpt.params, zbar, layer_specs(cfg)["aggregate"], "aggregate")
    heads = ordered_sum(relations[..., None] * m[:, None, None], dim=-2)  # (B, k, n, w)
    return heads.transpose(1, 2).reshape(b, n, -1)


def decode(ckpt: ModelCheckpoint, h: torch.Tensor) -> torch.Tensor:
    return mlp_forward(ckpt.params, h, layer_specs(ckpt.config)["decoder"], "decoder")


def _check_arch(ckpt: ModelCheckpoint, arch: str) -> None:
    if ckpt.architecture != arch:
        raise ContractError(f"expected a {arch} checkpoint, got {ckpt.architecture}")


def _mode_context(mode: str):
    return torch.no_grad() if mode == "hard" else torch.enable_grad()


# architectures --------------------------------------------------------------

def relational_forward(ckpt, features, action, mask=None, mode="hard", rng=None) -> ForwardOutput:
    _check_arch(ckpt, "relational")
    x, a, m = _as_inputs(ckpt, features, action, mask)
    with _mode_context(mode):
        z = encode(ckpt, x, mode, rng)
        rel = attention_weights(ckpt, x, m, mode, rng)
        effects = decode(ckpt, aggregate(ckpt, z, rel, a)) * m[..., None]
    return ForwardOutput(effects, z * m[..., None], rel)


def deepsym_order(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Slot -> object index per sample: grasped, target, then rest by planar distance, x, y.

    Padded objects come last.
    """
    feats = np.asarray(features, dtype=np.float64)
    real = np.asarray(mask) > 0
    pose_norm = np.where(real, np.linalg.norm(feats[..., 2:5], axis=-1), np.inf)
    grasped = np.argmin(pose_norm, axis=-1)
    target_score = np.where(real, feats[..., 5], -np.inf)
    target_score[np.arange(len(feats)), grasped] = -np.inf
    target = np.argmax(target_score, axis=-1)
    rows = np.arange(len(feats))
    category = np.where(real, 2, 3)
    category[rows, target] = 1
    category[rows, grasped] = 0
    dist = np.hypot(feats[..., 2], feats[..., 3])
    return np.lexsort((feats[..., 3], feats[..., 2], dist, category), axis=-1)


def deepsym_forward(ckpt, features, action, mask=None, mode="hard", rng=None) -> ForwardOutput:
    _check_arch(ckpt, "deepsym")
    cfg = ckpt.config
    x, a, m = _as_inputs(ckpt, features, action, mask)
    b, n = x.shape[:2]
    n_real = int(m.sum(dim=1).max().item())
    if n_real > cfg.n_max:
        raise CapacityError(f"{n_real} objects exceed deepsym capacity n_max={cfg.n_max}")
    order = torch.as_tensor(deepsym_order(x.detach().numpy(), m.numpy()))
    with _mode_context(mode):
        ordered = torch.gather(x * m[..., None], 1, order[..., None].expand(b, n, FEATURE_DIM))
        ordered = ordered[:, :cfg.n_max]
        if ordered.shape[1] < cfg.n_max:
            pad = ordered.new_zeros(b, cfg.n_max - ordered.shape[1], FEATURE_DIM)
            ordered = torch.cat([ordered, pad], dim=1)
        specs = layer_specs(cfg)
        logits = mlp_forward(ckpt.params, ordered.reshape(b, -1), specs["encoder"], "encoder")
        z = gumbel_sigmoid(logits, cfg.gumbel, mode, rng)
        out = mlp_forward(ckpt.params, torch.cat([z, a], dim=-1), specs["decoder"], "decoder")
        out = out.reshape(b, cfg.n_max, EFFECT_DIM)[:, :min(n, cfg.n_max)]
        if out.shape[1] < n:
            out = torch.cat([out, out.new_zeros(b, n - out.shape[1], EFFECT_DIM)], dim=1)
        inverse = torch.argsort(order, dim=1)
        effects = torch.gather(out, 1, inverse[..., None].expand(b, n, EFFECT_DIM)) * m[..., None]
    return ForwardOutput(effects, z)


def attentive_forward(ckpt, features, action, mask=None, mode="hard", rng=None) -> ForwardOutput:
    _check_arch(ckpt, "attentive")
    cfg, p = ckpt.config, ckpt.params
    x, a, m = _as_inputs(ckpt, features, action, mask)
    b, n = x.shape[:2]
    with _mode_context(mode):
        z = encode(ckpt, x, mode, rng)

        def project(name):
            return linear(p, f"attention.{name}", z).reshape(b, n, cfg.heads, cfg.d_attn).transpose(1, 2)

        q, k, v = project("query"), project("key"), project("value")
        scores = gradcore.matmul(q, k.transpose(-1, -2)) / math.sqrt(cfg.d_attn)
        scores = scores.masked_fill(m[:, None, None, :] == 0, float("-inf"))
        ex = torch.exp(scores - scores.amax(dim=-1, keepdim=True))
        weights = ex / ordered_sum(ex, dim=-1)[..., None]
        h = ordered_sum(weights[..., None] * v[:, :, None], dim=-2).transpose(1, 2).reshape(b, n, -1)
        h = torch.cat([h, a[:, None, :].expand(b, n, ACTION_DIM)], dim=-1)
        effects = decode(ckpt, h) * m[..., None]
    return ForwardOutput(effects, z * m[..., None], attention=weights)


FORWARDS = {
    "relational": relational_forward,
    "deepsym": deepsym_forward,
    "attentive": attentive_forward,
}


def forward(ckpt, features, action, mask=None, mode="hard", rng=None) -> ForwardOutput:
    return FORWARDS[ckpt.architecture](ckpt, features, action, mask, mode, rng)


def loss(predicted: torch.Tensor, target, mask=None) -> torch.Tensor:
    """Squared error summed over objects and dimensions, averaged over the batch."""
    target = torch.as_tensor(np.asarray(target, dtype=np.float64), dtype=predicted.dtype)
    if predicted.shape != target.shape:
        raise DimensionError(f"prediction {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    if predicted.shape[0] == 0:
        raise ContractError("loss of an empty batch")
    sq = (predicted - target) ** 2
    if mask is not None:
        sq = sq * torch.as_tensor(np.asarray(mask, dtype=np.float64), dtype=predicted.dtype)[..., None]
    return sq.sum() / predicted.shape[0]


def with_gumbel(ckpt: ModelCheckpoint, **changes) -> ModelCheckpoint:
    cfg = replace(ckpt.config, gumbel=replace(ckpt.config.gumbel, **changes))
    return ModelCheckpoint(cfg, ckpt.params, ckpt.seed)
