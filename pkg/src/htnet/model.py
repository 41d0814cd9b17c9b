"""Hierarchical topology-aware lifting network.

Layout of one forward pass::

    pose2d (B, N, 2) --embed--> (B, N, C) --M x mixer--> (B, N, C) --head--> (B, N, 3)

Each mixer splits channels into three C/3 slices handled by the joint-level
graph block (LJC), the part-level limb block (IPC) and the body-level
attention block (GBI). In the default ``progressive`` structure the output of
each block is added to the input of the next.
"""
from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .skeleton import (
    LimbLayout,
    SkeletonSpec,
    get_skeleton,
    limb_layout,
    normalized_adjacency,
)

STRUCTURES = ("progressive", "parallel", "serial")
BLOCKS = ("ljc", "ipc", "gbi")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 240
    mixers: int = 3
    heads: int = 8
    joint_count: int = 17
    mlp_ratio: int = 6
    structure: str = "progressive"
    blocks: tuple[str, ...] = BLOCKS
    skeleton: str = "h36m17"
    # millimetres per unit of network output
    target_scale: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.channels <= 0 or self.channels % 24:
            raise ConfigError(f"channels must be a positive multiple of 24, got {self.channels}")
        if self.mixers < 0:
            raise ConfigError(f"mixers must be >= 0, got {self.mixers}")
        if self.heads <= 0 or self.block_channels % self.heads:
            raise ConfigError(
                f"block width {self.block_channels} is not divisible by {self.heads} heads"
            )
        if self.mlp_ratio <= 0:
            raise ConfigError("mlp_ratio must be positive")
        if self.structure not in STRUCTURES:
            raise ConfigError(f"structure must be one of {STRUCTURES}, got {self.structure!r}")
        unknown = set(self.blocks) - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown blocks {sorted(unknown)}")
        if self.target_scale <= 0:
            raise ConfigError("target_scale must be positive")

    @property
    def block_channels(self) -> int:
        """Width seen by each of the three blocks."""
        return self.channels if self.structure == "serial" else self.channels // 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = cls.__dataclass_fields__.keys()
        extra = set(d) - set(known)
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class ModelParams:
    """Named learnable tensors in registration order plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def block(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
             for k, v in self.tensors.items()},
        )


def param_shapes(config: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Every parameter's shape and init kind, in registration order."""
    C, N, r = config.channels, config.joint_count, config.mlp_ratio
    c = config.block_channels
    shapes: dict[str, tuple[tuple[int, ...], str]] = {
        "embed.weight": ((2, C), "fan_in"),
        "embed.pos": ((N, C), "pos"),
    }

    def mlp(prefix, width):
        shapes[f"{prefix}.ln_scale"] = ((width,), "ones")
        shapes[f"{prefix}.ln_shift"] = ((width,), "zeros")
        shapes[f"{prefix}.fc1"] = ((width, r * width), "fan_in")
        shapes[f"{prefix}.fc2"] = ((r * width, width), "fan_in")

    for m in range(config.mixers):
        pre = f"mixers.{m}"
        if "ljc" in config.blocks:
            shapes[f"{pre}.ljc.w1"] = ((c, c), "fan_in")
            shapes[f"{pre}.ljc.w2"] = ((c, c), "fan_in")
        if "ipc" in config.blocks:
            shapes[f"{pre}.ipc.conv1"] = ((2, c, c), "fan_in")
            shapes[f"{pre}.ipc.conv2"] = ((3, c, c), "fan_in")
            mlp(f"{pre}.ipc.mlp1", c)
            mlp(f"{pre}.ipc.mlp2", c)
        if "gbi" in config.blocks:
            for proj in ("q", "k", "v", "out"):
                shapes[f"{pre}.gbi.w{proj}"] = ((c, c), "fan_in")
                shapes[f"{pre}.gbi.b{proj}"] = ((c,), "bias")
            shapes[f"{pre}.gbi.ln_scale"] = ((c,), "ones")
            shapes[f"{pre}.gbi.ln_shift"] = ((c,), "zeros")
        mlp(f"{pre}.mlp", C)
    shapes["head.weight"] = ((C, 3), "fan_in")
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Draw initial weights.

    Matrices and conv kernels are ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))`` where
    fan_in is the product of all but the last dimension; biases use the same
    bound with the fan-in of their matrix. The positional matrix is
    ``N(0, 0.02^2)``; layer-norm scales start at 1 and shifts at 0.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    last_fan_in = 1
    for name, (shape, kind) in param_shapes(config).items():
        if kind == "fan_in":
            last_fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / math.sqrt(last_fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias":
            bound = 1.0 / math.sqrt(last_fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "pos":
            arr = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


def param_count(params: ModelParams) -> int:
    return int(sum(t.data.size for t in params.tensors.values()))


def param_breakdown(params: ModelParams) -> dict[str, int]:
    """Parameter totals grouped by block (embed, head, and mixers.i.<block>)."""
    out: dict[str, int] = {}
    for name, t in params.items():
        parts = name.split(".")
        key = ".".join(parts[:3]) if parts[0] == "mixers" else parts[0]
        out[key] = out.get(key, 0) + t.data.size
    return out


# ---------------------------------------------------------------------------
# blocks


def embed(params: ModelParams, pose2d: Tensor) -> Tensor:
    """Per-joint linear embedding plus the positional matrix (no bias)."""
    n = params.config.joint_count
    if pose2d.shape[-2:] != (n, 2):
        raise nx.ShapeError(f"expected pose of shape (..., {n}, 2), got {pose2d.shape}")
    return pose2d @ params["embed.weight"] + params["embed.pos"]


def _channel_mlp(p: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nx.layer_norm(x, p[f"{prefix}ln_scale"], p[f"{prefix}ln_shift"])
    return x + nx.gelu(h @ p[f"{prefix}fc1"]) @ p[f"{prefix}fc2"]


def ljc_forward(p: Mapping[str, Tensor], x: Tensor, adj: np.ndarray) -> Tensor:
    """Two graph convolutions with a residual: X + A·gelu(A·X·W1)·W2."""
    a = Tensor(np.asarray(adj, dtype=x.data.dtype))
    if a.shape != (x.shape[-2],) * 2:
        raise nx.ShapeError(f"adjacency {a.shape} does not match {x.shape[-2]} joints")
    h = nx.gelu(a @ (x @ p["w1"]))
    return x + a @ (h @ p["w2"])


def _limb_conv(x: Tensor, group: tuple[int, ...], kernel: Tensor) -> Tensor:
    # stride == kernel size, so each output row sees exactly one limb
    k, c_in, c_out = kernel.shape
    rows = nx.take_rows(x, group)
    lead = rows.shape[:-2]
    n_limbs = len(group) // k
    rows = nx.reshape(rows, lead + (n_limbs, k * c_in))
    return nx.gelu(rows @ nx.reshape(kernel, (k * c_in, c_out)))


def ipc_forward(p: Mapping[str, Tensor], x: Tensor, prev: Tensor | None,
                layout: LimbLayout) -> Tensor:
    """Part-level constraint block.

    Limb features from the (2,3)-PDoF and (1,2,3)-PDoF groups are added back
    onto the 3-PDoF joints and onto the 2- and 3-PDoF joints respectively;
    every other joint passes through unchanged.
    """
    if len(layout.group1) != 8 or len(layout.group2) != 12:
        raise nx.ShapeError("part-level block needs a 4-limb layout")
    xt = x if prev is None else x + prev
    n = layout.joint_count
    f1 = _channel_mlp(p, "mlp1.", _limb_conv(xt, layout.group1, p["conv1"]))
    f2 = _channel_mlp(p, "mlp2.", _limb_conv(xt, layout.group2, p["conv2"]))
    r1 = nx.scatter_rows(nx.take_rows(f1, layout.src1), layout.dst1, n)
    r2 = nx.scatter_rows(nx.take_rows(f2, layout.src2), layout.dst2, n)
    return xt + r1 + r2


def gbi_forward(p: Mapping[str, Tensor], x: Tensor, prev: Tensor | None, heads: int,
                record: list | None = None) -> Tensor:
    """Multi-head self-attention with the norm on the branch: X + LN(MSA(X)).

    Logits are scaled by 1/sqrt(block width). If ``record`` is a list, the
    attention probabilities (B, heads, N, N) are appended to it.
    """
    xt = x if prev is None else x + prev
    *lead, n, c = xt.shape
    d = c // heads

    def split_heads(t: Tensor, axes) -> Tensor:
        return nx.transpose(nx.reshape(t, (*lead, n, heads, d)), axes)

    nl = len(lead)
    to_heads = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    to_heads_t = tuple(range(nl)) + (nl + 1, nl + 2, nl)
    q = split_heads(xt @ p["wq"] + p["bq"], to_heads)
    kt = split_heads(xt @ p["wk"] + p["bk"], to_heads_t)
    v = split_heads(xt @ p["wv"] + p["bv"], to_heads)
    attn = nx.softmax_rows((q @ kt) * (1.0 / math.sqrt(c)))
    if record is not None:
        record.append(attn.data)
    h = nx.reshape(nx.transpose(attn @ v, to_heads), (*lead, n, c))
    msa = h @ p["wout"] + p["bout"]
    return xt + nx.layer_norm(msa, p["ln_scale"], p["ln_shift"])


def mixer_forward(params: ModelParams, index: int, x: Tensor, layout: LimbLayout,
                  adj: np.ndarray, record: list | None = None) -> Tensor:
    cfg = params.config
    p = params.block(f"mixers.{index}")
    ljc = {k[4:]: v for k, v in p.items() if k.startswith("ljc.")}
    ipc = {k[4:]: v for k, v in p.items() if k.startswith("ipc.")}
    gbi = {k[4:]: v for k, v in p.items() if k.startswith("gbi.")}

    def run_ljc(inp):
        return ljc_forward(ljc, inp, adj) if "ljc" in cfg.blocks else inp

    def run_ipc(inp, prev):
        if "ipc" in cfg.blocks:
            return ipc_forward(ipc, inp, prev, layout)
        return inp if prev is None else inp + prev

    def run_gbi(inp, prev):
        if "gbi" in cfg.blocks:
            return gbi_forward(gbi, inp, prev, cfg.heads, record)
        return inp if prev is None else inp + prev

    if cfg.structure == "serial":
        y = run_gbi(run_ipc(run_ljc(x), None), None)
    else:
        c = cfg.block_channels
        x_ljc, x_ipc, x_gbi = nx.split_channels(x, (c, c, c))
        y_ljc = run_ljc(x_ljc)
        if cfg.structure == "progressive":
            y_ipc = run_ipc(x_ipc, y_ljc)
            y_gbi = run_gbi(x_gbi, y_ipc)
        else:
            y_ipc = run_ipc(x_ipc, None)
            y_gbi = run_gbi(x_gbi, None)
        y = nx.concat_channels([y_ljc, y_ipc, y_gbi])
    return _channel_mlp(p, "mlp.", y)


@functools.lru_cache(maxsize=16)
def _topology(spec: SkeletonSpec) -> tuple[LimbLayout, np.ndarray]:
    return limb_layout(spec), normalized_adjacency(spec)


def model_forward(params: ModelParams, pose2d, spec: SkeletonSpec | None = None,
                  record: list | None = None) -> Tensor:
    """Lift normalized 2D joints (..., N, 2) to 3D in network units (..., N, 3)."""
    cfg = params.config
    spec = spec or get_skeleton(cfg.skeleton)
    if spec.joint_count != cfg.joint_count:
        raise ConfigError(
            f"skeleton has {spec.joint_count} joints, model expects {cfg.joint_count}"
        )
    layout, adj = _topology(spec)
    x = pose2d if isinstance(pose2d, Tensor) else Tensor(
        np.asarray(pose2d, dtype=params["embed.weight"].data.dtype))
    squeeze = x.ndim == 2
    if squeeze:
        x = nx.reshape(x, (1,) + x.shape)
    h = embed(params, x)
    for m in range(cfg.mixers):
        h = mixer_forward(params, m, h, layout, adj, record)
    out = h @ params["head.weight"]
    if squeeze:
        out = nx.reshape(out, out.shape[1:])
    return out


def predict_mm(params: ModelParams, pose2d: np.ndarray,
               spec: SkeletonSpec | None = None) -> np.ndarray:
    """Forward pass returning root-relative millimetres as a plain array."""
    out = model_forward(params, pose2d, spec).data
    return out.astype(np.float64) * params.config.target_scale
