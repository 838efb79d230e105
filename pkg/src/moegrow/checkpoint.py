"""On-disk checkpoint format: named float32 tensors plus a config sidecar.

A checkpoint is a directory holding ``config.json`` and ``tensors.bin``.
``tensors.bin`` is an 8-byte little-endian header length, a UTF-8 JSON header
mapping tensor name -> {dtype, shape, data_offsets}, then raw little-endian
binary32 data. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, MoEConfig
from .errors import CheckpointError, ValidationError

CONFIG_FILE = "config.json"
TENSORS_FILE = "tensors.bin"
_DTYPE_TAG = "f32"


def mlp_tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of one gated-MLP parameter set (also one MoE expert)."""
    h, m = config.hidden_dim, config.intermediate_dim
    return {"w_gate": (h, m), "w_up": (h, m), "w_down": (m, h)}


def tensor_shapes(config: ModelConfig, moe: MoEConfig | None = None) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map implied by a config.

    MoE checkpoints replace each block's ``mlp.*`` tensors with a router and
    ``n_experts`` replicated expert parameter sets.
    """
    h = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, h)}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn_norm"] = (h,)
        shapes[f"{p}.attn.wq"] = (h, config.q_dim)
        shapes[f"{p}.attn.wk"] = (h, config.kv_dim)
        shapes[f"{p}.attn.wv"] = (h, config.kv_dim)
        if config.qkv_bias:
            shapes[f"{p}.attn.q_bias"] = (config.q_dim,)
            shapes[f"{p}.attn.k_bias"] = (config.kv_dim,)
            shapes[f"{p}.attn.v_bias"] = (config.kv_dim,)
        shapes[f"{p}.attn.wo"] = (config.q_dim, h)
        shapes[f"{p}.mlp_norm"] = (h,)
        if moe is None:
            for name, shape in mlp_tensor_shapes(config).items():
                shapes[f"{p}.mlp.{name}"] = shape
        else:
            shapes[f"{p}.moe.router"] = (h, moe.n_experts)
            for j in range(moe.n_experts):
                for name, shape in mlp_tensor_shapes(config).items():
                    shapes[f"{p}.moe.expert.{j}.{name}"] = shape
    shapes["final_norm"] = (h,)
    shapes["unembed"] = (h, config.vocab_size)
    return shapes


@dataclass
class Checkpoint:
    """A validated, immutable set of named float32 tensors plus its config."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]
    moe: MoEConfig | None = None

    def validate(self) -> None:
        self.config.validate()
        if self.moe is not None:
            self.moe.validate()
        expected = tensor_shapes(self.config, self.moe)
        missing = sorted(set(expected) - set(self.tensors))
        if missing:
            more = f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""
            raise ValidationError(f"missing tensor {missing[0]!r}{more}")
        extra = sorted(set(self.tensors) - set(expected))
        if extra:
            raise ValidationError(f"unknown tensor name {extra[0]!r}")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.dtype != np.float32:
                raise ValidationError(f"tensor {name!r} has dtype {arr.dtype}, expected float32")
            if tuple(arr.shape) != shape:
                raise ValidationError(
                    f"tensor {name!r} has shape {tuple(arr.shape)}, config implies {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"tensor {name!r} contains non-finite values")

    def freeze(self) -> "Checkpoint":
        """Mark all tensors read-only; transforms always build new arrays."""
        for arr in self.tensors.values():
            arr.flags.writeable = False
        return self


@dataclass(frozen=True)
class ParamCount:
    total: int
    activated: int


def count_params(ckpt: Checkpoint) -> ParamCount:
    """Total and per-token-activated parameter counts of a checkpoint."""
    sizes = {name: arr.size for name, arr in ckpt.tensors.items()}
    return _count(sizes, ckpt.config, ckpt.moe)


def count_config_params(config: ModelConfig, moe: MoEConfig | None = None) -> ParamCount:
    """Parameter counts implied by a config, without materializing tensors."""
    config.validate()
    if moe is not None:
        moe.validate()
    sizes = {name: math.prod(shape) for name, shape in tensor_shapes(config, moe).items()}
    return _count(sizes, config, moe)


def _count(sizes: dict[str, int], config: ModelConfig, moe: MoEConfig | None) -> ParamCount:
    total = sum(sizes.values())
    if moe is None:
        return ParamCount(total=total, activated=total)
    # Experts are replicas, so each carries the same parameter count; a token
    # activates attention + router + top_k experts per layer.
    expert_size = sum(sizes[f"layers.0.moe.expert.0.{n}"] for n in mlp_tensor_shapes(config))
    inactive = (moe.n_experts - moe.top_k) * expert_size * config.n_layers
    return ParamCount(total=total, activated=total - inactive)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint directory; load(save(c)) is bitwise identical to c."""
    ckpt.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    config_doc = ckpt.config.to_dict()
    if ckpt.moe is not None:
        config_doc["moe"] = ckpt.moe.to_dict()
    (path / CONFIG_FILE).write_text(json.dumps(config_doc, indent=2) + "\n", encoding="utf-8")

    names = sorted(ckpt.tensors)
    header: dict[str, dict] = {}
    offset = 0
    for name in names:
        arr = ckpt.tensors[name]
        nbytes = arr.size * 4
        header[name] = {
            "dtype": _DTYPE_TAG,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + nbytes],
        }
        offset += nbytes
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path / TENSORS_FILE, "wb") as fh:
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint directory, validating structure and values."""
    path = Path(path)
    config_path = path / CONFIG_FILE
    tensors_path = path / TENSORS_FILE
    if not config_path.is_file() or not tensors_path.is_file():
        raise CheckpointError(f"not a checkpoint directory: {path}")

    try:
        config_doc = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unparseable {CONFIG_FILE}: {exc}") from exc
    moe_doc = config_doc.pop("moe", None)
    config = ModelConfig.from_dict(config_doc)
    moe = MoEConfig.from_dict(moe_doc) if moe_doc is not None else None

    raw = tensors_path.read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"truncated {TENSORS_FILE}: missing header length")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if 8 + header_len > len(raw):
        raise CheckpointError(f"truncated {TENSORS_FILE}: header extends past end of file")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unparseable tensor header: {exc}") from exc

    data = raw[8 + header_len :]
    tensors: dict[str, np.ndarray] = {}
    for name, meta in header.items():
        if meta.get("dtype") != _DTYPE_TAG:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {meta.get('dtype')!r}")
        shape = tuple(int(d) for d in meta["shape"])
        begin, end = (int(v) for v in meta["data_offsets"])
        if not 0 <= begin <= end <= len(data):
            raise CheckpointError(f"truncated {TENSORS_FILE}: tensor {name!r} data out of bounds")
        if end - begin != math.prod(shape) * 4:
            raise CheckpointError(f"tensor {name!r} byte length does not match shape {shape}")
        arr = np.frombuffer(data, dtype="<f4", count=math.prod(shape), offset=begin)
        tensors[name] = arr.reshape(shape).copy()

    ckpt = Checkpoint(config=config, tensors=tensors, moe=moe)
    ckpt.validate()
    return ckpt.freeze()
