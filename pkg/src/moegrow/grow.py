"""Width, head, and depth growth operators for dense checkpoints.

Two width-expansion families over a shared circular index map:

* fpi_expand: duplicate output neurons and split input weights by their
  duplication count. The widened model computes the same function as its
  source (exactly, when every grown dimension is an integer multiple).
* aki_expand: identical input-axis splitting, but new output neurons copy
  the next layer's (input-expanded) weights instead of duplicating their
  own. This breaks the weight symmetry that slows later training, at the
  cost of exact preservation; the topmost layer falls back to duplication.

Depth then grows by copying whole layers, either stacked (source order
repeated) or interpolated (each source layer repeated in place), and
scale_up composes width-then-depth.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, tensor_shapes
from .config import ModelConfig
from .errors import ValidationError
from .model import build_graph


@dataclass(frozen=True)
class WidthMap:
    """Mapping from grown indices to source indices along one axis.

    src_index[i] names the source neuron that new position i copies;
    multiplicity[j] counts how many new positions copy source j.
    """

    new_dim: int
    src_index: np.ndarray
    multiplicity: np.ndarray

    @property
    def old_dim(self) -> int:
        return len(self.multiplicity)

    def primary_mask(self) -> np.ndarray:
        """True at the first position copying each source index.

        Primary positions keep the tensor's own slices under donor-based
        expansion; for a circular whole-axis map these are the first old_dim
        positions, while per-group head maps interleave them group by group.
        """
        seen = np.zeros(self.old_dim, dtype=bool)
        mask = np.zeros(self.new_dim, dtype=bool)
        for i, s in enumerate(self.src_index):
            if not seen[s]:
                seen[s] = True
                mask[i] = True
        return mask

    def validate(self) -> None:
        if len(self.src_index) != self.new_dim:
            raise ValidationError("src_index length must equal new_dim")
        if self.src_index.min() < 0 or self.src_index.max() >= self.old_dim:
            raise ValidationError("src_index out of range")
        if self.multiplicity.sum() != self.new_dim:
            raise ValidationError("multiplicities must sum to new_dim")
        if (self.multiplicity < 1).any():
            raise ValidationError("every source index must be used at least once")


def build_width_map(old_dim: int, new_dim: int) -> WidthMap:
    """Circular copy map: new position i copies source i mod old_dim."""
    if old_dim < 1 or new_dim < old_dim:
        raise ValidationError(f"need 1 <= old_dim <= new_dim, got ({old_dim}, {new_dim})")
    src = np.arange(new_dim) % old_dim
    return WidthMap(new_dim=new_dim, src_index=src,
                    multiplicity=np.bincount(src, minlength=old_dim))


def build_grouped_head_map(old_heads: int, new_heads: int, kv_groups: int) -> WidthMap:
    """Circular copy map over query heads, applied within each KV group.

    New head t of group g copies source head (t mod heads-per-group) of the
    same group, so duplicated heads share their group's keys and values.
    """
    if old_heads % kv_groups or new_heads % kv_groups:
        raise ValidationError(
            f"head counts ({old_heads}, {new_heads}) must be divisible by kv_groups {kv_groups}"
        )
    if new_heads < old_heads:
        raise ValidationError(f"cannot shrink heads {old_heads} -> {new_heads}")
    hpg_old = old_heads // kv_groups
    hpg_new = new_heads // kv_groups
    src = np.concatenate(
        [g * hpg_old + (np.arange(hpg_new) % hpg_old) for g in range(kv_groups)]
    )
    return WidthMap(new_dim=new_heads, src_index=src,
                    multiplicity=np.bincount(src, minlength=old_heads))


def expand_in_axis(w: np.ndarray, wmap: WidthMap) -> np.ndarray:
    """Grow a matrix along its input (first) axis, splitting by multiplicity.

    Feeding the result an input duplicated per the map reproduces the
    original product: each copy contributes its share of the original row.
    """
    if w.shape[0] != wmap.old_dim:
        raise ValidationError(f"input axis {w.shape[0]} != map old_dim {wmap.old_dim}")
    mult = wmap.multiplicity[wmap.src_index].astype(w.dtype)
    return np.take(w, wmap.src_index, axis=0) / mult[:, None]


def expand_out_axis(w: np.ndarray, wmap: WidthMap, donor: np.ndarray | None = None) -> np.ndarray:
    """Grow a tensor along its output (last) axis by duplication.

    Without a donor, new slices duplicate this tensor's own mapped slices.
    With a donor (same shape, same role in the next layer), each source's
    primary position keeps this tensor's slice and every extra copy takes
    the donor's mapped slice instead.
    """
    axis = w.ndim - 1
    if w.shape[axis] != wmap.old_dim:
        raise ValidationError(f"output axis {w.shape[axis]} != map old_dim {wmap.old_dim}")
    if donor is None:
        return np.take(w, wmap.src_index, axis=axis)
    if donor.shape != w.shape:
        raise ValidationError(f"donor shape {donor.shape} != tensor shape {w.shape}")
    out = np.take(donor, wmap.src_index, axis=axis)
    mask = wmap.primary_mask()
    out[..., mask] = np.take(w, wmap.src_index[mask], axis=axis)
    return out


def expand_out_heads(w: np.ndarray, head_map: WidthMap, head_dim: int,
                     donor: np.ndarray | None = None) -> np.ndarray:
    """Grow an output axis at whole-head granularity (query projections)."""
    lead = w.shape[:-1]
    w3 = w.reshape(*lead, head_map.old_dim, head_dim)
    donor3 = None if donor is None else donor.reshape(*lead, head_map.old_dim, head_dim)
    out3 = expand_out_axis(np.swapaxes(w3, -1, -2), head_map,
                           None if donor3 is None else np.swapaxes(donor3, -1, -2))
    return np.swapaxes(out3, -1, -2).reshape(*lead, head_map.new_dim * head_dim)


def expand_in_heads(w: np.ndarray, head_map: WidthMap, head_dim: int) -> np.ndarray:
    """Grow an input axis at whole-head granularity, splitting by head
    multiplicity (the attention output projection)."""
    if w.shape[0] != head_map.old_dim * head_dim:
        raise ValidationError(
            f"input axis {w.shape[0]} != {head_map.old_dim} heads x {head_dim}"
        )
    w3 = w.reshape(head_map.old_dim, head_dim, -1)
    mult = head_map.multiplicity[head_map.src_index].astype(w.dtype)
    out3 = np.take(w3, head_map.src_index, axis=0) / mult[:, None, None]
    return out3.reshape(head_map.new_dim * head_dim, w.shape[-1])


def _check_width_growth(src: ModelConfig, tgt: ModelConfig) -> None:
    src.validate()
    tgt.validate()
    if tgt.n_layers != src.n_layers:
        raise ValidationError("width expansion keeps n_layers fixed; grow depth separately")
    if tgt.kv_groups != src.kv_groups:
        raise ValidationError(f"kv_groups must match ({src.kv_groups} -> {tgt.kv_groups})")
    if tgt.head_dim != src.head_dim:
        raise ValidationError(
            f"head_dim is fixed ({src.head_dim} -> {tgt.head_dim}); grow head count instead"
        )
    if tgt.vocab_size != src.vocab_size:
        raise ValidationError("vocab_size must match between source and target")
    if tgt.qkv_bias != src.qkv_bias:
        raise ValidationError("qkv_bias must match between source and target")
    for dim in ("hidden_dim", "intermediate_dim", "n_heads"):
        if getattr(tgt, dim) < getattr(src, dim):
            raise ValidationError(
                f"cannot shrink {dim}: {getattr(src, dim)} -> {getattr(tgt, dim)}"
            )


def _expand_width(ckpt: Checkpoint, target: ModelConfig, use_donors: bool) -> Checkpoint:
    if ckpt.moe is not None:
        raise ValidationError("width growth operates on dense checkpoints")
    ckpt.validate()
    src = ckpt.config
    _check_width_growth(src, target)
    hidden_map = build_width_map(src.hidden_dim, target.hidden_dim)
    inter_map = build_width_map(src.intermediate_dim, target.intermediate_dim)
    head_map = build_grouped_head_map(src.n_heads, target.n_heads, src.kv_groups)

    # stage 1: input-axis expansion of every matrix (pure splitting)
    split: dict[str, np.ndarray] = {}
    for i in range(src.n_layers):
        p = f"layers.{i}"
        split[f"{p}.attn.wq"] = expand_in_axis(ckpt.tensors[f"{p}.attn.wq"], hidden_map)
        split[f"{p}.attn.wk"] = expand_in_axis(ckpt.tensors[f"{p}.attn.wk"], hidden_map)
        split[f"{p}.attn.wv"] = expand_in_axis(ckpt.tensors[f"{p}.attn.wv"], hidden_map)
        split[f"{p}.attn.wo"] = expand_in_heads(
            ckpt.tensors[f"{p}.attn.wo"], head_map, src.head_dim
        )
        split[f"{p}.mlp.w_gate"] = expand_in_axis(ckpt.tensors[f"{p}.mlp.w_gate"], hidden_map)
        split[f"{p}.mlp.w_up"] = expand_in_axis(ckpt.tensors[f"{p}.mlp.w_up"], hidden_map)
        split[f"{p}.mlp.w_down"] = expand_in_axis(ckpt.tensors[f"{p}.mlp.w_down"], inter_map)

    # stage 2: output-axis expansion; donors come from the layer above
    tensors: dict[str, np.ndarray] = {
        "embed": expand_out_axis(ckpt.tensors["embed"], hidden_map),
        "final_norm": expand_out_axis(ckpt.tensors["final_norm"], hidden_map),
        "unembed": expand_in_axis(ckpt.tensors["unembed"], hidden_map),
    }
    for i in range(src.n_layers):
        p = f"layers.{i}"
        # topmost layer has no layer above and duplicates itself
        dp = f"layers.{i + 1}" if use_donors and i + 1 < src.n_layers else p
        tensors[f"{p}.attn_norm"] = expand_out_axis(ckpt.tensors[f"{p}.attn_norm"], hidden_map)
        tensors[f"{p}.mlp_norm"] = expand_out_axis(ckpt.tensors[f"{p}.mlp_norm"], hidden_map)
        tensors[f"{p}.attn.wq"] = expand_out_heads(
            split[f"{p}.attn.wq"], head_map, src.head_dim,
            donor=None if dp == p else split[f"{dp}.attn.wq"],
        )
        tensors[f"{p}.attn.wk"] = split[f"{p}.attn.wk"]
        tensors[f"{p}.attn.wv"] = split[f"{p}.attn.wv"]
        tensors[f"{p}.attn.wo"] = expand_out_axis(
            split[f"{p}.attn.wo"], hidden_map,
            donor=None if dp == p else split[f"{dp}.attn.wo"],
        )
        if src.qkv_bias:
            # biases and gains sit on output axes and always self-duplicate
            tensors[f"{p}.attn.q_bias"] = expand_out_heads(
                ckpt.tensors[f"{p}.attn.q_bias"], head_map, src.head_dim
            )
            tensors[f"{p}.attn.k_bias"] = ckpt.tensors[f"{p}.attn.k_bias"].copy()
            tensors[f"{p}.attn.v_bias"] = ckpt.tensors[f"{p}.attn.v_bias"].copy()
        for name in ("w_gate", "w_up"):
            tensors[f"{p}.mlp.{name}"] = expand_out_axis(
                split[f"{p}.mlp.{name}"], inter_map,
                donor=None if dp == p else split[f"{dp}.mlp.{name}"],
            )
        tensors[f"{p}.mlp.w_down"] = expand_out_axis(
            split[f"{p}.mlp.w_down"], hidden_map,
            donor=None if dp == p else split[f"{dp}.mlp.w_down"],
        )

    out = Checkpoint(config=target, tensors={k: np.ascontiguousarray(v) for k, v in tensors.items()})
    out.validate()
    return out.freeze()


def fpi_expand(ckpt: Checkpoint, target: ModelConfig) -> Checkpoint:
    """Function-preserving width expansion (self-duplication everywhere)."""
    return _expand_width(ckpt, target, use_donors=False)


def aki_expand(ckpt: Checkpoint, target: ModelConfig) -> Checkpoint:
    """Symmetry-breaking width expansion: new output neurons copy the layer
    above; the topmost layer self-duplicates."""
    return _expand_width(ckpt, target, use_donors=True)


def depth_source_indices(source_layers: int, target_layers: int, mode: str) -> list[int]:
    """Which source layer each target layer copies.

    stack repeats the whole source in order (l mod L1); interpolate repeats
    each source layer in consecutive runs (floor(l * L1 / L2)), keeping the
    source order locally intact.
    """
    if target_layers < source_layers:
        raise ValidationError(f"cannot shrink depth {source_layers} -> {target_layers}")
    if mode == "stack":
        return [l % source_layers for l in range(target_layers)]
    if mode == "interpolate":
        return [l * source_layers // target_layers for l in range(target_layers)]
    raise ValidationError(f"unknown depth mode {mode!r} (expected 'stack' or 'interpolate')")


def grow_depth(ckpt: Checkpoint, target_layers: int, mode: str) -> Checkpoint:
    """Copy whole layers to reach target_layers; other tensors unchanged."""
    if ckpt.moe is not None:
        raise ValidationError("depth growth operates on dense checkpoints")
    ckpt.validate()
    sources = depth_source_indices(ckpt.config.n_layers, target_layers, mode)
    target = dataclasses.replace(ckpt.config, n_layers=target_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, arr in ckpt.tensors.items():
        if not name.startswith("layers."):
            tensors[name] = arr.copy()
    for l, src_l in enumerate(sources):
        src_prefix = f"layers.{src_l}."
        for name, arr in ckpt.tensors.items():
            if name.startswith(src_prefix):
                tensors[f"layers.{l}." + name[len(src_prefix):]] = arr.copy()
    out = Checkpoint(config=target, tensors=tensors)
    out.validate()
    return out.freeze()


@dataclass(frozen=True)
class GrowthPlan:
    """A full scale-up recipe: width method, depth mode, and both configs."""

    method: str
    depth_mode: str
    source_config: ModelConfig
    target_config: ModelConfig

    def validate(self) -> None:
        if self.method not in ("fpi", "aki"):
            raise ValidationError(f"unknown growth method {self.method!r}")
        if self.depth_mode not in ("stack", "interpolate"):
            raise ValidationError(f"unknown depth mode {self.depth_mode!r}")
        if self.target_config.n_layers < self.source_config.n_layers:
            raise ValidationError("target must have at least as many layers as source")
        width_target = dataclasses.replace(
            self.target_config, n_layers=self.source_config.n_layers
        )
        _check_width_growth(self.source_config, width_target)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "depth_mode": self.depth_mode,
            "source_config": self.source_config.to_dict(),
            "target_config": self.target_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GrowthPlan":
        required = {"method", "depth_mode", "source_config", "target_config"}
        if set(data) != required:
            raise ValidationError(
                f"growth plan must have exactly the fields {sorted(required)}"
            )
        return cls(
            method=data["method"],
            depth_mode=data["depth_mode"],
            source_config=ModelConfig.from_dict(data["source_config"]),
            target_config=ModelConfig.from_dict(data["target_config"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "GrowthPlan":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"unparseable growth plan: {exc}") from exc
        return cls.from_dict(data)


def scale_up(ckpt: Checkpoint, plan: GrowthPlan) -> Checkpoint:
    """Grow width first (sharing one map across layers), then depth."""
    plan.validate()
    if ckpt.config != plan.source_config:
        raise ValidationError("checkpoint config does not match the plan's source_config")
    width_target = dataclasses.replace(plan.target_config, n_layers=ckpt.config.n_layers)
    expand = fpi_expand if plan.method == "fpi" else aki_expand
    widened = expand(ckpt, width_target)
    return grow_depth(widened, plan.target_config.n_layers, plan.depth_mode)


@dataclass(frozen=True)
class PreservationReport:
    max_abs_logit_diff: float
    loss_diff: float
    passed: bool
    n_probes: int
    tol: float


def verify_preservation(src_ckpt: Checkpoint, dst_ckpt: Checkpoint, n_probes: int = 16,
                        seed: int = 0, tol: float = 1e-5, probe_len: int = 16,
                        dtype=np.float32) -> PreservationReport:
    """Compare two models' logits on random probe sequences.

    Passes iff the max absolute logit difference stays within tol. The
    report is always returned, so non-integer-multiple growth can still be
    inspected even though it is not expected to pass.
    """
    if src_ckpt.config.vocab_size != dst_ckpt.config.vocab_size:
        raise ValidationError("vocab_size mismatch between checkpoints")
    if n_probes < 1:
        raise ValidationError("n_probes must be >= 1")
    length = min(probe_len, src_ckpt.config.context_length, dst_ckpt.config.context_length)
    length = max(length, 2)
    rng = np.random.default_rng(seed)
    probes = rng.integers(0, src_ckpt.config.vocab_size, size=(n_probes, length))
    g_src = build_graph(src_ckpt, probes, dtype=dtype)
    g_dst = build_graph(dst_ckpt, probes, dtype=dtype)
    max_diff = float(np.max(np.abs(g_src.logits.data - g_dst.logits.data)))
    loss_diff = float(abs(g_src.loss.data - g_dst.loss.data))
    return PreservationReport(
        max_abs_logit_diff=max_diff,
        loss_diff=loss_diff,
        passed=max_diff <= tol,
        n_probes=n_probes,
        tol=tol,
    )


def symmetry_report(ckpt: Checkpoint) -> dict[str, int]:
    """Count bitwise-identical output-slice pairs in every weight matrix.

    Duplicated output neurons receive identical gradients and stay locked
    together under training, so this measures how much redundancy a growth
    method left behind. Vectors (biases, norm gains) are skipped: they are
    expanded by duplication under every method.
    """
    report: dict[str, int] = {}
    for name, arr in ckpt.tensors.items():
        if arr.ndim != 2:
            continue
        groups: dict[bytes, int] = {}
        for col in range(arr.shape[1]):
            key = arr[:, col].tobytes()
            groups[key] = groups.get(key, 0) + 1
        report[name] = sum(k * (k - 1) // 2 for k in groups.values())
    return report
