"""Synthetic model families, deterministic init, and a toy Adam trainer.

Three transformer-shaped families exist so every partitioning pattern has a
real customer: DenseGPT (plain fused QKV and MLP matmuls), MoE (per-layer
fused expert matmul, non-consecutive expert blocks), and GQA (fused QKV with
unequal q/k/v segments). Training is simulated: gradients come from the same
integer-hash generator as init, and the Adam update is elementwise with f64
accumulation, so updating a shard of a parameter commutes with slicing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ModelConfigError
from .tensor import DType, Tensor, gen_tensor, hash_unit, make_tensor, stream_base

# Embedding rows are not part of the scale struct; one desk-scale constant
# keeps the embedding the largest single parameter in every family.
VOCAB = 512

# Layer widths must divide cleanly under any supported TP degree.
MAX_TP = 8

FORMAT_VERSION = 1


class ParamKind(Enum):
    MATMUL2D = "matmul2d"
    FUSED_QKV = "fused_qkv"
    FUSED_EXPERT = "fused_expert"
    LAYERNORM_WEIGHT = "layernorm_weight"
    LAYERNORM_BIAS = "layernorm_bias"
    EMBEDDING = "embedding"
    TIED_EMBEDDING = "tied_embedding"
    ASYNC_PARTIAL = "async_partial"


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    layer_index: int
    kind: ParamKind
    tp_axis_hint: int | None = None
    nc_segments: tuple[tuple[int, int], ...] | None = None

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n_layers: int
    tied_pairs: tuple[tuple[str, str], ...]
    params: tuple[ParamSpec, ...]

    def param(self, name: str) -> ParamSpec:
        for p in self.params:
            if p.name == name:
                return p
        raise ModelConfigError(f"unknown param {name!r}")

    def tied_leader(self, name: str) -> str:
        """Canonical name for gradient/init purposes: tied followers map to
        the first member of their pair."""
        for leader, follower in self.tied_pairs:
            if name == follower:
                return leader
        return name

    @property
    def total_numel(self) -> int:
        return sum(p.numel for p in self.params)


@dataclass(frozen=True)
class ParamState:
    weight: Tensor
    m: Tensor
    v: Tensor


@dataclass
class ModelState:
    spec: ModelSpec
    params: dict[str, ParamState]
    step: int
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_seed: int = 2024
    steps: int = 100

    def validate(self) -> None:
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ModelConfigError("betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ModelConfigError("lr and eps must be positive")
        if self.steps < 0:
            raise ModelConfigError("steps must be >= 0")


# ---------------------------------------------------------------------------
# model construction
# ---------------------------------------------------------------------------

FAMILIES = ("DenseGPT", "MoE", "GQA")


def make_model(family: str, scale: dict) -> ModelSpec:
    """Build a ModelSpec from a family name and a scale struct.

    scale keys: n_layers, hidden, and for MoE n_experts, for GQA q_heads and
    kv_heads. hidden must be divisible by 2*MAX_TP.
    """
    if family not in FAMILIES:
        raise ModelConfigError(f"unknown family {family!r}; expected one of {FAMILIES}")
    try:
        n_layers = int(scale["n_layers"])
        hidden = int(scale["hidden"])
    except KeyError as e:
        raise ModelConfigError(f"scale missing key {e}") from e
    if n_layers < 0:
        raise ModelConfigError("n_layers must be >= 0")
    if hidden <= 0 or hidden % (2 * MAX_TP) != 0:
        raise ModelConfigError(f"hidden must be a positive multiple of {2 * MAX_TP}")

    if family == "MoE":
        n_experts = int(scale.get("n_experts", 0))
        if n_experts < 1:
            raise ModelConfigError("MoE needs n_experts >= 1")
    if family == "GQA":
        q_heads = int(scale.get("q_heads", 0))
        kv_heads = int(scale.get("kv_heads", 0))
        if q_heads < 1 or kv_heads < 1 or q_heads % kv_heads != 0:
            raise ModelConfigError("GQA needs q_heads a positive multiple of kv_heads")
        if hidden % q_heads != 0:
            raise ModelConfigError("GQA needs hidden divisible by q_heads")

    last_layer = max(n_layers - 1, 0)
    params: list[ParamSpec] = [
        ParamSpec("embed.tokens", (VOCAB, hidden), 0, ParamKind.EMBEDDING, 0),
        ParamSpec("pos.alibi", (hidden,), 0, ParamKind.ASYNC_PARTIAL),
    ]

    for i in range(n_layers):
        pre = f"layers.{i}"
        params.append(
            ParamSpec(f"{pre}.ln_w", (hidden,), i, ParamKind.LAYERNORM_WEIGHT)
        )
        params.append(
            ParamSpec(f"{pre}.ln_b", (hidden,), i, ParamKind.LAYERNORM_BIAS)
        )
        if family == "GQA":
            kv_size = hidden * kv_heads // q_heads
            segs = ((0, hidden), (hidden, kv_size), (hidden + kv_size, kv_size))
            params.append(
                ParamSpec(
                    f"{pre}.attn_qkv",
                    (hidden + 2 * kv_size, hidden),
                    i,
                    ParamKind.FUSED_QKV,
                    0,
                    segs,
                )
            )
        else:
            params.append(
                ParamSpec(f"{pre}.attn_qkv", (3 * hidden, hidden), i, ParamKind.MATMUL2D, 0)
            )
        params.append(
            ParamSpec(f"{pre}.attn_out", (hidden, hidden), i, ParamKind.MATMUL2D, 1)
        )
        if family == "MoE":
            # experts fused on axis 0: [n_experts * hidden_out, hidden_in]
            # with hidden_out = 2*hidden, hidden_in = hidden
            h_out = 2 * hidden
            segs = tuple((e * h_out, h_out) for e in range(n_experts))
            params.append(
                ParamSpec(
                    f"{pre}.experts",
                    (n_experts * h_out, hidden),
                    i,
                    ParamKind.FUSED_EXPERT,
                    0,
                    segs,
                )
            )
        else:
            params.append(
                ParamSpec(f"{pre}.mlp_fc1", (4 * hidden, hidden), i, ParamKind.MATMUL2D, 0)
            )
            params.append(
                ParamSpec(f"{pre}.mlp_fc2", (hidden, 4 * hidden), i, ParamKind.MATMUL2D, 1)
            )

    params.append(
        ParamSpec("head.out", (VOCAB, hidden), last_layer, ParamKind.TIED_EMBEDDING, 0)
    )

    return ModelSpec(
        name=family,
        n_layers=n_layers,
        tied_pairs=(("embed.tokens", "head.out"),),
        params=tuple(params),
    )


# ---------------------------------------------------------------------------
# init and training
# ---------------------------------------------------------------------------


def init_state(spec: ModelSpec, seed: int) -> ModelState:
    """Deterministic f32 state. Tied followers copy the leader bit-exactly;
    adam_v is |hash| so it is non-negative from the start."""
    states: dict[str, ParamState] = {}
    for p in spec.params:
        src = spec.tied_leader(p.name)
        if src != p.name:
            states[p.name] = states[src]
            continue
        w = gen_tensor(seed, p.name, "weight", p.shape)
        m = gen_tensor(seed, p.name, "m", p.shape)
        v_raw = gen_tensor(seed, p.name, "v", p.shape)
        v = make_tensor(DType.F32, np.abs(v_raw.data))
        states[p.name] = ParamState(w, m, v)
    return ModelState(spec, states, 0, {"loss_scale": 1.0, "iteration": 0})


def grad_window(
    cfg: TrainerConfig, canonical_name: str, step: int, start: int, count: int
) -> np.ndarray:
    """Synthetic gradient values for flat indices [start, start+count) of a
    parameter at a given global step. Pure function of its arguments."""
    base = stream_base(cfg.grad_seed, canonical_name, f"grad.{step}")
    return hash_unit(base, start, count)


def _pow_seq(base: float, n: int) -> float:
    # plain repeated multiplication: the value depends only on (base, n),
    # never on how steps were batched across calls
    out = 1.0
    for _ in range(n):
        out *= base
    return out


def adam_update(
    w: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    g: np.ndarray,
    step: int,
    cfg: TrainerConfig,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step on f32 arrays, accumulated in f64.

    Operation order is fixed and elementwise: m' = b1*m + (1-b1)*g,
    v' = b2*v + (1-b2)*g*g, then w' = w - lr * (m'/bc1) / (sqrt(v'/bc2) + eps)
    with bc_i = 1 - beta_i^(step+1). Each result is rounded to f32 before the
    next step reads it, so the trajectory is schedule-independent and slicing
    commutes with updating.
    """
    g64 = g.astype(np.float64)
    m64 = cfg.beta1 * m.astype(np.float64) + (1.0 - cfg.beta1) * g64
    v64 = cfg.beta2 * v.astype(np.float64) + (1.0 - cfg.beta2) * g64 * g64
    bc1 = 1.0 - _pow_seq(cfg.beta1, step + 1)
    bc2 = 1.0 - _pow_seq(cfg.beta2, step + 1)
    mhat = m64 / bc1
    vhat = v64 / bc2
    w64 = w.astype(np.float64) - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
    return (
        w64.astype(np.float32),
        m64.astype(np.float32),
        v64.astype(np.float32),
    )


def train_steps(state: ModelState, cfg: TrainerConfig, from_step: int, n: int) -> ModelState:
    """Advance the toy trainer n steps. Requires state.step == from_step.

    Returns a new ModelState; the input is not mutated. Tied pairs share one
    gradient stream (the leader's name), so they stay bit-identical.
    """
    cfg.validate()
    if state.step != from_step:
        raise ModelConfigError(
            f"state is at step {state.step}, expected from_step {from_step}"
        )
    spec = state.spec
    cur = {name: ps for name, ps in state.params.items()}
    for t in range(from_step, from_step + n):
        nxt: dict[str, ParamState] = {}
        for p in spec.params:
            src = spec.tied_leader(p.name)
            if src != p.name:
                nxt[p.name] = nxt[src]
                continue
            ps = cur[p.name]
            g = grad_window(cfg, src, t, 0, p.numel).reshape(p.shape)
            w, m, v = adam_update(ps.weight.data, ps.m.data, ps.v.data, g, t, cfg)
            nxt[p.name] = ParamState(
                make_tensor(DType.F32, w),
                make_tensor(DType.F32, m),
                make_tensor(DType.F32, v),
            )
        cur = nxt
    step = from_step + n
    meta = dict(state.metadata)
    meta["iteration"] = step
    return ModelState(spec, cur, step, meta)


# ---------------------------------------------------------------------------
# state comparison
# ---------------------------------------------------------------------------

STATE_KINDS = ("weight", "m", "v")


def first_diff(a: ModelState, b: ModelState):
    """First differing element between two states, or None if bit-equal.

    Returns (param, kind, flat_index, bits_a, bits_b). Steps and param sets
    are compared first; a mismatch there reports index -1.
    """
    if a.step != b.step:
        return ("<step>", "", -1, a.step, b.step)
    if set(a.params) != set(b.params):
        name = sorted(set(a.params) ^ set(b.params))[0]
        return (name, "", -1, name in a.params, name in b.params)
    for p in a.spec.params:
        pa, pb = a.params[p.name], b.params[p.name]
        for kind in STATE_KINDS:
            ta: Tensor = getattr(pa, kind)
            tb: Tensor = getattr(pb, kind)
            if ta.shape != tb.shape or ta.dtype is not tb.dtype:
                return (p.name, kind, -1, str(ta.shape), str(tb.shape))
            ba = ta.data.reshape(-1).view(np.uint32 if ta.dtype is DType.F32 else np.uint16)
            bb = tb.data.reshape(-1).view(np.uint32 if tb.dtype is DType.F32 else np.uint16)
            neq = np.nonzero(ba != bb)[0]
            if neq.size:
                i = int(neq[0])
                return (p.name, kind, i, int(ba[i]), int(bb[i]))
    return None


def states_equal(a: ModelState, b: ModelState) -> bool:
    return first_diff(a, b) is None


# ---------------------------------------------------------------------------
# model.json
# ---------------------------------------------------------------------------


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "name": spec.name,
        "n_layers": spec.n_layers,
        "tied_pairs": [list(p) for p in spec.tied_pairs],
        "params": [
            {
                "name": p.name,
                "shape": list(p.shape),
                "layer_index": p.layer_index,
                "kind": p.kind.value,
                "tp_axis_hint": p.tp_axis_hint,
                "nc_segments": None
                if p.nc_segments is None
                else [list(s) for s in p.nc_segments],
            }
            for p in spec.params
        ],
    }


def spec_from_dict(d: dict) -> ModelSpec:
    try:
        params = tuple(
            ParamSpec(
                name=p["name"],
                shape=tuple(int(x) for x in p["shape"]),
                layer_index=int(p["layer_index"]),
                kind=ParamKind(p["kind"]),
                tp_axis_hint=p["tp_axis_hint"],
                nc_segments=None
                if p["nc_segments"] is None
                else tuple((int(a), int(b)) for a, b in p["nc_segments"]),
            )
            for p in d["params"]
        )
        return ModelSpec(
            name=d["name"],
            n_layers=int(d["n_layers"]),
            tied_pairs=tuple((a, b) for a, b in d["tied_pairs"]),
            params=params,
        )
    except (KeyError, ValueError, TypeError) as e:
        raise ModelConfigError(f"bad model description: {e}") from e


def spec_to_json(spec: ModelSpec) -> str:
    return json.dumps(spec_to_dict(spec), indent=2) + "\n"
