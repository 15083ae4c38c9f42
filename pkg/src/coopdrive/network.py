"""Policy-token transformer that maps vehicle state tokens to joint Q-values.

A learnable policy token is prepended to the embedded vehicle tokens, each
vehicle row gets a sinusoidal encoding of its physical (lane-major) cell
index, and a stack of pre-norm transformer blocks mixes the sequence. Only
the policy token's final representation feeds the Q head, which emits one row
of action values per controlled vehicle.

Token order is canonicalized internally (sorted by physical position, ties by
token bytes), so the output is exactly invariant to how the caller stores the
vehicles — attention pooling through the policy token makes this a no-op
mathematically, and the canonical order makes it hold bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoder import TokenSequence
from .errors import CheckpointError, ConfigError, DimensionError, NumericFault


@dataclass(frozen=True)
class NetConfig:
    """Shape and behavior switches of the policy network."""

    d_model: int = 192
    n_layers: int = 2
    n_heads: int = 6
    d_head: int = 32
    dropout: float = 0.1
    n_pos: int = 750            # lane-major physical positions
    token_len: int = 1000
    n_vehicles: int = 6
    n_cav: int = 2
    n_actions: int = 9
    mlp_ratio: int = 4
    use_ppe: bool = True        # sinusoidal physical positional encoding
    learned_pos: bool = False   # learn a per-slot positional table instead

    def __post_init__(self):
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for sin/cos pairing")
        if self.n_heads < 1 or self.d_head < 1:
            raise ConfigError("need at least one attention head")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @property
    def out_dim(self) -> int:
        return self.n_cav * self.n_actions

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d_model


# ---------------------------------------------------------------------------
# physical positional encoding


def compute_ppe(pos: int, config: NetConfig) -> np.ndarray:
    """Sin/cos encoding of a physical position index, length d_model.

    Pair k uses wavelength base (2*n_pos)**(2k/D): entry 2k is the sine,
    entry 2k+1 the cosine of pos / base.
    """
    if not 0 <= pos < config.n_pos:
        raise IndexError(f"physical position {pos} outside [0, {config.n_pos})")
    half = config.d_model // 2
    exponents = 2.0 * np.arange(half) / config.d_model
    denom = (2.0 * config.n_pos) ** exponents
    angles = pos / denom
    out = np.empty(config.d_model)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


_PPE_CACHE: dict[tuple[int, int], np.ndarray] = {}


def ppe_table(config: NetConfig) -> np.ndarray:
    """All n_pos encodings stacked, (n_pos, d_model). Cached per geometry."""
    key = (config.n_pos, config.d_model)
    cached = _PPE_CACHE.get(key)
    if cached is not None:
        return cached
    half = config.d_model // 2
    exponents = 2.0 * np.arange(half) / config.d_model
    denom = (2.0 * config.n_pos) ** exponents
    angles = np.arange(config.n_pos)[:, None] / denom[None, :]
    out = np.empty((config.n_pos, config.d_model))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    out.setflags(write=False)
    _PPE_CACHE[key] = out
    return out


# ---------------------------------------------------------------------------
# attention on plain arrays (single sequence surface)


def self_attention(z: np.ndarray, u_qkv: np.ndarray) -> np.ndarray:
    """Single-head qkv self-attention: softmax(q k^T / sqrt(d_head)) v."""
    d_3h = u_qkv.shape[1]
    if d_3h % 3 != 0 or z.shape[1] != u_qkv.shape[0]:
        raise DimensionError(f"bad qkv projection shapes {z.shape} x {u_qkv.shape}")
    d_head = d_3h // 3
    qkv = z @ u_qkv
    q, k, v = qkv[:, :d_head], qkv[:, d_head:2 * d_head], qkv[:, 2 * d_head:]
    logits = (q @ k.T) / math.sqrt(d_head)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs @ v


def multi_head_attention(z: np.ndarray, u_heads: list[np.ndarray],
                         w_o: np.ndarray) -> np.ndarray:
    """Concatenated per-head attention outputs projected by w_o."""
    d_head = u_heads[0].shape[1] // 3
    u = np.concatenate(u_heads, axis=1)
    out, _ = T._mha_forward(z[None, :, :], u, w_o, len(u_heads), d_head)
    return out[0]


# ---------------------------------------------------------------------------
# parameters


@dataclass
class LayerParams:
    ln1_gain: T.Tensor
    ln1_bias: T.Tensor
    u_heads: list[T.Tensor]
    w_o: T.Tensor
    ln2_gain: T.Tensor
    ln2_bias: T.Tensor
    mlp_w1: T.Tensor
    mlp_b1: T.Tensor
    mlp_w2: T.Tensor
    mlp_b2: T.Tensor


@dataclass
class ParameterSet:
    """All learnable arrays of the network, in a fixed named order."""

    config: NetConfig
    embed: T.Tensor
    policy_token: T.Tensor
    layers: list[LayerParams]
    final_gain: T.Tensor
    final_bias: T.Tensor
    q_w: T.Tensor
    q_b: T.Tensor
    pos_embed: T.Tensor | None = None
    target_of: "ParameterSet | None" = field(default=None, repr=False)

    def named(self) -> dict[str, T.Tensor]:
        out: dict[str, T.Tensor] = {
            "embed": self.embed,
            "policy_token": self.policy_token,
        }
        for i, lp in enumerate(self.layers):
            out[f"layers.{i}.ln1_gain"] = lp.ln1_gain
            out[f"layers.{i}.ln1_bias"] = lp.ln1_bias
            for h, uh in enumerate(lp.u_heads):
                out[f"layers.{i}.u_qkv.{h}"] = uh
            out[f"layers.{i}.w_o"] = lp.w_o
            out[f"layers.{i}.ln2_gain"] = lp.ln2_gain
            out[f"layers.{i}.ln2_bias"] = lp.ln2_bias
            out[f"layers.{i}.mlp_w1"] = lp.mlp_w1
            out[f"layers.{i}.mlp_b1"] = lp.mlp_b1
            out[f"layers.{i}.mlp_w2"] = lp.mlp_w2
            out[f"layers.{i}.mlp_b2"] = lp.mlp_b2
        out["final_ln_gain"] = self.final_gain
        out["final_ln_bias"] = self.final_bias
        out["q_head_w"] = self.q_w
        out["q_head_b"] = self.q_b
        if self.pos_embed is not None:
            out["pos_embed"] = self.pos_embed
        return out

    def parameters(self) -> list[T.Tensor]:
        return list(self.named().values())

    @property
    def count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def copy(self) -> "ParameterSet":
        arrays = {k: v.data.copy() for k, v in self.named().items()}
        return from_arrays(self.config, arrays)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_parameters(config: NetConfig, rng: np.random.Generator) -> ParameterSet:
    """Xavier-uniform linear weights, unit LN gains, small-normal policy token."""
    d, dh, k = config.d_model, config.d_head, config.n_heads
    hid = config.mlp_hidden
    embed = T.parameter(_xavier(rng, config.token_len, d))
    policy = T.parameter(rng.normal(0.0, 0.02, size=(1, d)))
    layers = []
    for _ in range(config.n_layers):
        u_heads = [T.parameter(_xavier(rng, d, 3 * dh)) for _ in range(k)]
        w_o = T.parameter(_xavier(rng, k * dh, d))
        w1 = T.parameter(_xavier(rng, d, hid))
        w2 = T.parameter(_xavier(rng, hid, d))
        layers.append(LayerParams(
            ln1_gain=T.parameter(np.ones((1, d))),
            ln1_bias=T.parameter(np.zeros((1, d))),
            u_heads=u_heads,
            w_o=w_o,
            ln2_gain=T.parameter(np.ones((1, d))),
            ln2_bias=T.parameter(np.zeros((1, d))),
            mlp_w1=w1,
            mlp_b1=T.parameter(np.zeros((1, hid))),
            mlp_w2=w2,
            mlp_b2=T.parameter(np.zeros((1, d))),
        ))
    q_w = T.parameter(_xavier(rng, d, config.out_dim))
    pos_embed = None
    if config.learned_pos:
        pos_embed = T.parameter(
            rng.normal(0.0, 0.02, size=(config.n_vehicles + 1, d)))
    return ParameterSet(
        config=config,
        embed=embed,
        policy_token=policy,
        layers=layers,
        final_gain=T.parameter(np.ones((1, d))),
        final_bias=T.parameter(np.zeros((1, d))),
        q_w=q_w,
        q_b=T.parameter(np.zeros((1, config.out_dim))),
        pos_embed=pos_embed,
    )


def expected_parameter_count(config: NetConfig) -> int:
    """Closed-form count derived from the configured shapes."""
    d, dh, k, hid = (config.d_model, config.d_head, config.n_heads,
                     config.mlp_hidden)
    per_layer = (k * d * 3 * dh) + (k * dh * d) + 4 * d + (d * hid + hid) + (hid * d + d)
    total = (config.token_len * d) + d + config.n_layers * per_layer
    total += 2 * d + (d * config.out_dim) + config.out_dim
    if config.learned_pos:
        total += (config.n_vehicles + 1) * d
    return total


def expected_shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape table implied by the configuration."""
    d, dh, hid = config.d_model, config.d_head, config.mlp_hidden
    out: dict[str, tuple[int, ...]] = {
        "embed": (config.token_len, d),
        "policy_token": (1, d),
    }
    for i in range(config.n_layers):
        out[f"layers.{i}.ln1_gain"] = (1, d)
        out[f"layers.{i}.ln1_bias"] = (1, d)
        for h in range(config.n_heads):
            out[f"layers.{i}.u_qkv.{h}"] = (d, 3 * dh)
        out[f"layers.{i}.w_o"] = (config.n_heads * dh, d)
        out[f"layers.{i}.ln2_gain"] = (1, d)
        out[f"layers.{i}.ln2_bias"] = (1, d)
        out[f"layers.{i}.mlp_w1"] = (d, hid)
        out[f"layers.{i}.mlp_b1"] = (1, hid)
        out[f"layers.{i}.mlp_w2"] = (hid, d)
        out[f"layers.{i}.mlp_b2"] = (1, d)
    out["final_ln_gain"] = (1, d)
    out["final_ln_bias"] = (1, d)
    out["q_head_w"] = (d, config.out_dim)
    out["q_head_b"] = (1, config.out_dim)
    if config.learned_pos:
        out["pos_embed"] = (config.n_vehicles + 1, d)
    return out


def from_arrays(config: NetConfig, arrays: dict[str, np.ndarray]) -> ParameterSet:
    """Rebuild a ParameterSet from named arrays, validating every shape
    against the configuration (checkpoint loading)."""
    shapes = expected_shapes(config)

    def take(name: str) -> T.Tensor:
        if name not in arrays:
            raise CheckpointError(f"missing parameter array '{name}'")
        if tuple(arrays[name].shape) != shapes[name]:
            raise CheckpointError(
                f"parameter '{name}' has shape {arrays[name].shape}, "
                f"configuration expects {shapes[name]}")
        return T.parameter(arrays[name])

    layers = []
    for i in range(config.n_layers):
        layers.append(LayerParams(
            ln1_gain=take(f"layers.{i}.ln1_gain"),
            ln1_bias=take(f"layers.{i}.ln1_bias"),
            u_heads=[take(f"layers.{i}.u_qkv.{h}") for h in range(config.n_heads)],
            w_o=take(f"layers.{i}.w_o"),
            ln2_gain=take(f"layers.{i}.ln2_gain"),
            ln2_bias=take(f"layers.{i}.ln2_bias"),
            mlp_w1=take(f"layers.{i}.mlp_w1"),
            mlp_b1=take(f"layers.{i}.mlp_b1"),
            mlp_w2=take(f"layers.{i}.mlp_w2"),
            mlp_b2=take(f"layers.{i}.mlp_b2"),
        ))
    return ParameterSet(
        config=config,
        embed=take("embed"),
        policy_token=take("policy_token"),
        layers=layers,
        final_gain=take("final_ln_gain"),
        final_bias=take("final_ln_bias"),
        q_w=take("q_head_w"),
        q_b=take("q_head_b"),
        pos_embed=take("pos_embed") if config.learned_pos else None,
    )


# ---------------------------------------------------------------------------
# forward pass


def canonical_order(seq: TokenSequence) -> list[int]:
    """Storage-independent token order: by position, ties by token content."""
    keys = [(int(seq.positions[j]), seq.tokens[j].tobytes())
            for j in range(seq.n)]
    return sorted(range(seq.n), key=keys.__getitem__)


def _position_rows(seqs: list[TokenSequence], orders: list[list[int]],
                   config: NetConfig) -> np.ndarray:
    """Per-row positional additions, (B*(n+1), d); policy rows stay zero."""
    block = config.n_vehicles + 1
    rows = np.zeros((len(seqs) * block, config.d_model))
    if not config.use_ppe or config.learned_pos:
        return rows
    table = ppe_table(config)
    for b, (seq, order) in enumerate(zip(seqs, orders)):
        pos = seq.positions[order]
        rows[b * block + 1:(b + 1) * block] = table[pos]
    return rows


def _assemble(seqs: list[TokenSequence], params: ParameterSet, config: NetConfig,
              rng: np.random.Generator | None, training: bool) -> T.Tensor:
    block = config.n_vehicles + 1
    orders = [canonical_order(s) for s in seqs]
    for s in seqs:
        if s.tokens.shape != (config.n_vehicles, config.token_len):
            raise DimensionError(
                f"token sequence shape {s.tokens.shape} does not match config "
                f"({config.n_vehicles}, {config.token_len})")
    tokens = np.concatenate([s.tokens[o] for s, o in zip(seqs, orders)], axis=0)
    emb = T.matmul(T.constant(tokens), params.embed)
    z = T.interleave_row(emb, params.policy_token, config.n_vehicles)
    if config.learned_pos:
        idx = np.tile(np.arange(block), len(seqs))
        z = T.add(z, T.gather_rows(params.pos_embed, idx))
    else:
        z = T.add_const(z, _position_rows(seqs, orders, config))
    return T.dropout(z, config.dropout, rng, training)


def _blocks(z: T.Tensor, params: ParameterSet, config: NetConfig,
            rng: np.random.Generator | None, training: bool) -> T.Tensor:
    block = config.n_vehicles + 1
    for i, lp in enumerate(params.layers):
        try:
            h = T.layer_norm(z, lp.ln1_gain, lp.ln1_bias)
            att = T.block_mha(h, lp.u_heads, lp.w_o,
                              config.n_heads, config.d_head, block)
            att = T.dropout(att, config.dropout, rng, training)
            z = T.add(z, att)
            h2 = T.layer_norm(z, lp.ln2_gain, lp.ln2_bias)
            m = T.add_row(T.matmul(h2, lp.mlp_w1), lp.mlp_b1)
            m = T.gelu(m)
            m = T.add_row(T.matmul(m, lp.mlp_w2), lp.mlp_b2)
            m = T.dropout(m, config.dropout, rng, training)
            z = T.add(z, m)
        except NumericFault as err:
            raise NumericFault(f"layer {i}: {err}") from err
    return z


def batched_forward(seqs: list[TokenSequence], params: ParameterSet,
                    config: NetConfig, rng: np.random.Generator | None = None,
                    training: bool = False) -> T.Tensor:
    """Q-value rows for a batch of token sequences, (B, n_cav*n_actions)."""
    block = config.n_vehicles + 1
    z = _assemble(seqs, params, config, rng, training)
    z = _blocks(z, params, config, rng, training)
    pol = T.gather_rows(z, np.arange(len(seqs)) * block)
    y = T.layer_norm(pol, params.final_gain, params.final_bias)
    return T.add_row(T.matmul(y, params.q_w), params.q_b)


def forward(seq: TokenSequence, params: ParameterSet, config: NetConfig,
            rng: np.random.Generator | None = None,
            training: bool = False) -> np.ndarray:
    """Q-values for one scene, shape (n_cav, n_actions). No graph recorded."""
    with T.no_grad():
        q = batched_forward([seq], params, config, rng, training)
    return q.data.reshape(config.n_cav, config.n_actions)


def assemble_input(seq: TokenSequence, params: ParameterSet, config: NetConfig,
                   rng: np.random.Generator | None = None,
                   training: bool = False) -> np.ndarray:
    """The (n_vehicles+1, d_model) input block for one sequence: policy token
    row plus embedded tokens with positional rows added (canonical order)."""
    with T.no_grad():
        z = _assemble([seq], params, config, rng, training)
    return z.data
