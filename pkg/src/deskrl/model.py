"""Return-conditioned action predictor built from pre-norm residual blocks.

Each block is LN -> token mixer -> residual, then LN -> feed-forward ->
residual. The token mixer is pluggable per block: a depthwise causal
convolution with one filter bank per token modality, single-head causal
attention, or a directly-learned causal mixing matrix. The trimodal input
grid interleaves (rtg, state, action) embeddings and ends with the
current (rtg, state) pair; predictions are read from the state rows.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import PaddedWindow
from .envs import ActionSpace, ContinuousActions, DiscreteActions, action_space_from_dict

__all__ = [
    "MIXER_CONV",
    "MIXER_ATTENTION",
    "MIXER_DIRECT",
    "MIXER_KINDS",
    "MODAL_RTG",
    "MODAL_STATE",
    "MODAL_ACTION",
    "ModelConfig",
    "ModalLayout",
    "SequenceModel",
    "MixerParamCounts",
    "conv_token_mix",
    "attention_token_mix",
    "direct_attention_mix",
    "mixers_from_name",
    "modal_layout",
    "count_token_mixer_params",
    "parameter_shapes",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

MIXER_CONV = "conv"
MIXER_ATTENTION = "attention"
MIXER_DIRECT = "direct_attention"
MIXER_KINDS = (MIXER_CONV, MIXER_ATTENTION, MIXER_DIRECT)

MODAL_RTG, MODAL_STATE, MODAL_ACTION = 0, 1, 2
MODAL_NAMES = {MODAL_RTG: "rtg", MODAL_STATE: "state", MODAL_ACTION: "action"}

INIT_STD = 0.02


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its config."""


def mixers_from_name(name: str, n_blocks: int) -> tuple[str, ...]:
    """Expand a mixer name to per-block kinds; ``hybrid`` = conv blocks with a
    final attention block."""
    if name == "hybrid":
        if n_blocks < 2:
            raise ValueError("hybrid needs at least 2 blocks")
        return (MIXER_CONV,) * (n_blocks - 1) + (MIXER_ATTENTION,)
    if name in MIXER_KINDS:
        return (name,) * n_blocks
    raise ValueError(f"unknown mixer {name!r}; choose from {MIXER_KINDS + ('hybrid',)}")


@dataclass(frozen=True)
class ModalLayout:
    """Position -> modality map for the token grid."""

    modal_ids: np.ndarray  # (n,) values in {MODAL_RTG, MODAL_STATE, MODAL_ACTION}
    timesteps: np.ndarray  # (n,) timestep index of each position

    @property
    def n(self) -> int:
        return len(self.modal_ids)

    def positions(self, modal: int) -> np.ndarray:
        return np.where(self.modal_ids == modal)[0]


def modal_layout(context_length: int, include_action_tokens: bool = True) -> ModalLayout:
    """Token ordering: (rtg_1, s_1, a_1, ..., rtg_K, s_K); actions omitted when excluded.

    With action tokens the sequence length is ``3K - 1`` (the final action
    is the prediction target, not an input); without them it is ``2K``.
    """
    k = context_length
    if include_action_tokens:
        n = 3 * k - 1
        idx = np.arange(n)
        modal = np.where(idx % 3 == 0, MODAL_RTG, np.where(idx % 3 == 1, MODAL_STATE, MODAL_ACTION))
        ts = idx // 3
    else:
        n = 2 * k
        idx = np.arange(n)
        modal = np.where(idx % 2 == 0, MODAL_RTG, MODAL_STATE)
        ts = idx // 2
    return ModalLayout(modal.astype(np.intp), ts.astype(np.intp))


@dataclass
class ModelConfig:
    """Architecture settings for one model instance."""

    context_length: int
    hidden_dim: int
    n_blocks: int
    state_dim: int
    action_space: ActionSpace
    filter_length: int = 6
    mixers: tuple[str, ...] | None = None  # defaults to all-conv
    attention_width: int | None = None  # d'; defaults to hidden_dim
    positional_embedding: bool | None = None  # None = on unless purely conv
    projection_layer: bool = False
    activation: str = "gelu"
    include_action_tokens: bool = True
    unified_filter: bool = False
    dropout: float = 0.1
    scale_attention_scores: bool = False
    conv_identity_init: bool = False
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.mixers is None:
            self.mixers = (MIXER_CONV,) * self.n_blocks
        self.mixers = tuple(self.mixers)
        if len(self.mixers) != self.n_blocks:
            raise ValueError(f"{len(self.mixers)} mixer kinds for {self.n_blocks} blocks")
        for m in self.mixers:
            if m not in MIXER_KINDS:
                raise ValueError(f"unknown mixer kind {m!r}")
        if self.context_length < 1:
            raise ValueError("context_length must be >= 1")
        if self.filter_length < 1:
            raise ValueError("filter_length must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def seq_len(self) -> int:
        return 3 * self.context_length - 1 if self.include_action_tokens else 2 * self.context_length

    @property
    def d_prime(self) -> int:
        return self.attention_width if self.attention_width is not None else self.hidden_dim

    @property
    def use_positional_embedding(self) -> bool:
        if self.positional_embedding is not None:
            return self.positional_embedding
        return any(m != MIXER_CONV for m in self.mixers)

    @property
    def discrete(self) -> bool:
        return isinstance(self.action_space, DiscreteActions)

    @property
    def action_input_dim(self) -> int:
        return self.action_space.n if self.discrete else self.action_space.dim

    @property
    def output_dim(self) -> int:
        return self.action_space.n if self.discrete else self.action_space.dim

    def layout(self) -> ModalLayout:
        return modal_layout(self.context_length, self.include_action_tokens)

    def to_dict(self) -> dict:
        return {
            "context_length": self.context_length,
            "hidden_dim": self.hidden_dim,
            "n_blocks": self.n_blocks,
            "state_dim": self.state_dim,
            "action_space": self.action_space.to_dict(),
            "filter_length": self.filter_length,
            "mixers": list(self.mixers),
            "attention_width": self.attention_width,
            "positional_embedding": self.positional_embedding,
            "projection_layer": self.projection_layer,
            "activation": self.activation,
            "include_action_tokens": self.include_action_tokens,
            "unified_filter": self.unified_filter,
            "dropout": self.dropout,
            "scale_attention_scores": self.scale_attention_scores,
            "conv_identity_init": self.conv_identity_init,
            "ln_eps": self.ln_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["action_space"] = action_space_from_dict(d["action_space"])
        d["mixers"] = tuple(d["mixers"]) if d.get("mixers") is not None else None
        return cls(**d)


def _conv_bank_names(config: ModelConfig) -> list[str]:
    if config.unified_filter:
        return ["unified"]
    if config.include_action_tokens:
        return ["rtg", "state", "action"]
    return ["rtg", "state"]


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape registry of every learnable tensor."""
    d = config.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "embed_rtg.weight": (1, d),
        "embed_rtg.bias": (d,),
        "embed_state.weight": (config.state_dim, d),
        "embed_state.bias": (d,),
    }
    if config.include_action_tokens:
        shapes["embed_action.weight"] = (config.action_input_dim, d)
        shapes["embed_action.bias"] = (d,)
    if config.use_positional_embedding:
        shapes["pos_embedding"] = (config.context_length, d)
    for i, kind in enumerate(config.mixers):
        pre = f"block{i}"
        shapes[f"{pre}.ln1.gain"] = (d,)
        shapes[f"{pre}.ln1.bias"] = (d,)
        if kind == MIXER_CONV:
            for bank in _conv_bank_names(config):
                shapes[f"{pre}.mixer.filter_{bank}"] = (d, config.filter_length)
        elif kind == MIXER_ATTENTION:
            shapes[f"{pre}.mixer.query"] = (d, config.d_prime)
            shapes[f"{pre}.mixer.key"] = (d, config.d_prime)
            shapes[f"{pre}.mixer.value"] = (d, d)
        else:
            shapes[f"{pre}.mixer.mix_matrix"] = (config.seq_len, config.seq_len)
            shapes[f"{pre}.mixer.value"] = (d, d)
        if config.projection_layer:
            shapes[f"{pre}.mixer.proj_weight"] = (d, d)
            shapes[f"{pre}.mixer.proj_bias"] = (d,)
        shapes[f"{pre}.ln2.gain"] = (d,)
        shapes[f"{pre}.ln2.bias"] = (d,)
        shapes[f"{pre}.ffn.w1"] = (d, 4 * d)
        shapes[f"{pre}.ffn.b1"] = (4 * d,)
        shapes[f"{pre}.ffn.w2"] = (4 * d, d)
        shapes[f"{pre}.ffn.b2"] = (d,)
    shapes["head.weight"] = (d, config.output_dim)
    shapes["head.bias"] = (config.output_dim,)
    return shapes


def _truncated_normal(rng: np.random.Generator, shape, std=INIT_STD, bound=2.0):
    x = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(x) > bound * std
        if not bad.any():
            return x
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def _init_value(name: str, shape, config: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    if name.endswith((".bias", ".b1", ".b2", ".proj_bias")):
        return np.zeros(shape)
    if ".ln" in name:
        return np.ones(shape) if name.endswith(".gain") else np.zeros(shape)
    if ".mixer.filter_" in name and config.conv_identity_init:
        w = np.zeros(shape)
        w[:, 0] = 1.0
        return w
    return _truncated_normal(rng, shape)


# ---------------------------------------------------------------------------
# token mixers


def conv_token_mix(
    x: Tensor, banks: list[Tensor], bank_ids: np.ndarray, n_windows: int = 1
) -> Tensor:
    """Depthwise causal convolution with a per-position filter bank.

    ``banks[b]`` has shape (d, L): one length-L filter per hidden
    dimension. Position ``p`` (a row of ``x``) uses bank ``bank_ids[p]``
    and mixes lags ``x[p], x[p-1], ..., x[p-L+1]``; rows before the start
    of the sequence are zero. With ``n_windows > 1`` the rows split into
    that many independent equal-length sequences, each left-padded.
    """
    rows, d = x.data.shape
    length = banks[0].data.shape[1]
    for w in banks:
        if w.data.shape != (d, length):
            raise ShapeError(f"filter bank shape {w.data.shape} != ({d}, {length})")
    if rows % n_windows:
        raise ShapeError(f"{rows} rows do not split into {n_windows} windows")
    n = rows // n_windows
    bank_ids = np.asarray(bank_ids, dtype=np.intp)
    if bank_ids.shape != (n,):
        raise ShapeError(f"bank_ids shape {bank_ids.shape} != ({n},)")
    xw = x.data.reshape(n_windows, n, d)
    xp = np.zeros((n_windows, n + length - 1, d))
    xp[:, length - 1 :] = xw
    rows_per_bank = [bank_ids == b for b in range(len(banks))]
    coeffs = []
    out_data = np.zeros((n_windows, n, d))
    for lag in range(length):
        c = np.empty((n, d))
        for b, w in enumerate(banks):
            c[rows_per_bank[b]] = w.data[:, lag]
        coeffs.append(c)
        out_data += c * xp[:, length - 1 - lag : length - 1 - lag + n]
    out = Tensor(out_data.reshape(rows, d))
    needs = x.requires_grad or any(w.requires_grad for w in banks)

    def backward(g: np.ndarray) -> None:
        gw = g.reshape(n_windows, n, d)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for lag in range(length):
                dxp[:, length - 1 - lag : length - 1 - lag + n] += coeffs[lag] * gw
            ad._accum(x, dxp[:, length - 1 :].reshape(rows, d))
        for b, w in enumerate(banks):
            if not w.requires_grad:
                continue
            sel = rows_per_bank[b]
            dw = np.zeros((d, length))
            for lag in range(length):
                seg = xp[:, length - 1 - lag : length - 1 - lag + n]
                dw[:, lag] = (seg[:, sel] * gw[:, sel]).sum(axis=(0, 1))
            ad._accum(w, dw)

    ad._record(out, needs, backward)
    return out


@dataclass
class AttentionParams:
    query: Tensor  # (d, d')
    key: Tensor  # (d, d')
    value: Tensor  # (d, d)


def attention_token_mix(
    x: Tensor,
    params: AttentionParams,
    scale_scores: bool = False,
    capture: list | None = None,
    n_windows: int = 1,
) -> Tensor:
    """Single-head causal attention: softmax(q k^T) over the prefix, applied to v."""
    q = ad.matmul(x, params.query)
    k = ad.matmul(x, params.key)
    v = ad.matmul(x, params.value)
    scores = ad.windowed_matmul_t(q, k, n_windows)
    if scale_scores:
        scores = ad.scale(scores, 1.0 / np.sqrt(params.query.data.shape[1]))
    alpha = ad.causal_softmax_weights(scores, n_windows)
    if capture is not None:
        n = alpha.data.shape[1]
        capture.append(alpha.data.reshape(n_windows, n, n).copy())
    return ad.windowed_matmul(alpha, v, n_windows)


@dataclass
class DirectAttentionParams:
    mix_matrix: Tensor  # (n, n); applied lower-triangular
    value: Tensor  # (d, d)


def direct_attention_mix(
    x: Tensor, params: DirectAttentionParams, capture: list | None = None, n_windows: int = 1
) -> Tensor:
    """Mix rows with a directly-learned matrix, masked to the causal lower triangle.

    Rows are not renormalized; entries above the diagonal contribute
    nothing and receive zero gradient.
    """
    n = x.data.shape[0] // n_windows
    if params.mix_matrix.data.shape != (n, n):
        raise ShapeError(f"mix matrix shape {params.mix_matrix.data.shape} != ({n}, {n})")
    mask = np.tril(np.ones((n, n)))
    v = ad.matmul(x, params.value)
    if capture is not None:
        masked = params.mix_matrix.data * mask
        capture.append(np.repeat(masked[None, :, :], n_windows, axis=0))
    return ad.masked_matmul(params.mix_matrix, v, mask, n_windows)


# ---------------------------------------------------------------------------
# parameter counting


@dataclass
class MixerParamCounts:
    """Formula-based mixer parameter counts, per block and in total."""

    per_block: list[tuple[str, int]]
    mixer_total: int
    model_total: int


def count_token_mixer_params(config: ModelConfig) -> MixerParamCounts:
    """Closed-form parameter counts: conv mixers cost ``banks * d * L`` (three
    banks by default, one when unified), attention costs ``2 d d' + d^2``."""
    d = config.hidden_dim
    per_block = []
    proj_extra = d * d + d if config.projection_layer else 0
    for kind in config.mixers:
        if kind == MIXER_CONV:
            count = len(_conv_bank_names(config)) * d * config.filter_length
        elif kind == MIXER_ATTENTION:
            count = 2 * d * config.d_prime + d * d
        else:
            count = config.seq_len * config.seq_len + d * d
        per_block.append((kind, count + proj_extra))
    model_total = sum(int(np.prod(s)) for s in parameter_shapes(config).values())
    return MixerParamCounts(per_block, sum(c for _, c in per_block), model_total)


# ---------------------------------------------------------------------------
# the model


@dataclass
class _Block:
    kind: str
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    conv_banks: list[Tensor] = field(default_factory=list)
    attention: AttentionParams | None = None
    direct: DirectAttentionParams | None = None
    proj_weight: Tensor | None = None
    proj_bias: Tensor | None = None


class SequenceModel:
    """The action predictor: embeddings, N mixer blocks, and an action head."""

    def __init__(
        self,
        config: ModelConfig,
        rng: np.random.Generator | None = None,
        params: dict[str, np.ndarray] | None = None,
    ):
        self.config = config
        shapes = parameter_shapes(config)
        self.params: dict[str, Tensor] = {}
        if params is not None:
            if set(params) != set(shapes):
                missing = sorted(set(shapes) - set(params))
                extra = sorted(set(params) - set(shapes))
                raise CheckpointError(f"parameter set mismatch: missing {missing}, extra {extra}")
            for name, shape in shapes.items():
                arr = np.asarray(params[name], dtype=np.float64)
                if arr.shape != shape:
                    raise CheckpointError(f"parameter {name}: shape {arr.shape} != {shape}")
                self.params[name] = Tensor(arr.copy(), requires_grad=True)
        else:
            if rng is None:
                raise ValueError("SequenceModel needs an rng or explicit parameter values")
            for name, shape in shapes.items():
                self.params[name] = Tensor(
                    _init_value(name, shape, config, rng), requires_grad=True
                )
        self._layout = config.layout()
        self._index_cache: dict[int, dict[str, np.ndarray]] = {}
        self._blocks = [self._bind_block(i, kind) for i, kind in enumerate(config.mixers)]

    def _bind_block(self, i: int, kind: str) -> _Block:
        p = self.params
        pre = f"block{i}"
        blk = _Block(
            kind=kind,
            ln1_gain=p[f"{pre}.ln1.gain"],
            ln1_bias=p[f"{pre}.ln1.bias"],
            ln2_gain=p[f"{pre}.ln2.gain"],
            ln2_bias=p[f"{pre}.ln2.bias"],
            ffn_w1=p[f"{pre}.ffn.w1"],
            ffn_b1=p[f"{pre}.ffn.b1"],
            ffn_w2=p[f"{pre}.ffn.w2"],
            ffn_b2=p[f"{pre}.ffn.b2"],
        )
        if kind == MIXER_CONV:
            blk.conv_banks = [
                p[f"{pre}.mixer.filter_{bank}"] for bank in _conv_bank_names(self.config)
            ]
        elif kind == MIXER_ATTENTION:
            blk.attention = AttentionParams(
                p[f"{pre}.mixer.query"], p[f"{pre}.mixer.key"], p[f"{pre}.mixer.value"]
            )
        else:
            blk.direct = DirectAttentionParams(
                p[f"{pre}.mixer.mix_matrix"], p[f"{pre}.mixer.value"]
            )
        if self.config.projection_layer:
            blk.proj_weight = p[f"{pre}.mixer.proj_weight"]
            blk.proj_bias = p[f"{pre}.mixer.proj_bias"]
        return blk

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def param_values(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_param_values(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data[...] = values[name]

    # -- forward -----------------------------------------------------------

    def _conv_bank_ids(self) -> np.ndarray:
        if self.config.unified_filter:
            return np.zeros(self._layout.n, dtype=np.intp)
        return self._layout.modal_ids  # rtg=0, state=1, action=2 matches bank order

    def _tiled_indices(self, n_windows: int) -> dict[str, np.ndarray]:
        cached = self._index_cache.get(n_windows)
        if cached is None:
            layout = self._layout
            offsets = (np.arange(n_windows) * layout.n)[:, None]
            cached = {
                "rtg": (layout.positions(MODAL_RTG)[None, :] + offsets).ravel(),
                "state": (layout.positions(MODAL_STATE)[None, :] + offsets).ravel(),
                "action": (layout.positions(MODAL_ACTION)[None, :] + offsets).ravel(),
                "timesteps": np.tile(layout.timesteps, n_windows),
            }
            self._index_cache[n_windows] = cached
        return cached

    def embed_windows(self, windows: list[PaddedWindow]) -> Tensor:
        """Per-modal affine embeddings interleaved into stacked token grids."""
        cfg = self.config
        k = cfg.context_length
        for w in windows:
            if len(w.rtg) != k:
                raise ShapeError(f"window length {len(w.rtg)} != context length {k}")
        b = len(windows)
        layout = self._layout
        p = self.params
        idx = self._tiled_indices(b)
        parts: list[tuple[Tensor, np.ndarray]] = []
        rtg_in = Tensor(np.concatenate([w.rtg for w in windows])[:, None])
        parts.append((ad.linear(rtg_in, p["embed_rtg.weight"], p["embed_rtg.bias"]), idx["rtg"]))
        state_in = Tensor(np.concatenate([w.states for w in windows], axis=0))
        parts.append(
            (ad.linear(state_in, p["embed_state.weight"], p["embed_state.bias"]), idx["state"])
        )
        if cfg.include_action_tokens and k > 1:
            if cfg.discrete:
                acts = np.concatenate([w.actions[: k - 1] for w in windows])
                valid = np.concatenate([w.mask[: k - 1] for w in windows])
                onehot = np.zeros((b * (k - 1), cfg.action_input_dim))
                onehot[np.where(valid)[0], acts[valid].astype(np.intp)] = 1.0
                act_in = Tensor(onehot)
            else:
                act_in = Tensor(np.concatenate([w.actions[: k - 1] for w in windows], axis=0))
            parts.append(
                (ad.linear(act_in, p["embed_action.weight"], p["embed_action.bias"]), idx["action"])
            )
        grid = ad.compose_rows(b * layout.n, parts)
        if cfg.use_positional_embedding:
            grid = ad.add(grid, ad.take_rows(p["pos_embedding"], idx["timesteps"]))
        return grid

    def _activation(self, x: Tensor) -> Tensor:
        return ad.gelu(x) if self.config.activation == "gelu" else ad.relu(x)

    def block_forward(
        self,
        index: int,
        grid: Tensor,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
        n_windows: int = 1,
    ) -> Tensor:
        cfg = self.config
        blk = self._blocks[index]
        h = ad.layer_norm(grid, blk.ln1_gain, blk.ln1_bias, cfg.ln_eps)
        if blk.kind == MIXER_CONV:
            mixed = conv_token_mix(h, blk.conv_banks, self._conv_bank_ids(), n_windows)
        elif blk.kind == MIXER_ATTENTION:
            mixed = attention_token_mix(
                h, blk.attention, cfg.scale_attention_scores, capture=capture, n_windows=n_windows
            )
        else:
            mixed = direct_attention_mix(h, blk.direct, capture=capture, n_windows=n_windows)
        if blk.proj_weight is not None:
            mixed = ad.linear(mixed, blk.proj_weight, blk.proj_bias)
        if train_mode and cfg.dropout > 0.0:
            mixed = ad.dropout(mixed, cfg.dropout, rng)
        z1 = ad.add(mixed, grid)
        h2 = ad.layer_norm(z1, blk.ln2_gain, blk.ln2_bias, cfg.ln_eps)
        f = ad.linear(h2, blk.ffn_w1, blk.ffn_b1)
        f = self._activation(f)
        f = ad.linear(f, blk.ffn_w2, blk.ffn_b2)
        if train_mode and cfg.dropout > 0.0:
            f = ad.dropout(f, cfg.dropout, rng)
        return ad.add(f, z1)

    def forward_windows(
        self,
        windows: list[PaddedWindow],
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        """Stacked predictions, shape ``(len(windows) * K, output_dim)``."""
        if train_mode and self.config.dropout > 0.0 and rng is None:
            raise ValueError("train_mode with dropout needs an rng")
        b = len(windows)
        grid = self.embed_windows(windows)
        for i in range(self.config.n_blocks):
            grid = self.block_forward(i, grid, train_mode, rng, capture, n_windows=b)
        states = ad.take_rows(grid, self._tiled_indices(b)["state"])
        return ad.linear(states, self.params["head.weight"], self.params["head.bias"])

    def forward_window(
        self,
        window: PaddedWindow,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        capture: list | None = None,
    ) -> Tensor:
        """Predicted actions (or logits) for all K timesteps of one window."""
        return self.forward_windows([window], train_mode, rng, capture)

    def predict_last(self, window: PaddedWindow) -> np.ndarray:
        """Inference helper: the prediction row for the current timestep."""
        out = self.forward_window(window)
        return out.data[-1].copy()


# ---------------------------------------------------------------------------
# checkpoint container

CHECKPOINT_FORMAT = "deskrl-checkpoint"
CHECKPOINT_VERSION = 1


def _encode_array(a: np.ndarray) -> dict:
    return {
        "shape": list(a.shape),
        "dtype": "float64-le",
        "data": base64.b64encode(a.astype("<f8").tobytes()).decode(),
    }


def _decode_array(d: dict) -> np.ndarray:
    if d.get("dtype") != "float64-le":
        raise CheckpointError(f"unsupported tensor dtype {d.get('dtype')!r}")
    buf = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8").astype(np.float64)
    return buf.reshape(d["shape"])


def save_checkpoint(model: SequenceModel, path) -> None:
    """Self-describing container: config plus every named parameter, bit-exact."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "params": {name: _encode_array(p.data) for name, p in model.params.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True)


def load_checkpoint(path) -> SequenceModel:
    path = Path(path)
    with open(path) as f:
        payload = json.load(f)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {payload.get('version')} (expected {CHECKPOINT_VERSION})"
        )
    config = ModelConfig.from_dict(payload["config"])
    params = {name: _decode_array(d) for name, d in payload["params"].items()}
    return SequenceModel(config, params=params)
