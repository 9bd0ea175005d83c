"""Minimal pre-norm transformer encoder with named adapter hook points.

The encoder is deliberately small and deterministic: GELU feed-forward,
learned absolute positions, no dropout.  Every place an adapter method can
intervene is routed through an optional context object (see
``peftlab.routing``); with no context the encoder runs the plain computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class InputError(ValueError):
    """Token ids outside the vocabulary, malformed batches, and similar."""


class CapacityError(ValueError):
    """Sequence (after any prepended rows) exceeds the positional table."""


@dataclass(frozen=True)
class ModelDims:
    """Architecture extents.  ``num_layers`` may be zero so parameter
    formulas can be evaluated symbolically on degenerate shapes."""

    num_layers: int
    hidden: int
    heads: int
    intermediate: int
    vocab: int
    max_seq: int = 128

    def __post_init__(self):
        if self.num_layers < 0:
            raise ValueError(f"num_layers must be >= 0, got {self.num_layers}")
        for fname in ("hidden", "heads", "intermediate", "vocab", "max_seq"):
            v = getattr(self, fname)
            if v < 1:
                raise ValueError(f"{fname} must be >= 1, got {v}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden={self.hidden} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "heads": self.heads,
            "intermediate": self.intermediate,
            "vocab": self.vocab,
            "max_seq": self.max_seq,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelDims":
        return ModelDims(**{k: int(v) for k, v in d.items()})


# Small dims for training and tests; the large preset exists so parameter
# audits can be run at standard encoder extents without ever instantiating
# the weights.
DESK_DIMS = ModelDims(num_layers=2, hidden=64, heads=4, intermediate=128, vocab=1000, max_seq=128)
ROBERTA_BASE_DIMS = ModelDims(
    num_layers=12, hidden=768, heads=12, intermediate=3072, vocab=50265, max_seq=514
)
DIM_PRESETS = {"desk": DESK_DIMS, "roberta-base": ROBERTA_BASE_DIMS}


class HookPoint(Enum):
    """Named interception points inside the encoder."""

    EMBEDDING_BOUNDARY = "embedding_boundary"   # invertible transforms at entry/exit
    INPUT_PREPEND = "input_prepend"             # trainable rows before position 0
    ATTN_Q_PROJ = "attn_q_proj"                 # low-rank delta on the query projection
    ATTN_V_PROJ = "attn_v_proj"                 # low-rank delta on the value projection
    ATTN_KV = "attn_kv"                         # per-layer key/value prepending
    ATTN_KEYS_SCALE = "attn_keys_scale"         # elementwise rescale of keys
    ATTN_VALUES_SCALE = "attn_values_scale"     # elementwise rescale of values
    FFN_INTERMEDIATE_SCALE = "ffn_intermediate_scale"
    POST_ATTN_RESIDUAL = "post_attn_residual"   # bottleneck after the attention residual
    POST_FFN_RESIDUAL = "post_ffn_residual"     # bottleneck after the feed-forward residual
    PARALLEL_TO_LAYER = "parallel_to_layer"     # delta computed from the block input


# Hooks whose effect is local to each (row, position) pair.  Methods that only
# touch these may be routed through token- and row-slicing composition blocks.
TOKEN_LOCAL_HOOKS = frozenset(
    {
        HookPoint.EMBEDDING_BOUNDARY,
        HookPoint.ATTN_Q_PROJ,
        HookPoint.ATTN_V_PROJ,
        HookPoint.ATTN_KEYS_SCALE,
        HookPoint.ATTN_VALUES_SCALE,
        HookPoint.FFN_INTERMEDIATE_SCALE,
        HookPoint.POST_ATTN_RESIDUAL,
        HookPoint.POST_FFN_RESIDUAL,
        HookPoint.PARALLEL_TO_LAYER,
    }
)

ATTENTION_HOOKS = frozenset(
    {
        HookPoint.ATTN_Q_PROJ,
        HookPoint.ATTN_V_PROJ,
        HookPoint.ATTN_KV,
        HookPoint.ATTN_KEYS_SCALE,
        HookPoint.ATTN_VALUES_SCALE,
    }
)

_MASK_BIG = 1e9


@dataclass
class EncoderState:
    """Result of one encode call."""

    hidden: Tensor                      # (rows, seq', hidden) final hidden states
    mask: np.ndarray                    # (rows, seq') validity mask incl. prepended rows
    prompt_len: int                     # number of prepended rows at the front
    seq_len: int                        # original token count per row
    branches: list = field(default_factory=list)   # [(label or None, row_count)]
    kv_cache: list = field(default_factory=list)   # per layer (keys, values, key_mask)


CLASSIFICATION = "classification"
REGRESSION = "regression"
TAGGING = "tagging"
HEAD_KINDS = (CLASSIFICATION, REGRESSION, TAGGING)


class PredictionHead:
    """Single affine readout bound to a name.

    Classification and regression heads read the first non-prepended
    position; tagging heads read every real token position.
    """

    def __init__(self, name: str, kind: str, num_labels: int, hidden: int,
                 rng: np.random.Generator):
        if kind not in HEAD_KINDS:
            raise InputError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")
        if num_labels < 1:
            raise InputError(f"num_labels must be >= 1, got {num_labels}")
        self.name = name
        self.kind = kind
        self.num_labels = num_labels
        self.w = Tensor(rng.normal(0.0, 0.02, size=(hidden, num_labels)))
        self.b = Tensor(np.zeros(num_labels))

    def tensors(self) -> dict:
        return {"w": self.w, "b": self.b}

    def logits(self, state: EncoderState, rows: Optional[slice] = None) -> Tensor:
        h = state.hidden
        if rows is not None:
            h = T.narrow(h, 0, rows.start, rows.stop - rows.start)
        if self.kind == TAGGING:
            tokens = T.narrow(h, 1, state.prompt_len, state.seq_len)
            return T.matmul(tokens, self.w) + self.b
        pooled = T.narrow(h, 1, state.prompt_len, 1)
        pooled = T.reshape(pooled, (h.shape[0], h.shape[2]))
        return T.matmul(pooled, self.w) + self.b


class TransformerEncoder:
    """Pre-norm encoder: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))`` per
    layer, with a final layer norm.  Weights are seeded and deterministic."""

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        rng = np.random.default_rng(seed)
        d, dff = dims.hidden, dims.intermediate
        p: dict[str, Tensor] = {}

        def w(name, shape):
            p[name] = Tensor(rng.normal(0.0, 0.02, size=shape), name=name)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), name=name)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), name=name)

        w("embed.token", (dims.vocab, d))
        w("embed.position", (dims.max_seq, d))
        for l in range(dims.num_layers):
            pre = f"layer{l}."
            ones(pre + "ln1.g", (d,))
            zeros(pre + "ln1.b", (d,))
            for proj in ("q", "k", "v", "o"):
                w(pre + f"attn.w{proj}", (d, d))
                zeros(pre + f"attn.b{proj}", (d,))
            ones(pre + "ln2.g", (d,))
            zeros(pre + "ln2.b", (d,))
            w(pre + "ffn.w1", (d, dff))
            zeros(pre + "ffn.b1", (dff,))
            w(pre + "ffn.w2", (dff, d))
            zeros(pre + "ffn.b2", (d,))
        ones("final_ln.g", (d,))
        zeros("final_ln.b", (d,))
        self.params = p

    # -- parameter bookkeeping -------------------------------------------

    def parameter_items(self):
        return self.params.items()

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    def state_array(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_array(self, state: dict) -> None:
        for k, t in self.params.items():
            if k not in state:
                raise InputError(f"missing base parameter {k!r}")
            if state[k].shape != t.data.shape:
                raise InputError(
                    f"base parameter {k!r} shape {state[k].shape} != expected {t.data.shape}"
                )
            t.data = np.ascontiguousarray(state[k], dtype=np.float64)

    # -- forward ----------------------------------------------------------

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be 2-D (batch, seq), got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"tokens must be integers, got dtype {tokens.dtype}")
        if tokens.size == 0:
            raise InputError("empty token batch")
        lo, hi = int(tokens.min()), int(tokens.max())
        if lo < 0 or hi >= self.dims.vocab:
            raise InputError(f"token id out of range [0, {self.dims.vocab}): saw {lo}..{hi}")
        if tokens.shape[1] > self.dims.max_seq:
            raise CapacityError(
                f"sequence length {tokens.shape[1]} exceeds max_seq {self.dims.max_seq}"
            )
        return tokens

    def _attn_core(self, layer: int, q: Tensor, k: Tensor, v: Tensor,
                   key_mask: np.ndarray, state: Optional[EncoderState] = None) -> Tensor:
        """Multi-head scaled dot-product attention over flat (B, S, d)
        projections.  ``key_mask`` has shape (B, S_k); masked keys receive
        (numerically) zero weight via a large negative score offset."""
        dims = self.dims
        B, Sq, d = q.shape
        Sk = k.shape[1]
        H, dh = dims.heads, dims.head_dim

        def heads(t, S):
            return T.swapaxes(T.reshape(t, (B, S, H, dh)), 1, 2)   # (B,H,S,dh)

        q4, k4, v4 = heads(q, Sq), heads(k, Sk), heads(v, Sk)
        scores = T.scale(T.matmul(q4, T.swapaxes(k4, 2, 3)), 1.0 / np.sqrt(dh))
        bias = (key_mask.astype(np.float64) - 1.0) * _MASK_BIG
        scores = scores + T.constant(bias.reshape(B, 1, 1, Sk))
        att = T.softmax(scores, axis=-1)
        ctxv = T.matmul(att, v4)                                   # (B,H,Sq,dh)
        if state is not None:
            state.kv_cache.append((k, v, key_mask))
        return T.reshape(T.swapaxes(ctxv, 1, 2), (B, Sq, d))

    def encode(self, tokens, mask=None, ctx=None) -> EncoderState:
        """Run the encoder; ``ctx`` (if given) routes every hook point."""
        tokens = self._check_tokens(tokens)
        B, S = tokens.shape
        if mask is None:
            mask = np.ones((B, S))
        else:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.shape != (B, S):
                raise InputError(f"mask shape {mask.shape} != tokens shape {(B, S)}")

        p = self.params
        tok = T.gather_rows(p["embed.token"], tokens)
        pos = T.gather_rows(p["embed.position"], np.tile(np.arange(S), (B, 1)))
        h = tok + pos

        state = EncoderState(hidden=h, mask=mask, prompt_len=0, seq_len=S,
                             branches=[(None, B)])
        if ctx is not None:
            h, mask = ctx.embedding_stage(h, mask, state)
            if state.prompt_len + S > self.dims.max_seq:
                raise CapacityError(
                    f"sequence {S} + prepended rows {state.prompt_len} exceeds "
                    f"max_seq {self.dims.max_seq}"
                )

        for l in range(self.dims.num_layers):
            pre = f"layer{l}."
            x = T.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = T.matmul(x, p[pre + "attn.wq"]) + p[pre + "attn.bq"]
            k = T.matmul(x, p[pre + "attn.wk"]) + p[pre + "attn.bk"]
            v = T.matmul(x, p[pre + "attn.wv"]) + p[pre + "attn.bv"]
            if ctx is not None:
                attn = ctx.attention(
                    l, x, q, k, v, mask,
                    lambda q2, k2, v2, m2, _l=l: self._attn_core(_l, q2, k2, v2, m2, state),
                )
            else:
                attn = self._attn_core(l, q, k, v, mask, state)
            attn = T.matmul(attn, p[pre + "attn.wo"]) + p[pre + "attn.bo"]
            a_in = h
            h = h + attn
            if ctx is not None:
                h = ctx.post_attention(l, h, a_in)

            f_in = h
            y = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            inter = T.matmul(y, p[pre + "ffn.w1"]) + p[pre + "ffn.b1"]
            if ctx is not None:
                inter = ctx.ffn_intermediate(l, inter)
            ffn = T.matmul(T.gelu(inter), p[pre + "ffn.w2"]) + p[pre + "ffn.b2"]
            h = f_in + ffn
            if ctx is not None:
                h = ctx.ffn_block(l, h, f_in)

        h = T.layer_norm(h, p["final_ln.g"], p["final_ln.b"])
        if ctx is not None:
            h = ctx.exit_stage(h)

        state.hidden = h
        state.mask = mask
        return state
