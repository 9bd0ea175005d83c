"""Adapter method modules: parameter allocation and forward math.

An :class:`AdapterInstance` bundles every tensor one named adapter owns plus
per-layer module bindings for each hook point it touches.  All modules are
built so that a freshly initialized adapter is the identity wherever the
method admits it (zero-initialized up-projections, ones-initialized scaling
vectors, zero-initialized second coupling layers).
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .configs import (
    AdapterConfig,
    BottleneckConfig,
    CompacterConfig,
    ConfigUnion,
    IA3Config,
    LoraConfig,
    PrefixTuningConfig,
    PromptTuningConfig,
    DOUBLE,
    PARALLEL,
    SEQUENTIAL,
    count_params,
    hook_footprint,
    validate_config,
)
from .model import HookPoint, ModelDims


class StateError(RuntimeError):
    """Operation incompatible with current adapter state (e.g. a merged
    low-rank adapter being activated or merged twice)."""


_NONLIN: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "gelu": T.gelu,
    "tanh": T.tanh,
    "identity": lambda x: x,
}


class _Alloc:
    """Named tensor allocator for one adapter instance."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def _register(self, name: str, arr: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ValueError(f"duplicate tensor name {name!r}")
        t = Tensor(arr, name=name)
        self.tensors[name] = t
        return t

    def uniform(self, name, shape, scale=0.05):
        return self._register(name, self.rng.uniform(-scale, scale, size=shape))

    def normal(self, name, shape, std=0.02):
        return self._register(name, self.rng.normal(0.0, std, size=shape))

    def zeros(self, name, shape):
        return self._register(name, np.zeros(shape))

    def ones(self, name, shape):
        return self._register(name, np.ones(shape))


class BottleneckModule:
    """``h + scaling * up(f(down(h)))`` with a zero-initialized up path."""

    def __init__(self, al: _Alloc, prefix: str, d: int, b: int, nonlinearity: str,
                 scaling: float):
        self.w_down = al.uniform(prefix + "down.w", (d, b))
        self.b_down = al.zeros(prefix + "down.b", (b,))
        self.w_up = al.zeros(prefix + "up.w", (b, d))
        self.b_up = al.zeros(prefix + "up.b", (d,))
        self.f = _NONLIN[nonlinearity]
        self.scaling = float(scaling)

    def delta(self, h: Tensor) -> Tensor:
        mid = self.f(T.matmul(h, self.w_down) + self.b_down)
        out = T.matmul(mid, self.w_up) + self.b_up
        return T.scale(out, self.scaling) if self.scaling != 1.0 else out


class PhmLinear:
    """Linear map whose weight is a sum of Kronecker products of shared
    square mixing factors with per-module rank-1 factors."""

    def __init__(self, al: _Alloc, prefix: str, fin: int, fout: int, n: int,
                 shared_a: Tensor, zero_out: bool):
        self.n = n
        self.fin, self.fout = fin, fout
        self.a = shared_a                                     # (n, n, n)
        self.s = al.normal(prefix + "s", (n, fin // n), std=0.05)
        if zero_out:
            self.t = al.zeros(prefix + "t", (n, fout // n))
        else:
            self.t = al.normal(prefix + "t", (n, fout // n), std=0.05)
        self.bias = al.zeros(prefix + "bias", (fout,))

    def weight(self) -> Tensor:
        """Materialize the (fin, fout) weight as the explicit Kronecker sum."""
        n = self.n
        total = None
        for i in range(n):
            a_i = T.reshape(T.narrow(self.a, 0, i, 1), (n, n))
            s_i = T.reshape(T.narrow(self.s, 0, i, 1), (self.fin // n, 1))
            t_i = T.reshape(T.narrow(self.t, 0, i, 1), (1, self.fout // n))
            term = T.kron(a_i, T.matmul(s_i, t_i))
            total = term if total is None else total + term
        return total

    def apply(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight()) + self.bias


class CompacterModule:
    """Bottleneck module with Kronecker-factorized projections."""

    def __init__(self, al: _Alloc, prefix: str, d: int, b: int, n: int, shared_a: Tensor):
        self.down = PhmLinear(al, prefix + "down.", d, b, n, shared_a, zero_out=False)
        self.up = PhmLinear(al, prefix + "up.", b, d, n, shared_a, zero_out=True)

    def delta(self, h: Tensor) -> Tensor:
        return self.up.apply(T.relu(self.down.apply(h)))


class InvertibleModule:
    """Additive coupling pair on the split hidden channels.

    ``forward``: y1 = x1 + F(x2); y2 = x2 + G(y1).
    ``inverse`` recovers the input exactly (up to float rounding).
    Zero-initialized second layers make both nets vanish at init.
    """

    def __init__(self, al: _Alloc, prefix: str, d: int, inv_rf: int):
        if d % 2 != 0:
            raise ValueError("invertible coupling needs an even hidden size")
        self.half = d // 2
        bi = self.half // inv_rf
        self.nets = {}
        for tag in ("f", "g"):
            w1 = al.uniform(prefix + tag + ".w1", (self.half, bi))
            b1 = al.zeros(prefix + tag + ".b1", (bi,))
            w2 = al.zeros(prefix + tag + ".w2", (bi, self.half))
            b2 = al.zeros(prefix + tag + ".b2", (self.half,))
            self.nets[tag] = (w1, b1, w2, b2)

    def _net(self, tag: str, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.nets[tag]
        return T.matmul(T.relu(T.matmul(x, w1) + b1), w2) + b2

    def forward(self, x: Tensor) -> Tensor:
        x1 = T.narrow(x, 2, 0, self.half)
        x2 = T.narrow(x, 2, self.half, self.half)
        y1 = x1 + self._net("f", x2)
        y2 = x2 + self._net("g", y1)
        return T.concat([y1, y2], axis=2)

    def inverse(self, y: Tensor) -> Tensor:
        y1 = T.narrow(y, 2, 0, self.half)
        y2 = T.narrow(y, 2, self.half, self.half)
        x2 = y2 - self._net("g", y1)
        x1 = y1 - self._net("f", x2)
        return T.concat([x1, x2], axis=2)


class PromptModule:
    """Trainable rows prepended to the embedded sequence."""

    def __init__(self, al: _Alloc, prefix: str, p: int, d: int):
        self.embedding = al.normal(prefix + "embedding", (p, d))
        self.length = p


class PrefixModule:
    """Per-layer key/value rows, reparameterized or flat."""

    def __init__(self, al: _Alloc, prefix: str, cfg: PrefixTuningConfig, dims: ModelDims):
        self.length = cfg.prefix_length
        self.flat = cfg.flat
        self.num_layers = dims.num_layers
        self.hidden = dims.hidden
        p, d, L = cfg.prefix_length, dims.hidden, dims.num_layers
        if cfg.flat:
            self.kv = al.normal(prefix + "kv", (L, 2, p, d))
        else:
            b = cfg.bottleneck_size
            self.base = al.normal(prefix + "base", (p, d))
            self.w_down = al.normal(prefix + "mlp_down.w", (d, b))
            self.b_down = al.zeros(prefix + "mlp_down.b", (b,))
            self.w_up = al.normal(prefix + "mlp_up.w", (b, 2 * L * d))
            self.b_up = al.zeros(prefix + "mlp_up.b", (2 * L * d,))

    def materialize(self) -> list:
        """Per-layer (keys, values) rows, each (prefix_length, hidden)."""
        p, d, L = self.length, self.hidden, self.num_layers
        out = []
        if self.flat:
            for l in range(L):
                lay = T.reshape(T.narrow(self.kv, 0, l, 1), (2, p, d))
                k = T.reshape(T.narrow(lay, 0, 0, 1), (p, d))
                v = T.reshape(T.narrow(lay, 0, 1, 1), (p, d))
                out.append((k, v))
            return out
        mid = T.tanh(T.matmul(self.base, self.w_down) + self.b_down)
        full = T.reshape(T.matmul(mid, self.w_up) + self.b_up, (p, L, 2, d))
        for l in range(L):
            lay = T.reshape(T.narrow(full, 1, l, 1), (p, 2, d))
            k = T.reshape(T.narrow(lay, 1, 0, 1), (p, d))
            v = T.reshape(T.narrow(lay, 1, 1, 1), (p, d))
            out.append((k, v))
        return out


class LoraModule:
    """Rank-``r`` additive delta on one projection: ``(alpha/r) * x A^T B^T``."""

    def __init__(self, al: _Alloc, prefix: str, d: int, r: int, alpha: float):
        self.a = al.normal(prefix + "a", (r, d), std=0.02)
        self.b = al.zeros(prefix + "b", (d, r))
        self.r = r
        self.alpha = float(alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def delta(self, x: Tensor) -> Tensor:
        low = T.matmul(x, T.swapaxes(self.a, 0, 1))
        return T.scale(T.matmul(low, T.swapaxes(self.b, 0, 1)), self.scaling)

    def weight_delta(self) -> np.ndarray:
        """The dense (d_in, d_out) weight increment this module realizes."""
        return self.scaling * (self.a.data.T @ self.b.data.T)


class IA3Module:
    """Ones-initialized elementwise rescaling of a projection/activation."""

    def __init__(self, al: _Alloc, name: str, width: int):
        self.l = al.ones(name, (width,))

    def apply(self, h: Tensor) -> Tensor:
        return T.mul(h, self.l)


class GateModule:
    """Per-sample scalar gate: sigmoid readout averaged over positions."""

    def __init__(self, al: _Alloc, name: str, width: int):
        self.wg = al.normal(name, (width, 1), std=0.02)

    def value(self, x: Tensor) -> Tensor:
        s = T.sigmoid(T.matmul(x, self.wg))        # (B, S, 1)
        return T.tmean(s, axis=1, keepdims=True)   # (B, 1, 1)


class FusionLayer:
    """Attention over candidate adapter outputs: one query/key/value
    projection set shared by every transformer layer."""

    def __init__(self, names: tuple, hidden: int, rng: np.random.Generator):
        self.names = tuple(names)
        d = hidden
        self.wq = Tensor(rng.normal(0.0, 0.02, size=(d, d)))
        self.wk = Tensor(rng.normal(0.0, 0.02, size=(d, d)))
        self.wv = Tensor(np.eye(d) + rng.normal(0.0, 1e-4, size=(d, d)))

    def tensors(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv}


# ---------------------------------------------------------------------------
# adapter instances


_OUTPUT = "output"
_BLOCK_INPUT = "block_input"


class AdapterInstance:
    """All tensors and per-hook bindings for one named adapter."""

    def __init__(self, name: str, config: AdapterConfig, dims: ModelDims):
        self.name = name
        self.config = config
        self.dims = dims
        self.tensors: dict[str, Tensor] = {}
        self.footprint = hook_footprint(config)
        self.merged = False
        L = dims.num_layers
        # per-layer bindings; lists of (module, gate or None[, source])
        self.ffn_hook: list = [[] for _ in range(L)]
        self.post_attn_hook: list = [[] for _ in range(L)]
        self.lora_q: list = [[] for _ in range(L)]
        self.lora_v: list = [[] for _ in range(L)]
        self.ia3_k: list = [[] for _ in range(L)]
        self.ia3_v: list = [[] for _ in range(L)]
        self.ia3_ff: list = [[] for _ in range(L)]
        self.prefixes: list = []      # (PrefixModule, per-layer gate list or None)
        self.prompts: list = []       # PromptModule
        self.invertibles: list = []   # InvertibleModule

    # -- queries -----------------------------------------------------------

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag

    @property
    def grows_sequence(self) -> bool:
        return bool(self.prompts)

    @property
    def touches_attention(self) -> bool:
        from .model import ATTENTION_HOOKS
        return bool(self.footprint & ATTENTION_HOOKS)

    def has_lora(self) -> bool:
        return any(self.lora_q) or any(self.lora_v)

    def prompt_length(self) -> int:
        return sum(p.length for p in self.prompts)


def _build_member(inst: AdapterInstance, al: _Alloc, prefix: str,
                  cfg: AdapterConfig, dims: ModelDims, gated: bool) -> None:
    L, d, dff = dims.num_layers, dims.hidden, dims.intermediate

    def gate(name_suffix, width=d):
        if not gated:
            return None
        return GateModule(al, prefix + "gate." + name_suffix, width)

    if isinstance(cfg, BottleneckConfig):
        b = d // cfg.reduction_factor
        for l in range(L):
            if cfg.placement in (SEQUENTIAL, DOUBLE):
                m = BottleneckModule(al, f"{prefix}layer{l}.post_ffn.", d, b,
                                     cfg.nonlinearity, cfg.scaling)
                inst.ffn_hook[l].append((m, gate(f"layer{l}.post_ffn"), _OUTPUT))
            if cfg.placement == DOUBLE:
                m = BottleneckModule(al, f"{prefix}layer{l}.post_attn.", d, b,
                                     cfg.nonlinearity, cfg.scaling)
                inst.post_attn_hook[l].append((m, gate(f"layer{l}.post_attn")))
            if cfg.placement == PARALLEL:
                m = BottleneckModule(al, f"{prefix}layer{l}.par_ffn.", d, b,
                                     cfg.nonlinearity, cfg.scaling)
                inst.ffn_hook[l].append((m, gate(f"layer{l}.par_ffn"), _BLOCK_INPUT))
        if cfg.with_invertible:
            inst.invertibles.append(
                InvertibleModule(al, prefix + "invertible.", d, cfg.inv_reduction_factor)
            )
    elif isinstance(cfg, CompacterConfig):
        b = d // cfg.reduction_factor
        n = cfg.phm_dim
        shared_a = al.normal(prefix + "phm.a", (n, n, n), std=0.5)
        for l in range(L):
            m1 = CompacterModule(al, f"{prefix}layer{l}.post_attn.", d, b, n, shared_a)
            inst.post_attn_hook[l].append((m1, gate(f"layer{l}.post_attn")))
            m2 = CompacterModule(al, f"{prefix}layer{l}.post_ffn.", d, b, n, shared_a)
            inst.ffn_hook[l].append((m2, gate(f"layer{l}.post_ffn"), _OUTPUT))
    elif isinstance(cfg, LoraConfig):
        for l in range(L):
            if "query" in cfg.targets:
                m = LoraModule(al, f"{prefix}layer{l}.query.", d, cfg.r, cfg.alpha)
                inst.lora_q[l].append((m, gate(f"layer{l}.query")))
            if "value" in cfg.targets:
                m = LoraModule(al, f"{prefix}layer{l}.value.", d, cfg.r, cfg.alpha)
                inst.lora_v[l].append((m, gate(f"layer{l}.value")))
    elif isinstance(cfg, IA3Config):
        for l in range(L):
            if "keys" in cfg.targets:
                inst.ia3_k[l].append(
                    (IA3Module(al, f"{prefix}layer{l}.keys", d), gate(f"layer{l}.keys"))
                )
            if "values" in cfg.targets:
                inst.ia3_v[l].append(
                    (IA3Module(al, f"{prefix}layer{l}.values", d), gate(f"layer{l}.values"))
                )
            if "ffn_intermediate" in cfg.targets:
                inst.ia3_ff[l].append(
                    (IA3Module(al, f"{prefix}layer{l}.ffn", dff),
                     gate(f"layer{l}.ffn", width=dff))
                )
    elif isinstance(cfg, PrefixTuningConfig):
        pm = PrefixModule(al, prefix + "prefix.", cfg, dims)
        gates = None
        if gated:
            gates = [GateModule(al, f"{prefix}gate.layer{l}.prefix", d) for l in range(L)]
        inst.prefixes.append((pm, gates))
    elif isinstance(cfg, PromptTuningConfig):
        inst.prompts.append(PromptModule(al, prefix + "prompt.", cfg.prompt_length, d))
    else:
        raise ValueError(f"cannot build modules for {type(cfg).__name__}")


def instantiate_adapter(name: str, config: AdapterConfig, dims: ModelDims,
                        rng: np.random.Generator) -> AdapterInstance:
    """Allocate and initialize every tensor of one adapter.

    Postcondition (asserted): the number of allocated scalars equals
    :func:`peftlab.configs.count_params` for the same config and dims.
    """
    validate_config(config, dims)
    inst = AdapterInstance(name, config, dims)
    al = _Alloc(rng)
    if isinstance(config, ConfigUnion):
        for i, member in enumerate(config.members):
            _build_member(inst, al, f"member{i}.", member, dims, config.gated)
    else:
        _build_member(inst, al, "", config, dims, gated=False)
    inst.tensors = al.tensors
    allocated = inst.num_params()
    expected = count_params(config, dims)
    if allocated != expected:
        raise AssertionError(
            f"allocation mismatch for {name!r}: allocated {allocated}, counted {expected}"
        )
    return inst
