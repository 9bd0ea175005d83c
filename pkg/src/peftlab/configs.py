"""Adapter method configurations and the symbolic parameter counter.

Each supported method gets a frozen dataclass; the short config strings
(``seq_bn``, ``lora``, ...) map onto preconfigured instances.  The counter
works purely from the config and the model dims, so audits can be run at
arbitrary extents without instantiating weights.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, fields, replace
from typing import Union

from .model import HookPoint, ModelDims


class ConfigError(ValueError):
    """Invalid or incompatible adapter configuration."""


SEQUENTIAL = "sequential"
PARALLEL = "parallel"
DOUBLE = "double"
PLACEMENTS = (SEQUENTIAL, PARALLEL, DOUBLE)

NONLINEARITIES = ("relu", "gelu", "tanh", "identity")


@dataclass(frozen=True)
class BottleneckConfig:
    """Down-project / nonlinearity / up-project module with residual.

    ``sequential`` inserts one module after the feed-forward residual,
    ``double`` adds a second copy after the attention residual, and
    ``parallel`` computes the module from the layer block input instead,
    adding its output alongside the feed-forward path.
    """

    reduction_factor: int = 16
    placement: str = SEQUENTIAL
    nonlinearity: str = "relu"
    scaling: float = 1.0
    with_invertible: bool = False
    inv_reduction_factor: int = 2


@dataclass(frozen=True)
class PromptTuningConfig:
    """Trainable rows prepended to the embedded input sequence."""

    prompt_length: int = 10


@dataclass(frozen=True)
class PrefixTuningConfig:
    """Trainable key/value rows prepended inside every attention layer.

    By default the per-layer prefixes are produced from a shared base matrix
    through a two-layer reparameterization network; ``flat=True`` trains the
    key/value rows directly.
    """

    prefix_length: int = 30
    bottleneck_size: int = 512
    flat: bool = False


@dataclass(frozen=True)
class CompacterConfig:
    """Bottleneck modules whose projections are sums of Kronecker products
    of shared small square factors with rank-1 factors."""

    reduction_factor: int = 16
    phm_dim: int = 4
    factor_rank: int = 1
    share_factors: bool = True


@dataclass(frozen=True)
class LoraConfig:
    """Low-rank additive deltas on attention projections, mergeable into
    the frozen weights."""

    r: int = 8
    alpha: float = 8.0
    targets: tuple = ("query", "value")


@dataclass(frozen=True)
class IA3Config:
    """Learned elementwise rescaling vectors on keys, values, and the
    feed-forward intermediate activations."""

    targets: tuple = ("keys", "values", "ffn_intermediate")


@dataclass(frozen=True)
class ConfigUnion:
    """Several member methods applied together as one adapter.

    ``gated=True`` multiplies each member's additive contribution by a
    learned per-sample gate (a sigmoid readout of the member's input,
    averaged over positions)."""

    members: tuple = ()
    gated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))


AdapterConfig = Union[
    BottleneckConfig,
    PromptTuningConfig,
    PrefixTuningConfig,
    CompacterConfig,
    LoraConfig,
    IA3Config,
    ConfigUnion,
]

LORA_TARGETS = ("query", "value")
IA3_TARGETS = ("keys", "values", "ffn_intermediate")


def _mam() -> ConfigUnion:
    return ConfigUnion(
        members=(
            PrefixTuningConfig(bottleneck_size=800),
            BottleneckConfig(placement=PARALLEL, reduction_factor=2, scaling=4.0),
        )
    )


def _unipelt() -> ConfigUnion:
    return ConfigUnion(
        members=(
            LoraConfig(r=8, alpha=8.0),
            PrefixTuningConfig(prefix_length=10),
            BottleneckConfig(reduction_factor=16),
        ),
        gated=True,
    )


_CONFIG_STRINGS = {
    "seq_bn": lambda: BottleneckConfig(),
    "double_seq_bn": lambda: BottleneckConfig(placement=DOUBLE),
    "par_bn": lambda: BottleneckConfig(placement=PARALLEL, reduction_factor=2, scaling=4.0),
    "seq_bn_inv": lambda: BottleneckConfig(with_invertible=True),
    "prompt_tuning": lambda: PromptTuningConfig(),
    "prefix_tuning": lambda: PrefixTuningConfig(),
    "compacter": lambda: CompacterConfig(),
    "lora": lambda: LoraConfig(),
    "ia3": lambda: IA3Config(),
    "mam": _mam,
    "unipelt": _unipelt,
}

CONFIG_NAMES = tuple(sorted(_CONFIG_STRINGS))


def parse_config(spec: str) -> AdapterConfig:
    """Map a short config string to its configuration object."""
    try:
        make = _CONFIG_STRINGS[spec]
    except KeyError:
        raise ConfigError(
            f"unknown config string {spec!r}; valid names: {', '.join(CONFIG_NAMES)}"
        ) from None
    return make()


def config_label(config: AdapterConfig) -> str:
    """Short config string when the object matches a preset, else the
    dataclass name."""
    for name, make in _CONFIG_STRINGS.items():
        if make() == config:
            return name
    return type(config).__name__


# ---------------------------------------------------------------------------
# validation


def validate_config(config: AdapterConfig, dims: ModelDims) -> None:
    """Raise :class:`ConfigError` unless ``config`` can be instantiated on
    ``dims``."""
    if isinstance(config, BottleneckConfig):
        if config.placement not in PLACEMENTS:
            raise ConfigError(f"unknown placement {config.placement!r}; expected {PLACEMENTS}")
        if config.nonlinearity not in NONLINEARITIES:
            raise ConfigError(
                f"unknown nonlinearity {config.nonlinearity!r}; expected {NONLINEARITIES}"
            )
        if config.reduction_factor < 1:
            raise ConfigError(f"reduction_factor must be >= 1, got {config.reduction_factor}")
        if dims.hidden % config.reduction_factor != 0:
            raise ConfigError(
                f"hidden={dims.hidden} not divisible by reduction_factor={config.reduction_factor}"
            )
        if config.with_invertible:
            if dims.hidden % 2 != 0:
                raise ConfigError("invertible coupling needs an even hidden size")
            half = dims.hidden // 2
            if config.inv_reduction_factor < 1 or half % config.inv_reduction_factor != 0:
                raise ConfigError(
                    f"half hidden {half} not divisible by inv_reduction_factor="
                    f"{config.inv_reduction_factor}"
                )
    elif isinstance(config, PromptTuningConfig):
        if config.prompt_length < 1:
            raise ConfigError(f"prompt_length must be >= 1, got {config.prompt_length}")
        if config.prompt_length >= dims.max_seq:
            raise ConfigError(
                f"prompt_length {config.prompt_length} leaves no room under max_seq {dims.max_seq}"
            )
    elif isinstance(config, PrefixTuningConfig):
        if config.prefix_length < 1:
            raise ConfigError(f"prefix_length must be >= 1, got {config.prefix_length}")
        if not config.flat and config.bottleneck_size < 1:
            raise ConfigError(f"bottleneck_size must be >= 1, got {config.bottleneck_size}")
    elif isinstance(config, CompacterConfig):
        if config.reduction_factor < 1:
            raise ConfigError(f"reduction_factor must be >= 1, got {config.reduction_factor}")
        if dims.hidden % config.reduction_factor != 0:
            raise ConfigError(
                f"hidden={dims.hidden} not divisible by reduction_factor={config.reduction_factor}"
            )
        b = dims.hidden // config.reduction_factor
        n = config.phm_dim
        if n < 1:
            raise ConfigError(f"phm_dim must be >= 1, got {n}")
        if dims.hidden % n != 0 or b % n != 0:
            raise ConfigError(
                f"phm_dim={n} must divide both hidden={dims.hidden} and bottleneck={b}"
            )
        if config.factor_rank != 1:
            raise ConfigError("only rank-1 projection factors are supported")
    elif isinstance(config, LoraConfig):
        if config.r < 1:
            raise ConfigError(f"r must be >= 1, got {config.r}")
        bad = [t for t in config.targets if t not in LORA_TARGETS]
        if bad or not config.targets:
            raise ConfigError(f"lora targets must be a non-empty subset of {LORA_TARGETS}")
    elif isinstance(config, IA3Config):
        bad = [t for t in config.targets if t not in IA3_TARGETS]
        if bad or not config.targets:
            raise ConfigError(f"ia3 targets must be a non-empty subset of {IA3_TARGETS}")
    elif isinstance(config, ConfigUnion):
        if not config.members:
            raise ConfigError("a union needs at least one member")
        for m in config.members:
            if isinstance(m, ConfigUnion):
                raise ConfigError("unions cannot nest unions")
            validate_config(m, dims)
        if config.gated:
            for m in config.members:
                if isinstance(m, (PromptTuningConfig,)):
                    raise ConfigError("prompt members cannot be gated")
                if isinstance(m, BottleneckConfig) and m.with_invertible:
                    raise ConfigError("invertible members cannot be gated")
    else:
        raise ConfigError(f"unknown config type {type(config).__name__}")


# ---------------------------------------------------------------------------
# hook footprints


def hook_footprint(config: AdapterConfig) -> frozenset:
    """Hook points this configuration touches."""
    if isinstance(config, BottleneckConfig):
        pts = set()
        if config.placement in (SEQUENTIAL, DOUBLE):
            pts.add(HookPoint.POST_FFN_RESIDUAL)
        if config.placement == DOUBLE:
            pts.add(HookPoint.POST_ATTN_RESIDUAL)
        if config.placement == PARALLEL:
            pts.add(HookPoint.PARALLEL_TO_LAYER)
        if config.with_invertible:
            pts.add(HookPoint.EMBEDDING_BOUNDARY)
        return frozenset(pts)
    if isinstance(config, PromptTuningConfig):
        return frozenset({HookPoint.INPUT_PREPEND})
    if isinstance(config, PrefixTuningConfig):
        return frozenset({HookPoint.ATTN_KV})
    if isinstance(config, CompacterConfig):
        return frozenset({HookPoint.POST_FFN_RESIDUAL, HookPoint.POST_ATTN_RESIDUAL})
    if isinstance(config, LoraConfig):
        pts = set()
        if "query" in config.targets:
            pts.add(HookPoint.ATTN_Q_PROJ)
        if "value" in config.targets:
            pts.add(HookPoint.ATTN_V_PROJ)
        return frozenset(pts)
    if isinstance(config, IA3Config):
        mapping = {
            "keys": HookPoint.ATTN_KEYS_SCALE,
            "values": HookPoint.ATTN_VALUES_SCALE,
            "ffn_intermediate": HookPoint.FFN_INTERMEDIATE_SCALE,
        }
        return frozenset(mapping[t] for t in config.targets)
    if isinstance(config, ConfigUnion):
        pts: set = set()
        for m in config.members:
            pts |= hook_footprint(m)
        return frozenset(pts)
    raise ConfigError(f"unknown config type {type(config).__name__}")


# ---------------------------------------------------------------------------
# parameter counting


def _bottleneck_modules(placement: str) -> int:
    return 2 if placement == DOUBLE else 1


def count_params(config: AdapterConfig, dims: ModelDims) -> int:
    """Number of trainable scalars the adapter adds on ``dims``.

    This is the symbolic dual of instantiation: it never allocates, and the
    instantiation path asserts agreement with it.
    """
    validate_config(config, dims)
    L, d, dff = dims.num_layers, dims.hidden, dims.intermediate

    if isinstance(config, BottleneckConfig):
        b = d // config.reduction_factor
        per_module = 2 * d * b + b + d          # down w+b, up w+b
        total = L * _bottleneck_modules(config.placement) * per_module
        if config.with_invertible:
            half = d // 2
            bi = half // config.inv_reduction_factor
            per_net = half * bi + bi + bi * half + half
            total += 2 * per_net                # one coupling pair per model
        return total
    if isinstance(config, PromptTuningConfig):
        return config.prompt_length * d
    if isinstance(config, PrefixTuningConfig):
        p = config.prefix_length
        if config.flat:
            return 2 * L * p * d
        b = config.bottleneck_size
        return p * d + (d * b + b) + (b * 2 * L * d + 2 * L * d)
    if isinstance(config, CompacterConfig):
        b = d // config.reduction_factor
        n = config.phm_dim
        # Per module: rank-1 factors for down (d -> b) and up (b -> d) plus
        # biases; the n mixing factors (n^3 scalars) are shared model-wide.
        per_module = (d + b) + b + (b + d) + d
        return L * 2 * per_module + n ** 3
    if isinstance(config, LoraConfig):
        return L * len(config.targets) * 2 * d * config.r
    if isinstance(config, IA3Config):
        total = 0
        for t in config.targets:
            total += L * (dff if t == "ffn_intermediate" else d)
        return total
    if isinstance(config, ConfigUnion):
        total = sum(count_params(m, dims) for m in config.members)
        if config.gated:
            for m in config.members:
                total += _gate_count(m, dims)
        return total
    raise ConfigError(f"unknown config type {type(config).__name__}")


def _gate_count(member: AdapterConfig, dims: ModelDims) -> int:
    """One ``hidden``-sized gate vector per gated module instance."""
    L, d = dims.num_layers, dims.hidden
    if isinstance(member, BottleneckConfig):
        return L * _bottleneck_modules(member.placement) * d
    if isinstance(member, CompacterConfig):
        return L * 2 * d
    if isinstance(member, LoraConfig):
        return L * len(member.targets) * d
    if isinstance(member, IA3Config):
        # Key/value gates read the layer input (hidden-wide); the
        # feed-forward gate reads the intermediate activations.
        return sum(
            L * (dims.intermediate if t == "ffn_intermediate" else d) for t in member.targets
        )
    if isinstance(member, PrefixTuningConfig):
        return L * d
    raise ConfigError(f"members of type {type(member).__name__} cannot be gated")


# ---------------------------------------------------------------------------
# serialization (checkpoint manifests)

_CONFIG_TYPES = {
    "bottleneck": BottleneckConfig,
    "prompt_tuning": PromptTuningConfig,
    "prefix_tuning": PrefixTuningConfig,
    "compacter": CompacterConfig,
    "lora": LoraConfig,
    "ia3": IA3Config,
    "union": ConfigUnion,
}
_TYPE_NAMES = {v: k for k, v in _CONFIG_TYPES.items()}


def config_to_dict(config: AdapterConfig) -> dict:
    kind = _TYPE_NAMES.get(type(config))
    if kind is None:
        raise ConfigError(f"unknown config type {type(config).__name__}")
    if isinstance(config, ConfigUnion):
        return {
            "type": kind,
            "members": [config_to_dict(m) for m in config.members],
            "gated": config.gated,
        }
    out = {"type": kind}
    for f in fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(d: dict) -> AdapterConfig:
    kind = d.get("type")
    cls = _CONFIG_TYPES.get(kind)
    if cls is None:
        raise ConfigError(f"unknown config type tag {kind!r}")
    if cls is ConfigUnion:
        return ConfigUnion(
            members=tuple(config_from_dict(m) for m in d.get("members", [])),
            gated=bool(d.get("gated", False)),
        )
    kwargs = {}
    for f in fields(cls):
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# reference audit grid

# Added-parameter extremes for the 12-layer / 768-hidden reference extents,
# checked integer-exactly by `peftlab count-params --check-paper`.  The
# compacter rows pin phm_dim=4: its published extremes correspond to the
# default factor count (phm_dim=8 would add 448 scalars to each figure).
AUDIT_GRID = {
    "double_seq_bn": {
        "axes": {"reduction_factor": (2, 16, 64)},
        "min": 461_088,
        "max": 14_183_424,
    },
    "seq_bn": {
        "axes": {"reduction_factor": (2, 16, 64)},
        "min": 230_544,
        "max": 7_091_712,
    },
    "par_bn": {
        "axes": {"reduction_factor": (2, 16, 64)},
        "min": 230_544,
        "max": 7_091_712,
    },
    "compacter": {
        "axes": {"reduction_factor": (4, 16), "phm_dim": (4,)},
        "min": 58_816,
        "max": 69_184,
    },
    "prefix_tuning": {
        "axes": {"bottleneck_size": (32, 128, 512), "prefix_length": (5, 50, 200)},
        "min": 636_704,
        "max": 10_002_944,
    },
    "lora": {
        "axes": {"r": (4, 8, 16, 64, 200)},
        "min": 147_456,
        "max": 7_372_800,
    },
    "ia3": {
        "axes": {},
        "min": 55_296,
        "max": 55_296,
    },
}


def audit_counts(name: str, dims: ModelDims) -> list:
    """Enumerate the audit grid for one config string; returns
    ``[(axis_assignment, count), ...]`` sorted by count."""
    if name not in AUDIT_GRID:
        raise ConfigError(f"no audit grid for {name!r}; have {', '.join(sorted(AUDIT_GRID))}")
    base = parse_config(name)
    axes = AUDIT_GRID[name]["axes"]
    rows = []
    keys = sorted(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        assignment = dict(zip(keys, combo))
        cfg = replace(base, **assignment)
        rows.append((assignment, count_params(cfg, dims)))
    rows.sort(key=lambda r: r[1])
    return rows


def run_count_audit(dims: ModelDims) -> list:
    """Compare grid extremes against the pinned reference values.

    Returns ``[(name, expected_min, got_min, expected_max, got_max, ok)]``.
    """
    report = []
    for name in sorted(AUDIT_GRID):
        rows = audit_counts(name, dims)
        got_min, got_max = rows[0][1], rows[-1][1]
        exp_min, exp_max = AUDIT_GRID[name]["min"], AUDIT_GRID[name]["max"]
        report.append((name, exp_min, got_min, exp_max, got_max,
                       got_min == exp_min and got_max == exp_max))
    return report
