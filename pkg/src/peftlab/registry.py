"""Adapter lifecycle: a frozen encoder plus a registry of named adapters,
prediction heads, and fusion layers.

:class:`AdapterModel` is the façade tying everything together: it owns the
base weights, tracks which composition tree is active, splits parameters
into frozen/trainable partitions for training, merges low-rank adapters
into the base weights and back out, averages compatible adapters, and
persists single adapters to checkpoint directories.
"""

from __future__ import annotations

import re
import zlib
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import (
    CONFIG_FILE,
    WEIGHTS_FILE,
    CheckpointError,
    read_manifest,
    read_weights,
    write_manifest,
    write_weights,
)
from .composition import Fuse, Leaf, iter_nodes, leaves, parse_setup, validate_composition
from .configs import (
    LoraConfig,
    config_from_dict,
    config_to_dict,
    parse_config,
    validate_config,
)
from .methods import AdapterInstance, FusionLayer, StateError, instantiate_adapter
from .model import (
    CLASSIFICATION,
    DESK_DIMS,
    EncoderState,
    ModelDims,
    PredictionHead,
    TransformerEncoder,
)
from .routing import RoutingContext
from .tensor import Tensor

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class RegistryError(RuntimeError):
    """Registry misuse: duplicate names, deleting referenced adapters, ..."""


def _as_setup(setup):
    """Accept a node, an adapter name, or the textual composition form."""
    if isinstance(setup, str):
        if any(ch in setup for ch in "(),"):
            return parse_setup(setup)
        return Leaf(setup)
    return setup


class AdapterModel:
    """Frozen-backbone encoder with a full adapter registry."""

    def __init__(self, dims: ModelDims = DESK_DIMS, seed: int = 0):
        self.dims = dims
        self.seed = seed
        self.encoder = TransformerEncoder(dims, seed)
        self.encoder.set_requires_grad(False)
        self._adapters: dict[str, AdapterInstance] = {}
        self._fusions: dict[tuple, FusionLayer] = {}
        self._heads: dict[str, PredictionHead] = {}
        self._active = None

    # -- deterministic per-object rngs --------------------------------------

    def _rng_for(self, label: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(label.encode("utf-8"))])

    # -- adapters ------------------------------------------------------------

    def add_adapter(self, name: str, config) -> AdapterInstance:
        """Register a new adapter under ``name``; its tensors start frozen
        and it is NOT activated."""
        if not _NAME_RE.match(name or ""):
            raise RegistryError(f"invalid adapter name {name!r}")
        if name in self._adapters:
            raise RegistryError(f"adapter {name!r} already exists")
        if isinstance(config, str):
            config = parse_config(config)
        validate_config(config, self.dims)
        inst = instantiate_adapter(name, config, self.dims, self._rng_for("adapter:" + name))
        inst.set_requires_grad(False)
        self._adapters[name] = inst
        return inst

    def adapter_instance(self, name: str) -> AdapterInstance:
        try:
            return self._adapters[name]
        except KeyError:
            raise KeyError(
                f"no adapter named {name!r}; registered: {sorted(self._adapters)}"
            ) from None

    def has_adapter(self, name: str) -> bool:
        return name in self._adapters

    def adapter_names(self) -> list:
        return sorted(self._adapters)

    def delete_adapter(self, name: str) -> None:
        inst = self.adapter_instance(name)
        if self._active is not None and name in leaves(self._active):
            raise RegistryError(f"adapter {name!r} is referenced by the active setup")
        for key in self._fusions:
            if name in key:
                raise RegistryError(f"adapter {name!r} is referenced by fusion {key}")
        if inst.merged:
            raise StateError(f"adapter {name!r} is merged into the base weights; unmerge first")
        del self._adapters[name]

    # -- fusion layers ---------------------------------------------------------

    def add_adapter_fusion(self, names) -> FusionLayer:
        key = tuple(names)
        if len(key) < 2:
            raise RegistryError("a fusion layer needs at least two adapters")
        for n in key:
            self.adapter_instance(n)
        if key in self._fusions:
            raise RegistryError(f"fusion layer for {key} already exists")
        fl = FusionLayer(key, self.dims.hidden, self._rng_for("fusion:" + "+".join(key)))
        for t in fl.tensors().values():
            t.requires_grad = False
        self._fusions[key] = fl
        return fl

    def fusion_layer(self, names) -> FusionLayer:
        key = tuple(names)
        try:
            return self._fusions[key]
        except KeyError:
            raise KeyError(f"no fusion layer for {key}; have {sorted(self._fusions)}") from None

    def has_fusion(self, names) -> bool:
        return tuple(names) in self._fusions

    # -- heads ------------------------------------------------------------------

    def add_prediction_head(self, name: str, kind: str = CLASSIFICATION,
                            num_labels: int = 2) -> PredictionHead:
        if name in self._heads:
            raise RegistryError(f"prediction head {name!r} already exists")
        head = PredictionHead(name, kind, num_labels, self.dims.hidden,
                              self._rng_for("head:" + name))
        for t in head.tensors().values():
            t.requires_grad = False
        self._heads[name] = head
        return head

    def head(self, name: str) -> PredictionHead:
        try:
            return self._heads[name]
        except KeyError:
            raise KeyError(f"no prediction head named {name!r}; have {sorted(self._heads)}") from None

    def has_head(self, name: str) -> bool:
        return name in self._heads

    # -- activation ----------------------------------------------------------------

    def validate_setup(self, setup, batch: Optional[int] = None,
                       seq: Optional[int] = None) -> None:
        node = _as_setup(setup)
        validate_composition(node, self.adapter_instance, batch=batch, seq=seq,
                             fusion_exists=self.has_fusion)

    def set_active(self, setup) -> None:
        """Choose the composition used by subsequent encodes.  Pure: never
        touches parameter values or trainability."""
        if setup is None:
            self._active = None
            return
        node = _as_setup(setup)
        self.validate_setup(node)
        self._active = node

    @property
    def active(self):
        return self._active

    # -- parameter partitions ----------------------------------------------------

    def all_parameters(self) -> dict:
        out = {}
        for k, t in self.encoder.parameter_items():
            out["base." + k] = t
        for name, inst in sorted(self._adapters.items()):
            for k, t in inst.tensors.items():
                out[f"adapter.{name}.{k}"] = t
        for key, fl in sorted(self._fusions.items()):
            for k, t in fl.tensors().items():
                out[f"fusion.{'+'.join(key)}.{k}"] = t
        for name, head in sorted(self._heads.items()):
            for k, t in head.tensors().items():
                out[f"head.{name}.{k}"] = t
        return out

    def trainable_parameters(self) -> dict:
        return {k: t for k, t in self.all_parameters().items() if t.requires_grad}

    def freeze_all(self) -> None:
        for t in self.all_parameters().values():
            t.requires_grad = False

    def train_adapter(self, setup, train_fused_members: bool = False,
                      extra_heads=()) -> None:
        """Freeze everything, then mark the referenced adapters (their
        fusion layers, and same-named heads) trainable and activate the
        setup.  Members under ``Fuse`` stay frozen unless requested."""
        node = _as_setup(setup)
        self.validate_setup(node)
        self.freeze_all()
        names = set(leaves(node))
        fused: set = set()
        for sub in iter_nodes(node):
            if isinstance(sub, Fuse):
                fl = self.fusion_layer(tuple(leaves(sub)))
                for t in fl.tensors().values():
                    t.requires_grad = True
                fused |= set(leaves(sub))
        if train_fused_members:
            fused = set()
        for n in names - fused:
            self._adapters[n].set_requires_grad(True)
        for n in sorted(names | set(extra_heads)):
            if n in self._heads:
                for t in self._heads[n].tensors().values():
                    t.requires_grad = True
        self._active = node

    def train_full(self, head: Optional[str] = None) -> None:
        """Full fine-tuning baseline: all base weights (plus one head)
        trainable, no adapter active."""
        self.freeze_all()
        self.encoder.set_requires_grad(True)
        if head is not None:
            for t in self.head(head).tensors().values():
                t.requires_grad = True
        self._active = None

    # -- forward --------------------------------------------------------------------

    def encode(self, tokens, mask=None) -> EncoderState:
        tokens = np.asarray(tokens)
        ctx = None
        if self._active is not None:
            if tokens.ndim == 2:
                self.validate_setup(self._active, batch=tokens.shape[0], seq=tokens.shape[1])
            ctx = RoutingContext(self, self._active)
        return self.encoder.encode(tokens, mask, ctx)

    def logits(self, state: EncoderState, head_name: str) -> Tensor:
        return self.head(head_name).logits(state)

    def branch_logits(self, state: EncoderState) -> dict:
        """Per-branch head outputs for branched setups: maps branch label to
        logits computed by the same-named head (branches without a matching
        head are skipped)."""
        out = {}
        off = 0
        for label, rows in state.branches:
            if label is not None and label in self._heads:
                out[label] = self._heads[label].logits(state, rows=slice(off, off + rows))
            off += rows
        return out

    # -- low-rank merging --------------------------------------------------------------

    def _lora_pairs(self, inst: AdapterInstance):
        pairs = []
        for l in range(self.dims.num_layers):
            for m, gate in inst.lora_q[l]:
                if gate is not None:
                    raise StateError("gated low-rank modules cannot be merged")
                pairs.append((self.encoder.params[f"layer{l}.attn.wq"], m))
            for m, gate in inst.lora_v[l]:
                if gate is not None:
                    raise StateError("gated low-rank modules cannot be merged")
                pairs.append((self.encoder.params[f"layer{l}.attn.wv"], m))
        return pairs

    def merge_adapter(self, name: str) -> None:
        """Fold a low-rank adapter's deltas into the frozen projections."""
        inst = self.adapter_instance(name)
        if not isinstance(inst.config, LoraConfig):
            raise StateError(f"adapter {name!r} is not a pure low-rank adapter; cannot merge")
        if inst.merged:
            raise StateError(f"adapter {name!r} is already merged")
        for w, m in self._lora_pairs(inst):
            w.data = w.data + m.weight_delta()
        inst.merged = True

    def unmerge_adapter(self, name: str) -> None:
        inst = self.adapter_instance(name)
        if not inst.merged:
            raise StateError(f"adapter {name!r} is not merged")
        for w, m in self._lora_pairs(inst):
            w.data = w.data - m.weight_delta()
        inst.merged = False

    # -- averaging ------------------------------------------------------------------------

    def average_adapters(self, new_name: str, sources, weights=None) -> AdapterInstance:
        """Register a new adapter whose tensors are the (normalized)
        weighted mean of the sources'.  Sources must share one config."""
        sources = list(sources)
        if not sources:
            raise RegistryError("average needs at least one source adapter")
        insts = [self.adapter_instance(n) for n in sources]
        cfg = insts[0].config
        for inst in insts[1:]:
            if inst.config != cfg:
                raise RegistryError(
                    f"cannot average {sources}: configs differ "
                    f"({inst.name!r} does not match {insts[0].name!r})"
                )
        if weights is None:
            weights = [1.0 / len(sources)] * len(sources)
        weights = np.asarray([float(w) for w in weights], dtype=np.float64)
        if weights.shape[0] != len(sources):
            raise RegistryError(
                f"{len(sources)} sources but {weights.shape[0]} weights"
            )
        if np.any(weights < 0) or weights.sum() <= 0:
            raise RegistryError("average weights must be non-negative and sum to > 0")
        weights = weights / weights.sum()
        new = self.add_adapter(new_name, cfg)
        for key, t in new.tensors.items():
            acc = np.zeros_like(t.data)
            for w, inst in zip(weights, insts):
                acc += w * inst.tensors[key].data
            t.data = acc
        return new

    # -- persistence -------------------------------------------------------------------------

    def save_adapter(self, name: str, directory) -> Path:
        """Write ``adapter_config.json`` + ``weights.bin`` for one adapter."""
        inst = self.adapter_instance(name)
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_manifest(directory / CONFIG_FILE, name, config_to_dict(inst.config),
                       self.dims.to_dict())
        write_weights(directory / WEIGHTS_FILE,
                      {k: t.data for k, t in inst.tensors.items()})
        return directory

    def load_adapter(self, directory, name: Optional[str] = None) -> str:
        """Load a checkpoint directory into the registry (frozen, inactive).
        Returns the registered name (the stored one unless overridden)."""
        directory = Path(directory)
        doc = read_manifest(directory / CONFIG_FILE)
        if doc["dims"] != self.dims.to_dict():
            raise CheckpointError(
                f"checkpoint dims {doc['dims']} do not match model dims {self.dims.to_dict()}"
            )
        config = config_from_dict(doc["config"])
        reg_name = name if name is not None else doc["name"]
        blobs = read_weights(directory / WEIGHTS_FILE)
        inst = self.add_adapter(reg_name, config)
        expected = set(inst.tensors)
        got = set(blobs)
        if expected != got:
            del self._adapters[reg_name]
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise CheckpointError(
                f"checkpoint tensor set mismatch (missing {missing}, unexpected {extra})"
            )
        for key, t in inst.tensors.items():
            if blobs[key].shape != t.data.shape:
                del self._adapters[reg_name]
                raise CheckpointError(
                    f"tensor {key!r} has shape {blobs[key].shape}, expected {t.data.shape}"
                )
            t.data = blobs[key].astype(np.float64)
        return reg_name

    # -- integrity helpers ------------------------------------------------------------------------

    def base_fingerprint(self) -> bytes:
        from hashlib import sha256
        h = sha256()
        for k in sorted(self.encoder.params):
            h.update(k.encode())
            h.update(self.encoder.params[k].data.tobytes())
        return h.digest()

    def adapter_fingerprint(self, name: str) -> bytes:
        from hashlib import sha256
        inst = self.adapter_instance(name)
        h = sha256()
        for k in sorted(inst.tensors):
            h.update(k.encode())
            h.update(inst.tensors[k].data.tobytes())
        return h.digest()
