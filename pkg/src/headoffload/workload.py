"""Model and hardware descriptors, offload policies, and their JSON files.

Descriptors are frozen dataclasses. Construction does not validate so that
degenerate shapes can be fed to the closed-form formulas; everything that
comes through :func:`load_model_spec` / :func:`load_hardware_spec` or the
builtin registries is validated.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import MISSING, asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .errors import InvalidSpec, ParseError

GIB = 1 << 30

#: Extra directory searched for ``<name>.json`` model and profile files.
PROFILE_DIR_ENV = "HEADOFFLOAD_PROFILE_DIR"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    num_q_heads: int
    num_kv_heads: int
    head_dim: int
    hidden_dim: int
    intermediate_dim: int
    vocab_size: int
    dtype_bytes: int
    batch: int = 1

    @property
    def kv_dim(self) -> int:
        """Width of one token's key (or value) row across all kv-heads."""
        return self.num_kv_heads * self.head_dim

    @property
    def q_per_kv(self) -> int:
        return self.num_q_heads // self.num_kv_heads

    def validate(self) -> "ModelSpec":
        for f in fields(self):
            if f.name == "name":
                continue
            value = getattr(self, f.name)
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidSpec(f.name, f"expected an integer, got {value!r}")
            if value < 1:
                raise InvalidSpec(f.name, f"must be >= 1, got {value}")
        if self.dtype_bytes not in (1, 2, 4):
            raise InvalidSpec("dtype_bytes", f"must be 1, 2 or 4, got {self.dtype_bytes}")
        if self.hidden_dim != self.num_q_heads * self.head_dim:
            raise InvalidSpec(
                "hidden_dim",
                f"{self.hidden_dim} != num_q_heads * head_dim "
                f"({self.num_q_heads} * {self.head_dim})",
            )
        if self.num_q_heads % self.num_kv_heads:
            raise InvalidSpec(
                "num_kv_heads",
                f"num_q_heads={self.num_q_heads} not divisible by {self.num_kv_heads}",
            )
        return self


@dataclass(frozen=True)
class HardwareSpec:
    name: str
    peak_flops: float
    mem_bw: float
    link_bw_large: float
    link_bw_small: float
    device_capacity: int
    host_capacity: int
    device_count: int = 1

    def validate(self) -> "HardwareSpec":
        for key in ("peak_flops", "mem_bw", "link_bw_large", "link_bw_small",
                    "device_capacity", "host_capacity"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
                raise InvalidSpec(key, f"must be > 0, got {value!r}")
        if not self.link_bw_small <= self.link_bw_large:
            raise InvalidSpec("link_bw_small", "must not exceed link_bw_large")
        if not self.link_bw_large <= self.mem_bw:
            raise InvalidSpec("link_bw_large", "must not exceed mem_bw")
        if not isinstance(self.device_count, int) or self.device_count < 1:
            raise InvalidSpec("device_count", f"must be an integer >= 1, got {self.device_count!r}")
        return self


class PolicyKind(enum.Enum):
    STANDARD = "standard"
    CHUNKED_PREFILL = "chunked-prefill"
    KV_QUANT4 = "kv-quant4"
    LAYER_OFFLOAD = "layer-offload"
    HEAD_OFFLOAD = "head-offload"
    ADAPTIVE = "adaptive"


_ALIASES = {
    "standard": PolicyKind.STANDARD,
    "chunked": PolicyKind.CHUNKED_PREFILL,
    "chunked-prefill": PolicyKind.CHUNKED_PREFILL,
    "kvquant4": PolicyKind.KV_QUANT4,
    "kv-quant4": PolicyKind.KV_QUANT4,
    "layer": PolicyKind.LAYER_OFFLOAD,
    "layer-offload": PolicyKind.LAYER_OFFLOAD,
    "adaptive": PolicyKind.ADAPTIVE,
}


@dataclass(frozen=True)
class Policy:
    """A KV placement policy.

    For ``HEAD_OFFLOAD`` the parameter is the number of kv-heads fused into one
    group (``heads_per_group``); a layer then has ``num_kv_heads //
    heads_per_group`` groups, and ``heads_per_group == num_kv_heads`` streams
    whole layers.
    """

    kind: PolicyKind
    heads_per_group: int | None = None

    @classmethod
    def standard(cls) -> "Policy":
        return cls(PolicyKind.STANDARD)

    @classmethod
    def chunked_prefill(cls) -> "Policy":
        return cls(PolicyKind.CHUNKED_PREFILL)

    @classmethod
    def kv_quant4(cls) -> "Policy":
        return cls(PolicyKind.KV_QUANT4)

    @classmethod
    def layer_offload(cls) -> "Policy":
        return cls(PolicyKind.LAYER_OFFLOAD)

    @classmethod
    def head_offload(cls, heads_per_group: int = 1) -> "Policy":
        return cls(PolicyKind.HEAD_OFFLOAD, heads_per_group)

    @classmethod
    def adaptive(cls) -> "Policy":
        return cls(PolicyKind.ADAPTIVE)

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Parse ``standard``, ``chunked``, ``kvquant4``, ``layer``,
        ``headinfer`` (one head per group), ``head:G`` or ``adaptive``."""
        key = text.strip().lower()
        if key in _ALIASES:
            return cls(_ALIASES[key])
        if key in ("headinfer", "head", "head-offload"):
            return cls.head_offload(1)
        for prefix in ("head:", "head-offload:", "headinfer:"):
            if key.startswith(prefix):
                try:
                    g = int(key[len(prefix):])
                except ValueError:
                    break
                if g < 1:
                    break
                return cls.head_offload(g)
        raise ValueError(f"unknown policy {text!r}")

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.HEAD_OFFLOAD:
            return f"head-offload:{self.heads_per_group}"
        return self.kind.value

    @property
    def offloads(self) -> bool:
        return self.kind in (PolicyKind.LAYER_OFFLOAD, PolicyKind.HEAD_OFFLOAD)

    @property
    def chunked(self) -> bool:
        """Whether activations are bounded by the chunk instead of the context."""
        return self.kind in (PolicyKind.CHUNKED_PREFILL, PolicyKind.HEAD_OFFLOAD)

    def group_heads(self, m: ModelSpec) -> int:
        """kv-heads handled together as one streaming unit."""
        if self.kind is PolicyKind.HEAD_OFFLOAD:
            return self.heads_per_group
        return m.num_kv_heads

    def validate(self, m: ModelSpec) -> "Policy":
        if self.kind is PolicyKind.HEAD_OFFLOAD:
            g = self.heads_per_group
            if not isinstance(g, int) or g < 1 or m.num_kv_heads % g:
                raise InvalidSpec(
                    "heads_per_group", f"{g!r} does not divide num_kv_heads={m.num_kv_heads}"
                )
        return self

    def __str__(self) -> str:
        return self.label


TABLE_POLICIES = (
    Policy.standard(),
    Policy.chunked_prefill(),
    Policy.kv_quant4(),
    Policy.layer_offload(),
    Policy.head_offload(1),
)


# -- serialization ----------------------------------------------------------


def _read_json(path: str | os.PathLike) -> dict[str, Any]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror or exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a JSON object")
    return data


def _build(cls, data: dict[str, Any], where: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidSpec(unknown[0], f"unknown field in {where}")
    required = {f.name for f in fields(cls) if f.default is MISSING}
    missing = sorted(required - set(data))
    if missing:
        raise InvalidSpec(missing[0], f"missing from {where}")
    return cls(**data).validate()


def model_from_dict(data: dict[str, Any]) -> ModelSpec:
    return _build(ModelSpec, data, "model spec")


def hardware_from_dict(data: dict[str, Any]) -> HardwareSpec:
    return _build(HardwareSpec, data, "hardware spec")


def load_model_spec(path: str | os.PathLike) -> ModelSpec:
    return model_from_dict(_read_json(path))


def load_hardware_spec(path: str | os.PathLike) -> HardwareSpec:
    return hardware_from_dict(_read_json(path))


def save_spec(spec: ModelSpec | HardwareSpec, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(asdict(spec), indent=2) + "\n")


# -- builtin registries -----------------------------------------------------


def _data_files(kind: str) -> dict[str, Any]:
    root = resources.files("headoffload") / "data" / kind
    return {p.name[:-5]: p for p in root.iterdir() if p.name.endswith(".json")}


def builtin_models() -> dict[str, ModelSpec]:
    return {name: model_from_dict(json.loads(p.read_text())) for name, p in
            sorted(_data_files("models").items())}


def builtin_profiles() -> list[HardwareSpec]:
    return [hardware_from_dict(json.loads(p.read_text())) for _, p in
            sorted(_data_files("profiles").items())]


def _lookup(name_or_path: str, kind: str, loader, builtins: dict[str, Any]):
    path = Path(name_or_path)
    if path.suffix == ".json" and path.exists():
        return loader(path)
    extra = os.environ.get(PROFILE_DIR_ENV)
    if extra:
        candidate = Path(extra) / f"{name_or_path}.json"
        if candidate.exists():
            return loader(candidate)
    if name_or_path in builtins:
        return builtins[name_or_path]
    raise ParseError(f"no {kind} named {name_or_path!r}")


def get_model(name_or_path: str) -> ModelSpec:
    """Resolve a builtin model name, a ``.json`` path, or a file in the profile dir."""
    return _lookup(name_or_path, "model", load_model_spec, builtin_models())


def get_profile(name_or_path: str) -> HardwareSpec:
    profiles = {hw.name: hw for hw in builtin_profiles()}
    return _lookup(name_or_path, "hardware profile", load_hardware_spec, profiles)
