"""Demands, contexts, results and their canonical byte encoding.

This is the vocabulary the rest of the grid speaks: a demand is a unit of
requested computation in one of four kinds, a context is the dimension/tag
point it is evaluated at, and a signature is the SHA-256 of the demand's
canonical encoding - the key under which results are memoized and
duplicate deliveries collapse.

All types here are immutable value objects; they can be shared freely
across threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence, Tuple, Union

from . import canon
from .canon import MalformedEncoding

__all__ = [
    "Context",
    "Demand",
    "DemandKind",
    "DemandResult",
    "Geer",
    "InvalidDemand",
    "MalformedEncoding",
    "SignatureKey",
    "StagePlan",
    "UnknownKind",
    "Value",
    "canonical_signature",
    "context_merge",
    "decode_demand",
    "encode_demand",
]


class InvalidDemand(ValueError):
    """A demand violates its kind's field-set invariant."""


class UnknownKind(MalformedEncoding):
    """Encoded demand carries an unrecognized kind tag."""


# ---------------------------------------------------------------------------
# Values


class Value:
    """Tagged union of the payload types a demand or result can carry.

    Construct through the classmethods; floats must be finite (results are
    rejected at deposit otherwise) and negative zero is normalized so that
    equal values always produce equal encodings.
    """

    __slots__ = ("tag", "payload")

    _TAGS = ("int", "float", "text", "bytes", "vec", "list")

    def __init__(self, tag: str, payload):
        if tag not in self._TAGS:
            raise ValueError("unknown value tag: %r" % tag)
        self.tag = tag
        self.payload = payload

    @classmethod
    def of_int(cls, v: int) -> "Value":
        return cls("int", int(v))

    @classmethod
    def of_float(cls, v: float) -> "Value":
        return cls("float", _clean_float(v))

    @classmethod
    def of_text(cls, v: str) -> "Value":
        return cls("text", str(v))

    @classmethod
    def of_bytes(cls, v: bytes) -> "Value":
        return cls("bytes", bytes(v))

    @classmethod
    def of_vector(cls, values: Iterable[float]) -> "Value":
        return cls("vec", tuple(_clean_float(v) for v in values))

    @classmethod
    def of_list(cls, items: Iterable["Value"]) -> "Value":
        items = tuple(items)
        for item in items:
            if not isinstance(item, Value):
                raise TypeError("nested items must be Values")
        return cls("list", items)

    def __eq__(self, other):
        return isinstance(other, Value) and self.tag == other.tag and self.payload == other.payload

    def __hash__(self):
        return hash((self.tag, self.payload))

    def __repr__(self):
        return "Value.%s(%r)" % (self.tag, self.payload)

    def to_tree(self):
        if self.tag == "bytes":
            return {"bytes": self.payload.hex()}
        if self.tag == "vec":
            return {"vec": list(self.payload)}
        if self.tag == "list":
            return {"list": [item.to_tree() for item in self.payload]}
        return {self.tag: self.payload}

    @classmethod
    def from_tree(cls, tree) -> "Value":
        if not isinstance(tree, dict) or len(tree) != 1:
            raise MalformedEncoding("a value must be a single-entry map")
        tag, payload = next(iter(tree.items()))
        if tag == "int":
            if not isinstance(payload, int):
                raise MalformedEncoding("int value must carry an integer")
            return cls.of_int(payload)
        if tag == "float":
            if not isinstance(payload, float):
                raise MalformedEncoding("float value must carry a float")
            return cls.of_float(payload)
        if tag == "text":
            if not isinstance(payload, str):
                raise MalformedEncoding("text value must carry a string")
            return cls.of_text(payload)
        if tag == "bytes":
            if not isinstance(payload, str):
                raise MalformedEncoding("bytes value must carry a hex string")
            try:
                return cls.of_bytes(bytes.fromhex(payload))
            except ValueError as exc:
                raise MalformedEncoding("invalid hex in bytes value") from exc
        if tag == "vec":
            if not isinstance(payload, list) or any(not isinstance(v, float) for v in payload):
                raise MalformedEncoding("vec value must carry a list of floats")
            return cls.of_vector(payload)
        if tag == "list":
            if not isinstance(payload, list):
                raise MalformedEncoding("list value must carry a list")
            return cls.of_list(cls.from_tree(item) for item in payload)
        raise MalformedEncoding("unknown value tag: %r" % tag)


def _clean_float(v) -> float:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("NaN/Inf are rejected in stored values")
    return v + 0.0 if v != 0.0 else 0.0  # fold -0.0 into 0.0


# ---------------------------------------------------------------------------
# Contexts


class Context:
    """An immutable point in the multidimensional evaluation space.

    Entries map dimension names to integer tags. Two contexts with the same
    entry set are equal regardless of the order entries were given in.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Union[Mapping[str, int], Iterable[Tuple[str, int]], None] = None):
        if entries is None:
            items: Sequence[Tuple[str, int]] = ()
        elif isinstance(entries, Mapping):
            items = tuple(entries.items())
        else:
            items = tuple(entries)
        seen = {}
        for name, tag in items:
            if not isinstance(name, str) or not name:
                raise ValueError("dimension names must be non-empty strings")
            if isinstance(tag, bool) or not isinstance(tag, int):
                raise ValueError("tags must be integers")
            if name in seen:
                raise ValueError("duplicate dimension name: %r" % name)
            seen[name] = tag
        self._entries = tuple(sorted(seen.items()))

    @property
    def entries(self) -> Tuple[Tuple[str, int], ...]:
        return self._entries

    def as_dict(self) -> dict:
        return dict(self._entries)

    def __eq__(self, other):
        return isinstance(other, Context) and self._entries == other._entries

    def __hash__(self):
        return hash(self._entries)

    def __repr__(self):
        return "Context(%s)" % dict(self._entries)

    def __len__(self):
        return len(self._entries)


EMPTY_CONTEXT = Context()


def context_merge(base: Context, override: Context) -> Context:
    """All of *base*'s entries, with *override* winning on shared names."""
    merged = base.as_dict()
    merged.update(override.as_dict())
    return Context(merged)


# ---------------------------------------------------------------------------
# Demands


class DemandKind(str, Enum):
    INTENSIONAL = "Intensional"
    PROCEDURAL = "Procedural"
    RESOURCE = "Resource"
    SYSTEM = "System"


# which fields each kind mandates, in encoding terms
_KIND_FIELDS = {
    DemandKind.INTENSIONAL: ("geer_id", "program_id", "context"),
    DemandKind.PROCEDURAL: ("geer_id", "program_id", "params", "context", "procedure_name"),
    DemandKind.RESOURCE: ("resource_type_id", "resource_id"),
    DemandKind.SYSTEM: ("destination_tier_id", "system_demand_type_id", "params"),
}


@dataclass(frozen=True)
class Demand:
    """A unit of requested computation; exactly the fields its kind mandates."""

    kind: DemandKind
    geer_id: Optional[str] = None
    program_id: Optional[str] = None
    params: Optional[Tuple[Value, ...]] = None
    context: Optional[Context] = None
    procedure_name: Optional[str] = None
    resource_type_id: Optional[str] = None
    resource_id: Optional[str] = None
    destination_tier_id: Optional[str] = None
    system_demand_type_id: Optional[str] = None

    def __post_init__(self):
        kind = self.kind
        if not isinstance(kind, DemandKind):
            raise InvalidDemand("kind must be a DemandKind")
        required = _KIND_FIELDS[kind]
        for name in ("geer_id", "program_id", "params", "context", "procedure_name",
                     "resource_type_id", "resource_id", "destination_tier_id",
                     "system_demand_type_id"):
            value = getattr(self, name)
            if name in required:
                if value is None:
                    raise InvalidDemand("%s demand requires field %s" % (kind.value, name))
            elif value is not None:
                raise InvalidDemand("%s demand must not carry field %s" % (kind.value, name))
        if self.params is not None:
            object.__setattr__(self, "params", tuple(self.params))
            for item in self.params:
                if not isinstance(item, Value):
                    raise InvalidDemand("params must be Values")
        if self.context is not None and not isinstance(self.context, Context):
            raise InvalidDemand("context must be a Context")
        if kind is DemandKind.PROCEDURAL and not self.procedure_name:
            raise InvalidDemand("procedure_name must be non-empty for Procedural demands")

    @classmethod
    def intensional(cls, geer_id: str, program_id: str, context: Context) -> "Demand":
        return cls(DemandKind.INTENSIONAL, geer_id=geer_id, program_id=program_id, context=context)

    @classmethod
    def procedural(cls, geer_id: str, program_id: str, procedure_name: str,
                   params: Iterable[Value] = (), context: Context = EMPTY_CONTEXT) -> "Demand":
        return cls(DemandKind.PROCEDURAL, geer_id=geer_id, program_id=program_id,
                   params=tuple(params), context=context, procedure_name=procedure_name)

    @classmethod
    def resource(cls, resource_type_id: str, resource_id: str) -> "Demand":
        return cls(DemandKind.RESOURCE, resource_type_id=resource_type_id, resource_id=resource_id)

    @classmethod
    def system(cls, destination_tier_id: str, system_demand_type_id: str,
               params: Iterable[Value] = ()) -> "Demand":
        return cls(DemandKind.SYSTEM, destination_tier_id=destination_tier_id,
                   system_demand_type_id=system_demand_type_id, params=tuple(params))

    def to_tree(self) -> dict:
        tree = {"kind": self.kind.value}
        for name in _KIND_FIELDS[self.kind]:
            value = getattr(self, name)
            if name == "params":
                tree[name] = [item.to_tree() for item in value]
            elif name == "context":
                tree[name] = value.as_dict()
            else:
                tree[name] = value
        return tree

    @classmethod
    def from_tree(cls, tree) -> "Demand":
        if not isinstance(tree, dict):
            raise MalformedEncoding("a demand must be a map")
        kind_tag = tree.get("kind")
        if not isinstance(kind_tag, str):
            raise MalformedEncoding("demand is missing its kind tag")
        try:
            kind = DemandKind(kind_tag)
        except ValueError:
            raise UnknownKind("unrecognized demand kind: %r" % kind_tag) from None
        required = _KIND_FIELDS[kind]
        expected_keys = set(required) | {"kind"}
        if set(tree) != expected_keys:
            raise MalformedEncoding(
                "%s demand must carry exactly fields %s" % (kind.value, sorted(expected_keys)))
        fields = {}
        for name in required:
            value = tree[name]
            if name == "params":
                if not isinstance(value, list):
                    raise MalformedEncoding("params must be a list")
                fields[name] = tuple(Value.from_tree(item) for item in value)
            elif name == "context":
                if not isinstance(value, dict):
                    raise MalformedEncoding("context must be a map")
                try:
                    fields[name] = Context(value)
                except ValueError as exc:
                    raise MalformedEncoding(str(exc)) from exc
            else:
                if not isinstance(value, str):
                    raise MalformedEncoding("field %s must be a string" % name)
                fields[name] = value
        try:
            return cls(kind, **fields)
        except InvalidDemand as exc:
            raise MalformedEncoding(str(exc)) from exc


def encode_demand(demand: Demand) -> bytes:
    """The single canonical byte form of *demand* (also the WAL/wire payload)."""
    if not isinstance(demand, Demand):
        raise InvalidDemand("expected a Demand")
    return canon.text_encode(demand.to_tree())


def decode_demand(data: bytes) -> Demand:
    """Inverse of encode_demand; rejects any non-canonical byte form."""
    return Demand.from_tree(canon.text_decode(data))


# ---------------------------------------------------------------------------
# Signatures and results


@dataclass(frozen=True)
class SignatureKey:
    """SHA-256 hex digest of a demand's canonical encoding."""

    digest: str

    def __post_init__(self):
        d = self.digest
        if len(d) != 64 or any(c not in "0123456789abcdef" for c in d):
            raise ValueError("digest must be 64 lowercase hex chars")

    def __str__(self):
        return self.digest


def canonical_signature(demand: Demand) -> SignatureKey:
    """Deterministic memoization key; independent of context entry order."""
    return SignatureKey(hashlib.sha256(encode_demand(demand)).hexdigest())


@dataclass(frozen=True)
class DemandResult:
    """A computed value deposited into the warehouse under its signature.

    ``error`` is set instead of a meaningful value when the executing worker
    reported a stage failure; generators surface it as StageFailed. The spec'd
    result fields plus this marker is what the WAL and wire carry.
    """

    signature: SignatureKey
    value: Value
    worker_id: str
    computed_at: int
    error: Optional[str] = None

    def to_tree(self) -> dict:
        tree = {
            "signature": self.signature.digest,
            "value": self.value.to_tree(),
            "worker_id": self.worker_id,
            "computed_at": self.computed_at,
        }
        if self.error is not None:
            tree["error"] = self.error
        return tree

    @classmethod
    def from_tree(cls, tree) -> "DemandResult":
        if not isinstance(tree, dict):
            raise MalformedEncoding("a result must be a map")
        extra = set(tree) - {"signature", "value", "worker_id", "computed_at", "error"}
        if extra or not {"signature", "value", "worker_id", "computed_at"} <= set(tree):
            raise MalformedEncoding("malformed result fields")
        if not isinstance(tree["signature"], str) or not isinstance(tree["worker_id"], str):
            raise MalformedEncoding("malformed result fields")
        if not isinstance(tree["computed_at"], int):
            raise MalformedEncoding("computed_at must be an integer")
        error = tree.get("error")
        if error is not None and not isinstance(error, str):
            raise MalformedEncoding("error must be a string")
        try:
            signature = SignatureKey(tree["signature"])
        except ValueError as exc:
            raise MalformedEncoding(str(exc)) from exc
        return cls(signature=signature, value=Value.from_tree(tree["value"]),
                   worker_id=tree["worker_id"], computed_at=tree["computed_at"], error=error)


def encode_result(result: DemandResult) -> bytes:
    return canon.text_encode(result.to_tree())


def decode_result(data: bytes) -> DemandResult:
    return DemandResult.from_tree(canon.text_decode(data))


# ---------------------------------------------------------------------------
# Staged programs


@dataclass(frozen=True)
class StagePlan:
    """One step of a staged program: which registered procedure to run."""

    stage_name: str
    procedure_name: str
    param_template: Tuple[Value, ...] = ()

    def __post_init__(self):
        if not self.stage_name:
            raise ValueError("stage_name must be non-empty")
        if not self.procedure_name:
            raise ValueError("procedure_name must be non-empty")
        object.__setattr__(self, "param_template", tuple(self.param_template))

    def to_tree(self) -> dict:
        return {
            "stage_name": self.stage_name,
            "procedure_name": self.procedure_name,
            "param_template": [item.to_tree() for item in self.param_template],
        }

    @classmethod
    def from_tree(cls, tree) -> "StagePlan":
        return cls(
            stage_name=tree["stage_name"],
            procedure_name=tree["procedure_name"],
            param_template=tuple(Value.from_tree(item) for item in tree["param_template"]),
        )


@dataclass(frozen=True)
class Geer:
    """The compiled program resource a generator walks: an ordered stage plan."""

    geer_id: str
    program_id: str
    plan: Tuple[StagePlan, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "plan", tuple(self.plan))
        if not self.plan:
            raise ValueError("plan must be non-empty")
        names = [stage.stage_name for stage in self.plan]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")

    def to_tree(self) -> dict:
        return {
            "geer_id": self.geer_id,
            "program_id": self.program_id,
            "plan": [stage.to_tree() for stage in self.plan],
        }

    @classmethod
    def from_tree(cls, tree) -> "Geer":
        return cls(
            geer_id=tree["geer_id"],
            program_id=tree["program_id"],
            plan=tuple(StagePlan.from_tree(item) for item in tree["plan"]),
        )
