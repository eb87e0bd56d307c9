"""Domain / intent / slot label spaces and the two target encodings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

SOP = 0
EOP = 1


@dataclass(frozen=True)
class LabelVector:
    domain: int
    intent: int
    slots: tuple[int, ...] = ()

    def as_tuple(self) -> tuple[int, ...]:
        return (self.domain, self.intent, *self.slots)

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> "LabelVector":
        values = [int(v) for v in values]
        return cls(values[0], values[1], tuple(values[2:]))


@dataclass(frozen=True)
class LabelSpace:
    domains: tuple[str, ...]
    intents: tuple[str, ...]
    slots: tuple[tuple[str, ...], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "domains", tuple(self.domains))
        object.__setattr__(self, "intents", tuple(self.intents))
        object.__setattr__(self, "slots", tuple(tuple(s) for s in self.slots))
        for name, values in self.fields():
            if not values:
                raise ValueError(f"label field {name!r} is empty")
            if len(set(values)) != len(values):
                raise ValueError(f"duplicate names in label field {name!r}")

    # -- shape ------------------------------------------------------------
    def fields(self) -> list[tuple[str, tuple[str, ...]]]:
        out = [("domain", self.domains), ("intent", self.intents)]
        out += [(f"slot_{i + 1}", s) for i, s in enumerate(self.slots)]
        return out

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(len(v) for _, v in self.fields())

    @property
    def class_count(self) -> int:
        n = 1
        for c in self.cardinalities:
            n *= c
        return n

    # -- classification encoding -------------------------------------------
    def check(self, lv: LabelVector) -> None:
        values = lv.as_tuple()
        if len(values) != len(self.cardinalities):
            raise ValueError(f"label has {len(values) - 2} slots, space has {self.num_slots}")
        for (name, _), v, c in zip(self.fields(), values, self.cardinalities):
            if not 0 <= v < c:
                raise ValueError(f"{name} id {v} out of range [0, {c})")

    def label_to_class(self, lv: LabelVector) -> int:
        """Mixed-radix index, domain most significant."""
        self.check(lv)
        idx = 0
        for v, c in zip(lv.as_tuple(), self.cardinalities):
            idx = idx * c + v
        return idx

    def class_to_label(self, cls: int) -> LabelVector:
        cls = int(cls)
        if not 0 <= cls < self.class_count:
            raise ValueError(f"class id {cls} out of range [0, {self.class_count})")
        digits = []
        for c in reversed(self.cardinalities):
            cls, r = divmod(cls, c)
            digits.append(r)
        return LabelVector.from_sequence(digits[::-1])

    # -- hierarchical vocabulary ---------------------------------------------
    @property
    def field_offsets(self) -> tuple[int, ...]:
        offsets, start = [], 2
        for c in self.cardinalities:
            offsets.append(start)
            start += c
        return tuple(offsets)

    @property
    def vocab_size(self) -> int:
        return 2 + sum(self.cardinalities)

    def field_range(self, position: int) -> range:
        """Token ids valid for field ``position`` (0 = domain, 1 = intent, ...)."""
        start = self.field_offsets[position]
        return range(start, start + self.cardinalities[position])

    def to_tokens(self, lv: LabelVector) -> list[int]:
        """[sop, domain, intent, slots..., eop] as vocabulary ids."""
        self.check(lv)
        return [SOP] + [o + v for o, v in zip(self.field_offsets, lv.as_tuple())] + [EOP]

    def token_field(self, token: int) -> tuple[int, int] | None:
        """(field position, id within field) of a vocabulary token, None for sop/eop."""
        for pos, off in enumerate(self.field_offsets):
            if off <= token < off + self.cardinalities[pos]:
                return pos, token - off
        return None

    def token_names(self) -> list[str]:
        names = ["<sop>", "<eop>"]
        for fname, values in self.fields():
            names += [f"{fname}:{v}" for v in values]
        return names

    # -- names and files -------------------------------------------------------
    def encode(self, domain: str, intent: str, slots: Sequence[str] = ()) -> LabelVector:
        def lookup(values, name, fname):
            try:
                return values.index(name)
            except ValueError:
                raise ValueError(f"unknown {fname} value {name!r}") from None

        if len(slots) != self.num_slots:
            raise ValueError(f"expected {self.num_slots} slot values, got {len(slots)}")
        return LabelVector(
            lookup(self.domains, domain, "domain"),
            lookup(self.intents, intent, "intent"),
            tuple(lookup(s, v, f"slot_{i + 1}") for i, (s, v) in enumerate(zip(self.slots, slots))),
        )

    def decode(self, lv: LabelVector) -> tuple[str, str, list[str]]:
        self.check(lv)
        return (self.domains[lv.domain], self.intents[lv.intent],
                [s[v] for s, v in zip(self.slots, lv.slots)])

    def to_dict(self) -> dict:
        return {"domains": list(self.domains), "intents": list(self.intents),
                "slots": [list(s) for s in self.slots]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(tuple(d["domains"]), tuple(d["intents"]), tuple(tuple(s) for s in d.get("slots", [])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "LabelSpace":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def sized(cls, n_domains: int, n_intents: int, slot_sizes: Sequence[int] = ()) -> "LabelSpace":
        """Space with generated names, e.g. ``d0..d4``."""
        return cls(
            tuple(f"d{i}" for i in range(n_domains)),
            tuple(f"i{i}" for i in range(n_intents)),
            tuple(tuple(f"s{k + 1}_{i}" for i in range(n)) for k, n in enumerate(slot_sizes)),
        )


def desk_label_space() -> LabelSpace:
    """5 domains, 4 intents, slots of 3 and 2 values (120 classes)."""
    return LabelSpace.sized(5, 4, (3, 2))
