"""HOI class inventory: objects, actions and the (action, object) pairs."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class TaxonomyError(ValueError):
    pass


@dataclass
class Taxonomy:
    objects: list[str]
    actions: list[str]
    hoi_classes: list[tuple[int, int]]  # (action_idx, object_idx)
    rare: list[bool]
    person_object_idx: int = 0
    frequency: list[int] | None = None
    _pair_index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.hoi_classes = [(int(a), int(o)) for a, o in self.hoi_classes]
        self.rare = [bool(r) for r in self.rare]
        n, m = len(self.objects), len(self.actions)
        if not 0 <= self.person_object_idx < n:
            raise TaxonomyError(f"person_object_idx {self.person_object_idx} outside 0..{n - 1}")
        if len(self.rare) != len(self.hoi_classes):
            raise TaxonomyError("rare flags must match hoi_classes in length")
        if self.frequency is not None:
            self.frequency = [int(f) for f in self.frequency]
            if len(self.frequency) != len(self.hoi_classes):
                raise TaxonomyError("frequency must match hoi_classes in length")
        self._pair_index = {}
        for c, (a, o) in enumerate(self.hoi_classes):
            if not (0 <= a < m and 0 <= o < n):
                raise TaxonomyError(f"class {c} references action {a} / object {o} out of range")
            if (a, o) in self._pair_index:
                raise TaxonomyError(f"duplicate HOI pair {(a, o)} at class {c}")
            self._pair_index[(a, o)] = c

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def n_classes(self) -> int:
        return len(self.hoi_classes)

    def class_of(self, action: int, obj: int) -> int | None:
        return self._pair_index.get((action, obj))

    def object_of(self, c: int) -> int:
        return self.hoi_classes[c][1]

    def action_of(self, c: int) -> int:
        return self.hoi_classes[c][0]

    def class_name(self, c: int) -> str:
        a, o = self.hoi_classes[c]
        return f"{self.actions[a]} {self.objects[o]}"

    def to_json(self) -> dict:
        d = {
            "objects": list(self.objects),
            "actions": list(self.actions),
            "hoi_classes": [{"action_idx": a, "object_idx": o} for a, o in self.hoi_classes],
            "rare": list(self.rare),
            "person_object_idx": self.person_object_idx,
        }
        if self.frequency is not None:
            d["frequency"] = list(self.frequency)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Taxonomy":
        try:
            pairs = [(h["action_idx"], h["object_idx"]) for h in d["hoi_classes"]]
            return cls(
                objects=list(d["objects"]),
                actions=list(d["actions"]),
                hoi_classes=pairs,
                rare=list(d["rare"]),
                person_object_idx=int(d["person_object_idx"]),
                frequency=d.get("frequency"),
            )
        except KeyError as e:
            raise TaxonomyError(f"taxonomy JSON missing field {e}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "Taxonomy":
        return cls.from_json(json.loads(Path(path).read_text()))
