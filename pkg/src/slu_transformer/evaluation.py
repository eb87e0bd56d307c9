"""Per-field accuracy, exact match and confusion matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .decoding import Prediction
from .labels import LabelSpace, LabelVector


@dataclass
class EvalReport:
    n: int
    domain_acc: float
    intent_acc: float
    slot_acc: list[float]
    exact_match: float
    violations: int
    slot_acc_joint: float
    confusion: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def slot_acc_macro(self) -> float:
        return float(np.mean(self.slot_acc)) if self.slot_acc else 1.0

    def field_accuracies(self) -> list[float]:
        return [self.domain_acc, self.intent_acc, *self.slot_acc]

    def to_json(self) -> dict:
        return {"n": self.n, "domain_acc": self.domain_acc, "intent_acc": self.intent_acc,
                "slot_acc": list(self.slot_acc), "exact_match": self.exact_match,
                "violations": self.violations, "slot_acc_macro": self.slot_acc_macro,
                "slot_acc_joint": self.slot_acc_joint}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(d["n"], d["domain_acc"], d["intent_acc"], list(d["slot_acc"]),
                   d["exact_match"], d["violations"], d.get("slot_acc_joint", float("nan")))


def _values(p) -> list[int | None]:
    if isinstance(p, Prediction):
        return p.field_values()
    if isinstance(p, LabelVector):
        return list(p.as_tuple())
    return list(p)


def evaluate(predictions: Mapping[str, Prediction | LabelVector],
             references: Mapping[str, LabelVector], space: LabelSpace) -> EvalReport:
    """Score predictions against references keyed by utterance id.

    A field left undecided by a structural violation counts as wrong.
    """
    if not references:
        raise ValueError("cannot evaluate an empty set")
    if set(predictions) != set(references):
        missing = sorted(set(references) ^ set(predictions))[:5]
        raise ValueError(f"prediction/reference ids differ, e.g. {missing}")
    ids = sorted(references)
    n_fields = 2 + space.num_slots
    pred = [_values(predictions[i]) for i in ids]
    ref = [_values(references[i]) for i in ids]
    correct = np.array([[p[f] is not None and p[f] == r[f] for f in range(n_fields)]
                        for p, r in zip(pred, ref)], dtype=bool)
    acc = correct.mean(axis=0)
    violations = sum(1 for i in ids if isinstance(predictions[i], Prediction)
                     and predictions[i].structural_violation)
    confusion = {name: confusion_matrix(f, pred, ref, space)
                 for f, (name, _) in enumerate(space.fields())}
    return EvalReport(
        n=len(ids),
        domain_acc=float(acc[0]),
        intent_acc=float(acc[1]),
        slot_acc=[float(a) for a in acc[2:]],
        exact_match=float(correct.all(axis=1).mean()),
        violations=violations,
        slot_acc_joint=float(correct[:, 2:].all(axis=1).mean()),
        confusion=confusion,
    )


def confusion_matrix(field_index: int, predictions, references, space: LabelSpace) -> np.ndarray:
    """Rows are reference classes, columns predicted classes.

    An undecided prediction is tallied in an extra trailing column.
    """
    if not 0 <= field_index < 2 + space.num_slots:
        raise ValueError(f"no label field at position {field_index}")
    k = space.cardinalities[field_index]
    m = np.zeros((k, k + 1), dtype=np.int64)
    for p, r in zip(predictions, references):
        pv, rv = _values(p)[field_index], _values(r)[field_index]
        m[rv, k if pv is None else pv] += 1
    return m if m[:, k].any() else m[:, :k]


def write_confusion_csv(matrix: np.ndarray, names, path: str | Path) -> None:
    names = list(names)
    cols = names + (["<none>"] if matrix.shape[1] > len(names) else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["reference\\predicted"] + cols)
        for name, row in zip(names, matrix):
            w.writerow([name] + [int(v) for v in row])


def read_confusion_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = [r[0] for r in rows[1:]]
    return names, np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=np.int64)
