"""Human-readable rules from a fitted clone.

Every slot's root-to-node decision path becomes one conjunction over named
pins. Text output collapses repeated bounds on a pin to the tightest one;
JSON keeps the path exactly as the tree stores it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .blackbox import ChipSpec
from .dnt import DntClone

FORMAT_TAG = "dnt-rules/1"


@dataclass(frozen=True)
class Rule:
    slot_id: int
    conjunction: tuple  # ((pin name, "<=" | ">", threshold), ...)
    samples_seen: int
    final_loss: Optional[float]
    leaf_mean: Optional[float]

    def holds(self, x, names: Sequence[str]) -> bool:
        index = {n: i for i, n in enumerate(names)}
        for pin, op, t in self.conjunction:
            v = x[index[pin]]
            if not (v <= t if op == "<=" else v > t):
                return False
        return True

    def to_dict(self) -> dict:
        return {
            "slot_id": self.slot_id,
            "conjunction": [[p, op, t] for p, op, t in self.conjunction],
            "samples_seen": self.samples_seen,
            "final_loss": self.final_loss,
            "leaf_mean": self.leaf_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Rule":
        return cls(
            int(d["slot_id"]),
            tuple((p, op, float(t)) for p, op, t in d["conjunction"]),
            int(d["samples_seen"]),
            d["final_loss"],
            d["leaf_mean"],
        )


def _finite(v) -> Optional[float]:
    return float(v) if v is not None and math.isfinite(v) else None


def extract_rules(clone: DntClone, chip_spec=None) -> list[Rule]:
    """One rule per slot, ordered by slot id.

    ``chip_spec`` is a ChipSpec or a plain list of pin names; without it pins
    are named p0, p1, ...
    """
    if chip_spec is None:
        names = [f"p{j}" for j in range(clone.m)]
    elif isinstance(chip_spec, ChipSpec):
        names = chip_spec.names
    else:
        names = list(chip_spec)
    rules = []
    for s in sorted(clone.slots, key=lambda s: s.slot_id):
        conj = []
        for c in s.path:
            if c.feature >= len(names):
                raise ValueError(f"no pin name for index {c.feature}")
            conj.append((names[c.feature], c.side, float(c.threshold)))
        rows = np.flatnonzero(clone.flagged.flag == s.slot_id)
        if rows.size:
            mean = float(np.mean(clone.flagged.y[rows]))
        else:
            mean = s.constant
        loss = s.smoothed_loss if s.network is not None else 0.0
        rules.append(Rule(s.slot_id, tuple(conj), int(rows.size), _finite(loss), _finite(mean)))
    return rules


def collapse(conjunction) -> list:
    """Tightest upper and lower bound per pin, in order of first appearance."""
    upper, lower, order = {}, {}, []
    for pin, op, t in conjunction:
        if pin not in order:
            order.append(pin)
        if op == "<=":
            upper[pin] = min(upper.get(pin, t), t)
        else:
            lower[pin] = max(lower.get(pin, t), t)
    out = []
    for pin in order:
        if pin in lower:
            out.append((pin, ">", lower[pin]))
        if pin in upper:
            out.append((pin, "<=", upper[pin]))
    return out


def _fmt(v) -> str:
    return "nan" if v is None else f"{v:.3g}"


def rule_line(rule: Rule) -> str:
    terms = [f"{pin} {op} {t:.3f}" for pin, op, t in collapse(rule.conjunction)]
    cond = " AND ".join(terms) if terms else "TRUE"
    return f"IF {cond} THEN slot {rule.slot_id} (loss {_fmt(rule.final_loss)}, n={rule.samples_seen})"


def render(rules: Sequence[Rule], fmt: str = "text") -> str:
    rules = sorted(rules, key=lambda r: r.slot_id)
    if fmt == "text":
        lines = [f"# {len(rules)} rule(s)"] + [rule_line(r) for r in rules]
        return "\n".join(lines) + "\n"
    if fmt == "json":
        doc = {"format": FORMAT_TAG, "rules": [r.to_dict() for r in rules]}
        return json.dumps(doc, indent=1) + "\n"
    raise ValueError(f"unknown format {fmt!r}; use 'text' or 'json'")


def parse(document: str) -> list[Rule]:
    """Inverse of ``render(..., 'json')``."""
    doc = json.loads(document)
    if doc.get("format") != FORMAT_TAG:
        raise ValueError("not a rules document")
    return [Rule.from_dict(d) for d in doc["rules"]]
