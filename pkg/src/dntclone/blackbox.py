"""Black-box victims: the query interface, a budget ledger and the multi-mode chip.

The chip is a pure function of its 18 pin voltages. Every query goes through a
:class:`BlackBox`, which validates the safe operating range of each pin and
charges the :class:`QueryLedger`.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

PIN_KINDS = ("power", "ground", "binary", "analog", "unused")
N_PINS = 18
MODE_PINS = (4, 5, 6, 7, 8)
BIT_PINS = (14, 15, 16, 17)
IDLE_OUTPUT = 0.0


class BlackBoxFault(Exception):
    """Base class for faults raised by a victim."""


class MalfunctionError(BlackBoxFault):
    """A voltage outside the safe operating range was applied."""


class BudgetExhausted(BlackBoxFault):
    """The query budget is spent.

    ``partial`` holds the outputs for the leading rows of a batch that were
    still covered by the budget.
    """

    def __init__(self, message: str, partial: Optional[np.ndarray] = None):
        super().__init__(message)
        self.partial = np.empty(0) if partial is None else partial


@dataclass(frozen=True)
class PinSpec:
    index: int
    name: str
    kind: str
    safe_range: tuple[float, float]
    description: str = ""

    def __post_init__(self):
        if self.kind not in PIN_KINDS:
            raise ValueError(f"pin {self.index}: unknown kind {self.kind!r}")
        lo, hi = self.safe_range
        if not lo < hi:
            raise ValueError(f"pin {self.index}: safe range must satisfy lo < hi, got {self.safe_range}")


def _default_pins() -> list[PinSpec]:
    five = (0.0, 5.0)
    pins = [
        PinSpec(0, "Vcc", "power", five, "From GND"),
        PinSpec(1, "Enable Input", "binary", five, "enb 1,2"),
        PinSpec(2, "Enable Output", "binary", five, ""),
        PinSpec(3, "GND", "ground", five, "From Vcc"),
        PinSpec(4, "Set Mode 1", "binary", five, "Amplify input 9 by input 10 p[9]*p[10]"),
        PinSpec(5, "Set Mode 2", "binary", five, "Read from LUT1 position of input 11"),
        PinSpec(6, "Set Mode 3", "binary", five, "Read from LUT2 position of input 12"),
        PinSpec(7, "Set Mode 4", "binary", five, "Average(LUT1(input 11),LUT2(input 12))"),
        PinSpec(8, "Set Mode 5", "binary", five, "Binary from inputs 14, 15, 16, 17"),
    ]
    pins += [PinSpec(i, f"Input {i}", "analog", (0.0, 10.0)) for i in range(9, 13)]
    # the unused pin has no listed range; treat it like the other logic pins
    pins.append(PinSpec(13, "Unused Pin", "unused", five, "Doing nothing"))
    pins += [PinSpec(i, f"Input {i}", "binary", five, "Inputs") for i in range(14, 18)]
    return pins


@dataclass(frozen=True)
class ChipSpec:
    """Pin table, logic thresholds and lookup-table constants of the chip."""

    pins: tuple[PinSpec, ...] = field(default_factory=lambda: tuple(_default_pins()))
    binary_threshold: float = 2.5
    binary_domain: tuple[float, float] = (-1.0, 6.0)
    power_threshold: float = 4.0
    power_domain: tuple[float, float] = (-1.0, 6.0)
    # coefficients of in^0 .. in^4
    lut1: tuple[float, ...] = (7.0, 0.0, 4.0, 0.1, 0.1)
    # amplitude * sin(in) * exp(-decay * in)
    lut2: tuple[float, float] = (14.0, 2.0)

    def __post_init__(self):
        if len(self.pins) != N_PINS:
            raise ValueError(f"chip needs exactly {N_PINS} pins, got {len(self.pins)}")
        for i, pin in enumerate(self.pins):
            if pin.index != i:
                raise ValueError(f"pin indices must be 0..{N_PINS - 1} in order; slot {i} holds {pin.index}")
        kinds = [p.kind for p in self.pins]
        if kinds.count("power") != 1 or kinds.count("ground") != 1:
            raise ValueError("chip needs exactly one power pin and one ground pin")

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.pins]

    @property
    def safe_ranges(self) -> list[tuple[float, float]]:
        return [p.safe_range for p in self.pins]

    @property
    def power_pin(self) -> int:
        return next(p.index for p in self.pins if p.kind == "power")

    @property
    def ground_pin(self) -> int:
        return next(p.index for p in self.pins if p.kind == "ground")

    def sampling_ranges(self) -> list[tuple[float, float]]:
        """Safe ranges with the ground pin held at its lower bound (0 V by default)."""
        ranges = list(self.safe_ranges)
        g = self.ground_pin
        ranges[g] = (ranges[g][0], ranges[g][0])
        return ranges

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pins"] = [asdict(p) for p in self.pins]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChipSpec":
        d = dict(d)
        if "pins" in d:
            d["pins"] = tuple(
                PinSpec(p["index"], p["name"], p["kind"], tuple(p["safe_range"]), p.get("description", ""))
                for p in d["pins"]
            )
        for key in ("binary_domain", "power_domain", "lut1", "lut2"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ChipSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


DEFAULT_CHIP = ChipSpec()


def _check_domain(v, domain, what):
    v = np.asarray(v, dtype=np.float64)
    lo, hi = domain
    if np.any((v < lo) | (v > hi)) or np.any(np.isnan(v)):
        raise MalfunctionError(f"{what} outside [{lo}, {hi}] V")
    return v


def binary_read(v, spec: ChipSpec = DEFAULT_CHIP):
    """Logic level of a binary pin; ``v >= threshold`` reads true."""
    v = _check_domain(v, spec.binary_domain, "binary pin voltage")
    out = v >= spec.binary_threshold
    return bool(out) if out.ndim == 0 else out


def powered(vcc, gnd, spec: ChipSpec = DEFAULT_CHIP):
    diff = _check_domain(np.asarray(vcc, dtype=np.float64) - gnd, spec.power_domain, "Vcc - GND")
    out = diff >= spec.power_threshold
    return bool(out) if out.ndim == 0 else out


def _libm(func, v):
    # elementwise through libm so scalar and batch evaluation round identically
    if v.ndim == 0:
        return float(func(float(v)))
    return np.fromiter((func(x) for x in v.ravel().tolist()), dtype=np.float64, count=v.size).reshape(v.shape)


def lut1(v, spec: ChipSpec = DEFAULT_CHIP):
    v = _check_domain(v, spec.pins[11].safe_range, "LUT1 input")
    c = spec.lut1

    def poly(x):
        # ascending powers, constant last: 4*in**2 + 0.1*in**3 + 0.1*in**4 + 7
        acc = c[1] * x
        for k in range(2, len(c)):
            acc = acc + c[k] * x**k
        return acc + c[0]

    return _libm(poly, v)


def lut2(v, spec: ChipSpec = DEFAULT_CHIP):
    v = _check_domain(v, spec.pins[12].safe_range, "LUT2 input")
    amp, decay = spec.lut2
    return _libm(lambda x: amp * math.sin(x) * math.exp(-decay * x), v)


def select_mode(flags: Sequence[bool]) -> Optional[int]:
    """Priority encoder over the five mode-select flags (pin 4 wins)."""
    for i, flag in enumerate(flags):
        if flag:
            return i + 1
    return None


def chip_output(X, spec: ChipSpec = DEFAULT_CHIP) -> np.ndarray:
    """Evaluate the chip on a batch of pin vectors, shape (n, 18) -> (n,).

    Raises MalfunctionError if any pin of any row is outside its safe range.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != N_PINS:
        raise ValueError(f"expected {N_PINS} pin voltages, got {X.shape[1]}")
    bad = out_of_range(X, spec.safe_ranges)
    if bad.any():
        rows = np.flatnonzero(bad)
        raise MalfunctionError(f"{rows.size} row(s) drive a pin outside its safe range (first: row {rows[0]})")

    on = powered(X[:, spec.power_pin], X[:, spec.ground_pin], spec)
    on &= binary_read(X[:, 1], spec) & binary_read(X[:, 2], spec)
    flags = binary_read(X[:, list(MODE_PINS)], spec)
    mode = np.where(flags.any(axis=1), flags.argmax(axis=1) + 1, 0)

    l1 = lut1(X[:, 11], spec)
    l2 = lut2(X[:, 12], spec)
    bits = binary_read(X[:, list(BIT_PINS)], spec).astype(np.float64)
    word = bits @ np.array([8.0, 4.0, 2.0, 1.0])
    y = np.select(
        [mode == 1, mode == 2, mode == 3, mode == 4, mode == 5],
        [X[:, 9] * X[:, 10], l1, l2, (l1 + l2) / 2.0, word],
        default=IDLE_OUTPUT,
    )
    return np.where(on, y, IDLE_OUTPUT)


def out_of_range(X: np.ndarray, ranges) -> np.ndarray:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return ((X < lo) | (X > hi) | np.isnan(X)).any(axis=1)


@dataclass
class QueryLedger:
    budget: Optional[int] = None
    queries_used: int = 0
    fault_count: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def remaining(self) -> Optional[int]:
        """Queries left, or None when the budget is unlimited."""
        if self.budget is None:
            return None
        return max(self.budget - self.queries_used, 0)

    def to_dict(self) -> dict:
        return {"queries_used": self.queries_used, "budget": self.budget, "fault_count": self.fault_count}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "QueryLedger":
        d = json.loads(Path(path).read_text())
        return cls(budget=d["budget"], queries_used=d["queries_used"], fault_count=d["fault_count"])


def remaining_budget(ledger: QueryLedger) -> Optional[int]:
    return ledger.remaining()


class BlackBox:
    """Query access to a memoryless victim ``func: (n, m) -> (n,)``.

    ``safe_ranges`` are the malfunction limits known to the adversary and
    ``sampling_ranges`` the box the default sampler draws from (it may pin a
    pin to a single value, e.g. GND).
    """

    def __init__(
        self,
        func: Callable[[np.ndarray], np.ndarray],
        safe_ranges: Sequence[tuple[float, float]],
        budget: Optional[int] = None,
        sampling_ranges: Optional[Sequence[tuple[float, float]]] = None,
        names: Optional[Sequence[str]] = None,
    ):
        self.func = func
        self.safe_ranges = [tuple(map(float, r)) for r in safe_ranges]
        self.sampling_ranges = [tuple(map(float, r)) for r in (sampling_ranges or safe_ranges)]
        self.names = list(names) if names is not None else [f"p{i}" for i in range(len(self.safe_ranges))]
        self.ledger = QueryLedger(budget=budget)

    @property
    def m(self) -> int:
        return len(self.safe_ranges)

    def query(self, x) -> float:
        return float(self.query_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def query_batch(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.m:
            raise ValueError(f"expected {self.m} inputs, got {X.shape[1]}")
        bad = out_of_range(X, self.safe_ranges)
        with self.ledger._lock:
            if bad.any():
                self.ledger.fault_count += int(bad.sum())
                raise MalfunctionError(f"malfunction: {int(bad.sum())} row(s) outside the safe operating range")
            left = self.ledger.remaining()
            n = X.shape[0] if left is None else min(left, X.shape[0])
            y = np.asarray(self.func(X[:n]), dtype=np.float64) if n else np.empty(0)
            self.ledger.queries_used += n
        if n < X.shape[0]:
            raise BudgetExhausted(
                f"query budget of {self.ledger.budget} exhausted ({n} of {X.shape[0]} rows answered)", partial=y
            )
        return y


class ChipBlackBox(BlackBox):
    def __init__(self, spec: ChipSpec = DEFAULT_CHIP, budget: Optional[int] = None):
        self.spec = spec
        super().__init__(
            lambda X: chip_output(X, spec),
            spec.safe_ranges,
            budget=budget,
            sampling_ranges=spec.sampling_ranges(),
            names=spec.names,
        )


def uniform_inputs(rng: np.random.Generator, ranges, n: int) -> np.ndarray:
    lo = np.array([r[0] for r in ranges], dtype=np.float64)
    hi = np.array([r[1] for r in ranges], dtype=np.float64)
    return lo + rng.random((n, lo.size)) * (hi - lo)


def enabled_fraction(spec: ChipSpec = DEFAULT_CHIP) -> float:
    """Probability that a uniform sampling-range input powers and enables the chip."""
    ranges = spec.sampling_ranges()

    def above(lo, hi, t):
        return min(max((hi - t) / (hi - lo), 0.0), 1.0)

    vcc = ranges[spec.power_pin]
    gnd = ranges[spec.ground_pin][0]
    p = above(vcc[0], vcc[1], spec.power_threshold + gnd)
    for pin in (1, 2):
        p *= above(*ranges[pin], spec.binary_threshold)
    return p


def mode_shares() -> list[float]:
    """Conditional share of each mode given the chip is enabled (geometric, halving)."""
    return [math.pow(0.5, k) for k in range(1, 6)]
