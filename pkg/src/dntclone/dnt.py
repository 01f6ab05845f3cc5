"""Deep Neural Tree: a regression tree routing inputs to per-leaf networks.

Training follows a loss-gated active-learning loop. Each iteration queries a
batch of inputs, routes it through the tree and trains only the slots whose
smoothed loss is still above the error threshold. The targeted sampler draws
each active slot's share of the batch from that slot's leaf box, so converged
slots stop consuming queries.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import regtree
from .blackbox import BlackBox, BudgetExhausted
from .neural import Network, Optimizer, TrainConfig, default_network, train_batch
from .regtree import Box, RegressionTree

log = logging.getLogger(__name__)

UNASSIGNED = -1
LOSS_WINDOW = 3
# fresh rows a slot's smoothed loss must cover before it may stop training
GATE_ROWS = 32


class TrainingFinished(RuntimeError):
    """Raised when a batch is requested but no slot is still training."""


@dataclass
class DntConfig:
    seed_count: int = 20000
    tree_depth: int = 8
    min_leaf: int = 5
    batch_size: int = 100
    error: float = 1e-3
    strategy: str = "targeted"  # or "uniform"
    seed: int = 0
    threads: int = 1
    target_transform: str = "asinh"  # or "none"
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            learning_rate=1e-2, batch_size=64, steps_per_call=10, optimizer="adam", clip_norm=10.0,
            decay_steps=3000.0,
        )
    )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DntConfig":
        d = dict(d)
        d["train"] = TrainConfig(**d.get("train", {}))
        return cls(**d)


class FlaggedTrainingSet:
    """Append-only query log. ``flag`` names the slot that consumed a row.

    ``leaf`` keeps the tree leaf each row routed to when it was added.
    """

    def __init__(self, m: int):
        self.m = m
        self._X = np.empty((0, m))
        self._y = np.empty(0)
        self._leaf = np.empty(0, dtype=np.int64)
        self._flag = np.empty(0, dtype=np.int64)
        self._n = 0

    def __len__(self) -> int:
        return self._n

    def _grow(self, need: int) -> None:
        cap = self._y.size
        if need <= cap:
            return
        cap = max(need, 2 * cap, 1024)
        for name in ("_X", "_y", "_leaf", "_flag"):
            old = getattr(self, name)
            new = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def append(self, X, y, leaf, flag=None) -> np.ndarray:
        """Add rows; returns their indices."""
        k = len(y)
        self._grow(self._n + k)
        sl = slice(self._n, self._n + k)
        self._X[sl] = X
        self._y[sl] = y
        self._leaf[sl] = leaf
        self._flag[sl] = UNASSIGNED if flag is None else flag
        self._n += k
        return np.arange(sl.start, sl.stop)

    @property
    def X(self) -> np.ndarray:
        return self._X[: self._n]

    @property
    def y(self) -> np.ndarray:
        return self._y[: self._n]

    @property
    def leaf(self) -> np.ndarray:
        return self._leaf[: self._n]

    @property
    def flag(self) -> np.ndarray:
        return self._flag[: self._n]

    def set_flag(self, idx, value) -> None:
        self._flag[idx] = value

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"p{j}" for j in range(self.m)] + ["y", "leaf", "flag"])
            for x, y, leaf, flag in zip(self.X.tolist(), self.y.tolist(), self.leaf.tolist(), self.flag.tolist()):
                w.writerow([repr(v) for v in x] + [repr(y), leaf, flag])

    @classmethod
    def load_csv(cls, path, m: int) -> "FlaggedTrainingSet":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        fts = cls(m)
        if data.size:
            fts.append(data[:, :m], data[:, m], data[:, m + 1].astype(np.int64), data[:, m + 2].astype(np.int64))
        return fts


@dataclass
class Slot:
    """One attachment point of the tree and the model answering for it."""

    slot_id: int
    leaf_ids: list
    path: list
    box: Box
    network: Optional[Network] = None
    constant: Optional[float] = None
    y_offset: float = 0.0
    y_scale: float = 1.0
    transform: str = "asinh"
    active: bool = True
    loss_history: list = field(default_factory=list)
    loss_counts: list = field(default_factory=list)
    initial_loss: float = float("inf")
    samples_consumed: int = 0
    rows: list = field(default_factory=list)
    untrained: bool = False
    optimizer: Optional[Optimizer] = field(default=None, repr=False)
    rng: Optional[np.random.Generator] = field(default=None, repr=False)

    def scale_x(self, X) -> np.ndarray:
        span = self.box.hi - self.box.lo
        safe = np.where(span > 0, span, 1.0)
        return np.where(span > 0, 2.0 * (X - self.box.lo) / safe - 1.0, 0.0)

    def squash(self, y):
        return np.arcsinh(y) if self.transform == "asinh" else np.asarray(y, dtype=np.float64)

    def unsquash(self, z):
        return np.sinh(z) if self.transform == "asinh" else z

    def scale_y(self, y):
        return (self.squash(y) - self.y_offset) / self.y_scale

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.network is None:
            return np.full(X.shape[0], self.constant)
        return self.unsquash(self.network(self.scale_x(X)) * self.y_scale + self.y_offset)

    def normalized_loss(self, X, y) -> float:
        if self.network is None:
            return float(np.mean(((self.squash(y) - self.squash(self.constant)) / self.y_scale) ** 2))
        return float(np.mean((self.network(self.scale_x(X)) - self.scale_y(y)) ** 2))

    def _window(self) -> tuple[float, int]:
        """Row-weighted loss over the last LOSS_WINDOW rounds, reaching further
        back until GATE_ROWS fresh rows are covered."""
        total, rows, k = 0.0, 0, 0
        for loss, n in zip(reversed(self.loss_history), reversed(self.loss_counts)):
            if k >= LOSS_WINDOW and rows >= GATE_ROWS:
                break
            total += loss * n
            rows += n
            k += 1
        return (total / rows if rows else self.initial_loss), rows

    @property
    def smoothed_loss(self) -> float:
        return self._window()[0]

    def converged(self, error: float) -> bool:
        loss, rows = self._window()
        return rows >= GATE_ROWS and loss < error

    def fit_normalization(self, y) -> None:
        z = self.squash(y)
        lo, hi = float(np.min(z)), float(np.max(z))
        self.y_offset = (hi + lo) / 2.0
        self.y_scale = (hi - lo) / 2.0 if hi > lo else 1.0

    def widen_normalization(self, y) -> bool:
        """Grow the target range to cover ``y`` without changing any prediction.

        The linear output layer absorbs the new affine map exactly.
        """
        if self.network is None or len(y) == 0:
            return False
        z = self.squash(y)
        lo, hi = self.y_offset - self.y_scale, self.y_offset + self.y_scale
        new_lo, new_hi = min(lo, float(np.min(z))), max(hi, float(np.max(z)))
        if new_lo >= lo and new_hi <= hi:
            return False
        offset, scale = (new_hi + new_lo) / 2.0, (new_hi - new_lo) / 2.0
        out = self.network.layers[-1].params
        out["W"] *= self.y_scale / scale
        out["b"] = (out["b"] * self.y_scale + self.y_offset - offset) / scale
        self.network._version += 1
        self.y_offset, self.y_scale = offset, scale
        return True


@dataclass
class SamplingStrategy:
    kind: str
    ranges: list
    seed: int

    def __post_init__(self):
        if self.kind not in ("uniform", "targeted"):
            raise ValueError(f"unknown sampling strategy {self.kind!r}")
        self.rng = np.random.default_rng([self.seed, 1])

    def uniform(self, n: int) -> np.ndarray:
        lo = np.array([r[0] for r in self.ranges])
        hi = np.array([r[1] for r in self.ranges])
        return np.minimum(lo + self.rng.random((n, lo.size)) * (hi - lo), hi)


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = (
        "iteration",
        "active_fraction",
        "n_active",
        "batch_size",
        "batch_work",
        "cumulative_work",
        "queries_used",
        "mean_loss",
        "max_loss",
    )

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def extend(self, other: "TrainReport") -> None:
        base = self.rows[-1]["cumulative_work"] if self.rows else 0
        for r in other.rows:
            r = dict(r)
            r["cumulative_work"] += base
            self.rows.append(r)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": self.rows}

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.CSV_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in self.CSV_COLUMNS])


class DntClone:
    def __init__(self, tree: RegressionTree, slots: list, sampler: SamplingStrategy, config: DntConfig,
                 flagged: FlaggedTrainingSet, attach_depth: Optional[int] = None):
        self.tree = tree
        self.slots = slots
        self.sampler = sampler
        self.config = config
        self.flagged = flagged
        self.attach_depth = attach_depth
        self.iterations = 0
        self.rank_training = None
        self._reindex()

    def _reindex(self) -> None:
        self.slot_of_leaf = np.empty(self.tree.leaf_count, dtype=np.int64)
        for s in self.slots:
            self.slot_of_leaf[s.leaf_ids] = s.slot_id

    @property
    def m(self) -> int:
        return self.tree.n_features

    @property
    def active_fraction(self) -> float:
        return sum(s.active for s in self.slots) / len(self.slots)

    def slot_of(self, X) -> np.ndarray:
        return self.slot_of_leaf[self.tree.apply(X)]

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.m:
            raise ValueError(f"clone expects {self.m} inputs, got {X.shape[1]}")
        owner = self.slot_of(X)
        out = np.empty(X.shape[0])
        for k in np.unique(owner):
            rows = owner == k
            out[rows] = self.slots[k].predict(X[rows])
        return float(out[0]) if single else out

    # persistence -------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.tree.save(d / "tree.json")
        slots = []
        for s in self.slots:
            entry = {
                "slot_id": s.slot_id,
                "leaf_ids": list(s.leaf_ids),
                "kind": "network" if s.network is not None else "constant",
                "constant": s.constant,
                "y_offset": s.y_offset,
                "y_scale": s.y_scale,
                "transform": s.transform,
                "active": s.active,
                "untrained": s.untrained,
                "samples_consumed": s.samples_consumed,
                "initial_loss": s.initial_loss if np.isfinite(s.initial_loss) else None,
                "loss_history": s.loss_history,
                "loss_counts": s.loss_counts,
            }
            if s.network is not None:
                entry["file"] = f"slot_{s.slot_id:03d}.json"
                s.network.save(d / entry["file"])
            slots.append(entry)
        manifest = {
            "format": "dnt-clone/1",
            "n_features": self.m,
            "attach_depth": self.attach_depth,
            "iterations": self.iterations,
            "rank_training": self.rank_training,
            "rank_training_semantics": "top-k child networks by occurrence",
            "sampler": {"kind": self.sampler.kind, "ranges": self.sampler.ranges, "seed": self.sampler.seed},
            "config": self.config.to_dict(),
            "slots": slots,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
        self.flagged.save_csv(d / "flagged.csv")

    @classmethod
    def load(cls, directory) -> "DntClone":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        tree = RegressionTree.load(d / "tree.json")
        config = DntConfig.from_dict(manifest["config"])
        ranges = [tuple(r) for r in manifest["sampler"]["ranges"]]
        sampler = SamplingStrategy(manifest["sampler"]["kind"], ranges, manifest["sampler"]["seed"])
        flagged = FlaggedTrainingSet.load_csv(d / "flagged.csv", tree.n_features)
        attach = manifest["attach_depth"]
        targets = tree.paths() if attach is None else None
        attachments = None if attach is None else tree.attachments(attach)
        slots = []
        for e in manifest["slots"]:
            path = targets[e["leaf_ids"][0]] if attach is None else attachments[e["slot_id"]][0]
            s = Slot(
                slot_id=e["slot_id"],
                leaf_ids=e["leaf_ids"],
                path=path,
                box=regtree.leaf_box(path, ranges),
                network=Network.load(d / e["file"]) if e["kind"] == "network" else None,
                constant=e["constant"],
                y_offset=e["y_offset"],
                y_scale=e["y_scale"],
                transform=e.get("transform", "none"),
                active=e["active"],
                loss_history=e["loss_history"],
                loss_counts=e.get("loss_counts", [1] * len(e["loss_history"])),
                initial_loss=float("inf") if e["initial_loss"] is None else e["initial_loss"],
                samples_consumed=e["samples_consumed"],
                untrained=e.get("untrained", False),
            )
            s.rows = np.flatnonzero(flagged.flag == s.slot_id).tolist()
            s.optimizer = Optimizer(config.train)
            s.rng = np.random.default_rng([config.seed, 2, s.slot_id])
            slots.append(s)
        clone = cls(tree, slots, sampler, config, flagged, attach)
        clone.iterations = manifest["iterations"]
        clone.rank_training = manifest["rank_training"]
        return clone


def _new_slot(slot_id, leaf_ids, path, ranges, config: DntConfig, m: int) -> Slot:
    s = Slot(slot_id=slot_id, leaf_ids=list(leaf_ids), path=path, box=regtree.leaf_box(path, ranges))
    s.transform = config.target_transform
    s.network = default_network(m, rng=np.random.default_rng([config.seed, 3, slot_id]))
    s.optimizer = Optimizer(config.train)
    s.rng = np.random.default_rng([config.seed, 2, slot_id])
    return s


def bootstrap(blackbox: BlackBox, config: DntConfig = None) -> DntClone:
    """Query uniform seed data, fit the tree and attach one network per leaf.

    Leaves holding fewer than ``min_leaf`` seed rows get a constant predictor
    and start out converged.
    """
    config = DntConfig() if config is None else config
    m = blackbox.m
    if config.tree_depth > m:
        raise ValueError(f"tree depth {config.tree_depth} exceeds the input dimension {m}")
    sampler = SamplingStrategy(config.strategy, [tuple(r) for r in blackbox.sampling_ranges], config.seed)
    X = sampler.uniform(config.seed_count)
    y = blackbox.query_batch(X)
    # compressed targets keep small-valued modes from being drowned out by large ones
    ty = np.arcsinh(y) if config.target_transform == "asinh" else y
    tree = regtree.fit(X, ty, config.tree_depth, config.min_leaf)
    if tree.leaf_count == 1:
        log.warning("seed data gave a single-leaf tree")
    flagged = FlaggedTrainingSet(m)
    leaves = tree.apply(X)
    idx = flagged.append(X, y, leaves, flag=leaves)
    paths = tree.paths()
    slots = []
    for leaf_id in range(tree.leaf_count):
        s = _new_slot(leaf_id, [leaf_id], paths[leaf_id], sampler.ranges, config, m)
        rows = idx[leaves == leaf_id]
        s.rows = rows.tolist()
        s.samples_consumed = rows.size
        if rows.size < config.min_leaf:
            s.network = None
            s.constant = float(np.mean(y[rows])) if rows.size else float(np.mean(y))
            s.active = False
        else:
            s.fit_normalization(y[rows])
            s.initial_loss = s.normalized_loss(X[rows], y[rows])
        slots.append(s)
    return DntClone(tree, slots, sampler, config, flagged)


def _allocate(losses: np.ndarray, n: int) -> np.ndarray:
    """Split n draws over slots proportionally to loss, at least one each."""
    k = losses.size
    counts = np.ones(k, dtype=np.int64)
    spare = n - k
    if spare <= 0:
        return counts
    w = np.where(np.isfinite(losses), np.maximum(losses, 0.0), 0.0)
    if not np.isfinite(losses).all():
        w = (~np.isfinite(losses)).astype(np.float64)
    w = np.ones(k) if w.sum() <= 0 else w / w.sum()
    share = w * spare
    base = np.floor(share).astype(np.int64)
    rest = spare - base.sum()
    # largest remainders first, lower slot index on ties
    order = np.lexsort((np.arange(k), -(share - base)))
    base[order[:rest]] += 1
    return counts + base


def generate_batch(clone: DntClone, batch_size: int, strategy: Optional[str] = None):
    """Inputs for the next query round and the slot each was drawn for (-1 for uniform draws)."""
    kind = strategy or clone.sampler.kind
    active = [s for s in clone.slots if s.active]
    if not active:
        raise TrainingFinished("all slots have converged")
    if kind == "uniform":
        return clone.sampler.uniform(batch_size), np.full(batch_size, UNASSIGNED)
    counts = _allocate(np.array([s.smoothed_loss for s in active]), batch_size)
    parts, owner = [], []
    for s, c in zip(active, counts):
        parts.append(s.box.sample(clone.sampler.rng, int(c)))
        owner.append(np.full(c, s.slot_id))
    return np.vstack(parts), np.concatenate(owner)


def _train_slot(clone: DntClone, slot: Slot, steps: Optional[int] = None) -> int:
    """Replay the slot's rows for one training call; returns the optimizer steps taken."""
    cfg = clone.config.train
    if steps is not None:
        cfg = dataclasses.replace(cfg, steps_per_call=steps)
    idx = np.asarray(slot.rows, dtype=np.int64)
    if idx.size == 0:
        return 0
    X, y = clone.flagged.X[idx], clone.flagged.y[idx]
    train_batch(slot.network, slot.scale_x(X), slot.scale_y(y), cfg, slot.optimizer, slot.rng)
    return cfg.steps_per_call


def _query(clone: DntClone, blackbox: BlackBox, X):
    try:
        return blackbox.query_batch(X), None
    except BudgetExhausted as exc:
        return exc.partial, exc


def train_iteration(clone: DntClone, blackbox: BlackBox, batch_size: Optional[int] = None,
                    error: Optional[float] = None, baseline: bool = False) -> dict:
    """One round of the loss-gated loop; returns the report row.

    With ``baseline`` the batch is drawn uniformly, no slot is deactivated and
    every network slot trains each round.
    """
    B = clone.config.batch_size if batch_size is None else batch_size
    error = clone.config.error if error is None else error
    t0 = time.perf_counter()
    X, _ = generate_batch(clone, B, "uniform" if baseline else None)
    y, fault = _query(clone, blackbox, X)
    X = X[: y.size]
    leaves = clone.tree.apply(X)
    owner = clone.slot_of_leaf[leaves]
    idx = clone.flagged.append(X, y, leaves)

    to_train = []
    for s in clone.slots:
        if s.network is None or not s.active:
            continue
        mine = idx[owner == s.slot_id]
        if mine.size:
            s.widen_normalization(clone.flagged.y[mine])
            s.loss_history.append(s.normalized_loss(clone.flagged.X[mine], clone.flagged.y[mine]))
            s.loss_counts.append(int(mine.size))
        clone.flagged.set_flag(mine, s.slot_id)
        s.rows.extend(mine.tolist())
        s.samples_consumed += mine.size
        if not baseline and s.converged(error):
            s.active = False
        else:
            to_train.append(s)

    threads = max(1, clone.config.threads)
    if threads > 1 and len(to_train) > 1:
        with ThreadPoolExecutor(threads) as pool:
            work = sum(pool.map(lambda s: _train_slot(clone, s), to_train))
    else:
        work = sum(_train_slot(clone, s) for s in to_train)

    clone.iterations += 1
    losses = [s.smoothed_loss for s in clone.slots if s.network is not None]
    finite = [v for v in losses if np.isfinite(v)]
    row = {
        "iteration": clone.iterations,
        "active_fraction": clone.active_fraction,
        "n_active": sum(s.active for s in clone.slots),
        "batch_size": int(y.size),
        "batch_work": int(work),
        "cumulative_work": 0,
        "queries_used": blackbox.ledger.queries_used,
        "mean_loss": float(np.mean(finite)) if finite else float("nan"),
        "max_loss": float(np.max(finite)) if finite else float("nan"),
        "slot_loss": [s.smoothed_loss if np.isfinite(s.smoothed_loss) else None for s in clone.slots],
        "wall_time": time.perf_counter() - t0,
    }
    if fault is not None:
        raise fault
    return row


def _run(clone, blackbox, max_iters, batch_size, error, baseline) -> TrainReport:
    report = TrainReport(meta={
        "variant": "baseline" if baseline else "active",
        "slots": len(clone.slots),
        "leaves": clone.tree.leaf_count,
        "single_leaf": clone.tree.leaf_count == 1,
        "batch_size": batch_size or clone.config.batch_size,
        "error": clone.config.error if error is None else error,
    })
    cumulative = 0
    for _ in range(max_iters):
        if not baseline and not any(s.active for s in clone.slots):
            break
        try:
            row = train_iteration(clone, blackbox, batch_size, error, baseline)
        except BudgetExhausted as exc:
            report.meta["stopped"] = "budget exhausted"
            exc.report = report  # rows completed before the fault
            raise
        cumulative += row["batch_work"]
        row["cumulative_work"] = cumulative
        report.rows.append(row)
    return report


def train(clone: DntClone, blackbox: BlackBox, max_iters: int, batch_size: Optional[int] = None,
          error: Optional[float] = None) -> TrainReport:
    """Repeat train_iteration until every slot converged or ``max_iters`` rounds ran."""
    return _run(clone, blackbox, max_iters, batch_size, error, baseline=False)


def baseline_train(clone: DntClone, blackbox: BlackBox, max_iters: int,
                   batch_size: Optional[int] = None) -> TrainReport:
    """Same loop with uniform sampling and no deactivation: the comparison baseline."""
    return _run(clone, blackbox, max_iters, batch_size, None, baseline=True)


# simplification --------------------------------------------------------


@dataclass
class SimplifyConfig:
    depth: int
    rank_training: Optional[Sequence[int]] = None  # per attachment node; default 2 each
    train_steps: int = 6000

    def rank_for(self, j: int) -> int:
        if self.rank_training is None:
            return 2
        return self.rank_training[j] if j < len(self.rank_training) else self.rank_training[-1]


def simplify(clone: DntClone, config: SimplifyConfig) -> tuple[DntClone, dict]:
    """Merge the networks below each depth-``config.depth`` node into one.

    Only rows already in the flagged set are used; the victim is never queried.
    Returns the new clone and a summary with per-node sample counts.
    """
    n1 = config.depth
    if not 1 <= n1 < clone.tree.depth:
        raise ValueError(f"simplify depth must satisfy 1 <= n1 < tree depth ({clone.tree.depth}), got {n1}")
    if clone.attach_depth is not None and n1 >= clone.attach_depth:
        raise ValueError("clone is already attached at or above that depth")
    fl = clone.flagged
    if len(fl) == 0:
        raise ValueError("flagged training set is empty")
    for r in config.rank_training or []:
        if r < 1:
            raise ValueError("rankTraining entries must be at least 1")

    attachments = clone.tree.attachments(n1)
    leaves_now = clone.tree.apply(fl.X)
    new_flag = fl.flag.copy()
    slots, summary = [], []
    for j, (path, leaf_ids) in enumerate(attachments):
        children = sorted({int(clone.slot_of_leaf[k]) for k in leaf_ids})
        rows = np.flatnonzero(np.isin(leaves_now, leaf_ids))
        s = _new_slot(j, leaf_ids, path, clone.sampler.ranges, clone.config, clone.m)
        s.active = False
        entry = {"node": j, "children": children, "rows": int(rows.size)}
        if rows.size == 0:
            s.network = None
            s.constant = float(np.mean([clone.slots[c].predict(s.box.lo)[0] for c in children]))
            s.untrained = True
            entry["untrained"] = True
            slots.append(s)
            summary.append(entry)
            continue
        X, y = fl.X[rows], fl.y[rows]
        err = np.stack([np.abs(clone.slots[c].predict(X) - y) for c in children])
        winner = np.asarray(children)[np.argmin(err, axis=0)]
        ids, counts = np.unique(winner, return_counts=True)
        rank = config.rank_for(j)
        keep = ids[np.lexsort((ids, -counts))][:rank]
        chosen = rows[np.isin(winner, keep)]
        entry.update(kept=keep.tolist(), trained_rows=int(chosen.size))
        s.rows = chosen.tolist()
        s.samples_consumed = int(chosen.size)
        if len(children) == 1 and clone.slots[children[0]].network is None:
            s.network = None
            s.constant = clone.slots[children[0]].constant
        else:
            s.fit_normalization(fl.y[chosen])
            _train_slot(clone, s, config.train_steps)
            s.initial_loss = s.normalized_loss(fl.X[chosen], fl.y[chosen])
        new_flag[rows[new_flag[rows] != UNASSIGNED]] = j
        slots.append(s)
        summary.append(entry)

    flagged = copy.deepcopy(fl)
    flagged.set_flag(slice(0, len(flagged)), new_flag)
    out = DntClone(clone.tree, slots, clone.sampler, clone.config, flagged, attach_depth=n1)
    out.iterations = clone.iterations
    out.rank_training = [config.rank_for(j) for j in range(len(attachments))]
    return out, {"slots_before": len(clone.slots), "slots_after": len(slots), "nodes": summary}


# evaluation ------------------------------------------------------------

SWEEP_PINS = {1: 9, 2: 11, 3: 12, 4: 11, 5: 14}


def sweep_inputs(ranges, mode_id: int, sweep_pin: int, grid, power_pin=0, ground_pin=3) -> np.ndarray:
    """Chip inputs with power and enables on, only ``mode_id``'s select pin high,
    binary inputs low, analog pins at mid-range and ``sweep_pin`` following ``grid``."""
    if not 1 <= mode_id <= 5:
        raise ValueError("mode must be in 1..5")
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    x = lo.copy()
    x[power_pin] = hi[power_pin]
    x[ground_pin] = lo[ground_pin]
    x[1] = hi[1]
    x[2] = hi[2]
    x[3 + mode_id] = hi[3 + mode_id]
    x[9:13] = (lo[9:13] + hi[9:13]) / 2.0
    grid = np.asarray(grid, dtype=np.float64)
    X = np.tile(x, (grid.size, 1))
    X[:, sweep_pin] = grid
    return X


def evaluate_sweep(clone: DntClone, blackbox: BlackBox, mode_id: int, sweep_pin: Optional[int] = None,
                   grid=None) -> dict:
    sweep_pin = SWEEP_PINS[mode_id] if sweep_pin is None else sweep_pin
    lo, hi = blackbox.safe_ranges[sweep_pin]
    grid = np.linspace(lo, hi, 101) if grid is None else np.asarray(grid, dtype=np.float64)
    if grid.min() < lo or grid.max() > hi:
        raise ValueError(f"grid leaves the safe range [{lo}, {hi}] of pin {sweep_pin}")
    X = sweep_inputs(blackbox.sampling_ranges, mode_id, sweep_pin, grid)
    target = blackbox.query_batch(X)
    pred = clone.predict(X)
    rmse = float(np.sqrt(np.mean((pred - target) ** 2)))
    span = float(target.max() - target.min())
    return {
        "mode": mode_id,
        "pin": sweep_pin,
        "input": grid,
        "target": target,
        "prediction": pred,
        "rmse": rmse,
        "range": span,
        "rel_rmse": rmse / span if span > 0 else float("nan"),
    }
