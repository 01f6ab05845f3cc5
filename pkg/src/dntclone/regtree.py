"""CART regression tree used to tell the victim's operating modes apart.

Splits minimise the size-weighted child variance. Routing sends ``x[j] <= t``
to the left child. Leaves are numbered 0..l-1 from left to right.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

# relative slack under which two split costs count as tied
TIE_RTOL = 1e-12


class EmptyBoxError(ValueError):
    pass


def impurity(targets) -> float:
    """Mean squared deviation from the mean (population variance)."""
    y = np.asarray(targets, dtype=np.float64)
    if y.size == 0:
        raise ValueError("impurity of an empty node is undefined")
    return float(np.mean((y - y.mean()) ** 2))


def split_cost(left_targets, right_targets) -> float:
    nl, nr = len(left_targets), len(right_targets)
    if nl == 0 or nr == 0:
        raise ValueError("both sides of a split must be non-empty")
    n = nl + nr
    return nl / n * impurity(left_targets) + nr / n * impurity(right_targets)


class SplitCandidate(NamedTuple):
    feature: int
    threshold: float


class Constraint(NamedTuple):
    feature: int
    threshold: float
    side: str  # "<=" or ">"

    def holds(self, x) -> bool:
        v = x[self.feature]
        return v <= self.threshold if self.side == "<=" else v > self.threshold


PathConstraint = list  # list[Constraint], root first


def _midpoint(a: float, b: float) -> float:
    t = (a + b) / 2.0
    # adjacent floats: keep the threshold strictly below b so b routes right
    return a if t >= b else t


def _scan_costs(x: np.ndarray, y: np.ndarray, min_leaf: int = 1):
    """All (threshold, cost) pairs for one feature, thresholds ascending."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = ys.size
    cut = np.flatnonzero(xs[1:] > xs[:-1])  # split after position cut
    cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
    if cut.size == 0:
        return np.empty(0), np.empty(0)
    # centre targets to keep the running sums well conditioned
    yc = ys - ys.mean()
    s1 = np.cumsum(yc)
    s2 = np.cumsum(yc * yc)
    nl = cut + 1.0
    nr = n - nl
    sl, ql = s1[cut], s2[cut]
    sr, qr = s1[-1] - sl, s2[-1] - ql
    sse = (ql - sl * sl / nl) + (qr - sr * sr / nr)
    costs = np.maximum(sse, 0.0) / n
    thresholds = np.array([_midpoint(xs[c], xs[c + 1]) for c in cut])
    return thresholds, costs


def best_split(X, y, min_leaf: int = 1) -> Optional[SplitCandidate]:
    """Exhaustive search over midpoints of every feature.

    Only splits leaving at least ``min_leaf`` rows on each side are considered.
    Ties (costs within ``TIE_RTOL`` of the minimum) go to the lowest feature
    index, then the smallest threshold. Returns None when the targets are
    constant or no feature takes two distinct values.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.size < 2 or np.all(y == y[0]):
        return None
    cands = []
    for j in range(X.shape[1]):
        th, cost = _scan_costs(X[:, j], y, min_leaf)
        cands.extend((c, j, t) for t, c in zip(th.tolist(), cost.tolist()))
    if not cands:
        return None
    lowest = min(c for c, _, _ in cands)
    slack = TIE_RTOL * max(abs(lowest), impurity(y)) + 1e-300
    j, t = min((j, t) for c, j, t in cands if c <= lowest + slack)
    return SplitCandidate(j, t)


@dataclass
class TreeNode:
    depth: int
    count: int
    mean: float
    split: Optional[SplitCandidate] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    leaf_id: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.split is None

    def leaves(self) -> Iterator["TreeNode"]:
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf_id": self.leaf_id, "mean": self.mean, "count": self.count, "depth": self.depth}
        return {
            "feature": self.split.feature,
            "threshold": self.split.threshold,
            "mean": self.mean,
            "count": self.count,
            "depth": self.depth,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "feature" not in d:
            return cls(d["depth"], d["count"], d["mean"], leaf_id=d["leaf_id"])
        return cls(
            d["depth"],
            d["count"],
            d["mean"],
            split=SplitCandidate(d["feature"], d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass
class RegressionTree:
    root: TreeNode
    max_depth: int
    n_features: int
    min_leaf: int = 5
    _leaves: list = field(init=False, repr=False)

    def __post_init__(self):
        self._leaves = list(self.root.leaves())

    @property
    def leaf_count(self) -> int:
        return len(self._leaves)

    @property
    def depth(self) -> int:
        return max(leaf.depth for leaf in self._leaves)

    def leaf(self, leaf_id: int) -> TreeNode:
        return self._leaves[leaf_id]

    def _check_dim(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n_features:
            raise ValueError(f"tree expects {self.n_features} features, got {X.shape[-1]}")
        return X

    def leaf_of(self, x) -> int:
        x = self._check_dim(x)
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.split.feature] <= node.split.threshold else node.right
        return node.leaf_id

    def apply(self, X) -> np.ndarray:
        """Leaf id of every row of ``X``."""
        X = np.atleast_2d(self._check_dim(X))
        out = np.empty(X.shape[0], dtype=np.int64)
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.leaf_id
                continue
            go_left = X[idx, node.split.feature] <= node.split.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def predict(self, X) -> np.ndarray | float:
        X = self._check_dim(X)
        means = np.array([leaf.mean for leaf in self._leaves])
        if X.ndim == 1:
            return float(means[self.leaf_of(X)])
        return means[self.apply(X)]

    def paths(self) -> dict[int, PathConstraint]:
        """Root-to-leaf decisions for every leaf, found depth first."""
        out: dict[int, PathConstraint] = {}

        def visit(node, path):
            if node.is_leaf:
                out[node.leaf_id] = list(path)
                return
            j, t = node.split
            visit(node.left, path + [Constraint(j, t, "<=")])
            visit(node.right, path + [Constraint(j, t, ">")])

        visit(self.root, [])
        return out

    def attachments(self, depth: int) -> list[tuple[PathConstraint, list[int]]]:
        """Nodes at ``depth`` (or shallower leaves) with their descendant leaf ids, left to right."""
        out = []

        def visit(node, path):
            if node.is_leaf or node.depth == depth:
                out.append((list(path), [leaf.leaf_id for leaf in node.leaves()]))
                return
            j, t = node.split
            visit(node.left, path + [Constraint(j, t, "<=")])
            visit(node.right, path + [Constraint(j, t, ">")])

        visit(self.root, [])
        return out

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "n_features": self.n_features,
            "min_leaf": self.min_leaf,
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(TreeNode.from_dict(d["root"]), d["max_depth"], d["n_features"], d.get("min_leaf", 5))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RegressionTree":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit(X, y, max_depth: int, min_leaf: int = 5) -> RegressionTree:
    """Grow a tree by recursive best splits.

    A node stays a leaf at ``max_depth``, when it holds ``min_leaf`` rows or
    fewer, when its targets are pure, or when no split leaves ``min_leaf``
    rows on both sides.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cannot fit a tree on an empty dataset")
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree on the number of rows")
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")
    if max_depth > X.shape[1]:
        raise ValueError(f"max_depth {max_depth} exceeds the feature count {X.shape[1]}")

    def grow(idx, depth):
        ys = y[idx]
        node = TreeNode(depth=depth, count=int(idx.size), mean=float(ys.mean()))
        if depth >= max_depth or idx.size <= min_leaf:
            return node
        split = best_split(X[idx], ys, min_leaf)
        if split is None:
            return node
        go_left = X[idx, split.feature] <= split.threshold
        node.split = split
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    root = grow(np.arange(y.size), 0)
    for k, leaf in enumerate(root.leaves()):
        leaf.leaf_id = k
    return RegressionTree(root, max_depth, X.shape[1], min_leaf)


@dataclass
class Box:
    """Axis-aligned sampling region; ``lo_open[j]`` marks a strict lower bound."""

    lo: np.ndarray
    hi: np.ndarray
    lo_open: np.ndarray

    @property
    def intervals(self) -> list[tuple[float, float]]:
        return list(zip(self.lo.tolist(), self.hi.tolist()))

    def contains(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        above = np.where(self.lo_open, X > self.lo, X >= self.lo)
        return (above & (X <= self.hi)).all(axis=1)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        X = np.minimum(self.lo + rng.random((n, self.lo.size)) * (self.hi - self.lo), self.hi)
        # open lower bounds: nudge exact hits inside
        hit = self.lo_open & (X <= self.lo)
        if hit.any():
            X = np.where(hit, np.nextafter(self.lo, np.inf), X)
        return X


def leaf_box(path: Sequence[Constraint], global_ranges: Sequence[tuple[float, float]]) -> Box:
    lo = np.array([r[0] for r in global_ranges], dtype=np.float64)
    hi = np.array([r[1] for r in global_ranges], dtype=np.float64)
    lo_open = np.zeros(lo.size, dtype=bool)
    for c in path:
        if c.side == "<=":
            hi[c.feature] = min(hi[c.feature], c.threshold)
        elif c.threshold >= lo[c.feature]:
            lo[c.feature] = c.threshold
            lo_open[c.feature] = True
    empty = (lo > hi) | (lo_open & (lo >= hi))
    if empty.any():
        raise EmptyBoxError(f"path leaves no room on feature(s) {np.flatnonzero(empty).tolist()}")
    return Box(lo, hi, lo_open)
