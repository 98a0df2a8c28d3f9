"""
Cluster bookkeeping shared by every backend

ClusterSet is a union-find over integer elements with union by rank and path
halving. The GFF backend uses lattice vertices as elements, the loop-soup
backends use loops. Component labels are canonical: clusters are numbered in
order of their smallest element, so equal partitions give equal label arrays.
"""

import logging
from typing import List, Dict, Any, Iterable, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)


class ClusterSet:
    """
    A partition of range(n) built by unions.

    Attributes:
        n: Number of elements
        annotations: Free-form per-partition metadata, such as cluster signs
    """

    def __init__(self, n: int):
        """
        Initialize with every element in its own cluster.

        Args:
            n: Number of elements
        """
        self.n = int(n)
        self._parent = np.arange(self.n, dtype=np.int64)
        self._rank = np.zeros(self.n, dtype=np.int8)
        self.n_clusters = self.n
        self.annotations: Dict[str, Any] = {}

    def __repr__(self):
        return f"ClusterSet: {self.n} elements in {self.n_clusters} clusters"

    def __len__(self):
        return self.n

    @classmethod
    def from_pairs(cls, n: int, pairs: np.ndarray) -> "ClusterSet":
        """
        Build the partition generated by a list of connected pairs in one pass.

        Args:
            n: Number of elements
            pairs: Integer array of shape (k, 2)

        Returns:
            ClusterSet whose components are the graph components
        """
        clusters = cls(n)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if n == 0 or pairs.shape[0] == 0:
            return clusters
        graph = sp.coo_matrix(
            (np.ones(pairs.shape[0], dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
        )
        n_components, labels = connected_components(graph, directed=False)
        # Point every element at the smallest member of its component
        roots = np.full(n_components, n, dtype=np.int64)
        np.minimum.at(roots, labels, np.arange(n))
        clusters._parent = roots[labels]
        clusters._rank[roots] = 1
        clusters.n_clusters = int(n_components)
        return clusters

    def find(self, a: int) -> int:
        """Return the representative of a's cluster."""
        parent = self._parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return int(a)

    def union(self, a: int, b: int) -> bool:
        """
        Merge the clusters containing a and b.

        Returns:
            True if two distinct clusters were merged
        """
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self._rank[ra] < self._rank[rb]:
            ra, rb = rb, ra
        self._parent[rb] = ra
        if self._rank[ra] == self._rank[rb]:
            self._rank[ra] += 1
        self.n_clusters -= 1
        return True

    def union_many(self, pairs: Iterable[Tuple[int, int]]) -> None:
        for a, b in pairs:
            self.union(int(a), int(b))

    def connected(self, a: int, b: int) -> bool:
        return self.find(a) == self.find(b)

    def roots(self) -> np.ndarray:
        """Fully compressed representative of every element."""
        parent = self._parent
        while True:
            grand = parent[parent]
            if np.array_equal(grand, parent):
                return parent.copy()
            parent[:] = grand

    def labels(self) -> np.ndarray:
        """
        Canonical component label per element.

        Returns:
            Labels 0..k-1 numbered by first appearance
        """
        if self.n == 0:
            return np.zeros(0, dtype=np.int64)
        _, first, inverse = np.unique(self.roots(), return_index=True, return_inverse=True)
        rank = np.empty(first.size, dtype=np.int64)
        rank[np.argsort(first)] = np.arange(first.size)
        return rank[inverse.ravel()]

    def components(self) -> List[np.ndarray]:
        """Element arrays of every cluster, ordered by smallest element."""
        labels = self.labels()
        if labels.size == 0:
            return []
        order = np.argsort(labels, kind="stable")
        splits = np.flatnonzero(np.diff(labels[order])) + 1
        return np.split(order, splits)

    def component_of(self, a: int) -> np.ndarray:
        root = self.find(a)
        return np.flatnonzero(self.roots() == root)

    def summarize(self, coords: Optional[np.ndarray] = None) -> List[Dict[str, Any]]:
        """
        Per-cluster volume and, given coordinates, sup-norm diameter.

        Args:
            coords: Optional (n, d) coordinates of the elements

        Returns:
            One dictionary per cluster in label order
        """
        summary = []
        for members in self.components():
            entry: Dict[str, Any] = {"volume": int(members.size), "first": int(members[0])}
            if coords is not None:
                points = np.asarray(coords)[members]
                extent = points.max(axis=0) - points.min(axis=0)
                entry["diameter"] = float(extent.max()) if extent.size else 0.0
            summary.append(entry)
        return summary

    def same_partition(self, other: "ClusterSet") -> bool:
        return self.n == other.n and np.array_equal(self.labels(), other.labels())

    def refines(self, other: "ClusterSet") -> bool:
        """
        True if every cluster of self lies inside a cluster of other.
        """
        if self.n != other.n:
            return False
        mine, theirs = self.labels(), other.labels()
        if mine.size == 0:
            return True
        # Each of my labels must map to a single label of other
        pairs = np.unique(np.stack([mine, theirs], axis=1), axis=0)
        return np.unique(pairs[:, 0]).size == pairs.shape[0]


def brute_force_partition(n: int, adjacent) -> np.ndarray:
    """
    Canonical labels of the transitive closure of a symmetric relation.

    O(n^3) Warshall closure used as the reference partition in tests.

    Args:
        n: Number of elements
        adjacent: Function (i, j) -> bool

    Returns:
        Canonical label per element, numbered by first appearance
    """
    reach = np.eye(n, dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            if adjacent(i, j):
                reach[i, j] = reach[j, i] = True
    for k in range(n):
        reach |= reach[:, k:k + 1] & reach[k:k + 1, :]
    labels = np.full(n, -1, dtype=np.int64)
    next_label = 0
    for i in range(n):
        if labels[i] < 0:
            labels[reach[i]] = next_label
            next_label += 1
    return labels
