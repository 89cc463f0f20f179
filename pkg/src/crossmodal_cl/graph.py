"""Batch-level 1-nearest-neighbour graph over image embeddings.

Each image links to its most cosine-similar other image; edges are
symmetrised and connected components are labelled with a union-find pass
(the Hoshen-Kopelman scheme). Components drive negative selection: an
anchor's negatives are every image outside its own component.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import BatchTooSmall, IndexOutOfRange
from .numcore import as_matrix, pairwise_cosine


class UnionFind:
    """Disjoint sets with path compression and union by size."""

    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, i: int) -> int:
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return True

    def labels(self) -> list[int]:
        """Dense labels numbered in order of each component's lowest node."""
        relabel: dict[int, int] = {}
        out = []
        for i in range(len(self.parent)):
            r = self.find(i)
            if r not in relabel:
                relabel[r] = len(relabel)
            out.append(relabel[r])
        return out


@dataclass(frozen=True)
class NeighborGraph:
    num_nodes: int
    edges: frozenset
    component_of: tuple
    components: tuple = field(repr=False)

    @property
    def num_components(self) -> int:
        return len(self.components)

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "NeighborGraph":
        norm = frozenset((min(i, j), max(i, j)) for i, j in edges if i != j)
        uf = UnionFind(num_nodes)
        for i, j in sorted(norm):
            uf.union(i, j)
        labels = uf.labels()
        return cls._assemble(num_nodes, norm, labels)

    @classmethod
    def from_components(cls, components) -> "NeighborGraph":
        """Build a graph with a prescribed partition (used for forced structures in tests).

        Each component is realised as a path so that membership is all that matters.
        """
        comps = [sorted(int(i) for i in c) for c in components]
        nodes = sorted(i for c in comps for i in c)
        n = len(nodes)
        if nodes != list(range(n)):
            raise ValueError("components must partition 0..n-1")
        edges = frozenset((c[k], c[k + 1]) for c in comps for k in range(len(c) - 1))
        return cls.from_edges(n, edges)

    @classmethod
    def _assemble(cls, num_nodes, edges, labels) -> "NeighborGraph":
        buckets: list[list[int]] = [[] for _ in range(max(labels, default=-1) + 1)]
        for node, lab in enumerate(labels):
            buckets[lab].append(node)
        return cls(
            num_nodes=num_nodes,
            edges=edges,
            component_of=tuple(labels),
            components=tuple(tuple(b) for b in buckets),
        )

    def labels_array(self) -> np.ndarray:
        return np.asarray(self.component_of, dtype=np.int64)

    def same_component_mask(self) -> np.ndarray:
        lab = self.labels_array()
        return lab[:, None] == lab[None, :]

    def _check(self, anchor: int) -> int:
        if not 0 <= anchor < self.num_nodes:
            raise IndexOutOfRange(f"anchor {anchor} outside [0, {self.num_nodes})")
        return int(anchor)

    def positives_for(self, anchor: int) -> frozenset:
        anchor = self._check(anchor)
        return frozenset(self.components[self.component_of[anchor]])

    def negatives_for(self, anchor: int) -> frozenset:
        anchor = self._check(anchor)
        own = self.component_of[anchor]
        return frozenset(i for i, c in enumerate(self.component_of) if c != own)

    def to_dict(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "edges": [list(e) for e in sorted(self.edges)],
            "components": [list(c) for c in self.components],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def nearest_neighbors(image_embeddings) -> np.ndarray:
    """Index of each row's most cosine-similar other row (lowest index on ties)."""
    x = as_matrix(image_embeddings)
    if x.shape[0] < 2:
        raise BatchTooSmall(f"graph needs at least 2 images, got {x.shape[0]}")
    sim = pairwise_cosine(x)
    np.fill_diagonal(sim, -np.inf)
    return np.argmax(sim, axis=1)


def build_knn_graph(image_embeddings) -> NeighborGraph:
    nn = nearest_neighbors(image_embeddings)
    edges = [(i, int(j)) for i, j in enumerate(nn)]
    return NeighborGraph.from_edges(len(nn), edges)


def positives_for(graph: NeighborGraph, anchor: int) -> frozenset:
    return graph.positives_for(anchor)


def negatives_for(graph: NeighborGraph, anchor: int) -> frozenset:
    return graph.negatives_for(anchor)
