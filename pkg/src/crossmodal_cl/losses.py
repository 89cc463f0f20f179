"""Supervised and cross-modal contrastive objectives with analytic gradients.

Contrastive objectives treat each QA text embedding as the anchor and images as
candidates. Similarity is ``cos(W @ text_m, image_j)`` where ``W`` is a learnable
square alignment map. Three candidate organisations are supported:

* ``vanilla``: every other image in the batch is a negative.
* ``graph_negatives``: only images outside the anchor image's connected
  component are negatives; the anchor's own pair is the single positive.
* ``multi_positive``: every image in the anchor image's component is a
  positive, averaged; the denominator spans the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, GraphBatchMismatch, InvalidConfig, LabelOutOfRange, ZeroNormVector
from .graph import NeighborGraph
from .numcore import (
    EPS_NORM,
    as_matrix,
    as_vector,
    cosine_similarity,
    masked_log_softmax,
    normalize_rows,
    normalize_rows_backward,
)

MODES = ("vanilla", "graph_negatives", "multi_positive")


@dataclass
class EmbeddingBatch:
    image: np.ndarray
    text_qa: np.ndarray

    def __post_init__(self):
        self.image = as_matrix(self.image)
        self.text_qa = as_matrix(self.text_qa)
        if self.image.shape != self.text_qa.shape:
            raise DimensionMismatch(f"image {self.image.shape} vs text {self.text_qa.shape}")
        if self.image.shape[0] < 2:
            raise DimensionMismatch("an embedding batch needs M >= 2")

    @property
    def size(self) -> int:
        return self.image.shape[0]

    @property
    def dim(self) -> int:
        return self.image.shape[1]


@dataclass
class AlignmentMap:
    weight: np.ndarray

    def __post_init__(self):
        self.weight = as_matrix(self.weight)
        if self.weight.shape[0] != self.weight.shape[1]:
            raise DimensionMismatch(f"alignment map must be square, got {self.weight.shape}")

    @classmethod
    def identity(cls, dim: int) -> "AlignmentMap":
        return cls(np.eye(dim))


@dataclass
class ContrastiveConfig:
    tau: float = 1.0
    lam: float = 0.5
    mode: str = "multi_positive"

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidConfig(f"tau must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise InvalidConfig(f"lambda must be non-negative, got {self.lam}")
        if self.mode not in MODES:
            raise InvalidConfig(f"unknown contrastive mode {self.mode!r}")


@dataclass
class LossReport:
    """A scalar loss and its gradients; fields a loss does not touch stay None."""

    value: float
    grad_image: np.ndarray | None = None
    grad_text: np.ndarray | None = None
    grad_alignment: np.ndarray | None = None
    grad_logits: np.ndarray | None = None
    grad_params: dict | None = None
    per_anchor: np.ndarray | None = field(default=None, repr=False)

    GRAD_FIELDS = ("grad_image", "grad_text", "grad_alignment", "grad_logits")

    def scaled(self, factor: float) -> "LossReport":
        out = LossReport(self.value * factor)
        for name in self.GRAD_FIELDS:
            g = getattr(self, name)
            if g is not None:
                setattr(out, name, g * factor)
        if self.grad_params is not None:
            out.grad_params = {k: v * factor for k, v in self.grad_params.items()}
        return out


def similarity_h(text_row, image_row, alignment: AlignmentMap) -> float:
    projected = alignment.weight @ as_vector(text_row)
    if np.linalg.norm(projected) <= EPS_NORM:
        raise ZeroNormVector("projected text vector has zero norm")
    return cosine_similarity(projected, image_row)


def similarity_matrix(batch: EmbeddingBatch, alignment: AlignmentMap) -> np.ndarray:
    """``S[m, j] = h(text_m, image_j)`` for every anchor/candidate pair."""
    return _similarity_forward(batch, alignment)[0]


def _similarity_forward(batch, alignment):
    if alignment.weight.shape[1] != batch.dim:
        raise DimensionMismatch(f"alignment {alignment.weight.shape} vs embedding dim {batch.dim}")
    projected = batch.text_qa @ alignment.weight.T
    p_unit, p_norm = normalize_rows(projected)
    v_unit, v_norm = normalize_rows(batch.image)
    sim = p_unit @ v_unit.T
    return sim, (p_unit, p_norm, v_unit, v_norm)


def _similarity_backward(batch, alignment, cache, d_sim) -> LossReport:
    p_unit, p_norm, v_unit, v_norm = cache
    d_p_unit = d_sim @ v_unit
    d_v_unit = d_sim.T @ p_unit
    d_projected = normalize_rows_backward(p_unit, p_norm, d_p_unit)
    d_image = normalize_rows_backward(v_unit, v_norm, d_v_unit)
    d_text = d_projected @ alignment.weight
    d_weight = d_projected.T @ batch.text_qa
    return LossReport(0.0, grad_image=d_image, grad_text=d_text, grad_alignment=d_weight)


def supervised_ce(logits, labels) -> LossReport:
    """Mean cross-entropy of ``logits`` (M x K) against integer ``labels``."""
    z = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).ravel()
    m, k = z.shape
    if y.shape[0] != m:
        raise DimensionMismatch(f"{y.shape[0]} labels for {m} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    logp = masked_log_softmax(z)
    rows = np.arange(m)
    value = -float(np.mean(logp[rows, y]))
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= m
    return LossReport(value, grad_logits=grad, per_anchor=-logp[rows, y])


def _check_graph(batch, graph):
    if graph.num_nodes != batch.size:
        raise GraphBatchMismatch(f"graph has {graph.num_nodes} nodes, batch has {batch.size} rows")


def _contrastive(batch, alignment, tau, candidate_mask, positive_weight, active) -> LossReport:
    """Shared InfoNCE machinery.

    candidate_mask[m, j]: image j enters anchor m's denominator.
    positive_weight[m, j]: weight of log-prob (m, j) in anchor m's numerator (rows sum to 1).
    active[m]: anchor contributes; inactive anchors add zero loss and zero gradient.
    """
    if not tau > 0:
        raise InvalidConfig(f"tau must be positive, got {tau}")
    m = batch.size
    sim, cache = _similarity_forward(batch, alignment)
    logp = masked_log_softmax(sim / tau, candidate_mask)
    logp_pos = np.where(positive_weight > 0, logp, 0.0)
    per_anchor = -np.sum(positive_weight * logp_pos, axis=1)
    per_anchor = np.where(active, per_anchor, 0.0)
    value = float(np.sum(per_anchor) / m)

    prob = np.where(candidate_mask, np.exp(logp), 0.0)
    d_logits = (prob - positive_weight) / m
    d_logits[~active] = 0.0
    report = _similarity_backward(batch, alignment, cache, d_logits / tau)
    report.value = value
    report.per_anchor = per_anchor
    return report


def infonce_vanilla(batch: EmbeddingBatch, alignment: AlignmentMap, tau: float = 1.0) -> LossReport:
    m = batch.size
    mask = np.ones((m, m), dtype=bool)
    return _contrastive(batch, alignment, tau, mask, np.eye(m), np.ones(m, dtype=bool))


def infonce_graph(batch: EmbeddingBatch, alignment: AlignmentMap, tau: float, graph: NeighborGraph) -> LossReport:
    """InfoNCE whose negatives are restricted to other components.

    An anchor whose component covers the whole batch has no negatives and
    contributes exactly zero.
    """
    _check_graph(batch, graph)
    m = batch.size
    eye = np.eye(m, dtype=bool)
    mask = ~graph.same_component_mask() | eye
    active = mask.sum(axis=1) > 1
    return _contrastive(batch, alignment, tau, mask, eye.astype(np.float64), active)


def infonce_multipos(batch: EmbeddingBatch, alignment: AlignmentMap, tau: float, graph: NeighborGraph) -> LossReport:
    _check_graph(batch, graph)
    m = batch.size
    same = graph.same_component_mask()
    weights = same / same.sum(axis=1, keepdims=True)
    mask = np.ones((m, m), dtype=bool)
    return _contrastive(batch, alignment, tau, mask, weights, np.ones(m, dtype=bool))


def contrastive_loss(batch, alignment, config: ContrastiveConfig, graph: NeighborGraph | None = None) -> LossReport:
    if config.mode == "vanilla":
        return infonce_vanilla(batch, alignment, config.tau)
    if graph is None:
        raise GraphBatchMismatch(f"mode {config.mode!r} needs a neighbour graph")
    if config.mode == "graph_negatives":
        return infonce_graph(batch, alignment, config.tau, graph)
    return infonce_multipos(batch, alignment, config.tau, graph)


def _add(a, b, scale):
    if b is None:
        return a
    if a is None:
        return b * scale
    return a + b * scale


def joint_loss(sup: LossReport, cl: LossReport, lam: float) -> LossReport:
    """``L = L_sup + lam * L_cl`` with gradients combined field by field."""
    if not lam >= 0:
        raise InvalidConfig(f"lambda must be non-negative, got {lam}")
    out = LossReport(sup.value + lam * cl.value)
    for name in LossReport.GRAD_FIELDS:
        setattr(out, name, _add(getattr(sup, name), getattr(cl, name), lam))
    # keep the supervised arrays untouched when lam adds nothing
    for name in LossReport.GRAD_FIELDS:
        g = getattr(out, name)
        if g is not None and g is getattr(sup, name):
            setattr(out, name, g.copy())
    if sup.grad_params is not None or cl.grad_params is not None:
        merged = {k: v.copy() for k, v in (sup.grad_params or {}).items()}
        for k, v in (cl.grad_params or {}).items():
            merged[k] = _add(merged.get(k), v, lam)
        out.grad_params = merged
    return out
