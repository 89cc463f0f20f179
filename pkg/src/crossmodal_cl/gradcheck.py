"""Central finite-difference checks of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import build_knn_graph
from .losses import (
    AlignmentMap,
    EmbeddingBatch,
    infonce_graph,
    infonce_multipos,
    infonce_vanilla,
    joint_loss,
    supervised_ce,
)
from .model import ModelSpec, init_params
from .data_synth import Dataset
from .trainer import CL_MODES, TrainConfig, coarse_triplet_cl, compute_step

STEP = 1e-5
RTOL = 1e-5
ATOL = 1e-7

OBJECTIVES = ("supervised_ce", "infonce_vanilla", "infonce_graph", "infonce_multipos", "joint", "coarse_triplet", "full_model")


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def relative_error(analytic, numeric, rtol: float = RTOL, atol: float = ATOL) -> float:
    """Largest ``|a - n| / max(|a|, |n|, atol / rtol)`` over coordinates.

    A value <= rtol means every coordinate agrees to ``rtol`` relative or
    ``atol`` absolute.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), atol / rtol)
    return float(np.max(np.abs(a - n) / denom))


def _embedding_instance(rng, m=None, d=None):
    m = m or int(rng.integers(2, 17))
    d = d or int(rng.integers(2, 9))
    batch = EmbeddingBatch(rng.standard_normal((m, d)), rng.standard_normal((m, d)))
    amap = AlignmentMap(np.eye(d) + 0.3 * rng.standard_normal((d, d)))
    tau = float(rng.uniform(0.3, 1.5))
    return batch, amap, tau


def _check_contrastive(rng, which) -> float:
    batch, amap, tau = _embedding_instance(rng)
    graph = build_knn_graph(batch.image)

    def loss():
        if which == "infonce_vanilla":
            return infonce_vanilla(batch, amap, tau)
        if which == "infonce_graph":
            return infonce_graph(batch, amap, tau, graph)
        return infonce_multipos(batch, amap, tau, graph)

    rep = loss()
    errs = [
        relative_error(rep.grad_image, numeric_grad(lambda: loss().value, batch.image)),
        relative_error(rep.grad_text, numeric_grad(lambda: loss().value, batch.text_qa)),
        relative_error(rep.grad_alignment, numeric_grad(lambda: loss().value, amap.weight)),
    ]
    return max(errs)


def _check_ce(rng) -> float:
    m, k = int(rng.integers(2, 17)), int(rng.integers(2, 9))
    logits = 2.0 * rng.standard_normal((m, k))
    labels = rng.integers(0, k, size=m)
    rep = supervised_ce(logits, labels)
    return relative_error(rep.grad_logits, numeric_grad(lambda: supervised_ce(logits, labels).value, logits))


def _check_joint(rng) -> float:
    batch, amap, tau = _embedding_instance(rng)
    k = int(rng.integers(2, 9))
    logits = rng.standard_normal((batch.size, k))
    labels = rng.integers(0, k, size=batch.size)
    graph = build_knn_graph(batch.image)
    lam = float(rng.uniform(0.0, 1.0))

    def loss():
        return joint_loss(supervised_ce(logits, labels), infonce_multipos(batch, amap, tau, graph), lam)

    rep = loss()
    f = lambda: loss().value  # noqa: E731
    return max(
        relative_error(rep.grad_logits, numeric_grad(f, logits)),
        relative_error(rep.grad_image, numeric_grad(f, batch.image)),
        relative_error(rep.grad_text, numeric_grad(f, batch.text_qa)),
        relative_error(rep.grad_alignment, numeric_grad(f, amap.weight)),
    )


def _small_model(rng, d=None):
    d = d or int(rng.integers(2, 9))
    spec = ModelSpec(d_img=3, d_question=3, d_answer=2, hidden=4, embed=d, num_answers=3)
    model = init_params(spec, int(rng.integers(0, 2**31)))
    for name, arr in model.params.items():
        if arr.ndim == 1:
            arr[:] = 0.1 * rng.standard_normal(arr.shape)
    model.params["align.W"] += 0.2 * rng.standard_normal(model.params["align.W"].shape)
    return model


def _check_coarse(rng) -> float:
    m = int(rng.integers(2, 17))
    model = _small_model(rng)
    d = model.spec.embed
    v_img = rng.standard_normal((m, d))
    v_qa = rng.standard_normal((m, d))
    tau = float(rng.uniform(0.3, 1.5))
    rep = coarse_triplet_cl(v_img, v_qa, model, tau)
    f = lambda: coarse_triplet_cl(v_img, v_qa, model, tau).value  # noqa: E731
    errs = [
        relative_error(rep.grad_image, numeric_grad(f, v_img)),
        relative_error(rep.grad_text, numeric_grad(f, v_qa)),
    ]
    for name, g in rep.grad_params.items():
        errs.append(relative_error(g, numeric_grad(f, model.params[name])))
    return max(errs)


def random_dataset(rng, spec: ModelSpec, m: int) -> Dataset:
    return Dataset(
        image=rng.standard_normal((m, spec.d_img)),
        question=rng.standard_normal((m, spec.d_question)),
        answer_feat=rng.standard_normal((m, spec.d_answer)),
        answer_id=rng.integers(0, spec.num_answers, size=m),
        question_type=np.zeros(m, dtype=np.int64),
        concept=None,
    )


def check_full_model(rng, mode: str) -> float:
    """Joint objective through the whole model, every parameter tensor."""
    model = _small_model(rng)
    m = int(rng.integers(2, 9))
    data = random_dataset(rng, model.spec, m)
    idx = np.arange(m)
    config = TrainConfig(cl_mode=mode, lam=float(rng.uniform(0.1, 1.0)), tau=float(rng.uniform(0.5, 1.5)))
    base = compute_step(model, data, idx, config)
    graph = base.graph

    def f():
        model.touch()
        return compute_step(model, data, idx, config, graph=graph).total.value

    return max(relative_error(base.grads[name], numeric_grad(f, model.params[name])) for name in model.params)


@dataclass
class GradCheckRow:
    objective: str
    trials: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= RTOL


def run_grad_check(seed: int = 0, trials: int = 50, objectives=OBJECTIVES) -> list[GradCheckRow]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rows = []
    for i, name in enumerate(objectives):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        worst = 0.0
        for t in range(trials):
            if name == "supervised_ce":
                err = _check_ce(rng)
            elif name == "joint":
                err = _check_joint(rng)
            elif name == "coarse_triplet":
                err = _check_coarse(rng)
            elif name == "full_model":
                err = check_full_model(rng, CL_MODES[t % len(CL_MODES)])
            else:
                err = _check_contrastive(rng, name)
            worst = max(worst, err)
        rows.append(GradCheckRow(name, trials, worst))
    return rows
