"""Joint supervised + contrastive training, evaluation and false-negative probing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data_synth import Dataset, false_negative_matrix
from .errors import DivergenceDetected, EmptyDataset, InvalidConfig, OracleUnavailable
from .graph import NeighborGraph, build_knn_graph
from .losses import (
    ContrastiveConfig,
    EmbeddingBatch,
    LossReport,
    contrastive_loss,
    joint_loss,
    supervised_ce,
)
from .model import ModelSpec, ToyModel, init_params
from .numcore import masked_log_softmax, normalize_rows, normalize_rows_backward

log = logging.getLogger(__name__)

CL_MODES = ("off", "coarse_triplet", "vanilla", "graph_negatives", "multi_positive")
OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 256
    warmup_ratio: float = 0.1
    base_lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.5
    tau: float = 1.0
    cl_mode: str = "multi_positive"
    seed: int = 0
    hidden: int = 32
    embed: int = 16
    probe_batches: int = 10

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise InvalidConfig("epochs must be an integer >= 1")
        if not isinstance(self.batch_size, int) or self.batch_size < 2:
            raise InvalidConfig("batch_size must be an integer >= 2")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise InvalidConfig("warmup_ratio must lie in [0, 1]")
        if not self.base_lr >= 0:
            raise InvalidConfig("base_lr must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidConfig(f"optimizer must be one of {OPTIMIZERS}")
        if self.cl_mode not in CL_MODES:
            raise InvalidConfig(f"cl_mode must be one of {CL_MODES}")
        if not self.tau > 0:
            raise InvalidConfig("tau must be positive")
        if not self.lam >= 0:
            raise InvalidConfig("lambda must be non-negative")
        if self.probe_batches < 0:
            raise InvalidConfig("probe_batches must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)


@dataclass
class MetricsRecord:
    epoch: int
    loss_sup: float
    loss_cl: float
    acc_overall: float
    acc_per_question_type: dict = field(default_factory=dict)
    acc_test_iid: float | None = None
    acc_test_counter: float | None = None
    false_negative_rate_vanilla: float | None = None
    false_negative_rate_graph: float | None = None
    mean_component_size: float | None = None
    lr: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


# -- learning-rate schedule and optimisers --------------------------------


def warmup_lr(step: int, total_steps: int, base_lr: float, warmup_ratio: float) -> float:
    """Linear warm-up over the first ``warmup_ratio`` of steps, then constant.

    ``step`` counts updates from 1.
    """
    warm = warmup_ratio * total_steps
    if warm <= 0:
        return base_lr
    return base_lr * min(1.0, step / warm)


class SGD:
    def __init__(self, params):
        pass

    def deltas(self, grads, lr):
        return {k: -lr * g for k, g in grads.items()}


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def deltas(self, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            out[k] = -lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return out


def make_optimizer(config: TrainConfig, params):
    if config.optimizer == "sgd":
        return SGD(params)
    return Adam(params, config.beta1, config.beta2, config.adam_eps)


# -- objectives -----------------------------------------------------------


def coarse_triplet_cl(v_image: np.ndarray, v_qa: np.ndarray, model: ToyModel, tau: float = 1.0) -> LossReport:
    """Triplet-level InfoNCE on fused representations under image substitution.

    The anchor for row m is ``fuse(I_m, QA_m)``; its candidates are
    ``fuse(I_j, QA_m)`` for every j, the positive being j = m. Gradients reach
    both embedding tables and the fusion block (``grad_params``).
    """
    if not tau > 0:
        raise InvalidConfig("tau must be positive")
    p = model.params
    m, d = v_image.shape
    w1_img, w1_txt = p["fusion.W1"][:, :d], p["fusion.W1"][:, d:]
    # first fusion layer is additive over the concatenated halves, so the
    # M x M grid of pairs never has to be materialised
    hid = np.tanh((v_image @ w1_img.T)[None, :, :] + (v_qa @ w1_txt.T)[:, None, :] + p["fusion.b1"])
    h = hid.shape[2]
    fused = hid.reshape(m * m, h) @ p["fusion.W2"].T + p["fusion.b2"]
    cand_unit, cand_norm = normalize_rows(fused)
    cand_unit = cand_unit.reshape(m, m, h)
    rows = np.arange(m)
    anchor_unit = cand_unit[rows, rows]
    sim = np.matmul(cand_unit, anchor_unit[:, :, None])[:, :, 0]
    logp = masked_log_softmax(sim / tau)
    value = -float(np.mean(logp[rows, rows]))

    d_logits = np.exp(logp)
    d_logits[rows, rows] -= 1.0
    d_sim = d_logits / (m * tau)
    d_cand_unit = d_sim[:, :, None] * anchor_unit[:, None, :]
    d_cand_unit[rows, rows] += np.matmul(d_sim[:, None, :], cand_unit)[:, 0, :]
    d_fused = normalize_rows_backward(cand_unit.reshape(m * m, h), cand_norm, d_cand_unit.reshape(m * m, h))
    hid_flat = hid.reshape(m * m, h)
    d_pre = ((d_fused @ p["fusion.W2"]) * (1.0 - hid_flat * hid_flat)).reshape(m, m, h)
    d_img_pre = d_pre.sum(axis=0)
    d_txt_pre = d_pre.sum(axis=1)
    grads = {
        "fusion.W1": np.concatenate([d_img_pre.T @ v_image, d_txt_pre.T @ v_qa], axis=1),
        "fusion.b1": d_img_pre.sum(axis=0),
        "fusion.W2": d_fused.T @ hid_flat,
        "fusion.b2": d_fused.sum(axis=0),
    }
    return LossReport(
        value,
        grad_image=d_img_pre @ w1_img,
        grad_text=d_txt_pre @ w1_txt,
        grad_params=grads,
        per_anchor=-logp[rows, rows],
    )


@dataclass
class StepResult:
    total: LossReport
    sup: LossReport
    cl: LossReport
    grads: dict
    graph: NeighborGraph | None


def compute_step(model: ToyModel, data: Dataset, idx, config: TrainConfig, graph: NeighborGraph | None = None) -> StepResult:
    """Forward both paths on ``data[idx]``, evaluate the joint loss and backprop.

    When the mode needs a graph and none is supplied, it is built on the
    current image embeddings (no gradient flows through it).
    """
    wants_cl = config.cl_mode != "off"
    cache = model.forward(data.image[idx], data.question[idx], data.answer_feat[idx] if wants_cl else None)
    sup = supervised_ce(cache.logits, data.answer_id[idx])
    if config.cl_mode == "off":
        cl = LossReport(0.0)
    elif config.cl_mode == "coarse_triplet":
        cl = coarse_triplet_cl(cache.v_image, cache.v_qa, model, config.tau)
    else:
        if config.cl_mode != "vanilla" and graph is None:
            graph = build_knn_graph(cache.v_image)
        ccfg = ContrastiveConfig(tau=config.tau, lam=config.lam, mode=config.cl_mode)
        cl = contrastive_loss(EmbeddingBatch(cache.v_image, cache.v_qa), model.alignment, ccfg, graph)
    lam = config.lam if wants_cl else 0.0
    total = joint_loss(sup, cl, lam)
    grads = model.backward(
        cache,
        {
            "logits": total.grad_logits,
            "image": total.grad_image,
            "text_qa": total.grad_text,
            "alignment": total.grad_alignment,
            "params": total.grad_params,
        },
    )
    return StepResult(total, sup, cl, grads, graph)


# -- evaluation -----------------------------------------------------------


def predict_answers(model: ToyModel, data: Dataset, chunk: int = 4096) -> np.ndarray:
    out = []
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        out.append(np.argmax(model.forward(data.image[sl], data.question[sl]).logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ToyModel, data: Dataset) -> dict:
    """Overall and per-question-type accuracy of argmax answers."""
    if len(data) == 0:
        raise EmptyDataset(f"cannot evaluate on empty split {data.split_tag!r}")
    correct = predict_answers(model, data) == data.answer_id
    per_q = []
    for q in range(int(data.question_type.max()) + 1):
        sel = data.question_type == q
        per_q.append(float(np.mean(correct[sel])) if sel.any() else None)
    return {"accuracy": float(np.mean(correct)), "per_question_type": per_q}


def probe_false_negatives(model: ToyModel, data: Dataset, batch_size: int, num_batches: int, seed: int = 0) -> tuple[float, float, float]:
    """Oracle false-negative rates of vanilla vs graph-pruned negative selection.

    Returns ``(rate_vanilla, rate_graph, mean_component_size)``. Rates pool
    counts over all probed batches; a selection that picks no negatives at
    all reports 0.
    """
    if not data.has_oracle:
        raise OracleUnavailable("false-negative probing needs concept labels and an answer table")
    n = len(data)
    m = min(batch_size, n)
    if m < 2:
        raise EmptyDataset("need at least two samples to probe")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFA15E]))
    fn_v = neg_v = fn_g = neg_g = 0
    comp_sizes = []
    for _ in range(num_batches):
        idx = np.sort(rng.choice(n, size=m, replace=False))
        v_img = model.encode_image(data.image[idx])
        graph = build_knn_graph(v_img)
        fn = false_negative_matrix(data, idx)
        off_diag = ~np.eye(m, dtype=bool)
        graph_neg = ~graph.same_component_mask()
        fn_v += int(np.sum(fn & off_diag))
        neg_v += int(np.sum(off_diag))
        fn_g += int(np.sum(fn & graph_neg))
        neg_g += int(np.sum(graph_neg))
        comp_sizes.append(m / graph.num_components)
    rate_v = fn_v / neg_v if neg_v else 0.0
    rate_g = fn_g / neg_g if neg_g else 0.0
    return rate_v, rate_g, float(np.mean(comp_sizes)) if comp_sizes else 0.0


# -- training loop --------------------------------------------------------


def model_for(data: Dataset, config: TrainConfig, num_answers: int) -> ToyModel:
    d_img, d_q, d_a = data.dims()
    spec = ModelSpec(d_img, d_q, d_a, config.hidden, config.embed, num_answers)
    return init_params(spec, config.seed)


def batches_per_epoch(n: int, batch_size: int) -> int:
    full, rest = divmod(n, batch_size)
    return full + (1 if rest >= 2 else 0)


def train(model: ToyModel, datasets: dict[str, Dataset], config: TrainConfig, on_epoch=None):
    """Run joint training; returns ``(model, history)``.

    ``datasets`` needs a ``train`` split; ``test_iid``/``test_counter`` are
    evaluated when present. ``on_epoch(record)`` is called after every epoch.

    Raises:
        DivergenceDetected: a loss became non-finite; carries the last good
            parameters.
    """
    config.validate()
    data = datasets["train"]
    n = len(data)
    if n < 2:
        raise EmptyDataset("training split needs at least two samples")
    per_epoch = batches_per_epoch(n, config.batch_size)
    total_steps = config.epochs * per_epoch
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5EED]))
    opt = make_optimizer(config, model.params)
    history = []
    start_step = model.step
    lr = 0.0
    k = 0
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sup_sum = cl_sum = 0.0
        for b in range(per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            k += 1
            lr = warmup_lr(k, total_steps, config.base_lr, config.warmup_ratio)
            res = compute_step(model, data, idx, config)
            if not np.isfinite(res.total.value):
                raise DivergenceDetected(f"non-finite loss at step {start_step + k}", step=start_step + k, last_good=model.copy())
            model.apply(opt.deltas(res.grads, lr))
            model.step = start_step + k
            sup_sum += res.sup.value
            cl_sum += res.cl.value
        record = _epoch_record(model, datasets, config, epoch, sup_sum / per_epoch, cl_sum / per_epoch, lr)
        history.append(record)
        log.info("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
    return model, history


def _epoch_record(model, datasets, config, epoch, loss_sup, loss_cl, lr) -> MetricsRecord:
    train_eval = evaluate(model, datasets["train"])
    rec = MetricsRecord(
        epoch=epoch,
        loss_sup=loss_sup,
        loss_cl=loss_cl if config.cl_mode != "off" else 0.0,
        acc_overall=train_eval["accuracy"],
        acc_per_question_type={"train": train_eval["per_question_type"]},
        lr=lr,
    )
    for split, attr in (("test_iid", "acc_test_iid"), ("test_counter", "acc_test_counter")):
        if split in datasets and len(datasets[split]):
            ev = evaluate(model, datasets[split])
            setattr(rec, attr, ev["accuracy"])
            rec.acc_per_question_type[split] = ev["per_question_type"]
    if config.probe_batches and datasets["train"].has_oracle:
        rv, rg, cs = probe_false_negatives(model, datasets["train"], config.batch_size, config.probe_batches, seed=config.seed + epoch)
        rec.false_negative_rate_vanilla = rv
        rec.false_negative_rate_graph = rg
        rec.mean_component_size = cs
    return rec
