import math

import numpy as np
import pytest

from crossmodal_cl.data_synth import Dataset, SyntheticSpec, build_world, generate
from crossmodal_cl.errors import DivergenceDetected, EmptyDataset, InvalidConfig, OracleUnavailable
from crossmodal_cl.gradcheck import numeric_grad, relative_error
from crossmodal_cl.model import ModelSpec, ToyModel, init_params
from crossmodal_cl.trainer import (
    TrainConfig,
    coarse_triplet_cl,
    compute_step,
    evaluate,
    model_for,
    probe_false_negatives,
    train,
    warmup_lr,
)

TINY = SyntheticSpec(sizes=(512, 256, 256), seed=1)


@pytest.fixture(scope="module")
def tiny_data():
    tr, iid, ctr = generate(TINY)
    return {"train": tr, "test_iid": iid, "test_counter": ctr}


def quick(**kw):
    base = dict(epochs=2, batch_size=64, probe_batches=2)
    base.update(kw)
    return TrainConfig(**base)


def oracle_model(spec: SyntheticSpec) -> ToyModel:
    """Hand-set weights that answer noiseless data perfectly.

    Vision and text encoders emit one-hot concept / question-type codes via
    saturated tanh units; the fusion block has one unit per (concept, qtype)
    pair and the head reads the answer table.
    """
    world = build_world(spec)
    c, t, k = spec.num_concepts, spec.num_question_types, spec.num_answers
    d_img, d_q, d_a = spec.dims
    ms = ModelSpec(d_img, d_q, d_a, hidden=c * t, embed=max(c, t), num_answers=k)
    p = {name: np.zeros(shape) for name, shape in ms.shapes().items()}
    s = 50.0
    p["vision.W1"][:c] = s * world.prototypes
    p["vision.b1"][:c] = -0.75 * s
    p["vision.W2"][np.arange(c), np.arange(c)] = 0.5
    p["vision.b2"][:c] = 0.5
    p["text.W1"][np.arange(t), np.arange(t)] = s
    p["text.b1"][:t] = -0.5 * s
    p["text.W2"][np.arange(t), np.arange(t)] = 0.5
    p["text.b2"][:t] = 0.5
    d = ms.embed
    for ci in range(c):
        for q in range(t):
            unit = ci * t + q
            p["fusion.W1"][unit, ci] = s
            p["fusion.W1"][unit, d + q] = s
            p["fusion.b1"][unit] = -1.5 * s
            p["fusion.W2"][unit, unit] = 0.5
            p["fusion.b2"][unit] = 0.5
            p["head.W"][world.answer_table[ci, q], unit] = 1.0
    p["align.W"] = np.eye(d)
    return ToyModel(ms, p)


def test_warmup_schedule():
    total, base = 200, 1e-3
    for step in range(1, total + 1):
        assert warmup_lr(step, total, base, 0.1) == base * min(1.0, step / (0.1 * total))
    assert warmup_lr(1, total, base, 0.0) == base


def test_config_validation():
    with pytest.raises(InvalidConfig):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidConfig):
        TrainConfig(warmup_ratio=1.5)
    with pytest.raises(InvalidConfig):
        TrainConfig(cl_mode="nope")
    with pytest.raises(InvalidConfig):
        TrainConfig.from_dict({"epoch": 3})
    cfg = TrainConfig.from_dict({"lambda": 0.7, "tau": 0.5})
    assert cfg.lam == 0.7 and cfg.to_dict()["lambda"] == 0.7
    defaults = TrainConfig()
    assert (defaults.warmup_ratio, defaults.lam, defaults.tau, defaults.epochs) == (0.1, 0.5, 1.0, 10)


def test_off_mode_equals_lambda_zero(tiny_data):
    m_off, h_off = train(model_for(tiny_data["train"], quick(cl_mode="off"), 8), tiny_data, quick(cl_mode="off"))
    cfg = quick(cl_mode="multi_positive", lam=0.0)
    m_mp, h_mp = train(model_for(tiny_data["train"], cfg, 8), tiny_data, cfg)
    assert all(r.loss_cl == 0.0 for r in h_off)
    for k in m_off.params:
        np.testing.assert_array_equal(m_off.params[k], m_mp.params[k])
    assert [r.acc_test_counter for r in h_off] == [r.acc_test_counter for r in h_mp]


def test_zero_lr_freezes_parameters(tiny_data):
    cfg = quick(base_lr=0.0, cl_mode="graph_negatives")
    start = model_for(tiny_data["train"], cfg, 8)
    before = {k: v.copy() for k, v in start.params.items()}
    model, hist = train(start, tiny_data, cfg)
    for k in before:
        np.testing.assert_array_equal(model.params[k], before[k])
    assert hist[0].acc_test_counter == hist[1].acc_test_counter
    assert hist[0].acc_overall == hist[1].acc_overall


def test_training_is_reproducible(tiny_data):
    runs = []
    for _ in range(2):
        cfg = quick(cl_mode="multi_positive")
        runs.append(train(model_for(tiny_data["train"], cfg, 8), tiny_data, cfg))
    (m1, h1), (m2, h2) = runs
    for k in m1.params:
        np.testing.assert_array_equal(m1.params[k], m2.params[k])
    assert [r.to_dict() for r in h1] == [r.to_dict() for r in h2]


def test_sgd_runs(tiny_data):
    cfg = quick(optimizer="sgd", base_lr=0.05, cl_mode="vanilla")
    _, hist = train(model_for(tiny_data["train"], cfg, 8), tiny_data, cfg)
    assert all(0.0 <= r.acc_overall <= 1.0 for r in hist)


def test_divergence_detected(tiny_data):
    cfg = quick(cl_mode="off")
    model = model_for(tiny_data["train"], cfg, 8)
    model.params["head.b"][0] = np.nan
    with pytest.raises(DivergenceDetected) as exc:
        train(model, tiny_data, cfg)
    assert exc.value.step == 1
    assert isinstance(exc.value.last_good, ToyModel)


def test_coarse_triplet_identical_images(rng):
    model = init_params(ModelSpec(hidden=8, embed=4), 0)
    m = 7
    v_img = np.tile(rng.standard_normal(4), (m, 1))
    v_qa = rng.standard_normal((m, 4))
    assert coarse_triplet_cl(v_img, v_qa, model, 1.0).value == pytest.approx(math.log(m), abs=1e-12)


def test_coarse_triplet_gradients(rng):
    model = init_params(ModelSpec(hidden=5, embed=3), 4)
    model.params["fusion.b1"] = 0.1 * rng.standard_normal(5)
    v_img, v_qa = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    rep = coarse_triplet_cl(v_img, v_qa, model, 0.8)
    f = lambda: coarse_triplet_cl(v_img, v_qa, model, 0.8).value  # noqa: E731
    assert relative_error(rep.grad_image, numeric_grad(f, v_img)) <= 1e-5
    assert relative_error(rep.grad_text, numeric_grad(f, v_qa)) <= 1e-5
    for name, g in rep.grad_params.items():
        assert relative_error(g, numeric_grad(f, model.params[name])) <= 1e-5


def test_compute_step_builds_graph_only_when_needed(tiny_data):
    model = model_for(tiny_data["train"], quick(), 8)
    idx = np.arange(32)
    assert compute_step(model, tiny_data["train"], idx, quick(cl_mode="vanilla")).graph is None
    assert compute_step(model, tiny_data["train"], idx, quick(cl_mode="multi_positive")).graph.num_nodes == 32


# -- evaluation -------------------------------------------------------------


def test_evaluate_constant_prediction(tiny_data):
    model = model_for(tiny_data["train"], quick(), 8)
    for k in model.params:
        model.params[k][:] = 0.0
    model.params["head.b"][3] = 1.0
    ds = tiny_data["test_iid"]
    assert evaluate(model, ds)["accuracy"] == pytest.approx(np.mean(ds.answer_id == 3), abs=1e-15)


def test_evaluate_oracle_model_is_perfect():
    spec = SyntheticSpec(noise_sigma=0.0, sizes=(400, 400, 400))
    model = oracle_model(spec)
    for ds in generate(spec):
        res = evaluate(model, ds)
        assert res["accuracy"] == 1.0
        assert all(a == 1.0 for a in res["per_question_type"])


def test_evaluate_random_labels_near_chance(tiny_data):
    rng = np.random.default_rng(0)
    base = generate(SyntheticSpec(sizes=(4000, 0, 0)))[0]
    shuffled = Dataset(base.image, base.question, base.answer_feat, rng.integers(0, 8, size=4000), base.question_type, None)
    model = model_for(tiny_data["train"], quick(), 8)
    acc = evaluate(model, shuffled)["accuracy"]
    assert abs(acc - 1 / 8) < 4 * math.sqrt((1 / 8) * (7 / 8) / 4000)


def test_evaluate_empty():
    ds = Dataset(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 1)), [], [], None)
    with pytest.raises(EmptyDataset):
        evaluate(init_params(ModelSpec(2, 1, 1, 3, 2, 2), 0), ds)


# -- false-negative probe -----------------------------------------------------


def test_probe_noiseless_graph_has_no_false_negatives():
    spec = SyntheticSpec(noise_sigma=0.0, sizes=(2048, 0, 0))
    train_ds = generate(spec)[0]
    model = model_for(train_ds, TrainConfig(), 8)
    rv, rg, _ = probe_false_negatives(model, train_ds, 256, 20)
    assert rg == 0.0
    assert rv > 0.0


def test_probe_single_concept_dataset():
    base = generate(SyntheticSpec(sizes=(64, 0, 0)))[0]
    one = Dataset(base.image, base.question, base.answer_feat, base.answer_table[0, base.question_type], base.question_type, np.zeros(64, dtype=int), "train", base.answer_table)
    model = model_for(one, TrainConfig(), 8)
    rv, _, _ = probe_false_negatives(model, one, 32, 5)
    assert rv == 1.0


def test_probe_vanilla_rate_matches_pair_count():
    ds = generate(SyntheticSpec(sizes=(60, 0, 0), seed=5))[0]
    model = model_for(ds, TrainConfig(), 8)
    rv, _, _ = probe_false_negatives(model, ds, 60, 1)
    t = ds.answer_table
    hits = sum(
        t[ds.concept[j], ds.question_type[i]] == t[ds.concept[i], ds.question_type[i]]
        for i in range(60)
        for j in range(60)
        if i != j
    )
    assert rv == hits / (60 * 59)


def test_probe_requires_oracle():
    base = generate(SyntheticSpec(sizes=(20, 0, 0)))[0]
    blind = Dataset(base.image, base.question, base.answer_feat, base.answer_id, base.question_type, None)
    with pytest.raises(OracleUnavailable):
        probe_false_negatives(model_for(blind, TrainConfig(), 8), blind, 10, 1)


def test_metrics_ranges(tiny_data):
    _, hist = train(model_for(tiny_data["train"], quick(), 8), tiny_data, quick())
    for r in hist:
        for v in (r.acc_overall, r.acc_test_iid, r.acc_test_counter, r.false_negative_rate_vanilla, r.false_negative_rate_graph):
            assert 0.0 <= v <= 1.0
        assert set(r.acc_per_question_type) == {"train", "test_iid", "test_counter"}
