import itertools
import json

import numpy as np
import pytest

from crossmodal_cl.data_synth import (
    Dataset,
    SyntheticSpec,
    build_world,
    false_negative_matrix,
    generate,
    load_dataset_dir,
    load_jsonl,
    majority_predictor_accuracy,
    oracle_false_negative,
    save_jsonl,
    write_dataset_dir,
)
from crossmodal_cl.errors import DimensionMismatch, EmptyDataset, InvalidSpec, OracleUnavailable, ParseError

SMALL = dict(sizes=(4096, 1024, 1024))


def mutual_information(x, y):
    joint = np.zeros((x.max() + 1, y.max() + 1))
    np.add.at(joint, (x, y), 1)
    joint /= joint.sum()
    px, py = joint.sum(1, keepdims=True), joint.sum(0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))


def test_seed_determinism():
    a = generate(SyntheticSpec(seed=3, **SMALL))
    b = generate(SyntheticSpec(seed=3, **SMALL))
    c = generate(SyntheticSpec(seed=4, **SMALL))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.answer_id, y.answer_id)
    assert not np.array_equal(a[0].image, c[0].image)


def test_answer_function_consistent():
    for ds in generate(SyntheticSpec(**SMALL)):
        np.testing.assert_array_equal(ds.answer_id, ds.answer_table[ds.concept, ds.question_type])


def test_prototypes_separated():
    world = build_world(SyntheticSpec())
    cos = world.prototypes @ world.prototypes.T
    assert np.max(cos[~np.eye(8, dtype=bool)]) < 0.5


def test_unbiased_has_no_qtype_answer_information():
    train, _, _ = generate(SyntheticSpec(bias_strength=0.0, **SMALL))
    # finite-sample bias of the plug-in estimator is about (T-1)(K-1)/(2N) = 0.0026 nats
    assert mutual_information(train.question_type, train.answer_id) < 0.01
    biased, _, _ = generate(SyntheticSpec(bias_strength=0.85, **SMALL))
    assert mutual_information(biased.question_type, biased.answer_id) > 0.5


def test_noiseless_nearest_neighbour_recovers_concepts():
    train, test, _ = generate(SyntheticSpec(noise_sigma=0.0, sizes=(512, 256, 0)))
    d = ((test.image[:, None, :] - train.image[None, :, :]) ** 2).sum(-1)
    assert np.all(train.concept[np.argmin(d, axis=1)] == test.concept)


def test_majority_predictor_counts():
    spec = SyntheticSpec(bias_strength=0.9)
    train, iid, counter = generate(spec)
    # each answer is reached by exactly one concept per question type (C = K),
    # so P(majority) = rho + (1 - rho) / C
    expected = 0.9 + 0.1 / 8
    tol = 4 * np.sqrt(expected * (1 - expected) / len(train))
    assert abs(majority_predictor_accuracy(train, train, 4, 8) - expected) < tol
    # the counter split never uses a shortcut answer
    assert majority_predictor_accuracy(train, counter, 4, 8) == 0.0


def test_distribution_shift():
    spec = SyntheticSpec(**SMALL)
    world = build_world(spec)
    train, _, counter = generate(spec)
    for q in range(4):
        tr = np.bincount(train.answer_id[train.question_type == q], minlength=8)
        ct = np.bincount(counter.answer_id[counter.question_type == q], minlength=8)
        assert np.argmax(tr) == world.shortcut_answer[q]
        assert np.argmax(ct) == world.counter_answer[q] == (world.shortcut_answer[q] + 1) % 8
        assert ct[np.argmax(tr)] == 0


def test_invalid_specs():
    for bad in (dict(num_answers=1), dict(bias_strength=1.5), dict(noise_sigma=-1), dict(num_concepts=4), dict(dims=(16, 2, 16))):
        with pytest.raises(InvalidSpec):
            SyntheticSpec(**bad)
    with pytest.raises(InvalidSpec):
        SyntheticSpec.from_dict({"bias": 0.3})


def test_oracle_examples():
    train, _, _ = generate(SyntheticSpec(noise_sigma=0.0, sizes=(300, 0, 0)))
    for i in range(20):
        assert oracle_false_negative(train, i, i)
        assert oracle_false_negative(train, train[i], train[i])
    t = train.answer_table
    for a, b in itertools.product(range(40), repeat=2):
        if train.concept[a] != train.concept[b]:
            # one concept per answer under each question type
            assert not oracle_false_negative(train, a, b)
            assert t[train.concept[a], train.question_type[a]] != t[train.concept[b], train.question_type[a]]


def test_false_negative_matrix_matches_pairwise_oracle():
    spec = SyntheticSpec(num_concepts=12, num_answers=5, sizes=(200, 0, 0))
    train, _, _ = generate(spec)
    idx = np.arange(0, 200, 3)
    fn = false_negative_matrix(train, idx)
    for a, ia in enumerate(idx):
        for b, ib in enumerate(idx):
            assert fn[a, b] == oracle_false_negative(train, ia, ib)


def test_oracle_is_equivalence_for_fixed_qtype():
    spec = SyntheticSpec(num_concepts=12, num_answers=5, sizes=(120, 0, 0))
    train, _, _ = generate(spec)
    for q in range(4):
        members = np.flatnonzero(train.question_type == q)[:25]
        rel = {(a, b): oracle_false_negative(train, a, b) for a in members for b in members}
        for a, b, c in itertools.product(members, repeat=3):
            assert rel[a, a]
            assert rel[a, b] == rel[b, a]
            if rel[a, b] and rel[b, c]:
                assert rel[a, c]


def test_oracle_unavailable():
    train, _, _ = generate(SyntheticSpec(sizes=(10, 0, 0)))
    stripped = Dataset(train.image, train.question, train.answer_feat, train.answer_id, train.question_type, None)
    with pytest.raises(OracleUnavailable):
        oracle_false_negative(stripped, 0, 1)


def test_jsonl_roundtrip(tmp_path):
    train, _, _ = generate(SyntheticSpec(sizes=(50, 0, 0)))
    save_jsonl(train, tmp_path / "train.jsonl")
    back = load_jsonl(tmp_path / "train.jsonl")
    for name in ("image", "question", "answer_feat", "answer_id", "question_type", "concept"):
        np.testing.assert_array_equal(getattr(back, name), getattr(train, name))
    assert back.has_oracle


def test_load_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    with pytest.raises(EmptyDataset):
        load_jsonl(empty)
    good = json.dumps({"image_feat": [0.1, 0.2], "question_feat": [1.0], "answer_feat": [0.0], "answer_id": 1, "question_type": 0, "concept": 2})
    bad = tmp_path / "bad.jsonl"
    bad.write_text(good + "\n" + good + "\n{not json\n")
    with pytest.raises(ParseError) as exc:
        load_jsonl(bad)
    assert exc.value.line == 3 and "line 3" in str(exc.value)
    wide = tmp_path / "wide.jsonl"
    wide.write_text(good + "\n" + good.replace("[0.1, 0.2]", "[0.1, 0.2, 0.3]") + "\n")
    with pytest.raises(DimensionMismatch):
        load_jsonl(wide)


def test_null_concept_disables_oracle(tmp_path):
    row = {"image_feat": [0.1], "question_feat": [1.0], "answer_feat": [0.0], "answer_id": 1, "question_type": 0, "concept": None}
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
    assert not load_jsonl(p).has_oracle


def test_dataset_dir_bytes_and_manifest(tmp_path):
    spec = SyntheticSpec(bias_strength=0.7, sizes=(300, 100, 100), seed=9)
    m1 = write_dataset_dir(spec, tmp_path / "a")
    write_dataset_dir(spec, tmp_path / "b")
    for name in ("train.jsonl", "test_iid.jsonl", "test_counter.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    splits, manifest = load_dataset_dir(tmp_path / "a")
    assert manifest == json.loads((tmp_path / "a" / "manifest.json").read_text())
    for name, ds in splits.items():
        hist = np.zeros((4, 8), dtype=int)
        for q, a in zip(ds.question_type, ds.answer_id):
            hist[q, a] += 1
        assert m1["splits"][name]["answers_per_question_type"] == hist.tolist()
        assert m1["splits"][name]["count"] == len(ds)
