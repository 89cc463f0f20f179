"""Synthetic shortcut-biased QA data with a ground-truth concept oracle.

Every sample has a hidden visual concept ``c`` and a question type ``q``; the
correct answer is ``answer_table[c, q]``. Each question type has a shortcut
answer: with probability ``bias_strength`` a training sample draws its concept
from the concepts that yield that answer, otherwise the concept is uniform. The
counter split never uses a shortcut answer and concentrates on the next answer
in cyclic order instead, so a model that learned ``q -> answer`` fails there.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, InvalidSpec, OracleUnavailable, ParseError

SPLITS = ("train", "test_iid", "test_counter")
MAX_PROTOTYPE_TRIES = 100_000


@dataclass(frozen=True)
class SyntheticSpec:
    num_concepts: int = 8
    num_question_types: int = 4
    num_answers: int = 8
    bias_strength: float = 0.85
    noise_sigma: float = 0.15
    dims: tuple = (16, 16, 16)
    sizes: tuple = (8192, 2048, 2048)
    seed: int = 0
    max_prototype_cosine: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        self.validate()

    def validate(self):
        c, t, k = self.num_concepts, self.num_question_types, self.num_answers
        if k < 2:
            raise InvalidSpec("num_answers must be at least 2")
        if t < 1:
            raise InvalidSpec("num_question_types must be positive")
        if c < k:
            raise InvalidSpec("num_concepts must be >= num_answers so every answer is reachable")
        if not 0.0 <= self.bias_strength <= 1.0:
            raise InvalidSpec("bias_strength must lie in [0, 1]")
        if not self.noise_sigma >= 0:
            raise InvalidSpec("noise_sigma must be non-negative")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidSpec("dims must be three positive widths (image, question, answer)")
        if self.dims[1] < t or self.dims[2] < k:
            raise InvalidSpec("question/answer widths must fit one-hot codes")
        if len(self.sizes) != 3 or min(self.sizes) < 0:
            raise InvalidSpec("sizes must be three non-negative counts")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise InvalidSpec(f"unknown spec keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["sizes"] = list(self.sizes)
        return d


@dataclass
class Sample:
    image_feat: np.ndarray
    question_feat: np.ndarray
    answer_id: int
    answer_feat: np.ndarray
    question_type: int
    meta: int | None = None


@dataclass
class Dataset:
    """Columnar storage; ``samples`` materialises row objects on demand."""

    image: np.ndarray
    question: np.ndarray
    answer_feat: np.ndarray
    answer_id: np.ndarray
    question_type: np.ndarray
    concept: np.ndarray | None
    split_tag: str = "train"
    answer_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.answer_id)
        for name in ("image", "question", "answer_feat"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise DimensionMismatch(f"{name} must be a 2-D array with {n} rows")
            setattr(self, name, arr)
        self.answer_id = np.asarray(self.answer_id, dtype=np.int64)
        self.question_type = np.asarray(self.question_type, dtype=np.int64)
        if self.concept is not None:
            self.concept = np.asarray(self.concept, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.answer_id)

    def __getitem__(self, i: int) -> Sample:
        return Sample(
            image_feat=self.image[i],
            question_feat=self.question[i],
            answer_id=int(self.answer_id[i]),
            answer_feat=self.answer_feat[i],
            question_type=int(self.question_type[i]),
            meta=None if self.concept is None else int(self.concept[i]),
        )

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    @property
    def oracle(self) -> dict[int, int]:
        if self.concept is None:
            return {}
        return {i: int(c) for i, c in enumerate(self.concept)}

    @property
    def has_oracle(self) -> bool:
        return self.concept is not None and self.answer_table is not None

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.image[idx],
            self.question[idx],
            self.answer_feat[idx],
            self.answer_id[idx],
            self.question_type[idx],
            None if self.concept is None else self.concept[idx],
            self.split_tag,
            self.answer_table,
        )

    def dims(self) -> tuple[int, int, int]:
        return self.image.shape[1], self.question.shape[1], self.answer_feat.shape[1]


@dataclass
class World:
    """The fixed latent structure shared by all splits of one spec."""

    prototypes: np.ndarray
    answer_table: np.ndarray
    shortcut_answer: np.ndarray
    counter_answer: np.ndarray
    question_codes: np.ndarray
    answer_codes: np.ndarray


def _prototypes(rng, count, dim, max_cos):
    protos = []
    for _ in range(MAX_PROTOTYPE_TRIES):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(float(v @ p) < max_cos for p in protos):
            protos.append(v)
            if len(protos) == count:
                return np.array(protos)
    raise InvalidSpec(f"could not place {count} prototypes in {dim} dims with cosine < {max_cos}")


def build_world(spec: SyntheticSpec) -> World:
    c, t, k = spec.num_concepts, spec.num_question_types, spec.num_answers
    d_img, d_q, d_a = spec.dims
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    prototypes = _prototypes(rng, c, d_img, spec.max_prototype_cosine)
    table = np.stack([rng.permutation(np.arange(c) % k) for _ in range(t)], axis=1)
    shortcut_concept = rng.integers(0, c, size=t)
    shortcut = table[shortcut_concept, np.arange(t)]
    counter = (shortcut + 1) % k
    q_codes = np.zeros((t, d_q))
    q_codes[np.arange(t), np.arange(t)] = 1.0
    q_codes += spec.noise_sigma * rng.standard_normal(q_codes.shape)
    a_codes = np.zeros((k, d_a))
    a_codes[np.arange(k), np.arange(k)] = 1.0
    a_codes += spec.noise_sigma * rng.standard_normal(a_codes.shape)
    return World(prototypes, table, shortcut, counter, q_codes, a_codes)


def _draw_split(spec, world, split, n, rng) -> Dataset:
    c_all = np.arange(spec.num_concepts)
    t = spec.num_question_types
    qtypes = rng.integers(0, t, size=n)
    biased = rng.random(n) < spec.bias_strength
    uniform_draw = rng.random(n)
    favored_draw = rng.random(n)
    concepts = np.empty(n, dtype=np.int64)
    for q in range(t):
        col = world.answer_table[:, q]
        if split == "test_counter":
            favored = c_all[col == world.counter_answer[q]]
            fallback = c_all[col != world.shortcut_answer[q]]
        else:
            favored = c_all[col == world.shortcut_answer[q]]
            fallback = c_all
        sel = qtypes == q
        pick_fav = favored[(favored_draw[sel] * len(favored)).astype(np.int64)]
        pick_any = fallback[(uniform_draw[sel] * len(fallback)).astype(np.int64)]
        concepts[sel] = np.where(biased[sel], pick_fav, pick_any)
    answers = world.answer_table[concepts, qtypes]
    image = world.prototypes[concepts] + spec.noise_sigma * rng.standard_normal((n, spec.dims[0]))
    return Dataset(
        image=image,
        question=world.question_codes[qtypes].copy(),
        answer_feat=world.answer_codes[answers].copy(),
        answer_id=answers,
        question_type=qtypes,
        concept=concepts,
        split_tag=split,
        answer_table=world.answer_table,
    )


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Return ``(train, test_iid, test_counter)``; fully determined by ``spec.seed``."""
    spec.validate()
    world = build_world(spec)
    out = []
    for i, (split, n) in enumerate(zip(SPLITS, spec.sizes)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1 + i]))
        out.append(_draw_split(spec, world, split, n, rng))
    return tuple(out)


def _concept_and_qtype(dataset: Dataset, item) -> tuple[int, int]:
    if isinstance(item, Sample):
        if item.meta is None:
            raise OracleUnavailable("sample carries no concept label")
        return int(item.meta), int(item.question_type)
    i = int(item)
    return int(dataset.concept[i]), int(dataset.question_type[i])


def _require_oracle(dataset: Dataset):
    if not dataset.has_oracle:
        raise OracleUnavailable("dataset carries no concept labels / answer table")


def oracle_false_negative(dataset: Dataset, anchor, candidate) -> bool:
    """True when the candidate image would truthfully satisfy the anchor's QA pair.

    ``anchor`` and ``candidate`` are sample indices into ``dataset`` or
    ``Sample`` rows taken from it.
    """
    _require_oracle(dataset)
    anchor_concept, q = _concept_and_qtype(dataset, anchor)
    cand_concept, _ = _concept_and_qtype(dataset, candidate)
    table = dataset.answer_table
    return bool(table[cand_concept, q] == table[anchor_concept, q])


def false_negative_matrix(dataset: Dataset, indices) -> np.ndarray:
    """``fn[m, j]``: image ``indices[j]`` satisfies the QA pair of ``indices[m]``."""
    _require_oracle(dataset)
    idx = np.asarray(indices)
    q = dataset.question_type[idx]
    c = dataset.concept[idx]
    table = dataset.answer_table
    return table[c[None, :], q[:, None]] == table[c, q][:, None]


# -- statistics ---------------------------------------------------------


def answer_histograms(dataset: Dataset, num_question_types: int, num_answers: int) -> dict:
    per_q = np.zeros((num_question_types, num_answers), dtype=np.int64)
    np.add.at(per_q, (dataset.question_type, dataset.answer_id), 1)
    return {
        "count": len(dataset),
        "answers": per_q.sum(axis=0).tolist(),
        "answers_per_question_type": per_q.tolist(),
        "majority_per_question_type": [int(np.argmax(r)) for r in per_q],
    }


def majority_predictor_accuracy(train: Dataset, evaluate_on: Dataset, num_question_types: int, num_answers: int) -> float:
    """Accuracy of answering each question type with its train-majority answer."""
    per_q = np.zeros((num_question_types, num_answers), dtype=np.int64)
    np.add.at(per_q, (train.question_type, train.answer_id), 1)
    guess = np.argmax(per_q, axis=1)
    return float(np.mean(guess[evaluate_on.question_type] == evaluate_on.answer_id))


# -- serialisation ------------------------------------------------------

FIELDS = ("image_feat", "question_feat", "answer_feat", "answer_id", "question_type", "concept")


def save_jsonl(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for i in range(len(dataset)):
            row = {
                "image_feat": dataset.image[i].tolist(),
                "question_feat": dataset.question[i].tolist(),
                "answer_feat": dataset.answer_feat[i].tolist(),
                "answer_id": int(dataset.answer_id[i]),
                "question_type": int(dataset.question_type[i]),
                "concept": None if dataset.concept is None else int(dataset.concept[i]),
            }
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path, split_tag: str | None = None, answer_table=None) -> Dataset:
    path = Path(path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line=lineno)
            missing = [f for f in FIELDS if f not in obj and f != "concept"]
            if missing:
                raise ParseError(f"missing fields {missing}", line=lineno)
            rows.append((lineno, obj))
    if not rows:
        raise EmptyDataset(f"{path} contains no samples")

    def column(name, lineno_dims=None):
        out = []
        width = None
        for lineno, obj in rows:
            vec = obj[name]
            if not isinstance(vec, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
                raise ParseError(f"{name} must be a list of numbers", line=lineno)
            if width is None:
                width = len(vec)
            elif len(vec) != width:
                raise DimensionMismatch(f"line {lineno}: {name} has width {len(vec)}, expected {width}")
            out.append(vec)
        return np.asarray(out, dtype=np.float64)

    def ints(name, nullable=False):
        out = []
        for lineno, obj in rows:
            v = obj.get(name)
            if v is None and nullable:
                out.append(None)
                continue
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ParseError(f"{name} must be a non-negative integer", line=lineno)
            out.append(v)
        return out

    concepts = ints("concept", nullable=True)
    concept = None if any(c is None for c in concepts) else np.asarray(concepts, dtype=np.int64)
    answer_ids = np.asarray(ints("answer_id"), dtype=np.int64)
    qtypes = np.asarray(ints("question_type"), dtype=np.int64)
    if answer_table is None and concept is not None:
        answer_table = infer_answer_table(concept, qtypes, answer_ids)
    return Dataset(
        image=column("image_feat"),
        question=column("question_feat"),
        answer_feat=column("answer_feat"),
        answer_id=answer_ids,
        question_type=qtypes,
        concept=concept,
        split_tag=split_tag or path.stem,
        answer_table=None if answer_table is None or concept is None else np.asarray(answer_table, dtype=np.int64),
    )


def infer_answer_table(concept, qtypes, answers) -> np.ndarray:
    """Answer table read off observed samples; unseen (concept, qtype) cells are -1."""
    table = -np.ones((int(concept.max()) + 1, int(qtypes.max()) + 1), dtype=np.int64)
    table[concept, qtypes] = answers
    return table


def dataset_manifest(spec: SyntheticSpec, world: World, splits: dict[str, Dataset], files: dict[str, str]) -> dict:
    t, k = spec.num_question_types, spec.num_answers
    return {
        "spec": spec.to_dict(),
        "answer_table": world.answer_table.tolist(),
        "shortcut_answer": world.shortcut_answer.tolist(),
        "counter_answer": world.counter_answer.tolist(),
        "splits": {name: answer_histograms(ds, t, k) for name, ds in splits.items()},
        "files": files,
    }


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_dataset_dir(spec: SyntheticSpec, out_dir) -> dict:
    """Write the three JSONL splits plus ``manifest.json``; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = dict(zip(SPLITS, generate(spec)))
    files = {}
    for name, ds in splits.items():
        path = out_dir / f"{name}.jsonl"
        save_jsonl(ds, path)
        files[name] = file_sha256(path)
    manifest = dataset_manifest(spec, build_world(spec), splits, files)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset_dir(data_dir) -> tuple[dict[str, Dataset], dict | None]:
    data_dir = Path(data_dir)
    manifest = None
    table = None
    mpath = data_dir / "manifest.json"
    if mpath.exists():
        with open(mpath) as fh:
            manifest = json.load(fh)
        table = manifest.get("answer_table")
    splits = {}
    for name in SPLITS:
        path = data_dir / f"{name}.jsonl"
        if path.exists():
            splits[name] = load_jsonl(path, split_tag=name, answer_table=table)
    if "train" not in splits:
        raise EmptyDataset(f"{data_dir} has no train.jsonl")
    return splits, manifest
