"""Toy multi-modal QA model with hand-written backpropagation.

Vision and text encoders are affine-tanh-affine MLPs that map pre-featurised
inputs into a shared D-dimensional space. The fusion block consumes the
concatenated ``[V_I ; V_X]`` and a linear head produces K answer logits. The
text encoder serves both uses: the supervised path feeds ``[question ; 0]``,
the contrastive anchor feeds ``[question ; answer]``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidSpec, StaleCache
from .losses import AlignmentMap


@dataclass(frozen=True)
class ModelSpec:
    d_img: int = 16
    d_question: int = 16
    d_answer: int = 16
    hidden: int = 32
    embed: int = 16
    num_answers: int = 8

    def __post_init__(self):
        for name, val in asdict(self).items():
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise InvalidSpec(f"{name} must be a positive integer, got {val!r}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        h, d = self.hidden, self.embed
        d_text = self.d_question + self.d_answer
        return {
            "vision.W1": (h, self.d_img),
            "vision.b1": (h,),
            "vision.W2": (d, h),
            "vision.b2": (d,),
            "text.W1": (h, d_text),
            "text.b1": (h,),
            "text.W2": (d, h),
            "text.b2": (d,),
            "fusion.W1": (h, 2 * d),
            "fusion.b1": (h,),
            "fusion.W2": (h, h),
            "fusion.b2": (h,),
            "head.W": (self.num_answers, h),
            "head.b": (self.num_answers,),
            "align.W": (d, d),
        }


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


class ToyModel:
    """Parameters live in ``self.params`` (name -> float64 array).

    ``version`` increases whenever parameters change so stale forward caches
    can be detected.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray], seed: int | None = None, step: int = 0):
        shapes = spec.shapes()
        if set(params) != set(shapes):
            raise InvalidSpec(f"parameter names {sorted(params)} do not match spec")
        for name, shape in shapes.items():
            if tuple(np.shape(params[name])) != shape:
                raise InvalidSpec(f"{name} has shape {np.shape(params[name])}, expected {shape}")
        self.spec = spec
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}
        self.seed = seed
        self.step = step
        self.version = 0

    @property
    def alignment(self) -> AlignmentMap:
        return AlignmentMap(self.params["align.W"])

    def copy(self) -> "ToyModel":
        return ToyModel(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed, self.step)

    def touch(self):
        self.version += 1

    def apply(self, deltas: dict[str, np.ndarray]):
        for name, d in deltas.items():
            self.params[name] += d
        self.touch()

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward pieces -------------------------------------------------

    def _mlp(self, prefix: str, x: np.ndarray):
        p = self.params
        w1 = p[f"{prefix}.W1"]
        if x.shape[-1] != w1.shape[1]:
            raise DimensionMismatch(f"{prefix} expects inputs of width {w1.shape[1]}, got {x.shape[-1]}")
        h = np.tanh(x @ w1.T + p[f"{prefix}.b1"])
        out = h @ p[f"{prefix}.W2"].T + p[f"{prefix}.b2"]
        return out, (x, h)

    def _mlp_backward(self, prefix: str, cache, d_out: np.ndarray, grads: dict):
        x, h = cache
        p = self.params
        grads[f"{prefix}.W2"] += d_out.T @ h
        grads[f"{prefix}.b2"] += d_out.sum(axis=0)
        d_pre = (d_out @ p[f"{prefix}.W2"]) * (1.0 - h * h)
        grads[f"{prefix}.W1"] += d_pre.T @ x
        grads[f"{prefix}.b1"] += d_pre.sum(axis=0)
        return d_pre @ p[f"{prefix}.W1"]

    def text_input(self, question: np.ndarray, answer: np.ndarray | None) -> np.ndarray:
        question = np.atleast_2d(np.asarray(question, dtype=np.float64))
        if question.shape[1] != self.spec.d_question:
            raise DimensionMismatch(f"question width {question.shape[1]} != {self.spec.d_question}")
        if answer is None:
            answer = np.zeros((question.shape[0], self.spec.d_answer))
        answer = np.atleast_2d(np.asarray(answer, dtype=np.float64))
        if answer.shape != (question.shape[0], self.spec.d_answer):
            raise DimensionMismatch(f"answer block {answer.shape} does not match questions")
        return np.concatenate([question, answer], axis=1)

    def encode_image(self, image_feat) -> np.ndarray:
        x = np.asarray(image_feat, dtype=np.float64)
        out, _ = self._mlp("vision", np.atleast_2d(x))
        return out[0] if x.ndim == 1 else out

    def encode_text(self, question_feat, answer_feat=None) -> np.ndarray:
        q = np.asarray(question_feat, dtype=np.float64)
        out, _ = self._mlp("text", self.text_input(q, answer_feat))
        return out[0] if q.ndim == 1 else out

    def fuse(self, v_image: np.ndarray, v_text: np.ndarray):
        return self._mlp("fusion", np.concatenate([v_image, v_text], axis=-1))

    def fuse_backward(self, cache, d_fused, grads):
        d_in = self._mlp_backward("fusion", cache, d_fused, grads)
        d = self.spec.embed
        return d_in[:, :d], d_in[:, d:]

    def predict(self, image_feat, question_feat) -> np.ndarray:
        x = np.asarray(image_feat, dtype=np.float64)
        cache = self.forward(np.atleast_2d(x), np.atleast_2d(question_feat))
        return cache.logits[0] if x.ndim == 1 else cache.logits

    # -- batched forward / backward --------------------------------------

    def forward(self, image_feat, question_feat, answer_feat=None) -> "ForwardCache":
        image_feat = np.atleast_2d(np.asarray(image_feat, dtype=np.float64))
        question_feat = np.atleast_2d(np.asarray(question_feat, dtype=np.float64))
        if image_feat.shape[0] != question_feat.shape[0]:
            raise DimensionMismatch("image and question batches differ in length")
        v_img, c_img = self._mlp("vision", image_feat)
        v_q, c_q = self._mlp("text", self.text_input(question_feat, None))
        fused, c_fuse = self.fuse(v_img, v_q)
        logits = fused @ self.params["head.W"].T + self.params["head.b"]
        v_qa = c_qa = None
        if answer_feat is not None:
            v_qa, c_qa = self._mlp("text", self.text_input(question_feat, answer_feat))
        return ForwardCache(
            version=self.version,
            inputs=(image_feat, question_feat, None if answer_feat is None else np.asarray(answer_feat, dtype=np.float64)),
            v_image=v_img,
            v_question=v_q,
            v_qa=v_qa,
            fused=fused,
            logits=logits,
            layer_caches={"vision": c_img, "text_q": c_q, "fusion": c_fuse, "text_qa": c_qa},
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def backward(self, cache: "ForwardCache", loss_grads: dict, inputs=None) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients from upstream loss gradients.

        ``loss_grads`` may hold ``logits``, ``image`` (on V_I), ``text_qa`` (on
        V_QA), ``alignment`` (on the alignment map) and ``params`` (direct
        parameter gradients, e.g. fusion weights used by a coarse contrastive
        term). Missing keys mean zero.
        """
        if cache.version != self.version:
            raise StaleCache("parameters changed since the forward pass")
        if inputs is not None:
            for got, had in zip(inputs, cache.inputs):
                if (got is None) != (had is None) or (got is not None and not np.array_equal(np.atleast_2d(got), had)):
                    raise StaleCache("backward called with inputs that differ from the cached forward pass")
        grads = self.zero_grads()
        lc = cache.layer_caches
        d_v_img = np.zeros_like(cache.v_image)
        d_logits = loss_grads.get("logits")
        if d_logits is not None:
            grads["head.W"] += d_logits.T @ cache.fused
            grads["head.b"] += d_logits.sum(axis=0)
            d_fused = d_logits @ self.params["head.W"]
            d_img_f, d_q = self.fuse_backward(lc["fusion"], d_fused, grads)
            d_v_img += d_img_f
            self._mlp_backward("text", lc["text_q"], d_q, grads)
        if loss_grads.get("image") is not None:
            d_v_img += loss_grads["image"]
        if loss_grads.get("text_qa") is not None:
            if lc["text_qa"] is None:
                raise StaleCache("forward pass did not compute QA embeddings")
            self._mlp_backward("text", lc["text_qa"], loss_grads["text_qa"], grads)
        if loss_grads.get("alignment") is not None:
            grads["align.W"] += loss_grads["alignment"]
        for name, g in (loss_grads.get("params") or {}).items():
            grads[name] += g
        self._mlp_backward("vision", lc["vision"], d_v_img, grads)
        return grads

    # -- serialisation ---------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "model_spec": asdict(self.spec),
            "seed": self.seed,
            "step": self.step,
            "params": {
                name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
                for name, arr in self.params.items()
            },
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "ToyModel":
        spec = ModelSpec(**ckpt["model_spec"])
        params = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in ckpt["params"].items()
        }
        return cls(spec, params, seed=ckpt.get("seed"), step=ckpt.get("step", 0))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(), fh)

    @classmethod
    def load(cls, path) -> "ToyModel":
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))


@dataclass
class ForwardCache:
    version: int
    inputs: tuple
    v_image: np.ndarray
    v_question: np.ndarray
    v_qa: np.ndarray | None
    fused: np.ndarray
    logits: np.ndarray
    layer_caches: dict


def init_params(spec: ModelSpec, seed: int) -> ToyModel:
    """Xavier-uniform weights, zero biases, identity alignment map."""
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec(**spec)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.shapes().items():
        if name == "align.W":
            params[name] = np.eye(shape[0])
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = xavier_bound(fan_in, fan_out)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return ToyModel(spec, params, seed=seed)


def encode_image(model: ToyModel, image_feat):
    return model.encode_image(image_feat)


def encode_text(model: ToyModel, question_feat, answer_feat=None):
    return model.encode_text(question_feat, answer_feat)


def predict(model: ToyModel, image_feat, question_feat):
    return model.predict(image_feat, question_feat)
