"""Toy CLIP-style classifier: an MLP encoder onto the unit sphere, scored
against a frozen matrix of unit-norm class embeddings, every dense layer
parameterized through LoRA (frozen base W0 plus trainable factors B A).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeds
from .awp import AwpBranch, new_branch
from .errors import InputError

cross_entropy = ad.softmax_cross_entropy


@dataclass
class LoraLayer:
    """Frozen base weight with trainable low-rank factors and an AWP branch.

    Effective weight: W0 + (alpha / rank) * B @ A. B starts at zero so the
    layer equals W0 exactly at initialization.
    """

    name: str
    w0: ad.Tensor  # n1 x n2, frozen
    a: ad.Tensor   # rank x n2, trainable
    b: ad.Tensor   # n1 x rank, trainable
    rank: int
    alpha: float
    awp: AwpBranch

    def effective(self, include_awp: bool = False) -> ad.Tensor:
        w = ad.add(self.w0, ad.scale(ad.matmul(self.b, self.a), self.alpha / self.rank))
        if include_awp:
            w = ad.add(w, ad.matmul(self.awp.b, self.awp.a))
        return w

    def effective_value(self, include_awp: bool = False) -> np.ndarray:
        return self.effective(include_awp).value


def lora_effective_weight(layer: LoraLayer, include_awp: bool = False) -> np.ndarray:
    return layer.effective_value(include_awp)


class EncoderModel:
    """MLP encoder with ReLU between hidden layers and l2-normalized output,
    classified by inner products with a frozen class-embedding matrix."""

    def __init__(self, layers: list[LoraLayer], class_head: ad.Tensor):
        self.layers = layers
        self.class_head = class_head  # K x D, unit-norm rows, frozen

    @property
    def input_dim(self) -> int:
        return self.layers[0].w0.value.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].w0.value.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_head.value.shape[0]

    def encode(self, x, include_awp: bool = False) -> ad.Tensor:
        h = x if isinstance(x, ad.Tensor) else ad.leaf(x)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = ad.matmul(h, layer.effective(include_awp), transpose_b=True)
            if i != last:
                h = ad.relu(h)
        return ad.l2_normalize_rows(h)

    def logits(self, x, include_awp: bool = False) -> tuple[ad.Tensor, ad.Tensor]:
        feats = self.encode(x, include_awp)
        return feats, ad.matmul(feats, self.class_head, transpose_b=True)

    def task_loss(self, x, y, include_awp: bool = False):
        """Mean cross-entropy on the batch; returns (loss, logits, features)."""
        feats, logits = self.logits(x, include_awp)
        return cross_entropy(logits, np.asarray(y)), logits, feats

    def loss_and_input_grad(self, x: np.ndarray, y, include_awp: bool = False):
        """Loss value and its gradient w.r.t. the inputs (for input attacks)."""
        x_leaf = ad.leaf(x)
        loss, _, _ = self.task_loss(x_leaf, y, include_awp)
        ad.backward(loss)
        return float(loss.value[0, 0]), x_leaf.grad

    def predict(self, x: np.ndarray, include_awp: bool = False) -> np.ndarray:
        _, logits = self.logits(x, include_awp)
        return np.argmax(logits.value, axis=1)

    # -- trainable parameter plumbing ----------------------------------------

    def trainable(self) -> list[tuple[str, ad.Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.A", layer.a))
            out.append((f"layers.{i}.B", layer.b))
        return out

    def get_flat(self) -> ad.ParamVector:
        return ad.flatten([(n, t.value) for n, t in self.trainable()])

    def set_flat(self, data: np.ndarray) -> None:
        pv = self.get_flat()
        if data.shape != pv.data.shape:
            raise InputError(f"flat parameter size {data.size} does not match {pv.data.size}")
        off = 0
        for _, t in self.trainable():
            size = t.value.size
            t.value[:] = data[off : off + size].reshape(t.value.shape)
            off += size

    def layer_param_slices(self) -> dict[str, slice]:
        """Flat-vector slice covering (A, B) of each layer."""
        out = {}
        off = 0
        for i, layer in enumerate(self.layers):
            size = layer.a.value.size + layer.b.value.size
            out[f"layers.{i}"] = slice(off, off + size)
            off += size
        return out

    def effective_param_vector(self, include_awp: bool = False) -> ad.ParamVector:
        return ad.flatten(
            [(f"layers.{i}.W", ly.effective_value(include_awp)) for i, ly in enumerate(self.layers)]
        )

    def frozen_checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.w0.value).tobytes())
        h.update(np.ascontiguousarray(self.class_head.value).tobytes())
        return h.hexdigest()


def build_encoder(
    input_dim: int = 32,
    hidden_dims: tuple[int, ...] = (64, 64),
    feature_dim: int = 16,
    classes: int = 8,
    lora_rank: int = 8,
    lora_alpha: float | None = None,
    r_max: int = 4,
    seed: int = 0,
) -> EncoderModel:
    """Default architecture: input 32 -> 64 -> 64 -> feature 16, K classes.

    W0 is He-initialized (stands in for pretrained weights), A is uniform in
    +-1/sqrt(n2), B is zero, the class head is K random unit rows. All draws
    come from named streams under the given seed.
    """
    if classes < 2:
        raise InputError("need at least two classes")
    dims = [input_dim, *hidden_dims, feature_dim]
    init = seeds.stream(seed, "model.init")
    layers = []
    for i in range(len(dims) - 1):
        n2, n1 = dims[i], dims[i + 1]
        rank = min(lora_rank, n1, n2)
        w0 = init.standard_normal((n1, n2)) * math.sqrt(2.0 / n2)
        a = init.uniform(-1.0, 1.0, size=(rank, n2)) / math.sqrt(n2)
        b = np.zeros((n1, rank))
        layers.append(
            LoraLayer(
                name=f"layers.{i}",
                w0=ad.leaf(w0),
                a=ad.leaf(a),
                b=ad.leaf(b),
                rank=rank,
                alpha=float(rank) if lora_alpha is None else float(lora_alpha),
                awp=new_branch(n1, n2, r_max),
            )
        )
    head = seeds.stream(seed, "model.class_head").standard_normal((classes, feature_dim))
    head /= np.linalg.norm(head, axis=1, keepdims=True)
    return EncoderModel(layers, ad.leaf(head))


def relative_param_distance(model: EncoderModel, reference: ad.ParamVector) -> float:
    """Frobenius distance of the effective weights from the reference,
    divided by the reference norm."""
    current = model.effective_param_vector()
    if current.data.shape != reference.data.shape:
        raise InputError("reference layout does not match the model")
    ref_norm = reference.norm()
    if ref_norm == 0.0:
        raise InputError("reference norm is zero")
    return float(np.linalg.norm(current.data - reference.data) / ref_norm)


def task_loss_oracle(model: EncoderModel, x: np.ndarray, y: np.ndarray) -> ad.LossOracle:
    """Clean-batch cross-entropy as a function of the flat trainable params.

    Evaluations restore the model's parameters afterwards, so the oracle is
    safe to probe at arbitrary points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    base = model.get_flat().data.copy()

    def value(theta: np.ndarray) -> float:
        model.set_flat(theta)
        try:
            loss, _, _ = model.task_loss(x, y)
            return float(loss.value[0, 0])
        finally:
            model.set_flat(base)

    def grad(theta: np.ndarray) -> np.ndarray:
        model.set_flat(theta)
        try:
            loss, _, _ = model.task_loss(x, y)
            ad.backward(loss)
            return np.concatenate([t.grad.ravel() for _, t in model.trainable()])
        finally:
            model.set_flat(base)

    return ad.LossOracle(value=value, grad=grad, dim=base.size)
