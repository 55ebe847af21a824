"""Deterministic multi-domain classification bundles and model persistence.

A bundle holds one training split plus evaluation splits for three domains
sharing a single label set: Gaussian clusters around unit-norm class centers
(id), the same centers under a seeded rotation with scaled covariance (ood),
and heavy-tailed noise with partial feature masking (nat_shift). Everything
is a pure function of (params, seed).

Checkpoints use a little-endian binary layout: magic "GRK1", u32 version,
then per tensor a u32 name length, the UTF-8 name, u32 rank, u32 dims, and
the float64 values row-major.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeds
from .awp import new_branch
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    InputError,
)
from .model import EncoderModel, LoraLayer

MAGIC = b"GRK1"
VERSION = 1

DOMAINS = ("id", "ood", "nat_shift")


@dataclass(frozen=True)
class BundleParams:
    classes: int = 8
    input_dim: int = 32
    per_class: int = 64
    sigma_id: float = 0.15
    ood_angle_deg: float = 35.0
    ood_cov_scale: float = 1.5
    shift_df: float = 3.0
    mask_frac: float = 0.10

    def __post_init__(self):
        if self.classes < 2:
            raise InputError("need at least two classes")
        if self.per_class < 1:
            raise InputError("need at least one sample per class")
        if self.sigma_id <= 0:
            raise InputError("sigma_id must be positive")
        if self.ood_cov_scale <= 0:
            raise InputError("covariance scale must be positive")
        if self.shift_df <= 0:
            raise InputError("shift noise df must be positive")
        if not 0.0 <= self.mask_frac < 1.0:
            raise InputError("mask fraction must lie in [0, 1)")


@dataclass
class DomainDataset:
    domain: str
    inputs: np.ndarray
    labels: np.ndarray
    seed: int
    transform: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Bundle:
    params: BundleParams
    seed: int
    centers: np.ndarray
    train: DomainDataset
    eval: dict[str, DomainDataset]

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.centers.tobytes())
        for ds in [self.train, *(self.eval[d] for d in DOMAINS)]:
            h.update(ds.inputs.tobytes())
            h.update(ds.labels.tobytes())
        return h.hexdigest()


def rotation_with_angle(dim: int, angle_rad: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix rotating every vector by the given angle: Givens
    blocks of the angle in disjoint planes of a random orthonormal basis."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))  # fix the sign convention
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        block[i, i] = c
        block[i, i + 1] = -s
        block[i + 1, i] = s
        block[i + 1, i + 1] = c
    return q @ block @ q.T


def _gaussian_domain(centers: np.ndarray, per_class: int, sigma: float,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    k, d = centers.shape
    labels = np.repeat(np.arange(k), per_class)
    noise = rng.standard_normal((k * per_class, d))
    return centers[labels] + sigma * noise, labels


def generate_bundle(params: BundleParams = BundleParams(), seed: int = 0) -> Bundle:
    """Build the full train/eval bundle deterministically from (params, seed)."""
    k, d = params.classes, params.input_dim
    centers = seeds.stream(seed, "data.centers").standard_normal((k, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)

    train_x, train_y = _gaussian_domain(centers, params.per_class, params.sigma_id,
                                        seeds.stream(seed, "data.train"))
    id_x, id_y = _gaussian_domain(centers, params.per_class, params.sigma_id,
                                  seeds.stream(seed, "data.id"))

    ood_centers = centers
    if params.ood_angle_deg != 0.0:
        rot = rotation_with_angle(d, math.radians(params.ood_angle_deg),
                                  seeds.stream(seed, "data.rotation"))
        ood_centers = centers @ rot.T
    ood_sigma = params.sigma_id * math.sqrt(params.ood_cov_scale)
    ood_x, ood_y = _gaussian_domain(ood_centers, params.per_class, ood_sigma,
                                    seeds.stream(seed, "data.ood"))

    nat_rng = seeds.stream(seed, "data.nat_shift")
    nat_y = np.repeat(np.arange(k), params.per_class)
    nat_noise = nat_rng.standard_t(params.shift_df, size=(k * params.per_class, d))
    nat_x = centers[nat_y] + params.sigma_id * nat_noise
    if params.mask_frac > 0:
        n_mask = int(round(params.mask_frac * d))
        for i in range(nat_x.shape[0]):
            idx = nat_rng.choice(d, size=n_mask, replace=False)
            nat_x[i, idx] = 0.0

    return Bundle(
        params=params,
        seed=seed,
        centers=centers,
        train=DomainDataset("id", train_x, train_y, seed, {"split": "train"}),
        eval={
            "id": DomainDataset("id", id_x, id_y, seed, {}),
            "ood": DomainDataset(
                "ood", ood_x, ood_y, seed,
                {"angle_deg": params.ood_angle_deg, "cov_scale": params.ood_cov_scale},
            ),
            "nat_shift": DomainDataset(
                "nat_shift", nat_x, nat_y, seed,
                {"df": params.shift_df, "mask_frac": params.mask_frac},
            ),
        },
    )


def export_bundle(bundle: Bundle, path) -> None:
    """Flat text dump, one sample per line: domain, label, values."""
    with open(path, "w") as f:
        for name, ds in [("train", bundle.train), *bundle.eval.items()]:
            for i in range(len(ds)):
                vals = " ".join(repr(float(v)) for v in ds.inputs[i])
                f.write(f"{name} {ds.labels[i]} {vals}\n")


# --- checkpoints ---------------------------------------------------------------

def _model_tensors(model: EncoderModel) -> list[tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(model.layers):
        out.append((f"layers.{i}.W0", layer.w0.value))
        out.append((f"layers.{i}.A", layer.a.value))
        out.append((f"layers.{i}.B", layer.b.value))
        out.append((f"layers.{i}.alpha", np.array([[layer.alpha]])))
    out.append(("class_head", model.class_head.value))
    return out


def save_checkpoint(model: EncoderModel, path) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    for name, arr in _model_tensors(model):
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype=np.float64)
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", a.ndim)
        for dim in a.shape:
            buf += struct.pack("<I", dim)
        buf += a.tobytes()
    Path(path).write_bytes(bytes(buf))


def _read(buf: bytes, off: int, n: int) -> tuple[bytes, int]:
    if off + n > len(buf):
        raise CheckpointTruncatedError(f"file ends {off + n - len(buf)} bytes short of a record")
    return buf[off : off + n], off + n


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise CheckpointTruncatedError("file shorter than the header")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    off = 8
    tensors: dict[str, np.ndarray] = {}
    while off < len(buf):
        raw, off = _read(buf, off, 4)
        (name_len,) = struct.unpack("<I", raw)
        raw, off = _read(buf, off, name_len)
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"undecodable tensor name at offset {off}") from e
        raw, off = _read(buf, off, 4)
        (rank,) = struct.unpack("<I", raw)
        if rank > 8:
            raise CheckpointFormatError(f"implausible tensor rank {rank} for {name!r}")
        shape = []
        for _ in range(rank):
            raw, off = _read(buf, off, 4)
            shape.append(struct.unpack("<I", raw)[0])
        count = int(np.prod(shape)) if shape else 1
        raw, off = _read(buf, off, 8 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return tensors


def load_checkpoint(path, r_max: int = 4) -> EncoderModel:
    tensors = load_tensors(path)
    if "class_head" not in tensors:
        raise CheckpointFormatError("checkpoint has no class_head tensor")
    indices = sorted({int(n.split(".")[1]) for n in tensors if n.startswith("layers.")})
    if not indices:
        raise CheckpointFormatError("checkpoint has no layer tensors")
    if indices != list(range(len(indices))):
        raise CheckpointFormatError("layer indices are not contiguous")
    layers = []
    for i in indices:
        try:
            w0 = tensors[f"layers.{i}.W0"]
            a = tensors[f"layers.{i}.A"]
            b = tensors[f"layers.{i}.B"]
            alpha = float(tensors[f"layers.{i}.alpha"][0, 0])
        except KeyError as e:
            raise CheckpointFormatError(f"layer {i} is missing tensor {e}") from e
        layers.append(
            LoraLayer(
                name=f"layers.{i}",
                w0=ad.leaf(w0),
                a=ad.leaf(a),
                b=ad.leaf(b),
                rank=a.shape[0],
                alpha=alpha,
                awp=new_branch(w0.shape[0], w0.shape[1], r_max),
            )
        )
    return EncoderModel(layers, ad.leaf(tensors["class_head"]))
