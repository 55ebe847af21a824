"""Gram-volume feature alignment over clean / input-adversarial / weight-
perturbed embedding triplets.

For unit vectors (f_id, f_adv, f_awp) the 3x3 Gram matrix of inner products,
jittered on the diagonal, has sqrt(|det|) equal to the (regularized) volume
of the parallelepiped the three span: near zero when the representations
coincide, growing as perturbations push them apart.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, InputError

_UNIT_TOL = 1e-9

# Constant selectors that stack three 1xD rows into a 3xD matrix.
_ROW_SELECT = tuple(ad.constant(np.eye(3)[:, i : i + 1]) for i in range(3))


@dataclass(frozen=True)
class GramConfig:
    jitter: float = 1e-4

    def __post_init__(self):
        if not 0.0 < self.jitter <= 1e-2:
            raise InputError("jitter must lie in (0, 1e-2]")


@dataclass
class FeatureTriplet:
    """Unit-norm 1xD feature rows under clean, adversarial, and perturbed
    weights. Rows may be live graph nodes, so losses differentiate through
    them."""

    f_id: ad.Tensor
    f_adv: ad.Tensor
    f_awp: ad.Tensor

    def rows(self) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        return (self.f_id, self.f_adv, self.f_awp)


def triplet_from_arrays(f_id, f_adv, f_awp) -> FeatureTriplet:
    return FeatureTriplet(ad.leaf(f_id), ad.leaf(f_adv), ad.leaf(f_awp))


def _check_unit(row: ad.Tensor) -> None:
    if row.value.shape[0] != 1:
        raise ContractError(f"triplet rows must be 1xD, got {row.value.shape}")
    norm = float(np.linalg.norm(row.value))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise ContractError(f"triplet row norm {norm!r} is not 1 within {_UNIT_TOL}")


def gram_matrix(triplet: FeatureTriplet, cfg: GramConfig = GramConfig()) -> ad.Tensor:
    """3x3 matrix of pairwise inner products plus jitter on the diagonal."""
    rows = triplet.rows()
    for r in rows:
        _check_unit(r)
    stacked = ad.add(
        ad.add(ad.matmul(_ROW_SELECT[0], rows[0]), ad.matmul(_ROW_SELECT[1], rows[1])),
        ad.matmul(_ROW_SELECT[2], rows[2]),
    )
    g = ad.matmul(stacked, stacked, transpose_b=True)
    return ad.add(g, ad.constant(cfg.jitter * np.eye(3)))


def gram_volume(g: ad.Tensor) -> ad.Tensor:
    """sqrt(|det G|) through the fused 3x3 determinant op (scalar node)."""
    return ad.sqrt_abs_det_3x3(g)


def gram_volume_batch(triplets, cfg: GramConfig = GramConfig()) -> ad.Tensor:
    """Mean per-sample Gram volume over a batch of triplets (scalar node)."""
    triplets = list(triplets)
    if not triplets:
        raise InputError("gram volume needs at least one triplet")
    total = None
    for t in triplets:
        v = gram_volume(gram_matrix(t, cfg))
        total = v if total is None else ad.add(total, v)
    return ad.scale(total, 1.0 / len(triplets))


def batch_triplets(f_id: ad.Tensor, f_adv: ad.Tensor, f_awp: ad.Tensor) -> list[FeatureTriplet]:
    """Split three aligned (n x D) feature nodes into per-sample triplets.

    Rows are extracted with one-hot selector matmuls so gradients keep
    flowing into the batch nodes.
    """
    n = f_id.value.shape[0]
    if f_adv.value.shape != f_id.value.shape or f_awp.value.shape != f_id.value.shape:
        raise InputError("feature batches must share one shape")
    eye = np.eye(n)
    out = []
    for i in range(n):
        sel = ad.constant(eye[i : i + 1])
        out.append(
            FeatureTriplet(
                ad.matmul(sel, f_id), ad.matmul(sel, f_adv), ad.matmul(sel, f_awp)
            )
        )
    return out
