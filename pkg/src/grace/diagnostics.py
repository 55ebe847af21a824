"""Geometric diagnostics: curvature estimators, local intrinsic
dimensionality, class-centroid alignment, the feature-space discrepancy
bound, the low-rank proximity term, loss-surface slices, and feature
displacement statistics.

All probe-based estimators draw from a named stream under an explicit seed,
so reruns are bit-identical. Hessian-vector products go through the central
finite-difference machinery in ``autodiff``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeds
from .autodiff import LossOracle, hvp_fd
from .errors import InputError

DEFAULT_LID_K = 20
DEFAULT_POWER_ITERS = 50
DEFAULT_TRACE_PROBES = 200
DEFAULT_FROB_PROBES = 200
HVP_STEP = 1e-5


# --- class-conditional feature statistics --------------------------------------

@dataclass
class ClassStats:
    """Per-class feature statistics for one domain.

    ``mean`` is the plain average of the unit features (used by the
    discrepancy bound); ``centroid`` is the same vector renormalized to the
    sphere (used for cosine alignment). Covariance uses the biased 1/n
    normalizer for determinism at small n.
    """

    classes: list[int]
    mean: dict[int, np.ndarray]
    centroid: dict[int, np.ndarray]
    cov: dict[int, np.ndarray]
    prior: dict[int, float]
    count: dict[int, int]

    @property
    def dim(self) -> int:
        return next(iter(self.mean.values())).size


def class_stats(features: np.ndarray, labels: np.ndarray) -> ClassStats:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[0] != labels.shape[0]:
        raise InputError("features and labels disagree on the sample count")
    if features.shape[0] == 0:
        raise InputError("no samples")
    classes = sorted(int(c) for c in np.unique(labels))
    n_total = features.shape[0]
    mean, centroid, cov, prior, count = {}, {}, {}, {}, {}
    for c in classes:
        rows = features[labels == c]
        mu = rows.mean(axis=0)
        mean[c] = mu
        norm = np.linalg.norm(mu)
        centroid[c] = mu / norm if norm > 0 else mu
        centered = rows - mu
        cov[c] = centered.T @ centered / rows.shape[0]
        prior[c] = rows.shape[0] / n_total
        count[c] = rows.shape[0]
    return ClassStats(classes, mean, centroid, cov, prior, count)


def centroid_alignment(stats_s: ClassStats, stats_t: ClassStats):
    """Cosine similarity of per-class unit centroids; classes missing on one
    side are excluded and reported as warnings."""
    per_class: dict[int, float] = {}
    warnings: list[str] = []
    for c in stats_s.classes:
        if c not in stats_t.centroid:
            warnings.append(f"class {c} missing in the second domain; excluded")
            continue
        per_class[c] = float(stats_s.centroid[c] @ stats_t.centroid[c])
    for c in stats_t.classes:
        if c not in stats_s.centroid:
            warnings.append(f"class {c} missing in the first domain; excluded")
    if not per_class:
        raise InputError("no classes shared between the two domains")
    mean = float(np.mean(list(per_class.values())))
    return per_class, mean, warnings


def discrepancy_bound(stats_s: ClassStats, stats_t: ClassStats, lipschitz: float = 1.0) -> float:
    """Class-conditional feature-alignment bound on the domain discrepancy:
    2 L sum_c pi_c (||mu_s - mu_t|| + ||Sigma_s - Sigma_t||_F).

    Priors are averaged across the two sides so the bound is exactly
    symmetric; they coincide anyway when domains are balanced.
    """
    if lipschitz <= 0:
        raise InputError("the Lipschitz multiplier must be positive")
    if stats_s.dim != stats_t.dim:
        raise InputError(f"feature dims differ: {stats_s.dim} vs {stats_t.dim}")
    shared = [c for c in stats_s.classes if c in stats_t.mean]
    if not shared:
        raise InputError("no classes shared between the two domains")
    total = 0.0
    for c in shared:
        pi = 0.5 * (stats_s.prior[c] + stats_t.prior[c])
        mean_term = float(np.linalg.norm(stats_s.mean[c] - stats_t.mean[c]))
        cov_term = float(np.linalg.norm(stats_s.cov[c] - stats_t.cov[c], ord="fro"))
        total += pi * (mean_term + cov_term)
    return 2.0 * lipschitz * total


def kl_proximity(layers, sigma: float) -> float:
    """Adapter drift from the frozen base under an isotropic Gaussian width:
    sum over layers of (||A||_F^2 + ||B||_F^2) / (2 sigma^2)."""
    if sigma <= 0:
        raise InputError("sigma must be positive")
    total = 0.0
    for layer in layers:
        total += float(np.sum(layer.a.value**2) + np.sum(layer.b.value**2))
    return total / (2.0 * sigma * sigma)


# --- local intrinsic dimensionality --------------------------------------------

def lid_point(distances) -> float:
    """MLE of the local intrinsic dimensionality from the ascending distances
    to the k nearest neighbors: -1 / mean(log(r_j / r_k)).

    Returns +inf when every distance equals r_k (degenerate neighborhood).
    """
    r = np.asarray(distances, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InputError("need at least two neighbor distances")
    if np.any(np.diff(r) < 0):
        raise InputError("distances must be sorted ascending")
    rk = r[-1]
    if not rk > 0:
        raise InputError("the k-th neighbor distance must be positive")
    with np.errstate(divide="ignore"):
        logs = np.log(np.maximum(r, 1e-300) / rk)
    mean_log = logs.mean()
    if mean_log == 0.0:
        return math.inf
    return float(-1.0 / mean_log)


def _pairwise_distances(rows: np.ndarray, metric: str) -> np.ndarray:
    if metric == "cosine":
        return 1.0 - rows @ rows.T
    if metric == "euclidean":
        sq = np.sum(rows * rows, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * rows @ rows.T, 0.0)
        return np.sqrt(d2)
    raise InputError(f"unknown metric {metric!r}")


def lid_per_class(features: np.ndarray, labels: np.ndarray, k: int = DEFAULT_LID_K,
                  metric: str = "cosine"):
    """Mean LID per class over each point's k nearest in-class neighbors.

    Classes with at most k samples are skipped with a warning record.
    """
    if k < 2:
        raise InputError("k must be at least 2")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    per_class: dict[int, float] = {}
    warnings: list[str] = []
    for c in sorted(int(v) for v in np.unique(labels)):
        rows = features[labels == c]
        if rows.shape[0] <= k:
            warnings.append(f"class {c}: {rows.shape[0]} samples <= k={k}; skipped")
            continue
        dists = _pairwise_distances(rows, metric)
        vals = []
        for i in range(rows.shape[0]):
            d = np.delete(dists[i], i)
            d.sort()
            vals.append(lid_point(d[:k]))
        per_class[c] = float(np.mean(vals))
    return per_class, warnings


def delta_lid(id_report: dict[int, float], shifted_report: dict[int, float]) -> dict[int, float]:
    """Shifted-domain LID minus in-distribution LID, per shared class."""
    return {c: shifted_report[c] - id_report[c] for c in id_report if c in shifted_report}


# --- curvature estimators -------------------------------------------------------

@dataclass
class CurvatureReport:
    lambda_max: float
    lambda_max_residual: float
    frob_normalized: float
    layer_traces: dict[str, float]
    layer_kappa: dict[str, float]
    probes: int
    power_iters: int
    probe_seed: int

    def to_dict(self) -> dict:
        return {
            "lambda_max": self.lambda_max,
            "lambda_max_residual": self.lambda_max_residual,
            "frob_normalized": self.frob_normalized,
            "layer_traces": self.layer_traces,
            "layer_kappa": self.layer_kappa,
            "probes": self.probes,
            "power_iters": self.power_iters,
            "probe_seed": self.probe_seed,
        }


def _probe_stream(seed: int) -> np.random.Generator:
    return seeds.stream(seed, "diagnostics.probes")


def hutchinson_layer_trace(loss: LossOracle, theta: np.ndarray, layer: slice,
                           probes: int = DEFAULT_TRACE_PROBES, probe_seed: int = 0,
                           step: float = HVP_STEP) -> float:
    """Block-restricted trace estimate: mean over Gaussian probes v of
    v_block . (H v)_block."""
    if probes < 1:
        raise InputError("need at least one probe")
    rng = _probe_stream(probe_seed)
    total = 0.0
    for _ in range(probes):
        v = rng.standard_normal(theta.size)
        hv = hvp_fd(loss, theta, v, step)
        total += float(v[layer] @ hv[layer])
    return total / probes


def hutchinson_all_layers(loss: LossOracle, theta: np.ndarray, layers: dict[str, slice],
                          probes: int = DEFAULT_TRACE_PROBES, probe_seed: int = 0,
                          step: float = HVP_STEP):
    """Per-layer and full traces sharing one probe stream, so the layer
    estimates sum to the full estimate exactly."""
    if probes < 1:
        raise InputError("need at least one probe")
    rng = _probe_stream(probe_seed)
    per_layer = {name: 0.0 for name in layers}
    full = 0.0
    for _ in range(probes):
        v = rng.standard_normal(theta.size)
        hv = hvp_fd(loss, theta, v, step)
        full += float(v @ hv)
        for name, sl in layers.items():
            per_layer[name] += float(v[sl] @ hv[sl])
    return {n: t / probes for n, t in per_layer.items()}, full / probes


def kappa(layer_trace: float, param_count: int) -> float:
    """Average curvature per parameter: trace divided by the entry count."""
    if param_count <= 0:
        raise InputError("parameter count must be positive")
    return layer_trace / param_count


def lambda_max(loss: LossOracle, theta: np.ndarray, iters: int = DEFAULT_POWER_ITERS,
               probe_seed: int = 0, step: float = HVP_STEP):
    """Dominant Hessian eigenvalue by power iteration.

    Returns (rayleigh, residual) where residual = ||H v - lambda v|| at the
    final iterate; a zero Hessian-vector product reports a degenerate
    spectrum as (0, 0).
    """
    if iters < 1:
        raise InputError("need at least one iteration")
    rng = _probe_stream(probe_seed)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    for _ in range(iters):
        hv = hvp_fd(loss, theta, v, step)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return 0.0, 0.0
        v = hv / norm
    hv = hvp_fd(loss, theta, v, step)
    lam = float(v @ hv)
    residual = float(np.linalg.norm(hv - lam * v))
    return lam, residual


def hessian_frob(loss: LossOracle, theta: np.ndarray, probes: int = DEFAULT_FROB_PROBES,
                 probe_seed: int = 0, step: float = HVP_STEP) -> float:
    """Normalized Frobenius estimate sqrt(mean ||H u||^2) / sqrt(d) with
    Gaussian probes u."""
    if probes < 1:
        raise InputError("need at least one probe")
    rng = _probe_stream(probe_seed)
    total = 0.0
    for _ in range(probes):
        u = rng.standard_normal(theta.size)
        hu = hvp_fd(loss, theta, u, step)
        total += float(hu @ hu)
    return math.sqrt(total / probes) / math.sqrt(theta.size)


def curvature_report(loss: LossOracle, theta: np.ndarray, layers: dict[str, slice],
                     probes: int = DEFAULT_TRACE_PROBES, power_iters: int = DEFAULT_POWER_ITERS,
                     probe_seed: int = 0) -> CurvatureReport:
    lam, residual = lambda_max(loss, theta, power_iters, probe_seed)
    frob = hessian_frob(loss, theta, probes, probe_seed)
    traces, _ = hutchinson_all_layers(loss, theta, layers, probes, probe_seed)
    kappas = {n: kappa(traces[n], layers[n].stop - layers[n].start) for n in layers}
    return CurvatureReport(
        lambda_max=lam,
        lambda_max_residual=residual,
        frob_normalized=frob,
        layer_traces=traces,
        layer_kappa=kappas,
        probes=probes,
        power_iters=power_iters,
        probe_seed=probe_seed,
    )


# --- loss-surface slices ---------------------------------------------------------

def loss_slice(loss_value, theta: np.ndarray, grid: int = 21, extent: float = 0.5,
               probe_seed: int = 0):
    """Loss on a 2-D slice through theta along two orthonormalized Gaussian
    directions; coordinates run over [-extent, extent] on a grid x grid mesh.

    The grid must be odd so the center cell evaluates theta itself with no
    perturbation applied (bit-exact). Returns (values, d1, d2, coords).
    """
    if grid < 3:
        raise InputError("grid must be at least 3")
    if grid % 2 == 0:
        raise InputError("grid must be odd so a center cell exists")
    rng = _probe_stream(probe_seed)
    d1 = rng.standard_normal(theta.size)
    d1 /= np.linalg.norm(d1)
    d2 = rng.standard_normal(theta.size)
    d2 -= (d1 @ d2) * d1
    d2 /= np.linalg.norm(d2)
    coords = np.linspace(-1.0, 1.0, grid)
    values = np.empty((grid, grid))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            if a == 0.0 and b == 0.0:
                point = theta
            else:
                point = theta + (a * extent) * d1 + (b * extent) * d2
            values[i, j] = loss_value(point)
    return values, d1, d2, coords


# --- feature displacement ---------------------------------------------------------

@dataclass
class DisplacementStats:
    awp_cosine: float
    awp_l2: float
    ood_cosine: float
    ood_l2: float

    def to_dict(self) -> dict:
        return {
            "id_to_awp": {"cosine": self.awp_cosine, "l2": self.awp_l2},
            "id_to_ood": {"cosine": self.ood_cosine, "l2": self.ood_l2},
        }


def awp_ood_displacement(model, id_inputs: np.ndarray, ood_inputs: np.ndarray) -> DisplacementStats:
    """Mean cosine and l2 displacement of features under the current AWP
    branch (same inputs, perturbed weights) and under paired OOD counterparts
    (same weights, shifted inputs)."""
    id_inputs = np.asarray(id_inputs, dtype=np.float64)
    ood_inputs = np.asarray(ood_inputs, dtype=np.float64)
    if id_inputs.shape[0] == 0 or ood_inputs.shape[0] == 0:
        raise InputError("displacement needs nonempty batches")
    if id_inputs.shape != ood_inputs.shape:
        raise InputError("displacement uses paired batches of one shape")
    f = model.encode(id_inputs).value
    f_awp = model.encode(id_inputs, include_awp=True).value
    f_ood = model.encode(ood_inputs).value
    awp_cos = float(np.mean(np.sum(f * f_awp, axis=1)))
    awp_l2 = float(np.mean(np.linalg.norm(f - f_awp, axis=1)))
    ood_cos = float(np.mean(np.sum(f * f_ood, axis=1)))
    ood_l2 = float(np.mean(np.linalg.norm(f - f_ood, axis=1)))
    return DisplacementStats(awp_cos, awp_l2, ood_cos, ood_l2)
