"""Layerwise adaptive low-rank adversarial weight perturbation.

Each LoRA layer carries a perturbation branch (A_awp, B_awp) of width r_max.
A diagonal rank mask keeps rows/columns at or beyond the active rank exactly
zero, a Frobenius ball of radius rho bounds the combined factor norm, and a
curvature-percentile curriculum decides each layer's active rank from an EMA
of the squared-gradient (Gauss-Newton diagonal) proxy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InputError, NumericError

# Loss decrease tolerated when accepting an ascent step; guarantees the
# monotone-ascent contract at 1e-9 over any number of inner steps.
_ACCEPT_SLACK = 1e-12


@dataclass
class AwpBranch:
    """Low-rank adversarial perturbation factors for one layer."""

    a: ad.Tensor  # r_max x n2
    b: ad.Tensor  # n1 x r_max
    r_max: int
    active_rank: int = 0
    rho: float = 0.0

    def zero_(self) -> None:
        self.a.value[:] = 0.0
        self.b.value[:] = 0.0


def new_branch(n1: int, n2: int, r_max: int) -> AwpBranch:
    if r_max < 0:
        raise InputError("r_max must be nonnegative")
    return AwpBranch(a=ad.leaf(np.zeros((r_max, n2))), b=ad.leaf(np.zeros((n1, r_max))), r_max=r_max)


def apply_rank_mask(branch: AwpBranch) -> None:
    """Zero every row of A_awp and column of B_awp at index >= active rank."""
    r = branch.active_rank
    branch.a.value[r:, :] = 0.0
    branch.b.value[:, r:] = 0.0


def combined_norm(branch: AwpBranch) -> float:
    return math.sqrt(
        float(np.sum(branch.a.value * branch.a.value) + np.sum(branch.b.value * branch.b.value))
    )


def project_awp(branch: AwpBranch, rho: float) -> AwpBranch:
    """Scale both factors by rho/n whenever the combined norm n exceeds rho.

    Repeats on 1-ulp spill so the result is bitwise idempotent.
    """
    if rho < 0:
        raise InputError("rho must be nonnegative")
    n = combined_norm(branch)
    while n > rho:
        f = rho / n
        branch.a.value *= f
        branch.b.value *= f
        n = combined_norm(branch)
        if f == 0.0:
            break
    return branch


@dataclass
class CurvatureState:
    """Per-layer curvature EMA and the rank curriculum it drives."""

    ema: np.ndarray
    beta: float = 0.9
    percentile: float = 80.0
    period: int = 50
    r_max: int = 4
    ranks: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.ema = np.asarray(self.ema, dtype=np.float64)
        if not self.ranks:
            self.ranks = [0] * self.ema.size


def layer_score_from_grad(grad_entries: np.ndarray, n_v: int) -> float:
    """Normalized layer curvature score: mean over entries of n_v * g^2."""
    g = np.asarray(grad_entries, dtype=np.float64).ravel()
    if g.size == 0:
        raise InputError("empty gradient")
    return float(n_v * np.mean(g * g))


def curvature_proxy(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-layer squared-gradient score on one validation batch.

    Gradients are of the mean cross-entropy w.r.t. the trainable low-rank
    factors of each layer; the per-layer score is the parameter-count
    normalized sum of n_v * g^2.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 1:
        raise InputError("curvature proxy needs a nonempty batch")
    n_v = x.shape[0]
    loss, _, _ = model.task_loss(x, y)
    ad.backward(loss)
    scores = []
    for layer in model.layers:
        g = np.concatenate([layer.a.grad.ravel(), layer.b.grad.ravel()])
        scores.append(layer_score_from_grad(g, n_v))
    return np.array(scores)


def update_curvature_ema(state: CurvatureState, scores: np.ndarray, beta: float | None = None) -> CurvatureState:
    """EMA recurrence h_t = beta * h_{t-1} + (1 - beta) * score."""
    b = state.beta if beta is None else float(beta)
    if not 0.0 <= b < 1.0:
        raise InputError("beta must lie in [0, 1)")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != state.ema.shape:
        raise InputError(f"got {scores.size} scores for {state.ema.size} layers")
    state.ema = b * state.ema + (1.0 - b) * scores
    return state


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise InputError("percentile of empty sequence")
    idx = int(math.ceil(q / 100.0 * v.size))
    idx = min(max(idx, 1), v.size)
    return float(v[idx - 1])


def allocate_ranks(state: CurvatureState) -> list[int]:
    """Map EMA scores to ranks by curvature percentile.

    Scores at or above the high percentile get r_max, scores below the
    mirrored low percentile get 0, and the band between interpolates
    linearly over [1, r_max - 1] (round half up). Nondecreasing in score.
    """
    scores = state.ema
    if scores.size == 0:
        raise InputError("rank allocation needs at least one layer")
    hi = nearest_rank_percentile(scores, state.percentile)
    lo = nearest_rank_percentile(scores, 100.0 - state.percentile)
    ranks = []
    for s in scores:
        if s >= hi:
            ranks.append(state.r_max)
        elif s < lo:
            ranks.append(0)
        elif state.r_max == 1:
            ranks.append(1)
        else:
            t = (s - lo) / (hi - lo)
            r = int(math.floor(1.0 + t * (state.r_max - 2) + 0.5))
            ranks.append(min(max(r, 1), state.r_max - 1))
    state.ranks = ranks
    return ranks


def set_branch_ranks(model, ranks: list[int]) -> None:
    for layer, r in zip(model.layers, ranks):
        layer.awp.active_rank = int(r)
        apply_rank_mask(layer.awp)


def set_branch_radii(model, rho_frac: float) -> list[float]:
    """rho per layer as a fraction of the current effective weight norm."""
    radii = []
    for layer in model.layers:
        w = layer.effective_value()
        layer.awp.rho = float(rho_frac * np.linalg.norm(w))
        radii.append(layer.awp.rho)
    return radii


def awp_ascend(model, x_adv: np.ndarray, y: np.ndarray, steps: int = 1,
               lr_frac: float = 0.01, rng: np.random.Generator | None = None):
    """Inner maximization over the perturbation branches.

    Runs ``steps`` normalized gradient-ascent updates on (A_awp, B_awp)
    maximizing the perturbed-model cross-entropy on the given batch, each
    followed by the rank mask and the rho-ball projection. A step that
    decreases the loss is retried with a halved step size up to 5 times and
    reverted if still decreasing, so the exit loss never drops below the
    entry loss by more than 1e-9.

    Branches must be conceptually zero at entry; this function re-zeroes
    them, then seeds the active rows of A_awp with small values (B_awp stays
    zero, so the perturbation product and hence the entry loss are exactly
    unperturbed; at the exact origin both factor gradients vanish and ascent
    could not start otherwise).

    Returns (loss_node, entry_loss, exit_loss); the node is the perturbed
    cross-entropy graph at the final accepted point, reusable by the outer
    objective.
    """
    if steps < 1:
        raise InputError("awp ascent needs at least one step")
    if rng is None:
        rng = np.random.default_rng(0)
    active = []
    for layer in model.layers:
        br = layer.awp
        br.zero_()
        if br.active_rank > 0 and br.rho > 0.0:
            n2 = br.a.value.shape[1]
            seed = rng.uniform(-1.0, 1.0, size=(br.active_rank, n2)) / math.sqrt(n2)
            norm = float(np.linalg.norm(seed))
            if norm > 0:
                seed *= (br.rho / math.sqrt(2.0)) / norm
            br.a.value[: br.active_rank, :] = seed
            active.append(br)

    def perturbed_loss() -> ad.Tensor:
        loss, _, _ = model.task_loss(x_adv, y, include_awp=True)
        if not np.isfinite(loss.value[0, 0]):
            raise NumericError("non-finite perturbed loss during ascent")
        return loss

    node = perturbed_loss()
    entry = float(node.value[0, 0])
    if not active:
        return node, entry, entry

    for _ in range(steps):
        ad.backward(node)
        moves = []
        for br in active:
            ga = br.a.grad.copy()
            ga[br.active_rank :, :] = 0.0
            gb = br.b.grad.copy()
            gb[:, br.active_rank :] = 0.0
            na = float(np.linalg.norm(ga))
            nb = float(np.linalg.norm(gb))
            moves.append((br, ga / na if na > 0 else None, gb / nb if nb > 0 else None))
        saved = [(br, br.a.value.copy(), br.b.value.copy()) for br in active]
        shrink = 1.0
        accepted = False
        for _attempt in range(6):
            for br, da, db in moves:
                eta = lr_frac * br.rho * shrink
                if da is not None:
                    br.a.value += eta * da
                if db is not None:
                    br.b.value += eta * db
                apply_rank_mask(br)
                project_awp(br, br.rho)
            cand = perturbed_loss()
            if float(cand.value[0, 0]) >= float(node.value[0, 0]) - _ACCEPT_SLACK:
                node = cand
                accepted = True
                break
            for br, av, bv in saved:
                br.a.value[:] = av
                br.b.value[:] = bv
            shrink *= 0.5
        if not accepted:
            continue  # state restored; node still matches the branch values
    return node, entry, float(node.value[0, 0])


def perturbed_features(model, x: np.ndarray) -> ad.Tensor:
    """Unit-norm features under the perturbed weights W0 + BA + B_awp A_awp."""
    return model.encode(x, include_awp=True)
