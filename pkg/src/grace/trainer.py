"""Training loop: the five-step minibatch procedure (clean forward, PGD
batch, low-rank weight-perturbation ascent, Gram-volume alignment, combined
update), plus the vanilla fine-tuning and plain adversarial-training
baselines, evaluation, and deterministic run artifacts.

The combined objective is task + lambda_lar * lar + lambda_gv * gv, where
the lar term is the perturbed-model cross-entropy on the PGD batch at the
final inner-ascent point (its graph is reused; gradients reach the trainable
factors through the perturbed forward while the branch factors are treated
as constants), and gv is the mean per-sample Gram volume of the
clean/adversarial/perturbed feature triplets.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import awp as gawp
from . import diagnostics as dg
from . import seeds
from .attacks import AttackConfig, pgd
from .data import Bundle, BundleParams, DomainDataset, generate_bundle, save_checkpoint
from .errors import InputError, NumericError
from .gram import GramConfig, batch_triplets, gram_volume_batch
from .model import EncoderModel, build_encoder, relative_param_distance, task_loss_oracle

MODES = ("grace", "vanilla_ft", "at")

# Total-loss decomposition must hold to this slack every step.
_DECOMP_TOL = 1e-9


@dataclass(frozen=True)
class AwpSettings:
    beta: float = 0.9
    percentile: float = 80.0
    period: int = 50
    r_max: int = 4
    rho_frac: float = 0.05
    steps: int = 1
    lr_frac: float = 1.0  # normalized ascent step as a fraction of rho
    val_batch: int = 64

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise InputError("awp beta must lie in [0, 1)")
        if not 0.0 < self.percentile <= 100.0:
            raise InputError("awp percentile must lie in (0, 100]")
        if self.period < 1 or self.steps < 1 or self.val_batch < 1:
            raise InputError("awp period, steps, and val batch must be positive")
        if self.r_max < 0 or self.rho_frac < 0 or self.lr_frac <= 0:
            raise InputError("awp r_max and rho_frac must be nonnegative, lr_frac positive")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "grace"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1.0
    lambda_lar: float = 1.0
    lambda_gv: float = 0.1
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(epsilon=0.11, step=0.0275, iters=10))
    awp: AwpSettings = field(default_factory=AwpSettings)
    gram_jitter: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown mode {self.mode!r}; choose one of {MODES}")
        if self.lambda_lar < 0 or self.lambda_gv < 0:
            raise InputError("loss weights must be nonnegative")
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise InputError("epochs and batch size must be positive")


@dataclass
class StepMetrics:
    step: int
    mode: str
    loss_task: float
    loss_lar: float
    loss_gv: float
    loss_total: float
    accuracy: float
    ranks: list[int]
    curvature_ema: list[float]
    grad_norm: float
    wall_time: float  # in-memory only; excluded from the deterministic log

    def record(self) -> dict:
        return {
            "step": self.step,
            "mode": self.mode,
            "losses": {
                "task": self.loss_task,
                "lar_awp": self.loss_lar,
                "gv": self.loss_gv,
                "total": self.loss_total,
            },
            "accuracy": self.accuracy,
            "ranks": self.ranks,
            "curvature_ema": self.curvature_ema,
            "grad_norm": self.grad_norm,
        }


class Trainer:
    """Owns one model and the optimizer/curriculum state for one run."""

    def __init__(self, model: EncoderModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.curv = gawp.CurvatureState(
            ema=np.zeros(len(model.layers)),
            beta=cfg.awp.beta,
            percentile=cfg.awp.percentile,
            period=cfg.awp.period,
            r_max=cfg.awp.r_max,
        )
        self.reference = model.effective_param_vector()
        self.step_count = 0
        self.last_good = model.get_flat().data.copy()
        self._rng_order = seeds.stream(cfg.seed, "train.order")
        self._rng_attack = seeds.stream(cfg.seed, "train.attack")
        self._rng_awp = seeds.stream(cfg.seed, "train.awp")
        self._rng_val = seeds.stream(cfg.seed, "train.curvature")
        self._train_x: np.ndarray | None = None
        self._train_y: np.ndarray | None = None

    # -- one minibatch -------------------------------------------------------

    def train_step(self, x: np.ndarray, y: np.ndarray) -> StepMetrics:
        t0 = time.perf_counter()
        cfg = self.cfg
        lar_value = 0.0
        gv_value = 0.0

        if cfg.mode == "grace":
            self._maybe_update_curriculum(x, y)
            task_node, logits, feats_id = self.model.task_loss(x, y)
            accuracy = _accuracy(logits.value, y)
            x_adv = pgd(self.model, x, y, cfg.attack, rng=self._rng_attack)
            feats_adv = self.model.encode(x_adv)
            gawp.set_branch_radii(self.model, cfg.awp.rho_frac)
            lar_node, _, lar_value = gawp.awp_ascend(
                self.model, x_adv, y, steps=cfg.awp.steps, lr_frac=cfg.awp.lr_frac,
                rng=self._rng_awp,
            )
            feats_awp = self.model.encode(x, include_awp=True)
            gv_node = gram_volume_batch(
                batch_triplets(feats_id, feats_adv, feats_awp), GramConfig(cfg.gram_jitter)
            )
            gv_value = float(gv_node.value[0, 0])
            total = ad.add(
                task_node,
                ad.add(ad.scale(lar_node, cfg.lambda_lar), ad.scale(gv_node, cfg.lambda_gv)),
            )
        elif cfg.mode == "at":
            x_adv = pgd(self.model, x, y, cfg.attack, rng=self._rng_attack)
            task_node, logits, _ = self.model.task_loss(x_adv, y)
            accuracy = _accuracy(logits.value, y)
            total = task_node
        else:  # vanilla_ft
            task_node, logits, _ = self.model.task_loss(x, y)
            accuracy = _accuracy(logits.value, y)
            total = task_node

        task_value = float(task_node.value[0, 0])
        total_value = float(total.value[0, 0])
        if not np.isfinite(total_value):
            raise NumericError(f"non-finite total loss at step {self.step_count}")
        expected = task_value + (cfg.lambda_lar * lar_value + cfg.lambda_gv * gv_value) \
            if cfg.mode == "grace" else task_value
        if abs(total_value - expected) > _DECOMP_TOL:
            raise NumericError(f"loss decomposition broke at step {self.step_count}")

        ad.backward(total)
        sq = 0.0
        for _, t in self.model.trainable():
            sq += float(np.sum(t.grad * t.grad))
        grad_norm = float(np.sqrt(sq))
        for _, t in self.model.trainable():
            t.value -= cfg.lr * t.grad
        for layer in self.model.layers:
            layer.awp.zero_()
        self.last_good = self.model.get_flat().data.copy()

        metrics = StepMetrics(
            step=self.step_count,
            mode=cfg.mode,
            loss_task=task_value,
            loss_lar=float(lar_value) if cfg.mode == "grace" else 0.0,
            loss_gv=gv_value,
            loss_total=total_value,
            accuracy=accuracy,
            ranks=list(self.curv.ranks),
            curvature_ema=[float(v) for v in self.curv.ema],
            grad_norm=grad_norm,
            wall_time=time.perf_counter() - t0,
        )
        self.step_count += 1
        return metrics

    def _maybe_update_curriculum(self, x: np.ndarray, y: np.ndarray) -> None:
        if self.cfg.awp.r_max == 0 or self.step_count % self.cfg.awp.period != 0:
            return
        if self._train_x is not None:
            n = self._train_x.shape[0]
            size = min(self.cfg.awp.val_batch, n)
            idx = self._rng_val.choice(n, size=size, replace=False)
            vx, vy = self._train_x[idx], self._train_y[idx]
        else:  # standalone train_step: score on the step's own batch
            vx, vy = x, y
        scores = gawp.curvature_proxy(self.model, vx, vy)
        gawp.update_curvature_ema(self.curv, scores)
        gawp.allocate_ranks(self.curv)
        gawp.set_branch_ranks(self.model, self.curv.ranks)

    # -- epochs ----------------------------------------------------------------

    def fit(self, train_x: np.ndarray, train_y: np.ndarray, on_step=None) -> list[StepMetrics]:
        self._train_x = np.asarray(train_x, dtype=np.float64)
        self._train_y = np.asarray(train_y)
        n = self._train_x.shape[0]
        if n == 0:
            raise InputError("empty training set")
        history = []
        for _epoch in range(self.cfg.epochs):
            order = self._rng_order.permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                sel = order[start : start + self.cfg.batch_size]
                metrics = self.train_step(self._train_x[sel], self._train_y[sel])
                history.append(metrics)
                if on_step is not None:
                    on_step(metrics)
        return history


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(model: EncoderModel, dataset: DomainDataset, attack: AttackConfig | None = None,
             rng: np.random.Generator | None = None) -> float:
    """Fraction of argmax-correct predictions, optionally after a per-sample
    input attack at the given config."""
    if len(dataset) == 0:
        raise InputError("empty dataset")
    x, y = dataset.inputs, dataset.labels
    if attack is not None:
        x = pgd(model, x, y, attack, rng=rng)
    return _accuracy(model.logits(x)[1].value, y)


def harmonic_mean(id_acc: float, ood_acc: float, adv_acc: float) -> float:
    """3 / (1/id + 1/ood + 1/adv); inputs must be strictly positive."""
    for v in (id_acc, ood_acc, adv_acc):
        if v <= 0:
            raise InputError("harmonic mean needs strictly positive inputs")
    return 3.0 / (1.0 / id_acc + 1.0 / ood_acc + 1.0 / adv_acc)


@dataclass
class RunArtifacts:
    run_dir: Path
    checkpoint_path: Path
    metrics_path: Path
    summary_path: Path
    summary: dict


@dataclass(frozen=True)
class ModelSettings:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    classes: int = 8
    lora_rank: int = 8
    lora_alpha: float | None = None


def run(train_cfg: TrainConfig, bundle: Bundle | None = None,
        bundle_params: BundleParams | None = None,
        model_cfg: ModelSettings = ModelSettings(),
        out_dir: str | Path = "runs/latest",
        diag_probes: int = dg.DEFAULT_TRACE_PROBES) -> RunArtifacts:
    """Train, evaluate on every domain, and write deterministic artifacts.

    The run directory receives metrics.jsonl (one record per step),
    summary.json, and checkpoint.grk. Two runs with the same config and seed
    produce bit-identical files. On a numeric abort the last good parameters
    are dumped beside a diagnostic record and the error is re-raised.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if bundle is None:
        bundle = generate_bundle(bundle_params or BundleParams(), seed=train_cfg.seed)
    if bundle.params.classes != model_cfg.classes:
        model_cfg = replace(model_cfg, classes=bundle.params.classes)
    if bundle.params.input_dim != model_cfg.input_dim:
        model_cfg = replace(model_cfg, input_dim=bundle.params.input_dim)
    model = build_encoder(
        input_dim=model_cfg.input_dim,
        hidden_dims=model_cfg.hidden_dims,
        feature_dim=model_cfg.feature_dim,
        classes=model_cfg.classes,
        lora_rank=model_cfg.lora_rank,
        lora_alpha=model_cfg.lora_alpha,
        r_max=train_cfg.awp.r_max,
        seed=train_cfg.seed,
    )
    trainer = Trainer(model, train_cfg)
    metrics_path = out / "metrics.jsonl"
    checkpoint_path = out / "checkpoint.grk"
    summary_path = out / "summary.json"

    with open(metrics_path, "w") as log:
        try:
            trainer.fit(bundle.train.inputs, bundle.train.labels,
                        on_step=lambda m: log.write(json.dumps(m.record()) + "\n"))
        except NumericError as err:
            model.set_flat(trainer.last_good)
            dump_path = out / "abort_dump.grk"
            save_checkpoint(model, dump_path)
            (out / "abort.json").write_text(json.dumps({
                "error": str(err),
                "step": trainer.step_count,
                "last_good_checkpoint": str(dump_path),
            }, indent=2))
            raise

    eval_rng = seeds.stream(train_cfg.seed, "eval.attack")
    accuracies: dict[str, dict[str, float]] = {}
    for name in ("id", "ood", "nat_shift"):
        ds = bundle.eval[name]
        accuracies[name] = {
            "clean": evaluate(model, ds),
            "adv": evaluate(model, ds, attack=train_cfg.attack, rng=eval_rng),
        }

    trio = (accuracies["id"]["clean"], accuracies["ood"]["clean"], accuracies["id"]["adv"])
    hmean = harmonic_mean(*trio) if all(v > 0 for v in trio) else None

    diag_n = min(256, bundle.train.inputs.shape[0])
    oracle = task_loss_oracle(model, bundle.train.inputs[:diag_n], bundle.train.labels[:diag_n])
    theta = model.get_flat().data
    probe_seed = seeds.sub_seed(train_cfg.seed, "summary.curvature")
    lam, residual = dg.lambda_max(oracle, theta, iters=dg.DEFAULT_POWER_ITERS, probe_seed=probe_seed)
    frob = dg.hessian_frob(oracle, theta, probes=diag_probes, probe_seed=probe_seed)

    summary = {
        "mode": train_cfg.mode,
        "seed": train_cfg.seed,
        "epochs": train_cfg.epochs,
        "steps": trainer.step_count,
        "accuracies": accuracies,
        "harmonic_mean": hmean,
        "relative_param_distance": relative_param_distance(model, trainer.reference),
        "curvature": {"lambda_max": lam, "lambda_max_residual": residual,
                      "frob_normalized": frob, "probe_seed": probe_seed},
        "final_ranks": list(trainer.curv.ranks),
        "final_curvature_ema": [float(v) for v in trainer.curv.ema],
    }
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    save_checkpoint(model, checkpoint_path)
    return RunArtifacts(out, checkpoint_path, metrics_path, summary_path, summary)
