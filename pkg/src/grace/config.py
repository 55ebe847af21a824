"""Flat key = value run configuration.

One documented schema covers training, attack, perturbation, model, data,
and diagnostics settings. Files hold ``key = value`` lines (# comments and
blank lines allowed); CLI flags override file values; the fully resolved
mapping is written beside every run's outputs so any artifact can be
reproduced from its snapshot alone.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .attacks import AttackConfig
from .data import BundleParams
from .errors import ConfigError
from .trainer import AwpSettings, ModelSettings, TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_dims(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in str(s).split(",") if p.strip()]
    return tuple(int(p) for p in parts)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default, help)
SCHEMA: dict[str, tuple] = {
    "mode": (str, "grace", "training mode: grace | vanilla_ft | at"),
    "seed": (int, 0, "master seed; every random stream derives from it"),
    "epochs": (int, 30, "training epochs"),
    "batch_size": (int, 64, "minibatch size"),
    "lr": (float, 1.0, "SGD learning rate on the low-rank factors"),
    "lambda_lar": (float, 1.0, "weight of the perturbed-model loss term"),
    "lambda_gv": (float, 0.1, "weight of the Gram-volume alignment term"),
    "gram_jitter": (float, 1e-4, "diagonal jitter inside the Gram matrix"),
    "attack_eps": (float, 0.11, "l-inf attack radius (training and evaluation)"),
    "attack_step": (float, 0.0275, "attack step size"),
    "attack_iters": (int, 10, "attack iterations"),
    "attack_clip_min": (float, -math.inf, "valid input range lower bound"),
    "attack_clip_max": (float, math.inf, "valid input range upper bound"),
    "attack_random_start": (_parse_bool, False, "start attacks from a random point in the ball"),
    "attack_under_awp": (_parse_bool, False, "take attack gradients on the perturbed model"),
    "awp_beta": (float, 0.9, "curvature EMA decay"),
    "awp_percentile": (float, 80.0, "curvature percentile for full-rank perturbation"),
    "awp_period": (int, 50, "steps between curvature/rank updates"),
    "awp_r_max": (int, 4, "maximum perturbation rank"),
    "awp_rho_frac": (float, 0.05, "perturbation radius as a fraction of the layer weight norm"),
    "awp_steps": (int, 1, "inner ascent steps"),
    "awp_lr_frac": (float, 1.0, "ascent step size as a fraction of rho"),
    "awp_val_batch": (int, 64, "validation batch size for the curvature proxy"),
    "model_hidden": (_parse_dims, (64, 64), "hidden layer widths, comma separated"),
    "model_feature_dim": (int, 16, "embedding dimension"),
    "model_lora_rank": (int, 8, "low-rank adapter rank"),
    "model_lora_alpha": (float, -1.0, "adapter scaling; -1 means alpha = rank"),
    "data_classes": (int, 8, "number of classes"),
    "data_input_dim": (int, 32, "input dimension"),
    "data_per_class": (int, 64, "samples per class per domain"),
    "data_sigma_id": (float, 0.15, "in-distribution cluster spread"),
    "data_ood_angle_deg": (float, 35.0, "rotation angle of the ood domain"),
    "data_ood_cov_scale": (float, 1.5, "covariance scaling of the ood domain"),
    "data_shift_df": (float, 3.0, "Student-t degrees of freedom of the natural shift"),
    "data_mask_frac": (float, 0.10, "fraction of features masked in the natural shift"),
    "diag_probes": (int, 200, "Hutchinson probe count"),
    "diag_power_iters": (int, 50, "power-iteration steps"),
    "diag_lid_k": (int, 20, "nearest neighbors for the LID estimator"),
    "diag_lipschitz": (float, 1.0, "feature Lipschitz multiplier in the discrepancy bound"),
    "diag_sigma": (float, 1.0, "posterior width in the proximity term"),
    "diag_disp_rho_frac": (float, 0.2, "measurement radius for the displacement comparison"),
    "diag_disp_steps": (int, 3, "ascent steps for the displacement measurement"),
    "diag_disp_lr_frac": (float, 0.5, "ascent step fraction for the displacement measurement"),
}


@dataclass
class RunSettings:
    """Typed view over one resolved configuration mapping."""

    values: dict
    explicit: set[str]  # keys set by file or flag rather than by default

    def __getitem__(self, key: str):
        return self.values[key]

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            mode=v["mode"],
            seed=v["seed"],
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            lr=v["lr"],
            lambda_lar=v["lambda_lar"],
            lambda_gv=v["lambda_gv"],
            attack=self.attack_config(),
            awp=AwpSettings(
                beta=v["awp_beta"],
                percentile=v["awp_percentile"],
                period=v["awp_period"],
                r_max=v["awp_r_max"],
                rho_frac=v["awp_rho_frac"],
                steps=v["awp_steps"],
                lr_frac=v["awp_lr_frac"],
                val_batch=v["awp_val_batch"],
            ),
            gram_jitter=v["gram_jitter"],
        )

    def attack_config(self, epsilon: float | None = None) -> AttackConfig:
        v = self.values
        return AttackConfig(
            epsilon=v["attack_eps"] if epsilon is None else epsilon,
            step=v["attack_step"],
            iters=v["attack_iters"],
            clip_min=v["attack_clip_min"],
            clip_max=v["attack_clip_max"],
            random_start=v["attack_random_start"],
            under_awp=v["attack_under_awp"],
        )

    def bundle_params(self) -> BundleParams:
        v = self.values
        return BundleParams(
            classes=v["data_classes"],
            input_dim=v["data_input_dim"],
            per_class=v["data_per_class"],
            sigma_id=v["data_sigma_id"],
            ood_angle_deg=v["data_ood_angle_deg"],
            ood_cov_scale=v["data_ood_cov_scale"],
            shift_df=v["data_shift_df"],
            mask_frac=v["data_mask_frac"],
        )

    def model_settings(self) -> ModelSettings:
        v = self.values
        alpha = None if v["model_lora_alpha"] < 0 else v["model_lora_alpha"]
        return ModelSettings(
            input_dim=v["data_input_dim"],
            hidden_dims=v["model_hidden"],
            feature_dim=v["model_feature_dim"],
            classes=v["data_classes"],
            lora_rank=v["model_lora_rank"],
            lora_alpha=alpha,
        )


def parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({e})") from e


def read_config_file(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunSettings:
    """Defaults, then file values, then flag overrides."""
    values = {k: default for k, (_, default, _) in SCHEMA.items()}
    explicit = set()
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            values[k] = v
            explicit.add(k)
    return RunSettings(values, explicit)


def write_resolved(settings: RunSettings, path) -> None:
    lines = [f"{k} = {_fmt(settings.values[k])}" for k in sorted(settings.values)]
    Path(path).write_text("\n".join(lines) + "\n")
