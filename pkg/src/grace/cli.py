"""Command-line entry point.

Subcommands: train, eval, diagnose, landscape, report. Every invocation
writes a resolved-config snapshot beside its outputs, so any artifact is
reproducible from the snapshot alone. Exit codes: 0 success, 2 bad usage or
configuration, 3 numeric abort (a diagnostic dump path is printed).
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import awp as gawp
from . import config as cf
from . import diagnostics as dg
from . import seeds
from .attacks import pgd
from .autodiff import ParamVector, flatten
from .data import generate_bundle, load_checkpoint
from .errors import CheckpointError, ConfigError, GraceError, InputError, NumericError, ShapeError
from .model import relative_param_distance, task_loss_oracle
from .trainer import evaluate, harmonic_mean, run


def _settings_from_args(args) -> cf.RunSettings:
    file_values = cf.read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = cf.parse_value(key.strip(), raw.strip())
    if getattr(args, "mode", None):
        overrides["mode"] = cf.parse_value("mode", args.mode)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "eps", None) is not None:
        overrides["attack_eps"] = args.eps
    return cf.resolve(file_values, overrides)


def _prepare(args, default_subdir: str):
    settings = _settings_from_args(args)
    if getattr(args, "out", None):
        out = Path(args.out)
    elif getattr(args, "checkpoint", None):
        out = Path(args.checkpoint).parent / default_subdir
    else:
        out = Path("runs") / default_subdir
    out.mkdir(parents=True, exist_ok=True)
    cf.write_resolved(settings, out / "config.txt")
    return settings, out


def cmd_train(args) -> int:
    settings = _settings_from_args(args)
    mode = settings["mode"]
    out = Path(args.out) if args.out else Path("runs") / f"{mode}-seed{settings['seed']}"
    out.mkdir(parents=True, exist_ok=True)
    cf.write_resolved(settings, out / "config.txt")
    if mode != "grace":
        for key in ("lambda_lar", "lambda_gv"):
            if key in settings.explicit and settings[key] != 0.0:
                print(f"warning: {key} is ignored in mode {mode}", file=sys.stderr)
    t0 = time.perf_counter()
    try:
        artifacts = run(
            settings.train_config(),
            bundle_params=settings.bundle_params(),
            model_cfg=settings.model_settings(),
            out_dir=out,
            diag_probes=settings["diag_probes"],
        )
    except NumericError:
        print(f"numeric abort; diagnostic dump in {out / 'abort.json'}", file=sys.stderr)
        raise
    print(f"run complete in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    print(json.dumps(artifacts.summary, indent=2, sort_keys=True))
    return 0


def _eval_table(model, bundle, settings, attack):
    rng = seeds.stream(settings["seed"], "eval.attack")
    table = {}
    for name in ("id", "ood", "nat_shift"):
        ds = bundle.eval[name]
        row = {"clean": evaluate(model, ds)}
        row["adv"] = evaluate(model, ds, attack=attack, rng=rng) if attack is not None else None
        table[name] = row
    return table


def cmd_eval(args) -> int:
    settings, out = _prepare(args, "eval")
    model = load_checkpoint(args.checkpoint, r_max=settings["awp_r_max"])
    bundle = generate_bundle(settings.bundle_params(), seed=settings["seed"])
    if model.input_dim != bundle.params.input_dim:
        raise ShapeError(
            f"checkpoint expects input dim {model.input_dim}, bundle has {bundle.params.input_dim}"
        )
    attack = None if args.no_attack else settings.attack_config()
    table = _eval_table(model, bundle, settings, attack)
    trio = (table["id"]["clean"], table["ood"]["clean"], table["id"]["adv"])
    hmean = harmonic_mean(*trio) if None not in trio and all(v > 0 for v in trio) else None
    result = {"accuracies": table, "harmonic_mean": hmean,
              "attack": None if attack is None else {"eps": attack.epsilon, "step": attack.step,
                                                     "iters": attack.iters}}
    (out / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    header = f"{'domain':<10} {'clean':>8} {'adv':>8}"
    print(header)
    for name, row in table.items():
        adv = "-" if row["adv"] is None else f"{row['adv']:.4f}"
        print(f"{name:<10} {row['clean']:>8.4f} {adv:>8}")
    print(f"harmonic mean (id clean, ood clean, id adv): "
          f"{'-' if hmean is None else f'{hmean:.4f}'}")
    return 0


def _base_reference(model) -> ParamVector:
    return flatten([(f"layers.{i}.W", ly.w0.value) for i, ly in enumerate(model.layers)])


def cmd_diagnose(args) -> int:
    settings, out = _prepare(args, "diagnose")
    model = load_checkpoint(args.checkpoint, r_max=settings["awp_r_max"])
    bundle = generate_bundle(settings.bundle_params(), seed=settings["seed"])
    if model.input_dim != bundle.params.input_dim:
        raise ShapeError(
            f"checkpoint expects input dim {model.input_dim}, bundle has {bundle.params.input_dim}"
        )
    attack = settings.attack_config()
    probe_seed = seeds.sub_seed(settings["seed"], "diagnose.probes")
    k = settings["diag_lid_k"]

    id_ds = bundle.eval["id"]
    feats = {
        "id": model.encode(id_ds.inputs).value,
        "ood": model.encode(bundle.eval["ood"].inputs).value,
    }
    labels = {"id": id_ds.labels, "ood": bundle.eval["ood"].labels}
    x_adv = pgd(model, id_ds.inputs, id_ds.labels, attack,
                rng=seeds.stream(settings["seed"], "eval.attack"))
    feats["adv"] = model.encode(x_adv).value
    labels["adv"] = id_ds.labels

    stats = {name: dg.class_stats(feats[name], labels[name]) for name in feats}
    alignment = {}
    for shift in ("ood", "adv"):
        per_class, mean, warnings = dg.centroid_alignment(stats["id"], stats[shift])
        alignment[f"id_to_{shift}"] = {
            "per_class": {str(c): v for c, v in per_class.items()},
            "mean": mean,
            "warnings": warnings,
        }

    lid_reports = {}
    lid_warnings = []
    for name in feats:
        rep, warn = dg.lid_per_class(feats[name], labels[name], k=k)
        lid_reports[name] = rep
        lid_warnings.extend(f"{name}: {w}" for w in warn)
    delta = {
        f"id_to_{shift}": {
            "per_class": {str(c): v for c, v in dg.delta_lid(lid_reports["id"], lid_reports[shift]).items()},
            "mean": float(np.mean(list(dg.delta_lid(lid_reports["id"], lid_reports[shift]).values()))),
        }
        for shift in ("ood", "adv")
    }

    diag_n = min(256, bundle.train.inputs.shape[0])
    oracle = task_loss_oracle(model, bundle.train.inputs[:diag_n], bundle.train.labels[:diag_n])
    theta = model.get_flat().data
    curvature = dg.curvature_report(
        oracle, theta, model.layer_param_slices(),
        probes=settings["diag_probes"], power_iters=settings["diag_power_iters"],
        probe_seed=probe_seed,
    )

    # displacement: run a measurement ascent to a completed branch state first
    for layer in model.layers:
        layer.awp.active_rank = layer.awp.r_max
    gawp.set_branch_radii(model, settings["diag_disp_rho_frac"])
    n_pair = min(len(id_ds), len(bundle.eval["ood"]))
    gawp.awp_ascend(model, x_adv[:n_pair], id_ds.labels[:n_pair],
                    steps=settings["diag_disp_steps"], lr_frac=settings["diag_disp_lr_frac"],
                    rng=seeds.stream(probe_seed, "diagnose.displacement"))
    displacement = dg.awp_ood_displacement(
        model, id_ds.inputs[:n_pair], bundle.eval["ood"].inputs[:n_pair]
    )
    for layer in model.layers:
        layer.awp.zero_()
        layer.awp.active_rank = 0

    proximity_kl = dg.kl_proximity(model.layers, sigma=settings["diag_sigma"])
    rel_dist = relative_param_distance(model, _base_reference(model))
    discrepancy = {
        f"id_to_{shift}": dg.discrepancy_bound(stats["id"], stats[shift],
                                               lipschitz=settings["diag_lipschitz"])
        for shift in ("ood", "adv")
    }

    report = {
        "curvature": curvature.to_dict(),
        "cosine_alignment": alignment,
        "delta_lid": delta,
        "lid": {name: {str(c): v for c, v in rep.items()} for name, rep in lid_reports.items()},
        "lid_warnings": lid_warnings,
        "displacement": displacement.to_dict(),
        "bound_terms": {
            "proximity_kl": proximity_kl,
            "proximity_sigma": settings["diag_sigma"],
            "relative_param_distance": rel_dist,
            "sharpness_lambda_max": curvature.lambda_max,
            "sharpness_frob_normalized": curvature.frob_normalized,
            "discrepancy_surrogate": discrepancy,
            "lipschitz_multiplier": settings["diag_lipschitz"],
        },
        "protocol": {"lid_k": k, "probes": settings["diag_probes"],
                     "power_iters": settings["diag_power_iters"], "probe_seed": probe_seed,
                     "attack": {"eps": attack.epsilon, "step": attack.step, "iters": attack.iters}},
    }
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(f"diagnostic report written to {report_path}")
    return 0


def cmd_landscape(args) -> int:
    settings, out = _prepare(args, "landscape")
    model = load_checkpoint(args.checkpoint, r_max=settings["awp_r_max"])
    bundle = generate_bundle(settings.bundle_params(), seed=settings["seed"])
    if model.input_dim != bundle.params.input_dim:
        raise ShapeError(
            f"checkpoint expects input dim {model.input_dim}, bundle has {bundle.params.input_dim}"
        )
    diag_n = min(256, bundle.train.inputs.shape[0])
    oracle = task_loss_oracle(model, bundle.train.inputs[:diag_n], bundle.train.labels[:diag_n])
    theta = model.get_flat().data
    probe_seed = seeds.sub_seed(settings["seed"], "landscape.directions")
    values, d1, d2, coords = dg.loss_slice(oracle.value, theta, grid=args.grid,
                                           extent=args.extent, probe_seed=probe_seed)
    payload = {
        "grid": args.grid,
        "extent": args.extent,
        "coords": [float(v) for v in coords],
        "values": [[float(v) for v in row] for row in values],
        "center_loss": float(values[args.grid // 2, args.grid // 2]),
        "direction_1": [float(v) for v in d1],
        "direction_2": [float(v) for v in d2],
        "probe_seed": probe_seed,
        "batch_size": diag_n,
    }
    slice_path = out / "slice.json"
    slice_path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"loss slice written to {slice_path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    summary_path = run_dir / "summary.json"
    if not summary_path.is_file():
        raise ConfigError(f"no summary.json in {run_dir}")
    summary = json.loads(summary_path.read_text())
    acc = summary["accuracies"]
    print(f"mode={summary['mode']} seed={summary['seed']} steps={summary['steps']}")
    print(f"{'domain':<10} {'clean':>8} {'adv':>8}")
    for name, row in acc.items():
        print(f"{name:<10} {row['clean']:>8.4f} {row['adv']:>8.4f}")
    trio = (acc["id"]["clean"], acc["ood"]["clean"], acc["id"]["adv"])
    recomputed = harmonic_mean(*trio) if all(v > 0 for v in trio) else None
    stored = summary.get("harmonic_mean")
    print(f"harmonic mean: {'-' if stored is None else f'{stored:.6f}'}")
    if stored is not None and recomputed is not None and abs(stored - recomputed) > 1e-9:
        print("warning: stored harmonic mean disagrees with recomputation", file=sys.stderr)
    print(f"relative parameter distance: {summary['relative_param_distance']:.6f}")
    cur = summary["curvature"]
    print(f"lambda_max: {cur['lambda_max']:.6f}   frob_normalized: {cur['frob_normalized']:.6f}")
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.is_file():
        n = sum(1 for _ in metrics_path.open())
        print(f"metrics records: {n}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grace", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model checkpoint (.grk)")

    p_train = sub.add_parser("train", help="train a model and write run artifacts")
    add_common(p_train)
    p_train.add_argument("--mode", choices=("grace", "vanilla_ft", "at"), help="training mode")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="per-domain clean/adversarial accuracy table")
    add_common(p_eval, checkpoint=True)
    p_eval.add_argument("--eps", type=float, help="attack radius override")
    p_eval.add_argument("--no-attack", action="store_true", help="clean accuracy only")
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diagnose", help="geometry diagnostics report")
    add_common(p_diag, checkpoint=True)
    p_diag.set_defaults(func=cmd_diagnose)

    p_land = sub.add_parser("landscape", help="2-D loss-surface slice")
    add_common(p_land, checkpoint=True)
    p_land.add_argument("--grid", type=int, default=21, help="odd grid size (default 21)")
    p_land.add_argument("--extent", type=float, default=0.5, help="slice half-width (default 0.5)")
    p_land.set_defaults(func=cmd_landscape)

    p_rep = sub.add_parser("report", help="print the summary table of a finished run")
    p_rep.add_argument("--run", required=True, help="run directory")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        code = e.code
        return int(code) if code is not None else 0
    try:
        return args.func(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, InputError, ShapeError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except GraceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:  # console script
    sys.exit(main())


if __name__ == "__main__":
    entry()
