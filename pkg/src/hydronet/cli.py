"""Command-line entry point wiring the modules into reproducible batch runs.

Commands: generate, train, eval, hpo, sens, longterm, gradcheck.  Every
command reads one INI config, prints a single machine-parseable summary
line, writes CSV reports, and renders matplotlib figures next to them.
Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import evaluation, figures, hpo, longterm, sensitivity
from .config import ConfigError, RunConfig, derive_seed, load_config
from .loading import settling_classes
from .models import (
    NetworkSurrogate,
    TARGETS,
    gradient_audit,
    input_memory_accounting,
    load_model,
    save_model,
)
from .oracle import OracleSurrogate, generate_dataset, read_swds1
from .training import train, write_history_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GRADCHECK_TOL = 1e-6


def _out_dirs(cfg: RunConfig):
    out = Path(cfg.paths["out_dir"])
    fig_dir = out / "figures"
    out.mkdir(parents=True, exist_ok=True)
    fig_dir.mkdir(parents=True, exist_ok=True)
    return out, fig_dir


def _load_dataset(cfg: RunConfig):
    path = Path(cfg.paths["dataset"])
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path} (run 'hydronet generate' first)")
    return read_swds1(path)


def _load_checkpoint(cfg: RunConfig, override=None):
    path = Path(override or cfg.paths["checkpoint"])
    if not str(path) or str(path) == ".":
        raise ConfigError("no checkpoint configured ([paths] checkpoint or --checkpoint)")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_generate(cfg: RunConfig, args) -> int:
    dataset_path = Path(cfg.paths["dataset"])
    if not dataset_path.parent.exists():
        raise FileNotFoundError(f"output directory does not exist: {dataset_path.parent}")
    oracle_cfg = cfg.oracle_config()
    dataset = generate_dataset(oracle_cfg, dataset_path)
    digest = hashlib.sha256(dataset_path.read_bytes()).hexdigest()
    _, fig_dir = _out_dirs(cfg)
    fig = figures.save_event_overview(dataset.params, oracle_cfg.duration_s,
                                      fig_dir / "events.png")
    acct = input_memory_accounting(dataset.n_cases, dataset.n_classes,
                                   dataset.n_times, dataset.n_points)
    print(f"generate dataset={dataset_path} M={dataset.n_cases} C={dataset.n_classes} "
          f"O={dataset.n_times} N={dataset.n_points} "
          f"input_reduction={acct.ratio:.6f} sha256={digest} figure={fig}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    arch = cfg.architecture_config(kind=args.arch)
    train_cfg = cfg.train_config(target=args.target)
    out, fig_dir = _out_dirs(cfg)

    result = train(dataset, train_cfg, arch)
    result.model.meta["test_cases"] = [int(i) for i in result.split.test]
    result.model.meta["val_cases"] = [int(i) for i in result.split.val]

    tag = f"{train_cfg.target}_{arch.kind}"
    ckpt = out / f"checkpoint_{tag}.swmd"
    save_model(result.model, ckpt)
    history = out / f"loss_{tag}.csv"
    write_history_csv(history, result)
    fig = figures.save_loss_curve(result.train_history, result.val_history,
                                  fig_dir / f"loss_{tag}.png")
    if result.diverged:
        print(f"train arch={arch.kind} target={train_cfg.target} diverged=1 "
              f"message={result.message!r} checkpoint={ckpt}")
        return EXIT_NUMERIC
    print(f"train arch={arch.kind} target={train_cfg.target} iterations={train_cfg.iterations} "
          f"best_iteration={result.best_iteration} best_val_mse={result.best_val_mse:.6e} "
          f"checkpoint={ckpt} history={history} figure={fig}")
    return EXIT_OK


def _split_indices(model_meta: dict, dataset, which: str):
    key = {"test": "test_cases", "val": "val_cases"}[which]
    if key not in model_meta:
        raise ConfigError(f"checkpoint metadata has no stored {which} split")
    idx = [i for i in model_meta[key] if i < dataset.n_cases]
    if not idx:
        raise ConfigError("stored split does not match this dataset")
    return np.array(idx, dtype=int)


def cmd_eval(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    model = _load_checkpoint(cfg, args.checkpoint)
    surrogate = NetworkSurrogate(model)
    cases = _split_indices(model.meta, dataset, args.split)
    report = evaluation.per_case_report(surrogate, dataset, cases)
    out, fig_dir = _out_dirs(cfg)

    evaluation.write_case_reports_csv(out / "eval_cases.csv", report)
    evaluation.write_category_summary_csv(out / "eval_categories.csv", report)
    fits = {}
    summary_bits = []
    for target in surrogate.target_names:
        fits[target] = evaluation.lognormal_fit(report.mse_values(target))
        ch = evaluation.TARGET_CHANNELS[target]
        preds, truths = [], []
        for case in cases:
            pred = surrogate.predict_case(dataset.params[case], dataset.classes,
                                          dataset.times, dataset.coords[case])
            j = surrogate.target_names.index(target)
            preds.append(pred[..., j].ravel())
            truths.append(np.asarray(dataset.solutions[case, ..., ch], dtype=np.float64).ravel())
        pred_all = np.concatenate(preds)
        truth_all = np.concatenate(truths)
        pooled_r2 = evaluation.r2(pred_all, truth_all)
        counts, t_edges, p_edges = evaluation.parity_histogram(pred_all, truth_all, bins=60)
        evaluation.write_parity_csv(out / f"eval_parity_{target}.csv", counts, t_edges, p_edges)
        figures.save_parity(counts, t_edges, p_edges, target, pooled_r2,
                            fig_dir / f"parity_{target}.png")
        figures.save_error_distribution(report.mse_values(target), fits[target],
                                        report.fractions[target], target,
                                        fig_dir / f"errors_{target}.png")
        frac = report.fractions[target]
        summary_bits.append(
            f"{target}: r2_pooled={pooled_r2:.4f} high={frac['high']:.3f} "
            f"medium={frac['medium']:.3f} low={frac['low']:.3f} "
            f"mu={fits[target].mu:.3f} sigma={fits[target].sigma:.3f}"
        )
    evaluation.write_lognormal_csv(out / "eval_lognormal.csv", fits)
    print(f"eval split={args.split} n_cases={len(cases)} | " + " | ".join(summary_bits))
    return EXIT_OK


def cmd_hpo(cfg: RunConfig, args) -> int:
    dataset = _load_dataset(cfg)
    h = cfg.hpo
    n_train = dataset.n_cases - 2 * (dataset.n_cases // 10)
    space = {
        "lr": hpo.FloatDomain(h["lr_min"], h["lr_max"], log=True),
        "decay": hpo.FloatDomain(h["decay_min"], h["decay_max"]),
        "hidden": hpo.IntDomain(h["hidden_min"], h["hidden_max"]),
        "encoder_layers": hpo.IntDomain(h["encoder_layers_min"], h["encoder_layers_max"]),
        "decoder_layers": hpo.IntDomain(h["decoder_layers_min"], h["decoder_layers_max"]),
        "batch_cases": hpo.IntDomain(h["batch_cases_min"], min(h["batch_cases_max"], n_train)),
        "batch_times": hpo.IntDomain(h["batch_times_min"], min(h["batch_times_max"], dataset.n_times)),
        "batch_points": hpo.IntDomain(h["batch_points_min"], min(h["batch_points_max"], dataset.n_points)),
    }

    def objective(assignment: dict) -> float:
        arch = cfg.architecture_config()
        arch = type(arch)(kind=arch.kind, encoder_layers=assignment["encoder_layers"],
                          decoder_layers=assignment["decoder_layers"],
                          hidden=assignment["hidden"], activation=arch.activation,
                          merge=arch.merge, output_mode="separate")
        tc = cfg.train_config(target=h["target"], iterations=h["iterations"],
                              lr=assignment["lr"], decay=assignment["decay"],
                              batch_cases=assignment["batch_cases"],
                              batch_times=assignment["batch_times"],
                              batch_points=assignment["batch_points"])
        result = train(dataset, tc, arch)
        if result.diverged or not np.isfinite(result.best_val_mse):
            raise RuntimeError(result.message or "training diverged")
        return result.best_val_mse

    study = hpo.run_study(objective, space, n_trials=h["trials"],
                          seed=derive_seed(cfg.seed, 2), n_startup=h["startup_trials"])
    out, fig_dir = _out_dirs(cfg)
    hpo.write_trials_csv(out / "hpo_trials.csv", study.trials, space)
    fig = figures.save_hpo_history(study.trials, hpo.best_so_far(study.trials),
                                   fig_dir / "hpo.png")
    best = study.best
    params = " ".join(f"{k}={v}" for k, v in best.params.items())
    print(f"hpo trials={len(study.trials)} best_trial={best.number} "
          f"best_val_mse={best.value:.6e} {params} table={out / 'hpo_trials.csv'} figure={fig}")
    return EXIT_OK


def cmd_sens(cfg: RunConfig, args) -> int:
    model = _load_checkpoint(cfg, args.checkpoint)
    geometry = cfg.geometry()
    points = sensitivity.symmetry_plane_grid(geometry, nx=args.nx, nz=args.nz)
    base = sensitivity.DEMO_PARAMS
    classes = args.ws or list(sensitivity.DEMO_CLASSES)
    fields = [sensitivity.grad_wrt_loading(model, base, w_s, [args.time], points)
              for w_s in classes]
    out, fig_dir = _out_dirs(cfg)
    csv_path = out / "sensitivity.csv"
    sensitivity.export_sensitivity(fields, csv_path)
    fig = figures.save_sensitivity_maps(fields, fig_dir / "sensitivity.png")
    print(f"sens time_s={args.time} classes={len(classes)} points={len(points)} "
          f"target={model.meta.get('target')} csv={csv_path} figure={fig}")
    return EXIT_OK


def cmd_longterm(cfg: RunConfig, args) -> int:
    record_path = Path(cfg.paths["record"])
    if not str(record_path) or str(record_path) == ".":
        raise ConfigError("no record configured ([paths] record)")
    if not record_path.exists():
        raise FileNotFoundError(f"record not found: {record_path}")
    record = longterm.read_record_csv(record_path)
    geometry = cfg.geometry()
    classes = settling_classes(cfg.oracle["classes"])

    if cfg.longterm["predictor"] == "oracle":
        predictor = OracleSurrogate(geometry, cfg.oracle["ode_step_s"], cfg.oracle["kappa_max"])
    else:
        predictor = NetworkSurrogate(_load_checkpoint(cfg, cfg.longterm["predictor"]))
        if "concentration" not in predictor.target_names:
            raise ConfigError("longterm needs a concentration-capable checkpoint")

    segments, fits, series, effluent = longterm.run_workflow(
        record, predictor, classes,
        q_on=cfg.longterm["q_on"], q_off=cfg.longterm["q_off"],
        min_gap_s=cfg.longterm["min_gap_min"] * 60.0, geometry=geometry)
    out, fig_dir = _out_dirs(cfg)
    longterm.write_fit_table_csv(out / "longterm_fits.csv", segments, fits)
    longterm.write_effluent_csv(out / "longterm_effluent.csv", effluent)
    fig = figures.save_longterm(record, segments, effluent, fig_dir / "longterm.png")
    converged = sum(1 for f in fits if f.converged)
    print(f"longterm events={len(segments)} converged_fits={converged}/{len(fits)} "
          f"outlet_load_kg={effluent.outlet_load:.6g} inlet_load_kg={effluent.inlet_load:.6g} "
          f"removal_ratio={effluent.removal_ratio:.4f} figure={fig}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    audit = gradient_audit(seed=derive_seed(cfg.seed, 3), draws_per_kind=args.draws)
    worst = max(audit.values())
    detail = " ".join(f"{kind}={err:.3e}" for kind, err in audit.items())
    ok = worst < GRADCHECK_TOL
    print(f"gradcheck ok={int(ok)} tol={GRADCHECK_TOL:.0e} worst={worst:.3e} {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hydronet",
        description="Operator-learning surrogate engine for unsteady stormwater treatment",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="INI run configuration")
        p.set_defaults(fn=fn)
        return p

    add("generate", cmd_generate, "sample events and write the physics dataset")

    p_train = add("train", cmd_train, "train one architecture on one target")
    p_train.add_argument("--target", choices=TARGETS, default=None)
    p_train.add_argument("--arch", choices=("ann", "deeponet", "mionet", "cpnn"), default=None)

    p_eval = add("eval", cmd_eval, "per-case accuracy reports for a checkpoint")
    p_eval.add_argument("--checkpoint", default=None)
    p_eval.add_argument("--split", choices=("test", "val"), default="test")

    add("hpo", cmd_hpo, "TPE search over training hyperparameters")

    p_sens = add("sens", cmd_sens, "loading-parameter sensitivity maps")
    p_sens.add_argument("--checkpoint", default=None)
    p_sens.add_argument("--time", type=float, default=sensitivity.DEMO_TIME_S)
    p_sens.add_argument("--ws", type=float, action="append", default=None,
                        help="settling velocity (repeatable)")
    p_sens.add_argument("--nx", type=int, default=48)
    p_sens.add_argument("--nz", type=int, default=48)

    add("longterm", cmd_longterm, "segment a record, fit events, predict effluent")

    p_gc = add("gradcheck", cmd_gradcheck, "verify architecture gradients against FD")
    p_gc.add_argument("--draws", type=int, default=25)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (RuntimeError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
