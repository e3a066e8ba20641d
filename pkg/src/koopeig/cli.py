"""Reproducible experiment runner: pipeline stages, artifact export, CLI verbs."""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .control import (
    ClosedLoopConfig,
    LqgDesign,
    design_kalman,
    design_lqr_grid,
    pi_baseline,
    simulate_closed_loop,
    step_metrics,
    steady_state_targets,
)
from .errors import ConfigurationError, KoopeigError
from .inputdyn import (
    SpectralModel,
    extend_field_with_constant,
    fit_sigmoid_surrogate,
    lifted_input_samples,
    predict_lpv,
    sum_mean_absolute_error,
)
from .optimizer import TotalCost, concat_conservative_mode, pso_search, refine_with_nelder_mead
from .spatial import refine_field, separatrix_mask
from .spectral import reconstruct, temporal_cost
from .systems import (
    piecewise_constant_input,
    select_subgrid,
    simulate_driven,
    simulate_ensemble,
)

STAGES = ("simulate", "optimize", "refine", "inputdyn", "control")
STAGE_EXIT_CODES = {name: 10 * (i + 1) for i, name in enumerate(STAGES)}


@dataclass
class PipelineResult:
    """In-memory artifacts of one experiment run."""

    config: ExperimentConfig
    system: object = None
    grid: object = None
    ensemble: object = None
    space: object = None
    eigs: object = None
    modes: object = None
    phi0: object = None
    parts: object = None
    objective: float = float("nan")
    trace: object = None
    field: object = None
    phi0_fine: object = None
    lifted: object = None
    surrogate: object = None
    surrogate_info: dict = None
    predictions: dict = None
    control: dict = None
    out_dir: Optional[Path] = None
    stages_run: tuple = ()


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, data):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _write_manifest(res: PipelineResult, seed: int):
    if res.out_dir is None:
        return
    artifacts = sorted(p.name for p in res.out_dir.iterdir() if p.is_file() and p.name != "manifest.json")
    _write_json(
        res.out_dir / "manifest.json",
        {
            "config_hash": res.config.config_hash(),
            "seed": seed,
            "stages_completed": list(res.stages_run),
            "artifacts": artifacts,
            "version": __version__,
        },
    )


# --- stages ------------------------------------------------------------------


def _stage_simulate(res: PipelineResult, threads: int):
    cfg = res.config
    res.system = cfg.build_system()
    res.grid = cfg.build_grid()
    res.ensemble = simulate_ensemble(
        res.system,
        res.grid,
        cfg.simulate.dt,
        cfg.simulate.n_samples,
        cfg.simulate.reference_ic,
        noise_variance=cfg.simulate.noise_variance,
        noise_seed=cfg.simulate.noise_seed,
        threads=threads,
    )
    if res.out_dir:
        ens = res.ensemble
        rows = []
        for i in range(ens.n_trajectories):
            for k in range(ens.n_samples):
                rows.append((i, ens.time_axis[k], *ens.states[i, :, k]))
        header = ["trajectory", "t"] + [f"x{d + 1}" for d in range(ens.state_dim)]
        _write_csv(res.out_dir / "ensemble.csv", header, rows)


def _stage_optimize(res: PipelineResult, threads: int):
    cfg = res.config
    opt = cfg.optimizer
    res.space = cfg.build_search_space()
    full_cost = TotalCost(res.ensemble, res.grid, res.system, cfg.build_cost_config())
    include = None
    if opt.two_phase and cfg.cost.kpde_weight > 0 and opt.phase1_generations > 0:
        warm_cost = TotalCost(res.ensemble, res.grid, res.system, cfg.build_cost_config(kpde_weight=0.0))
        warm = pso_search(
            res.space, warm_cost, opt.pop_size, opt.phase1_generations, opt.seed,
            opt.inertia, opt.cognitive, opt.social, threads,
        )
        include = warm.free
    best = pso_search(
        res.space, full_cost, opt.pop_size, opt.generations, opt.seed,
        opt.inertia, opt.cognitive, opt.social, threads, include=include,
    )
    res.trace = best.trace
    if opt.nm_iterations > 0 and res.space.dim > 0:
        polished = refine_with_nelder_mead(res.space, full_cost, best.free, opt.nm_iterations)
        if polished.objective <= best.objective:
            best = replace(best, free=polished.free, eigs=polished.eigs,
                           objective=polished.objective, parts=polished.parts)
    res.eigs = best.eigs
    res.objective = best.objective
    res.modes, res.phi0, field, res.parts = full_cost.components(best.eigs)
    if field is not None:
        res.field = field

    if res.out_dir:
        _write_json(res.out_dir / "eigenvalues.json", res.eigs.to_dict())
        _write_json(
            res.out_dir / "costs.json",
            {
                "objective": res.objective,
                "j_total": res.parts.total,
                "j_temp": res.parts.temporal,
                "j_kpde": res.parts.kpde,
                "mode_fit_residual": res.modes.residual,
            },
        )
        nphi = res.phi0.shape[0]
        header = ["trajectory"] + [f"x0_{d + 1}" for d in range(res.ensemble.state_dim)] + [
            f"phi{j + 1}" for j in range(nphi)
        ]
        rows = [
            (i, *res.ensemble.initial_conditions[i], *res.phi0[:, i])
            for i in range(res.ensemble.n_trajectories)
        ]
        _write_csv(res.out_dir / "phi0.csv", header, rows)
        header = ["generation", "objective", "j_total", "j_temp", "j_kpde", "evaluations", "wall_time"]
        header += [f"p{j}" for j in range(res.space.dim)]
        _write_csv(res.out_dir / "trace.csv", header, list(res.trace.rows()))
        cref_rows = [tuple(row) for row in res.modes.c_ref]
        _write_csv(res.out_dir / "c_ref.csv", [f"phi{j + 1}" for j in range(nphi)], cref_rows)


def _stage_refine(res: PipelineResult, threads: int):
    cfg = res.config
    fine_grid, fine_interp = cfg.refine_grids()
    res.field, res.phi0_fine = refine_field(
        res.system, res.eigs, res.modes, fine_grid, fine_interp,
        cfg.simulate.dt, cfg.simulate.n_samples, cfg.cost.ridge_weight,
        cfg.cost.smoothing, shift=cfg.shift_vector(), threads=threads,
    )
    if cfg.refine.separatrix_margin > 0:
        mask = separatrix_mask(res.field, res.eigs, cfg.refine.separatrix_margin)
        res.field = replace(res.field, separatrix_mask=mask)
    if res.out_dir:
        field = res.field
        pts = field.grid.points()
        vals = field.values.reshape(field.n_phi, -1)
        mask = field.kpde_mask().reshape(-1)
        header = ["x1", "x2"] + [f"phi{j + 1}" for j in range(field.n_phi)] + ["mask"]
        rows = [(*pts[i], *vals[:, i], int(mask[i])) for i in range(pts.shape[0])]
        _write_csv(res.out_dir / "field.csv", header, rows)
        grads = field.gradient.reshape(field.n_phi * field.grid.ndim, -1)
        gh = ["x1", "x2"] + [
            f"dphi{j + 1}_dx{d + 1}" for j in range(field.n_phi) for d in range(field.grid.ndim)
        ]
        rows = [(*pts[i], *grads[:, i]) for i in range(pts.shape[0])]
        _write_csv(res.out_dir / "gradients.csv", gh, rows)


def _full_prediction_model(res: PipelineResult, gamma_reduced):
    """Assemble the prediction-ready model, adding the conservative mode
    (and a zero input-coupling row) when identification ran shifted."""
    cfg = res.config
    shift = cfg.shift_vector()
    if shift is None:
        return SpectralModel(res.eigs, res.modes, res.field, gamma_reduced, hull=res.grid)
    eigs_f, _, modes_f = concat_conservative_mode(res.eigs, res.phi0, res.modes, shift)
    field_f = extend_field_with_constant(res.field)
    p = res.system.input_dim

    def gamma_full(x):
        return np.vstack([np.zeros((1, p)), gamma_reduced(x)])

    return SpectralModel(eigs_f, modes_f, field_f, gamma_full, hull=res.grid)


def _stage_inputdyn(res: PipelineResult, threads: int):
    cfg = res.config
    idc = cfg.inputdyn
    res.lifted = lifted_input_samples(res.field, res.system)
    res.surrogate, res.surrogate_info = fit_sigmoid_surrogate(
        res.lifted, hidden=idc.hidden, seed=idc.seed,
        ridge_weight=idc.ridge_weight, refine_steps=idc.refine_steps,
    )
    dt = cfg.simulate.dt
    u = piecewise_constant_input(
        res.system.input_dim, idc.excitation_amplitude, idc.excitation_hold,
        idc.horizon, dt, idc.validation_seed,
    )
    x0 = np.asarray(idc.validation_x0, dtype=float)
    x_true = simulate_driven(res.system, x0, u, dt)

    model_interp = _full_prediction_model(res, res.lifted.interpolant())
    model_surr = _full_prediction_model(res, lambda x: res.surrogate.evaluate(x))
    phi_init = model_interp.field.evaluate(x0)[0]
    x_interp, _ = predict_lpv(model_interp, phi_init, u, dt)
    x_surr, _ = predict_lpv(model_surr, phi_init, u, dt)
    res.predictions = {
        "t": np.arange(u.shape[1]) * dt,
        "u": u,
        "x_true": x_true,
        "x_interp": x_interp,
        "x_surrogate": x_surr,
        "mae_interp": sum_mean_absolute_error(x_true, x_interp),
        "mae_surrogate": sum_mean_absolute_error(x_true, x_surr),
    }
    if res.out_dir:
        p = res.predictions
        m = res.system.state_dim
        header = (
            ["t"]
            + [f"u{j + 1}" for j in range(u.shape[0])]
            + [f"x{d + 1}_true" for d in range(m)]
            + [f"x{d + 1}_interp" for d in range(m)]
            + [f"x{d + 1}_surrogate" for d in range(m)]
        )
        rows = [
            (p["t"][k], *u[:, k], *x_true[:, k], *x_interp[:, k], *x_surr[:, k])
            for k in range(u.shape[1])
        ]
        _write_csv(res.out_dir / "predictions.csv", header, rows)
        _write_json(
            res.out_dir / "prediction_metrics.json",
            {
                "sum_mae_interp": p["mae_interp"],
                "sum_mae_surrogate": p["mae_surrogate"],
                "surrogate_mse": res.surrogate_info,
            },
        )
        _write_json(res.out_dir / "surrogate.json", res.surrogate.to_dict())


def _stage_control(res: PipelineResult, threads: int):
    cfg = res.config
    ctl = cfg.control
    sys_ = res.system
    shift = cfg.shift_vector()
    offset = shift if shift is not None else np.zeros(sys_.state_dim)
    lam = res.eigs.lam_matrix()
    c_meas = res.modes.c_ref
    track = np.asarray(ctl.track, dtype=int)
    c_track = c_meas[track]
    nphi, m = lam.shape[0], sys_.state_dim

    def gamma_fn(x):
        return res.surrogate.evaluate(x)

    kalman = design_kalman(lam, c_meas, ctl.q_o * np.eye(nphi), ctl.r_o * np.eye(m))
    q_phi = c_meas.T @ np.diag(ctl.q_x) @ c_meas
    schedule = design_lqr_grid(
        lam, gamma_fn, ctl.time_constants, q_phi, np.diag(ctl.r),
        cfg.schedule_grid().points(), res.surrogate,
    )
    field = res.field
    design = LqgDesign(
        lam=lam, c_meas=c_meas, c_track=c_track, offset=offset,
        track_indices=track, gamma_fn=gamma_fn, kalman_gain=kalman,
        schedule=schedule, phi_init_fn=lambda x: field.evaluate(x)[0],
    )

    x0 = np.asarray(ctl.initial_state, dtype=float) if ctl.initial_state else np.asarray(
        sys_.known_fixed_points[0], dtype=float
    )
    start_targets = x0[track]
    final_targets = np.asarray(ctl.setpoint_values, dtype=float)
    t_step = ctl.setpoint_time

    def setpoint_fn(t):
        return final_targets if t >= t_step else start_targets

    _, u_eq = steady_state_targets(lam, gamma_fn(x0), c_track, start_targets - offset[track])
    loop_cfg = ClosedLoopConfig(
        dt=ctl.dt, horizon=ctl.horizon, time_constants=ctl.time_constants,
        u_min=ctl.u_min, u_max=ctl.u_max, k_i=ctl.k_i,
        anti_windup=True, meas_noise_std=ctl.meas_noise_std, noise_seed=ctl.noise_seed,
    )
    run_lqg = simulate_closed_loop(sys_, design, loop_cfg, x0, setpoint_fn, track, u0=u_eq)
    pi = pi_baseline(ctl.pi_kp, ctl.pi_ki, u_offset=u_eq)
    run_pi = simulate_closed_loop(sys_, pi, loop_cfg, x0, setpoint_fn, track, u0=u_eq)

    metrics = []
    for name, run in (("lqg", run_lqg), ("pi", run_pi)):
        for j, state_idx in enumerate(track):
            met = step_metrics(run, int(state_idx), j, t_step)
            metrics.append({"controller": name, "channel": f"x{state_idx + 1}", **met})
    res.control = {
        "design": design,
        "loop_config": loop_cfg,
        "runs": {"lqg": run_lqg, "pi": run_pi},
        "metrics": metrics,
        "schedule_max_re": float(np.max(schedule.closed_loop_max_re)),
    }
    if res.out_dir:
        rows = []
        for name, run in (("lqg", run_lqg), ("pi", run_pi)):
            for k in range(run.t.size):
                rows.append(
                    (name, run.t[k], *run.states[:, k], *run.inputs_commanded[:, k],
                     *run.inputs_actual[:, k], *run.setpoints[:, k])
                )
        p = len(ctl.u_min)
        header = (
            ["controller", "t"]
            + [f"x{d + 1}" for d in range(m)]
            + [f"u{j + 1}_comm" for j in range(p)]
            + [f"u{j + 1}_act" for j in range(p)]
            + [f"setpoint{j + 1}" for j in range(len(track))]
        )
        _write_csv(res.out_dir / "control_runs.csv", header, rows)
        _write_csv(
            res.out_dir / "metrics.csv",
            ["controller", "channel", "settling_time", "overshoot_percent", "steady_state_error"],
            [
                (mrow["controller"], mrow["channel"], mrow["settling_time"],
                 mrow["overshoot_percent"], mrow["steady_state_error"])
                for mrow in metrics
            ],
        )
        _write_json(
            res.out_dir / "design.json",
            {
                "kalman_gain": kalman.tolist(),
                "schedule_w_k": schedule.w_k.tolist(),
                "schedule_b_k": schedule.b_k.tolist(),
                "schedule_max_closed_loop_re": float(np.max(schedule.closed_loop_max_re)),
                "integral_gains": list(ctl.k_i),
                "time_constants": list(ctl.time_constants),
                "u_min": list(ctl.u_min),
                "u_max": list(ctl.u_max),
            },
        )


_STAGE_FUNCS = {
    "simulate": _stage_simulate,
    "optimize": _stage_optimize,
    "refine": _stage_refine,
    "inputdyn": _stage_inputdyn,
    "control": _stage_control,
}


def stages_for(cfg: ExperimentConfig, requested=None) -> tuple:
    """Resolve the stage list: explicit request or everything enabled."""
    if requested:
        bad = set(requested) - set(STAGES)
        if bad:
            raise ConfigurationError(f"unknown stages: {sorted(bad)}")
        ordered = tuple(s for s in STAGES if s in set(requested))
    else:
        ordered = ("simulate", "optimize")
        if cfg.refine.enabled:
            ordered += ("refine",)
        if cfg.inputdyn.enabled:
            ordered += ("inputdyn",)
        if cfg.control.enabled:
            ordered += ("control",)
    return ordered


def run_experiment(
    cfg: ExperimentConfig,
    stages=None,
    out_dir=None,
    threads: Optional[int] = None,
    seed: Optional[int] = None,
) -> PipelineResult:
    """Execute the requested pipeline stages; raises on the first failure."""
    if seed is not None:
        cfg.optimizer.seed = seed
    threads = threads if threads is not None else cfg.optimizer.threads
    res = PipelineResult(config=cfg, out_dir=Path(out_dir) if out_dir else None)
    if res.out_dir:
        res.out_dir.mkdir(parents=True, exist_ok=True)
    for stage in stages_for(cfg, stages):
        try:
            _STAGE_FUNCS[stage](res, threads)
        except KoopeigError as err:
            err.stage = stage  # stage tag for CLI exit codes; partial artifacts remain
            raise
        res.stages_run = res.stages_run + (stage,)
        _write_manifest(res, cfg.optimizer.seed)
    return res


def run(config_path, stages=None, out_dir=None, threads=None, seed=None) -> int:
    """CLI-facing run: returns 0 or a stage-tagged exit code."""
    try:
        cfg = ExperimentConfig.from_file(config_path)
    except (KoopeigError, OSError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = out_dir or cfg.output.dir
    try:
        res = run_experiment(cfg, stages, out, threads, seed)
        print(f"completed stages {res.stages_run} -> {res.out_dir}")
        return 0
    except KoopeigError as err:
        stage = getattr(err, "stage", None)
        print(f"stage '{stage}' failed: {err}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(stage, 1)


_SWEEP_AXES = ("ridge_weight", "kpde_weight", "noise_variance", "subgrid_stride",
               "grid_counts", "interp_counts", "n_free_pairs")


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Return a copy of cfg with one sweep axis changed."""
    data = cfg.to_dict()
    if axis == "ridge_weight":
        data["cost"]["ridge_weight"] = float(value)
    elif axis == "kpde_weight":
        data["cost"]["kpde_weight"] = float(value)
    elif axis == "noise_variance":
        data["simulate"]["noise_variance"] = float(value)
    elif axis == "subgrid_stride":
        data["grid"]["subgrid_stride"] = int(value)
    elif axis == "grid_counts":
        data["grid"]["counts"] = [int(value)] * len(data["grid"]["counts"])
    elif axis == "interp_counts":
        data["cost"]["interp_counts"] = [int(value)] * 2
    elif axis == "n_free_pairs":
        data["eigs"]["n_free_pairs"] = int(value)
    else:
        raise ConfigurationError(f"unknown sweep axis '{axis}' (known: {_SWEEP_AXES})")
    return ExperimentConfig.from_dict(data)


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None, threads=None) -> list:
    """One identification run per axis value; returns aggregated rows.

    Each row is (value, j_temp, j_kpde, j_clean, wall_time); ``j_clean`` is
    the reconstruction error against a noise-free ensemble (equals j_temp
    when no noise is configured).
    """
    rows = []
    out = Path(out_dir) if out_dir else None
    for value in values:
        sub_cfg = apply_axis(cfg, axis, value)
        sub_out = out / f"{axis}_{value}" if out else None
        t0 = time.perf_counter()
        res = run_experiment(sub_cfg, stages=("simulate", "optimize"), out_dir=sub_out, threads=threads)
        wall = time.perf_counter() - t0
        j_clean = res.parts.temporal
        if sub_cfg.simulate.noise_variance > 0:
            clean = simulate_ensemble(
                res.system, res.grid, sub_cfg.simulate.dt, sub_cfg.simulate.n_samples,
                sub_cfg.simulate.reference_ic,
            )
            shift = sub_cfg.shift_vector()
            data = clean.shift_by(shift) if shift is not None else clean
            sub = select_subgrid(clean, res.grid)
            j_clean = temporal_cost(data, sub, res.modes, res.eigs, res.phi0)
        rows.append((value, res.parts.temporal, res.parts.kpde, j_clean, wall))
    if out:
        _write_csv(out / "sweep.csv", ["value", "j_temp", "j_kpde", "j_clean", "wall_time"], rows)
    return rows


def export_model(run_dir, out_path) -> int:
    """Bundle the JSON/CSV artifacts of a finished run into one model file."""
    run_dir = Path(run_dir)
    model = {}
    eig_path = run_dir / "eigenvalues.json"
    if not eig_path.exists():
        print(f"no eigenvalues.json under {run_dir}", file=sys.stderr)
        return 1
    model["eigenvalues"] = json.loads(eig_path.read_text())
    cref = run_dir / "c_ref.csv"
    if cref.exists():
        with open(cref) as fh:
            reader = csv.reader(fh)
            next(reader)
            model["c_ref"] = [[float(v) for v in row] for row in reader]
    for name in ("costs.json", "surrogate.json", "design.json"):
        path = run_dir / name
        if path.exists():
            model[name.split(".")[0]] = json.loads(path.read_text())
    _write_json(Path(out_path), model)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="koopeig", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run pipeline stages from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--stage", action="append", dest="stages", choices=STAGES)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--threads", type=int, default=None)

    p_sweep = sub.add_parser("sweep", help="run the pipeline over a parameter axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, choices=_SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--out", default=None)
    p_sweep.add_argument("--threads", type=int, default=None)

    p_val = sub.add_parser("validate-config", help="parse and validate a config file")
    p_val.add_argument("config")

    p_exp = sub.add_parser("export-model", help="bundle run artifacts into one model JSON")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.verb == "run":
        return run(args.config, args.stages, args.out, args.threads, args.seed)
    if args.verb == "sweep":
        try:
            cfg = ExperimentConfig.from_file(args.config)
            values = [float(v) for v in args.values.split(",")]
            out = args.out or (Path(cfg.output.dir) / "sweep")
            sweep(cfg, args.axis, values, out, args.threads)
            return 0
        except KoopeigError as err:
            print(f"sweep failed: {err}", file=sys.stderr)
            return 1
    if args.verb == "validate-config":
        try:
            ExperimentConfig.from_file(args.config)
            print("config ok")
            return 0
        except (KoopeigError, ValueError, OSError) as err:
            print(f"invalid config: {err}", file=sys.stderr)
            return 2
    if args.verb == "export-model":
        return export_model(args.run_dir, args.out)
    return 1  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
