"""End-to-end four-step pipeline over file artifacts.

Each stage reads its inputs from the run directory and writes deterministic
artifacts (CSV/JSON plus rendered figures), so every step of the
identification is independently re-runnable and inspectable:

  gen-data -> estimate -> table -> correlate -> train -> assemble
           -> simulate / evaluate / mpc

The built-in cases freeze a complete recipe per benchmark: the reactor
case identifies the hybrid from eight scenarios and validates it on a
held-out MV profile; the tank case identifies the hybrid and closes the
loop with the tracking NMPC against the truth plant.
"""
from __future__ import annotations

import re
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import datagen, models, plots
from .analyze import build_flux_table, correlation_report
from .core import (
    MeasurementDataset,
    PiecewiseConstantProfile,
    TimeGrid,
    Trajectory,
)
from .errors import ConfigError, DependencyError
from .estimate import (
    EstimateResult,
    EstimationConfig,
    default_disc_grid,
    estimate_fluxes,
)
from .hybrid import assemble_hybrid, evaluate_hybrid, simulate_hybrid
from .integrate import IntegratorConfig, simulate
from .mlp import MlpSpec, TrainConfig, train_flux_mlp
from .mpc import closed_loop, tank_mpc_config
from .nls import LmConfig, LmReport
from . import serialize as ser


@dataclass(frozen=True)
class PipelineConfig:
    """One run of the four-step identification on a built-in case."""

    case: str = "cstr"
    seed: int = 7
    n_scenarios: int = 9
    meas_period: float = 1.0
    noise_frac: float = 0.02
    coarsen: int = 20
    w_reg: float = 0.3
    tau: float = 0.5
    hidden: Tuple[int, int] = (4, 4)
    dropout_rate: float = 0.1
    net_seed: int = 11
    epochs: int = 3000
    train_seed: int = 3
    input_jitter: float = 0.35
    holdout: bool = True
    eval_span: float = 120.0  # validation-simulation window
    mpc_duration: float = 600.0
    mpc_setpoint: float = 0.7

    def __post_init__(self):
        if self.case not in ("cstr", "three-tank"):
            raise ConfigError(f"unknown case {self.case!r}")

    def to_doc(self) -> Dict:
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc


def cstr_pipeline_config(seed: int = 7, **overrides) -> PipelineConfig:
    """Reactor recipe: 20 h scenarios at 60 s sampling, one held out."""
    return replace(PipelineConfig(case="cstr", seed=seed), **overrides)


def tank_pipeline_config(seed: int = 7, **overrides) -> PipelineConfig:
    """Tank recipe: 40 s MV segments at 10 s sampling feed the NMPC study."""
    base = PipelineConfig(
        case="three-tank",
        seed=seed,
        n_scenarios=6,
        meas_period=10.0,
        coarsen=2,
        w_reg=0.01,
        epochs=2000,
        holdout=False,
    )
    return replace(base, **overrides)


def pipeline_config_from_doc(doc: Dict) -> PipelineConfig:
    known = {f for f in PipelineConfig.__dataclass_fields__}
    extra = set(doc) - known - {"schema_version", "config_hash"}
    if extra:
        raise ConfigError(f"unknown config fields: {sorted(extra)}")
    kw = {k: v for k, v in doc.items() if k in known}
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    return PipelineConfig(**kw)


# ---------------------------------------------------------------------------
# case plumbing


def case_setup(cfg: PipelineConfig):
    """(model, truth_flux, scenarios) for a built-in case."""
    if cfg.case == "cstr":
        model, tf = datagen.cstr_truth_setup()
        scen = datagen.cstr_scenarios(
            n_scenarios=cfg.n_scenarios, rng_seed=cfg.seed
        )
    else:
        model, tf = datagen.tank_truth_setup()
        scen = datagen.tank_scenarios(
            n_scenarios=cfg.n_scenarios, segment=40.0, rng_seed=cfg.seed
        )
    return model, tf, scen


def _holdout_index(scenarios) -> int:
    """Hold out the scenario with the median time-averaged first MV."""
    means = [float(np.mean(s.mv.values[:, 0])) for s in scenarios]
    return int(np.argsort(means)[len(means) // 2])


def _meta(cfg: PipelineConfig) -> Dict[str, str]:
    return {"config_hash": ser.config_hash(cfg.to_doc()), "seed": str(cfg.seed)}


def _slug(name: str) -> str:
    """Filesystem-safe stem for a flux name ("p2 [kmol/(m3 min)]" -> "p2")."""
    bare = re.sub(r"\s*\[.*\]\s*$", "", name)
    return re.sub(r"[^\w.-]+", "_", bare)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run the {stage!r} stage first"
        )
    return path


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(cfg: PipelineConfig, out: Path) -> Dict:
    model, tf, scen = case_setup(cfg)
    dss = datagen.generate_pseudo_data(
        model, tf, scen,
        meas_period=cfg.meas_period,
        noise_frac=cfg.noise_frac,
        rng_seed=cfg.seed,
    )
    ds_dir = out / "datasets"
    ds_dir.mkdir(parents=True, exist_ok=True)
    for ds in dss:
        ser.write_dataset_csv(ds_dir, ds, meta=_meta(cfg))
    ho = _holdout_index(scen) if cfg.holdout else None
    index = {
        "dataset_ids": [ds.dataset_id for ds in dss],
        "holdout_id": dss[ho].dataset_id if ho is not None else None,
        "holdout_x0": list(scen[ho].x0) if ho is not None else None,
        **_meta(cfg),
    }
    ser.write_json(out / "datasets" / "index.json", index)
    ser.write_json(out / "config.json", {**cfg.to_doc(), **_meta(cfg)})
    return index


def _load_index(out: Path) -> Dict:
    return ser.read_json(_require(out / "datasets" / "index.json", "gen-data"))


def _training_sets(cfg: PipelineConfig, out: Path) -> List[MeasurementDataset]:
    index = _load_index(out)
    ids = [i for i in index["dataset_ids"] if i != index["holdout_id"]]
    return [ser.read_dataset_csv(out / "datasets", i) for i in ids]


def _estimation_config(cfg: PipelineConfig, ds: MeasurementDataset) -> EstimationConfig:
    return EstimationConfig(
        disc_grid=default_disc_grid(ds.meas_grid, cfg.coarsen),
        w_reg=cfg.w_reg,
    )


def stage_estimate(cfg: PipelineConfig, out: Path) -> Dict:
    model, _, _ = case_setup(cfg)
    est_dir = out / "estimate"
    est_dir.mkdir(parents=True, exist_ok=True)
    summary = {}
    for ds in _training_sets(cfg, out):
        res = estimate_fluxes(model, ds, _estimation_config(cfg, ds))
        doc = {
            "dataset_id": ds.dataset_id,
            "fit_cost": res.fit_cost,
            "reg_cost": res.reg_cost,
            "fit_per_point": res.fit_cost / res.per_point_residuals.size,
            "x0_star": list(res.x0_star),
            "iterations": res.lm_report.iterations,
            "termination": res.lm_report.termination_reason,
            **_meta(cfg),
        }
        ser.write_json(est_dir / f"{ds.dataset_id}.json", doc)
        ser.write_profile_csv(
            est_dir / f"{ds.dataset_id}.flux.csv", res.p_star,
            list(model.flux_names), meta=_meta(cfg),
        )
        ser.write_trajectory_csv(
            est_dir / f"{ds.dataset_id}.traj.csv", res.trajectory,
            list(model.state_names), meta=_meta(cfg),
        )
        summary[ds.dataset_id] = doc["fit_per_point"]
    ser.write_json(est_dir / "summary.json", {"fit_per_point": summary, **_meta(cfg)})
    return summary


def _load_results(cfg: PipelineConfig, out: Path) -> List[EstimateResult]:
    model, _, _ = case_setup(cfg)
    results = []
    for ds in _training_sets(cfg, out):
        est_dir = out / "estimate"
        doc = ser.read_json(_require(est_dir / f"{ds.dataset_id}.json", "estimate"))
        p_star, _ = ser.read_profile_csv(est_dir / f"{ds.dataset_id}.flux.csv")
        _, _, rows = ser.read_csv(est_dir / f"{ds.dataset_id}.traj.csv")
        grid = TimeGrid(rows[:, 0], unit=ds.meas_grid.unit)
        states = rows[:, 1 : 1 + model.n_x]
        traj = Trajectory(grid, states, model.output_map(states))
        results.append(
            EstimateResult(
                p_star=p_star,
                x0_star=np.asarray(doc["x0_star"], dtype=float),
                trajectory=traj,
                fit_cost=float(doc["fit_cost"]),
                reg_cost=float(doc["reg_cost"]),
                per_point_residuals=np.empty((0, model.n_z)),
                lm_report=LmReport(
                    theta_opt=np.empty(0),
                    cost=float(doc["fit_cost"]) + float(doc["reg_cost"]),
                    iterations=int(doc["iterations"]),
                    termination_reason=str(doc["termination"]),
                ),
                dataset_id=ds.dataset_id,
                mv=ds.mv,
            )
        )
    return results


def stage_table(cfg: PipelineConfig, out: Path) -> Path:
    model, _, _ = case_setup(cfg)
    table = build_flux_table(_load_results(cfg, out), model)
    path = out / "table.csv"
    ser.write_table_csv(path, table, meta=_meta(cfg))
    return path


def stage_correlate(cfg: PipelineConfig, out: Path):
    table = ser.read_table_csv(_require(out / "table.csv", "table"))
    report = correlation_report(table, cfg.tau)
    ser.write_json(
        out / "correlation.json",
        {**ser.correlation_to_doc(report), **_meta(cfg)},
    )
    plots.plot_correlation_matrix(report, out / "correlation.png")
    return report


def stage_train(cfg: PipelineConfig, out: Path) -> Dict:
    table = ser.read_table_csv(_require(out / "table.csv", "table"))
    report = ser.correlation_from_doc(
        ser.read_json(_require(out / "correlation.json", "correlate"))
    )
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    t_cfg = TrainConfig(
        epochs=cfg.epochs, seed=cfg.train_seed, input_jitter=cfg.input_jitter
    )
    summary = {}
    for flux, inputs in sorted(report.selected_inputs.items()):
        if not inputs:  # screened to a constant; no net to train
            continue
        spec = MlpSpec(
            layer_sizes=(len(inputs), *cfg.hidden, 1),
            activations=("tanh", "linear", "linear"),
            dropout_rate=cfg.dropout_rate,
            seed=cfg.net_seed,
        )
        net, rep = train_flux_mlp(table, flux, inputs, spec, t_cfg)
        ser.write_json(
            model_dir / f"{_slug(flux)}.json",
            {
                "flux": flux,
                "inputs": list(inputs),
                "mlp": ser.mlp_to_dict(net),
                "final_train_mse": rep.final_train_mse,
                "final_val_mse": rep.final_val_mse,
                **_meta(cfg),
            },
        )
        summary[flux] = rep.final_val_mse
    return summary


def stage_assemble(cfg: PipelineConfig, out: Path):
    model, _, _ = case_setup(cfg)
    report = ser.correlation_from_doc(
        ser.read_json(_require(out / "correlation.json", "correlate"))
    )
    trained = {}
    for flux, inputs in report.selected_inputs.items():
        if not inputs:
            continue
        doc = ser.read_json(
            _require(out / "models" / f"{_slug(flux)}.json", "train")
        )
        trained[flux] = ser.mlp_from_dict(doc["mlp"])
    hm = assemble_hybrid(model, report, trained, report.constant_flux_flags)
    ser.write_json(out / "hybrid.json", {**ser.hybrid_to_doc(hm), **_meta(cfg)})
    return hm


def load_hybrid(cfg: PipelineConfig, out: Path):
    model, _, _ = case_setup(cfg)
    return ser.hybrid_from_doc(
        ser.read_json(_require(out / "hybrid.json", "assemble")), model
    )


def stage_simulate(cfg: PipelineConfig, out: Path) -> Dict:
    """Validate the hybrid on the held-out MV profile against the truth."""
    model, tf, scen = case_setup(cfg)
    index = _load_index(out)
    if index["holdout_id"] is None:
        raise ConfigError("this case has no held-out scenario to simulate")
    ho = scen[_holdout_index(scen)]
    hm = load_hybrid(cfg, out)
    grid = TimeGrid(
        np.arange(0.0, cfg.eval_span + 1e-9, cfg.meas_period),
        unit=model.time_unit,
    )
    i_cfg = datagen.default_integrator(cfg.meas_period, model.time_unit)
    tr_true = simulate(model, ho.x0, ho.mv, tf, grid, i_cfg)
    tr_hyb = simulate_hybrid(hm, ho.x0, ho.mv, grid, i_cfg)
    u = np.array([ho.mv(t) for t in grid.points])
    p_true = np.array([tf(x, uu, t) for x, uu, t in zip(tr_hyb.states, u, grid.points)])
    p_hyb = hm.flux_fn()(tr_hyb.states, u, grid.points)
    sim_dir = out / "simulate"
    sim_dir.mkdir(parents=True, exist_ok=True)
    extra = {}
    for j, nm in enumerate(model.state_names):
        extra[f"{nm}_true"] = tr_true.states[:, j]
    for j, nm in enumerate(model.flux_names):
        extra[f"{nm}_hybrid"] = p_hyb[:, j]
        extra[f"{nm}_true"] = p_true[:, j]
    ser.write_trajectory_csv(
        sim_dir / "holdout.csv", tr_hyb, list(model.state_names),
        meta=_meta(cfg), extra=extra,
    )
    rel = {}
    for j, nm in enumerate(model.state_names):
        scale = np.sqrt(np.mean(tr_true.states[:, j] ** 2))
        rel[nm] = float(
            np.sqrt(np.mean((tr_hyb.states[:, j] - tr_true.states[:, j]) ** 2))
            / max(scale, 1e-300)
        )
    flux_rel = {}
    for j, nm in enumerate(model.flux_names):
        scale = np.sqrt(np.mean(p_true[:, j] ** 2))
        if scale > 1e-12:
            flux_rel[nm] = float(
                np.sqrt(np.mean((p_hyb[:, j] - p_true[:, j]) ** 2)) / scale
            )
    summary = {
        "holdout_id": index["holdout_id"],
        "state_rel_rmse": rel,
        "flux_rel_rmse": flux_rel,
        **_meta(cfg),
    }
    ser.write_json(sim_dir / "summary.json", summary)
    plots.plot_holdout_validation(
        grid.points, tr_true.states, tr_hyb.states, p_true, p_hyb,
        list(model.state_names), list(model.flux_names),
        sim_dir / "holdout.png",
    )
    return summary


def stage_evaluate(cfg: PipelineConfig, out: Path) -> Dict:
    """Re-simulate the training datasets with the hybrid (Step-4 check)."""
    hm = load_hybrid(cfg, out)
    dss = _training_sets(cfg, out)
    results = _load_results(cfg, out)
    i_cfg = datagen.default_integrator(cfg.meas_period, hm.time_unit)
    evals = evaluate_hybrid(hm, dss, [ds.mv for ds in dss], i_cfg, results)
    doc = {
        "datasets": [
            {
                "dataset_id": e.dataset_id,
                "fit": e.fit,
                "step1_fit": e.step1_fit,
                "delta": e.delta,
                "error": e.error,
            }
            for e in evals
        ],
        **_meta(cfg),
    }
    (out / "evaluate").mkdir(parents=True, exist_ok=True)
    ser.write_json(out / "evaluate" / "evaluation.json", doc)
    return doc


def stage_mpc(cfg: PipelineConfig, out: Path) -> Dict:
    """Close the loop: identified hybrid controller vs Torricelli plant."""
    if cfg.case != "three-tank":
        raise ConfigError("the mpc stage applies to the three-tank case")
    model, tf, _ = case_setup(cfg)
    hm = load_hybrid(cfg, out)
    x0, u_ss = datagen.tank_steady_state(0.5)
    sp_row = np.zeros(model.n_z)
    sp_row[1] = cfg.mpc_setpoint
    sp = PiecewiseConstantProfile(
        TimeGrid([0.0, cfg.mpc_duration + 400.0], unit=model.time_unit),
        sp_row[None, :],
    )
    mpc_cfg = replace(tank_mpc_config(sp), lm=LmConfig(max_iter=15))
    log = closed_loop(model, tf, hm, mpc_cfg, cfg.mpc_duration, x0)
    mpc_dir = out / "mpc"
    mpc_dir.mkdir(parents=True, exist_ok=True)
    header = (
        ["t", *model.state_names]
        + [f"{n}_meas" for n in model.output_names]
        + [f"u_{n}" for n in model.mv_names]
        + ["cost", "iterations", "fallback"]
    )
    rows = np.column_stack([
        log.times, log.states, log.measured, log.applied,
        log.costs, log.iterations, log.fallbacks.astype(float),
    ])
    ser.write_csv(mpc_dir / "closed_loop.csv", header, rows, meta=_meta(cfg))
    err = log.states[:, 1] - cfg.mpc_setpoint
    summary = {
        "setpoint": cfg.mpc_setpoint,
        "steady_offset": float(np.mean(err[-10:])),
        "fallback_steps": int(np.sum(log.fallbacks)),
        "aborted": log.aborted,
        **_meta(cfg),
    }
    ser.write_json(mpc_dir / "summary.json", summary)
    # wall time is run-dependent; report it but keep artifacts reproducible
    summary["max_wall_time"] = float(np.max(log.wall_times))
    plots.plot_closed_loop(
        log.times, log.states, log.applied, cfg.mpc_setpoint,
        list(model.state_names), list(model.mv_names),
        mpc_dir / "closed_loop.png",
    )
    return summary


STAGES = {
    "gen-data": stage_gen_data,
    "estimate": stage_estimate,
    "table": stage_table,
    "correlate": stage_correlate,
    "train": stage_train,
    "assemble": stage_assemble,
    "simulate": stage_simulate,
    "evaluate": stage_evaluate,
    "mpc": stage_mpc,
}


def run_pipeline(cfg: PipelineConfig, out: Path) -> Dict:
    """Chain every stage that applies to the case; returns stage summaries."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    order = ["gen-data", "estimate", "table", "correlate", "train", "assemble"]
    if cfg.case == "cstr":
        order += ["simulate", "evaluate"]
    else:
        order += ["evaluate", "mpc"]
    return {name: STAGES[name](cfg, out) for name in order}
