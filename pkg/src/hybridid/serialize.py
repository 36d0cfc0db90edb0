"""Artifact serialization: delimited datasets/tables and JSON documents.

Every artifact embeds a schema version plus the run's config hash and seed
in a small metadata header, and floats are written with shortest
round-trip precision, so re-running a stage with identical inputs
reproduces each file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .analyze import CorrelationReport, FluxTable
from .core import MeasurementDataset, PiecewiseConstantProfile, TimeGrid, Trajectory
from .errors import ConfigError, ConsistencyError
from .hybrid import Constant, HybridModel, MlpBinding
from .mlp import mlp_from_dict, mlp_to_dict

SCHEMA_VERSION = 1


def format_float(x: float) -> str:
    """Shortest decimal that round-trips to the same float64."""
    return repr(float(x))


def config_hash(doc: Mapping) -> str:
    """Stable 12-hex-digit digest of a JSON-serializable config document."""
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def write_json(path, doc: Mapping) -> None:
    body = {"schema_version": SCHEMA_VERSION, **doc}
    Path(path).write_text(json.dumps(body, sort_keys=True, indent=1) + "\n")


def read_json(path) -> Dict:
    doc = json.loads(Path(path).read_text())
    ver = doc.get("schema_version")
    if ver != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema version {ver!r}")
    return doc


# ---------------------------------------------------------------------------
# Delimited files: "# key=value" metadata lines, then a header row


def write_csv(path, header: Sequence[str], rows: np.ndarray,
              meta: Optional[Mapping[str, str]] = None) -> None:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.size and rows.shape[1] != len(header):
        raise ConfigError(f"{len(header)} columns vs {rows.shape[1]} data columns")
    lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
    lines.append(",".join(header))
    for r in rows:
        lines.append(",".join(format_float(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> Tuple[Dict[str, str], List[str], np.ndarray]:
    meta: Dict[str, str] = {}
    header: List[str] = []
    data: List[List[float]] = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key.strip()] = val
        elif not header:
            header = [c.strip() for c in line.split(",")]
        else:
            data.append([float(v) for v in line.split(",")])
    if not header:
        raise ConfigError(f"{path}: no header row")
    arr = np.asarray(data, dtype=float).reshape(len(data), len(header))
    return meta, header, arr


# ---------------------------------------------------------------------------
# Profiles, datasets, trajectories


def write_profile_csv(path, profile: PiecewiseConstantProfile,
                      names: Sequence[str],
                      meta: Optional[Mapping[str, str]] = None) -> None:
    """Knots with interval values; the final knot row repeats the last value."""
    vals = np.vstack([profile.values, profile.values[-1:]])
    rows = np.column_stack([profile.grid.points, vals])
    m = {"unit": profile.grid.unit, **(meta or {})}
    write_csv(path, ["t_knot", *names], rows, m)


def read_profile_csv(path) -> Tuple[PiecewiseConstantProfile, List[str]]:
    meta, header, rows = read_csv(path)
    grid = TimeGrid(rows[:, 0], unit=meta.get("unit", ""))
    return PiecewiseConstantProfile(grid, rows[:-1, 1:]), header[1:]


def dataset_paths(directory, dataset_id: str) -> Tuple[Path, Path]:
    d = Path(directory)
    return d / f"{dataset_id}.csv", d / f"{dataset_id}.mv.csv"


def write_dataset_csv(directory, ds: MeasurementDataset,
                      meta: Optional[Mapping[str, str]] = None) -> Path:
    """Measurement rows plus a sidecar MV-knots file."""
    main, side = dataset_paths(directory, ds.dataset_id)
    names = list(ds.output_names)
    header = ["t"] + [f"z_{n}" for n in names] + [f"w_{n}" for n in names]
    w_diag = np.einsum("kii->ki", np.asarray(ds.weights, dtype=float))
    if not np.allclose(ds.weights, w_diag[:, :, None] * np.eye(len(names))):
        raise ConfigError("only diagonal measurement weights serialize to CSV")
    rows = np.column_stack([ds.meas_grid.points, ds.z_meas, w_diag])
    m = {
        "dataset_id": ds.dataset_id,
        "unit": ds.meas_grid.unit,
        "x0_guess": ",".join(format_float(v) for v in ds.x0_guess),
        **(meta or {}),
    }
    write_csv(main, header, rows, m)
    write_profile_csv(side, ds.mv, [f"u_{n}" for n in ds.mv_names], meta)
    return main


def read_dataset_csv(directory, dataset_id: str) -> MeasurementDataset:
    main, side = dataset_paths(directory, dataset_id)
    meta, header, rows = read_csv(main)
    mv, mv_cols = read_profile_csv(side)
    n_z = (len(header) - 1) // 2
    names = tuple(h[2:] for h in header[1 : 1 + n_z])
    return MeasurementDataset(
        meas_grid=TimeGrid(rows[:, 0], unit=meta.get("unit", "")),
        z_meas=rows[:, 1 : 1 + n_z],
        weights=rows[:, 1 + n_z :, None] * np.eye(n_z),
        mv=mv,
        x0_guess=np.array([float(v) for v in meta["x0_guess"].split(",")]),
        output_names=names,
        mv_names=tuple(c[2:] for c in mv_cols),
        dataset_id=meta.get("dataset_id", dataset_id),
    )


def write_trajectory_csv(path, traj: Trajectory, state_names: Sequence[str],
                         meta: Optional[Mapping[str, str]] = None,
                         extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Tidy per-time rows: states plus any aligned extra columns."""
    cols = [traj.grid.points] + [traj.states[:, j] for j in range(traj.states.shape[1])]
    header = ["t", *state_names]
    for name, vals in (extra or {}).items():
        header.append(name)
        cols.append(np.asarray(vals, dtype=float))
    m = {"unit": traj.grid.unit, **(meta or {})}
    write_csv(path, header, np.column_stack(cols), m)


# ---------------------------------------------------------------------------
# Flux table and correlation report


def write_table_csv(path, table: FluxTable,
                    meta: Optional[Mapping[str, str]] = None) -> None:
    ds_ids = sorted({d for d, _ in table.provenance})
    ds_index = {d: i for i, d in enumerate(ds_ids)}
    prov = np.array(
        [[ds_index[d], k] for d, k in table.provenance], dtype=float
    ).reshape(table.n_rows, 2)
    m = {
        "datasets": ";".join(ds_ids),
        "n_states": str(table.n_states),
        "n_mvs": str(table.n_mvs),
        "n_fluxes": str(table.n_fluxes),
        **(meta or {}),
    }
    rows = np.column_stack([prov, table.data])
    write_csv(path, ["dataset", "interval", *table.columns], rows, m)


def read_table_csv(path) -> FluxTable:
    meta, header, rows = read_csv(path)
    ds_ids = meta.get("datasets", "").split(";")
    prov = tuple(
        (ds_ids[int(r[0])], int(r[1])) for r in rows[:, :2]
    )
    return FluxTable(
        columns=tuple(header[2:]),
        data=rows[:, 2:],
        provenance=prov,
        n_states=int(meta["n_states"]),
        n_mvs=int(meta["n_mvs"]),
        n_fluxes=int(meta["n_fluxes"]),
    )


def correlation_to_doc(report: CorrelationReport) -> Dict:
    return {
        "columns": list(report.columns),
        "matrix": [[float(v) for v in row] for row in report.matrix],
        "tau": report.tau,
        "selected_inputs": {k: list(v) for k, v in report.selected_inputs.items()},
        "constant_flux_flags": dict(report.constant_flux_flags),
        "constant_columns": list(report.constant_columns),
    }


def correlation_from_doc(doc: Mapping) -> CorrelationReport:
    return CorrelationReport(
        columns=tuple(doc["columns"]),
        matrix=np.asarray(doc["matrix"], dtype=float),
        tau=float(doc["tau"]),
        selected_inputs={k: list(v) for k, v in doc["selected_inputs"].items()},
        constant_flux_flags={
            k: float(v) for k, v in doc["constant_flux_flags"].items()
        },
        constant_columns=tuple(doc.get("constant_columns", ())),
    )


# ---------------------------------------------------------------------------
# Hybrid model manifest


def hybrid_to_doc(hm: HybridModel) -> Dict:
    bindings = []
    for name, b in zip(hm.base.flux_names, hm.bindings):
        if isinstance(b, Constant):
            bindings.append({"flux": name, "constant": float(b.value)})
        else:
            entry = {
                "flux": name,
                "inputs": list(b.inputs),
                "mlp": mlp_to_dict(b.net),
            }
            if b.output_bounds is not None:
                entry["output_bounds"] = [float(v) for v in b.output_bounds]
            bindings.append(entry)
    return {
        "base_model": hm.base.name,
        "time_unit": hm.time_unit,
        "bindings": bindings,
    }


def hybrid_from_doc(doc: Mapping, base) -> HybridModel:
    if doc["base_model"] != base.name:
        raise ConsistencyError(
            f"manifest was built for model {doc['base_model']!r}, "
            f"got {base.name!r}"
        )
    bindings = []
    for entry in doc["bindings"]:
        if "constant" in entry:
            bindings.append(Constant(float(entry["constant"])))
        else:
            bnd = entry.get("output_bounds")
            bindings.append(
                MlpBinding(
                    net=mlp_from_dict(entry["mlp"]),
                    inputs=tuple(entry["inputs"]),
                    output_bounds=tuple(bnd) if bnd is not None else None,
                )
            )
    return HybridModel(base, tuple(bindings), time_unit=doc["time_unit"])
