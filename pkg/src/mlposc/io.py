"""CSV and manifest writers with fixed column order and number formatting."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

FLOAT_FMT = "{:.12g}"


def fmt(value):
    """Deterministic text form of one cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if np.isnan(v):
            return "nan"
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return FLOAT_FMT.format(v + 0.0)  # +0.0 turns -0.0 into 0.0
    return str(value)


def write_csv(path, header, rows):
    """Write ``rows`` under ``header``; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _sym_labels(prefix, d, names):
    return [f"{prefix}_{names[i]}{names[j]}" for i in range(d) for j in range(i, d)]


def _sym_values(M):
    d = M.shape[-1]
    return [M[..., i, j] for i in range(d) for j in range(i, d)]


def state_names(d_x, d_z):
    xs = ["x"] if d_x == 1 else [f"x{i + 1}" for i in range(d_x)]
    zs = ["z"] if d_z == 1 else [f"z{i + 1}" for i in range(d_z)]
    return xs + zs


def riccati_table(bundle):
    """Header and rows of the ``Psi`` / ``Pi`` trajectories (upper triangles)."""
    d_s, d_x = bundle.problem.d_s, bundle.problem.d_x
    names = state_names(d_x, d_s - d_x)
    header = ["t"] + _sym_labels("psi", d_s, names) + _sym_labels("pi", d_s, names)
    cols = [bundle.times] + _sym_values(bundle.Psi) + _sym_values(bundle.Pi)
    return header, zip(*cols)


def moments_table(trajectories):
    """Long table of closed-loop moments for ``{label: MomentTrajectory}``."""
    rows = []
    header = None
    for label, mt in trajectories.items():
        d_s = mt.mu.shape[1]
        names = state_names(1, d_s - 1) if d_s == 2 else [f"s{i + 1}" for i in range(d_s)]
        if header is None:
            header = (
                ["policy", "t"] + [f"mu_{n}" for n in names] + _sym_labels("sigma", d_s, names)
                + ["trace_sigma", "running_cost"]
            )
        cols = [mt.mu[:, i] for i in range(d_s)] + _sym_values(mt.Sigma) + [mt.trace, mt.running_cost]
        for k, t in enumerate(mt.times):
            rows.append([label, t] + [c[k] for c in cols])
    return header, rows


def ensemble_table(ensembles):
    """Long table ``policy, path_id, t, x, z, u, cum_cost`` for ``{label: PathEnsemble}``."""
    rows = []
    header = None
    for label, ens in ensembles.items():
        d_x, d_z, d_u = ens.x.shape[2], ens.z.shape[2], ens.u.shape[2]
        if header is None:
            us = ["u"] if d_u == 1 else [f"u{i + 1}" for i in range(d_u)]
            header = ["policy", "path_id", "t"] + state_names(d_x, d_z) + us + ["cum_cost"]
        for pid in range(ens.n_paths):
            for k, t in enumerate(ens.times):
                rows.append(
                    [label, pid, t, *ens.x[pid, k], *ens.z[pid, k], *ens.u[pid, k], ens.cum_cost[pid, k]]
                )
    return header, rows


def sweep_table(report):
    return ["iteration", "control_change", "objective"], report.rows()


def policy_field_table(field, stride=1):
    """``t, z, u, masked`` over every ``stride``-th time slice of a memory policy grid."""
    d_u = field.values.shape[2]
    us = ["u"] if d_u == 1 else [f"u{i + 1}" for i in range(d_u)]
    rows = []
    for k in range(0, len(field.times), stride):
        for j, z in enumerate(field.z):
            rows.append([field.times[k], z, *field.values[k, j], bool(field.mask[k, j])])
    return ["t", "z"] + us + ["masked"], rows


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_manifest(out_dir, experiment, files, config, status="ok", extra=None):
    """``manifest.json`` listing every artifact with its sha256 and the full configuration used."""
    out_dir = Path(out_dir)
    entries = []
    for f in sorted(files, key=lambda p: Path(p).name):
        p = Path(f)
        entries.append({"file": p.name, "sha256": sha256_file(p), "bytes": os.path.getsize(p)})
    doc = {"experiment": experiment, "status": status, "config": _jsonable(config), "artifacts": entries}
    if extra:
        doc.update(_jsonable(extra))
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
