"""CSV/JSON artifacts of a run directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .checkpoint import load_container
from .regression import summarize_posterior

MANIFEST = "manifest.json"


class PartialRunError(RuntimeError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-trip representation


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def coordinate_labels(coords: np.ndarray) -> list[str]:
    coords = np.asarray(coords).reshape(len(coords), -1)
    return [":".join(_fmt(c) for c in row) for row in coords]


def write_samples_csv(path, samples: np.ndarray, coords: np.ndarray) -> None:
    """One row per sample, one column per grid value; header carries coordinates."""
    flat = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    labels = coordinate_labels(coords)
    chans = flat.shape[1] // len(labels)
    if chans > 1:
        labels = [f"c{c}@{lab}" for c in range(chans) for lab in labels]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(labels)
        for row in flat:
            w.writerow([_fmt(v) for v in row])


def read_samples_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def write_posterior_csv(path, coords: np.ndarray, summary: dict) -> None:
    cols = ["mean", "std", "q05", "q95"]
    coords = np.asarray(coords).reshape(len(coords), -1)
    xnames = ["x"] if coords.shape[1] == 1 else [f"x{i}" for i in range(coords.shape[1])]
    stats = [np.asarray(summary[c]).reshape(-1) for c in cols]
    if any(len(s) != len(coords) for s in stats):
        raise ValueError("summary length does not match the grid")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(xnames + cols)
        for i in range(len(coords)):
            w.writerow([_fmt(v) for v in coords[i]] + [_fmt(s[i]) for s in stats])


def write_manifest(run_dir, **entries) -> None:
    run_dir = Path(run_dir)
    path = run_dir / MANIFEST
    current = json.loads(path.read_text()) if path.exists() else {}
    current.update(entries)
    write_json(path, current)


def export_artifacts(run_dir) -> list[Path]:
    """Write metrics.json, samples.csv, summary.json and posterior.csv.

    Everything is computed before the first file is written, so a failure
    leaves no partial output.
    """
    run_dir = Path(run_dir)
    mpath = run_dir / MANIFEST
    if not mpath.exists():
        raise PartialRunError(f"{run_dir}: missing {MANIFEST}; run incomplete")
    manifest = json.loads(mpath.read_text())
    if "chain" not in manifest:
        raise PartialRunError(f"{run_dir}: manifest lists no posterior chain")
    tensors, header = load_container(run_dir / manifest["chain"])
    samples = tensors.get("pushforward")
    if samples is None or len(samples) == 0:
        raise ValueError("empty chain: nothing to export")
    coords = tensors["coords"]
    summary = summarize_posterior(samples)
    metrics = manifest.get("metrics", {})
    summary_json = {k: v.reshape(-1) for k, v in summary.items()}
    summary_json["n_samples"] = int(len(samples))

    outs = []
    write_json(run_dir / "metrics.json", metrics)
    outs.append(run_dir / "metrics.json")
    write_samples_csv(run_dir / "samples.csv", samples, coords)
    outs.append(run_dir / "samples.csv")
    write_json(run_dir / "summary.json", summary_json)
    outs.append(run_dir / "summary.json")
    write_posterior_csv(run_dir / "posterior.csv", coords, summary)
    outs.append(run_dir / "posterior.csv")
    return outs
