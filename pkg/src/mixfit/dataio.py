"""Synthetic data, CSV ingestion, and persistence of traces and parameters."""
import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional

import numpy as np

from ._rng import make_rng
from .errors import ConfigError, ParseError
from .mixture import GmmParams, softmax_weights
from .optimize import TRACE_COLUMNS, FitTrace

IRIS_SHA256 = "81269defbe7c559bfe8c9c79a46698e32ef1dd3dbdf9d9c91a42a039bf85df2d"


@dataclass
class Dataset:
    x: np.ndarray
    labels: Optional[np.ndarray] = None
    header: Optional[list] = None

    @property
    def shape(self):
        return self.x.shape


@dataclass
class PinwheelConfig:
    clusters: int = 3
    per_cluster: int = 200
    radial_std: float = 0.3
    tangential_std: float = 0.05
    swirl_rate: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.clusters < 1:
            raise ConfigError("pinwheel needs at least one cluster")
        if self.per_cluster < 1:
            raise ConfigError("pinwheel needs at least one point per cluster")
        if not (self.radial_std > 0 and self.tangential_std > 0):
            raise ConfigError("pinwheel standard deviations must be positive")


def sample_gmm(theta, n, seed=0):
    """Draw ``n`` points: component by weight, then ``mu_g + U_g z``."""
    rng = make_rng(seed)
    weights = softmax_weights(theta.logits)
    labels = rng.choice(theta.n_components, size=n, p=weights)
    z = rng.standard_normal((n, theta.dim))
    x = theta.means[labels] + np.einsum("nij,nj->ni", theta.cov_factors[labels], z)
    return Dataset(x, labels)


def sample_pinwheel(cfg):
    """Wrapped mixture in the plane.

    For cluster ``g`` and each draw: ``rho = 1 + e`` with ``e ~ N(0, radial^2)``,
    ``phi = 2 pi g / G + t + swirl * rho`` with ``t ~ N(0, tangential^2)``;
    the point is ``(rho cos phi, rho sin phi)``.
    """
    rng = make_rng(cfg.seed)
    xs = []
    labels = []
    for g in range(cfg.clusters):
        e = rng.normal(0.0, cfg.radial_std, cfg.per_cluster)
        t = rng.normal(0.0, cfg.tangential_std, cfg.per_cluster)
        rho = 1.0 + e
        phi = 2.0 * math.pi * g / cfg.clusters + t + cfg.swirl_rate * rho
        xs.append(np.column_stack([rho * np.cos(phi), rho * np.sin(phi)]))
        labels.append(np.full(cfg.per_cluster, g))
    return Dataset(np.vstack(xs), np.concatenate(labels))


# CSV


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_csv(text, has_header=None, delimiter=",", label_column=False):
    """Parse numeric CSV text. ``has_header=None`` detects a non-numeric first row."""
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delimiter) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError("empty CSV input")
    header = None
    start = 0
    if has_header is None:
        has_header = not all(_is_number(c) for c in rows[0])
    if has_header:
        header = [c.strip() for c in rows[0]]
        start = 1
    body = rows[start:]
    if not body:
        raise ParseError("CSV has no data rows")
    width = len(body[0])
    values = np.empty((len(body), width))
    for i, r in enumerate(body):
        if len(r) != width:
            raise ParseError(f"ragged row: expected {width} fields, got {len(r)}", row=start + i + 1)
        for j, cell in enumerate(r):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r}", row=start + i + 1, column=j + 1) from None
    if not np.all(np.isfinite(values)):
        i, j = np.argwhere(~np.isfinite(values))[0]
        raise ParseError("non-finite value", row=start + int(i) + 1, column=int(j) + 1)
    labels = None
    if label_column:
        if width < 2:
            raise ParseError("label column requested but only one column present")
        lab = values[:, -1]
        if not np.all(lab == np.round(lab)):
            raise ParseError("label column must hold integers")
        labels = lab.astype(int)
        values = values[:, :-1]
        if header:
            header = header[:-1]
    return Dataset(values, labels, header)


def load_csv(path, has_header=None, delimiter=",", label_column=False):
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return parse_csv(text, has_header, delimiter, label_column)


def write_csv(dataset, path, labels=False, header=True):
    x = np.asarray(dataset.x, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            names = list(dataset.header) if dataset.header else [f"x{j}" for j in range(x.shape[1])]
            w.writerow(names + (["label"] if labels else []))
        for i, row in enumerate(x):
            cells = [repr(float(v)) for v in row]
            if labels:
                cells.append(str(int(dataset.labels[i])))
            w.writerow(cells)


def load_iris():
    """Bundled Fisher iris data: 150 x 4 measurements, labels 0..2."""
    raw = resources.files("mixfit").joinpath("data/iris.csv").read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != IRIS_SHA256:
        raise ParseError(f"bundled iris.csv checksum mismatch ({digest})")
    return parse_csv(raw.decode(), has_header=True, label_column=True)


# traces


def _fmt(v):
    return "%.17g" % v


class TraceCsvWriter:
    """Trace sink that appends one CSV line per row and flushes it."""

    def __init__(self, path):
        self.path = path
        self._fh = None

    def __call__(self, columns, row):
        if self._fh is None:
            self._fh = open(self.path, "w", newline="")
            self._fh.write(",".join(columns) + "\n")
        self._fh.write(",".join(str(row[0]) if k == 0 else _fmt(v) for k, v in enumerate(row)) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def write_trace(trace, path, format="csv"):
    if not len(trace):
        raise ValueError("refusing to write an empty trace")
    try:
        if format == "csv":
            with open(path, "w", newline="") as fh:
                fh.write(",".join(trace.columns) + "\n")
                for row in trace.rows:
                    fh.write(",".join(str(row[0]) if k == 0 else _fmt(v) for k, v in enumerate(row)) + "\n")
        elif format == "json":
            with open(path, "w") as fh:
                json.dump(trace.records(), fh)
        else:
            raise ConfigError(f"unknown trace format {format!r}")
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def read_trace(path, format=None):
    format = format or ("json" if str(path).endswith(".json") else "csv")
    with open(path, newline="") as fh:
        if format == "json":
            return FitTrace.from_records(json.load(fh))
        rows = list(csv.DictReader(fh))
    missing = [c for c in TRACE_COLUMNS if rows and c not in rows[0]]
    if missing:
        raise ParseError(f"trace file lacks columns {missing}")
    return FitTrace.from_records(rows)


# parameters and labels


def write_params(params, path):
    with open(path, "w") as fh:
        fh.write(params.to_json())
        fh.write("\n")


def read_params(path):
    from .mfa import MfaParams

    with open(path) as fh:
        d = json.load(fh)
    if "loadings" in d:
        return MfaParams.from_dict(d)
    return GmmParams.from_dict(d)


def write_labels(labels, path):
    with open(path, "w") as fh:
        for v in labels:
            fh.write(f"{int(v)}\n")


def read_labels(path):
    with open(path) as fh:
        return np.array([int(line) for line in fh if line.strip()], dtype=int)
