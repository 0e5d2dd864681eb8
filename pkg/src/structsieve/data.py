"""Datasets, CSV input/output and atomic file writes."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

CSV_VERSION = 1


class DataError(ValueError):
    """Malformed or missing data file."""


def atomic_write(path, text: str):
    """Write text to path via a temp file in the same directory and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Dataset:
    """Observations for either model kind.

    production: x (n, K) input quantities, y (n, M) outputs, optional p
    (n, K) prices with NaN where a price is latent.
    choice: x (n, M) systematic utilities, labels (n,) in 0..M-1.
    """

    kind: str
    x: np.ndarray
    y: np.ndarray | None = None
    labels: np.ndarray | None = None
    p: np.ndarray | None = None
    names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float)
            if self.y.ndim != 2:
                self.y = self.y.reshape(self.x.shape[0], -1)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
        if self.p is not None:
            self.p = np.asarray(self.p, dtype=float).reshape(self.x.shape)
        self.check()

    @property
    def n(self):
        return self.x.shape[0]

    def check(self):
        if not np.all(np.isfinite(self.x)):
            raise DataError("missing or non-finite feature values")
        if self.kind == "production":
            if self.y is None:
                raise DataError("production data needs outputs")
            if not np.all(np.isfinite(self.y)):
                raise DataError("missing or non-finite outputs")
            bad = np.flatnonzero(np.any(self.x <= 0, -1))
            if bad.size:
                raise DataError(f"input quantities must be strictly positive (row {bad[0] + 1})")
            if np.any(self.y < 0):
                raise DataError(f"outputs must be nonnegative (row {np.flatnonzero(np.any(self.y < 0, -1))[0] + 1})")
            if self.p is not None and np.any(self.p[np.isfinite(self.p)] <= 0):
                raise DataError("observed prices must be strictly positive")
        elif self.kind == "choice":
            if self.labels is None or self.labels.shape != (self.n,):
                raise DataError("choice data needs one label per row")
            if np.any(self.labels < 0) or np.any(self.labels >= self.x.shape[1]):
                raise DataError("choice label outside 1..M")
        else:
            raise DataError(f"unknown data kind {self.kind!r}")

    def subset(self, idx):
        sel = lambda a: None if a is None else a[idx]
        return Dataset(kind=self.kind, x=self.x[idx], y=sel(self.y), labels=sel(self.labels),
                       p=sel(self.p), names=self.names)


def default_roles(ds: Dataset) -> dict:
    K = ds.x.shape[1]
    if ds.kind == "production":
        roles = {"inputs": ds.names.get("inputs") or [f"x{k + 1}" for k in range(K)],
                 "outputs": ds.names.get("outputs") or [f"y{m + 1}" for m in range(ds.y.shape[1])]}
        if ds.p is not None:
            roles["prices"] = {nm: f"p_{nm}" for k, nm in enumerate(roles["inputs"])
                               if np.all(np.isfinite(ds.p[:, k]))}
        return roles
    return {"utilities": ds.names.get("utilities") or [f"u{m + 1}" for m in range(K)], "label": "choice"}


def to_csv_text(ds: Dataset, roles: dict | None = None) -> str:
    roles = roles or default_roles(ds)
    buf = io.StringIO()
    buf.write(f"#version={CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    if ds.kind == "production":
        header = list(roles["inputs"]) + list(roles["outputs"])
        cols = [ds.x, ds.y]
        prices = roles.get("prices", {})
        for k, nm in enumerate(roles["inputs"]):
            if nm in prices:
                header.append(prices[nm])
                cols.append(ds.p[:, [k]])
        mat = np.hstack(cols)
        w.writerow(header)
        for r in mat:
            w.writerow([repr(float(v)) for v in r])
    else:
        header = list(roles["utilities"]) + [roles.get("label", "choice")]
        w.writerow(header)
        for r, lab in zip(ds.x, ds.labels):
            w.writerow([repr(float(v)) for v in r] + [int(lab) + 1])
    return buf.getvalue()


def write_csv(path, ds: Dataset, roles: dict | None = None):
    atomic_write(path, to_csv_text(ds, roles))


def read_csv(path, kind: str, roles: dict) -> Dataset:
    """Read a CSV whose column roles are declared in ``roles``.

    production roles: inputs, outputs, optional prices {input: column}.
    choice roles: utilities, label.
    """
    path = os.fspath(path)
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    with open(path, newline="") as f:
        lines = [ln for ln in f.read().splitlines()]
    if lines and lines[0].startswith("#"):
        tag = lines[0][1:].strip()
        if tag != f"version={CSV_VERSION}":
            raise DataError(f"{path}: unsupported data format line {lines[0]!r}")
        lines = lines[1:]
    rows = list(csv.reader(lines))
    if not rows:
        raise DataError(f"{path}: empty data file")
    header, body = rows[0], [r for r in rows[1:] if r]
    pos = {h: i for i, h in enumerate(header)}

    def column(name, cast=float):
        if name not in pos:
            raise DataError(f"{path}: column {name!r} missing from header")
        out = []
        for ln, r in enumerate(body, start=2):
            try:
                val = cast(r[pos[name]])
            except (ValueError, IndexError):
                raise DataError(f"{path}: line {ln}: bad or missing value in column {name!r}") from None
            out.append(val)
        return np.array(out)

    try:
        if kind == "production":
            inputs, outputs = list(roles["inputs"]), list(roles["outputs"])
            x = np.column_stack([column(c) for c in inputs]) if body else np.zeros((0, len(inputs)))
            y = np.column_stack([column(c) for c in outputs]) if body else np.zeros((0, len(outputs)))
            prices = roles.get("prices") or {}
            p = None
            if prices:
                p = np.full(x.shape, np.nan)
                for k, nm in enumerate(inputs):
                    if nm in prices:
                        p[:, k] = column(prices[nm])
            ds = Dataset(kind=kind, x=x, y=y, p=p, names={"inputs": inputs, "outputs": outputs})
        elif kind == "choice":
            util = list(roles["utilities"])
            x = np.column_stack([column(c) for c in util])
            lab = column(roles.get("label", "choice"), cast=lambda s: int(float(s))) - 1
            ds = Dataset(kind=kind, x=x, labels=lab, names={"utilities": util})
        else:
            raise DataError(f"unknown data kind {kind!r}")
    except DataError as e:
        if path not in str(e):
            raise DataError(f"{path}: {e}") from None
        raise
    if ds.n == 0:
        raise DataError(f"{path}: no observations")
    return ds
