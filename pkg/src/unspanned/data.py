"""Yield panels: CSV ingestion, PCA weights and the estimation view."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pricing import PCWeights


class PanelError(ValueError):
    pass


@dataclass
class YieldPanel:
    """Monthly yields in per-annum decimals; dates are 'YYYY-MM' strings."""

    dates: list[str]
    maturities: tuple[int, ...]
    yields: np.ndarray  # (T, J) per-annum decimal
    provenance: str = ""

    def __post_init__(self):
        self.yields = np.asarray(self.yields, dtype=float)
        self.maturities = tuple(int(m) for m in self.maturities)
        if self.yields.shape != (len(self.dates), len(self.maturities)):
            raise PanelError("yield matrix does not match dates x maturities")
        if np.any(np.diff(self.maturities) <= 0):
            raise PanelError("maturities must be strictly increasing")
        idx = [month_index(d) for d in self.dates]
        bad = [i + 1 for i in range(1, len(idx)) if idx[i] <= idx[i - 1]]
        if bad:
            raise PanelError(f"dates not strictly increasing at data rows {bad}")
        if not np.all(np.isfinite(self.yields)):
            rows = sorted({int(i) + 1 for i in np.argwhere(~np.isfinite(self.yields))[:, 0]})
            raise PanelError(f"missing or non-finite cells at data rows {rows}")

    @property
    def T(self) -> int:
        return len(self.dates)

    @property
    def monthly(self) -> np.ndarray:
        """Yields in per-month decimal units, as used by all recursions."""
        return self.yields / 12.0

    def window(self, start: int = 0, stop: int | None = None) -> "YieldPanel":
        return YieldPanel(self.dates[start:stop], self.maturities, self.yields[start:stop], self.provenance)

    def index_of(self, date: str) -> int:
        """Position of the last row dated at or before ``date``."""
        target = month_index(date)
        idx = np.array([month_index(d) for d in self.dates])
        pos = np.flatnonzero(idx <= target)
        if pos.size == 0:
            raise PanelError(f"no observation at or before {date}")
        return int(pos[-1])


def month_index(date: str) -> int:
    parts = str(date).strip().split("-")
    try:
        y, m = int(parts[0]), int(parts[1])
    except (IndexError, ValueError) as exc:
        raise PanelError(f"unparseable date {date!r}; expected YYYY-MM") from exc
    if not 1 <= m <= 12:
        raise PanelError(f"month out of range in {date!r}")
    return 12 * y + (m - 1)


def month_label(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


def load_yield_panel(path, units: str = "auto", provenance: str | None = None) -> YieldPanel:
    """Read a CSV with a header ``date,<m1>,<m2>,...`` (maturities in months).

    ``units`` is 'decimal', 'percent' or 'auto'; auto treats the panel as
    percent when any absolute yield exceeds 1.
    """
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise PanelError(f"{path}: file not found") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise PanelError("empty file")
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        mats = tuple(int(float(h)) for h in header[1:])
    except ValueError as exc:
        raise PanelError("header must be 'date' followed by integer maturities in months") from exc
    dates, vals = [], []
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise PanelError(f"row {k} has {len(r)} fields, expected {len(header)}")
        dates.append(r[0].strip()[:7])
        try:
            vals.append([float(v) if v.strip() else np.nan for v in r[1:]])
        except ValueError as exc:
            raise PanelError(f"non-numeric cell in row {k}") from exc
    y = np.array(vals, dtype=float).reshape(len(dates), len(mats))
    if units == "percent" or (units == "auto" and np.nanmax(np.abs(y)) > 1.0):
        y = y / 100.0
    elif units not in ("auto", "decimal", "percent"):
        raise PanelError(f"unknown units {units!r}")
    return YieldPanel(dates, mats, y, provenance or str(path))


def save_yield_panel(panel: YieldPanel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *panel.maturities])
        for d, row in zip(panel.dates, panel.yields):
            w.writerow([d, *(repr(float(v)) for v in row)])


def pca_weights(y: np.ndarray, R: int, maturities) -> PCWeights:
    """Top-R eigenvectors of the yield covariance, each with positive row sum.

    ``y`` must be the training window only.
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] < R + 1:
        raise PanelError("training window too short for PCA")
    cov = np.cov(y, rowvar=False)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:R]
    if vals[order[-1]] <= 1e-14 * max(vals[order[0]], 1e-300):
        raise PanelError("degenerate yield covariance")
    w = vecs[:, order].T
    w = w * np.where(w.sum(axis=1) < 0, -1.0, 1.0)[:, None]
    return PCWeights.from_matrix(w, maturities)


def explained_variance(y: np.ndarray, w: PCWeights) -> np.ndarray:
    cov = np.cov(np.asarray(y, dtype=float), rowvar=False)
    return np.einsum("rj,jk,rk->r", w.w, cov, w.w) / np.trace(cov)


@dataclass
class ModelData:
    """Monthly-unit yields and PCs seen by the likelihood; row 0 is conditioned on."""

    y: np.ndarray  # (T + 1, J) per-month decimal
    weights: PCWeights
    p: np.ndarray = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape[1] != self.weights.w.shape[1]:
            raise PanelError("yield columns do not match the weight matrix")
        if self.p is None:
            self.p = self.y @ self.weights.w.T

    @property
    def T(self) -> int:
        return self.y.shape[0] - 1

    @property
    def J(self) -> int:
        return self.y.shape[1]

    @property
    def maturities(self) -> tuple[int, ...]:
        return self.weights.maturities

    def head(self, t: int) -> "ModelData":
        return ModelData(self.y[: t + 1], self.weights, self.p[: t + 1])

    @classmethod
    def from_panel(cls, panel: YieldPanel, weights: PCWeights) -> "ModelData":
        if tuple(panel.maturities) != tuple(weights.maturities):
            raise PanelError("panel maturities differ from weight maturities")
        return cls(panel.monthly, weights)
