"""Pointwise error metrics, SSIM, Pearson correlations, power spectra and AR(1)-adjusted significance.

Undefined values (R2 on constant truth, CV with zero-mean truth, Pearson on a
constant input) are reported as ``None`` or NaN, never raised.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, stats

from .errors import DegenerateSeriesError, ShapeError

log = structlog.get_logger(__name__)

METRIC_COLUMNS: Tuple[str, ...] = ("mse", "rmse", "mae", "psnr", "bias", "std_error", "r2", "cv", "ssim", "pcc")


@dataclass(frozen=True)
class MetricTable:
    mse: float
    rmse: float
    mae: float
    psnr: Optional[float]
    bias: float
    std_error: float
    r2: Optional[float]
    cv: Optional[float]
    ssim: float
    pcc: Optional[float]

    def as_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _pair(pred: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"prediction shape {p.shape} != truth shape {y.shape}")
    if p.size == 0:
        raise ShapeError("metrics of an empty array")
    return p, y


def pointwise_metrics(pred: np.ndarray, truth: np.ndarray) -> MetricTable:
    p, y = _pair(pred, truth)
    e = p - y
    mse = float(np.mean(e * e))
    bias = float(np.mean(e))
    std_error = float(np.sqrt(np.mean((e - bias) ** 2)))
    y_mean = float(np.mean(y))
    ss_tot = float(np.sum((y - y_mean) ** 2))
    data_range = float(np.max(y) - np.min(y))
    if mse == 0.0:
        psnr: Optional[float] = math.inf
    elif data_range == 0.0:
        psnr = None
    else:
        psnr = 10.0 * math.log10(data_range**2 / mse)
    rmse = math.sqrt(mse)
    rows_p, rows_y = np.atleast_1d(p), np.atleast_1d(y)
    return MetricTable(
        mse=mse,
        rmse=rmse,
        mae=float(np.mean(np.abs(e))),
        psnr=psnr,
        bias=bias,
        std_error=std_error,
        r2=None if ss_tot == 0.0 else 1.0 - float(np.sum(e * e)) / ss_tot,
        cv=None if y_mean == 0.0 else rmse / y_mean,
        ssim=ssim(rows_p, rows_y, window=min(7, rows_y.shape[-1])),
        pcc=pattern_correlation(p, y),
    )


def ssim(x: np.ndarray, y: np.ndarray, window: int = 7, c1: Optional[float] = None, c2: Optional[float] = None) -> float:
    """Mean local SSIM over sliding windows along the last axis.

    ``y`` is the reference: the stabilizing constants default to (0.01 R)^2 and
    (0.03 R)^2 with R its range (1 when constant).
    """
    a, b = _pair(x, y)
    if window < 1 or window > a.shape[-1]:
        raise ShapeError(f"SSIM window {window} does not fit length {a.shape[-1]}")
    data_range = float(np.max(b) - np.min(b)) or 1.0
    c1 = (0.01 * data_range) ** 2 if c1 is None else c1
    c2 = (0.03 * data_range) ** 2 if c2 is None else c2
    wa = sliding_window_view(a, window, axis=-1)
    wb = sliding_window_view(b, window, axis=-1)
    mu_a, mu_b = wa.mean(axis=-1), wb.mean(axis=-1)
    var_a = wa.var(axis=-1)
    var_b = wb.var(axis=-1)
    cov = ((wa - mu_a[..., None]) * (wb - mu_b[..., None])).mean(axis=-1)
    local = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(np.mean(local))


def pattern_correlation(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Centered Pearson correlation over all entries; None when either input is constant."""
    x, y = _pair(a, b)
    dx = x.reshape(-1) - x.mean()
    dy = y.reshape(-1) - y.mean()
    sx, sy = float(np.sqrt(np.sum(dx * dx))), float(np.sqrt(np.sum(dy * dy)))
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


@dataclass
class TemporalCorrelation:
    field: np.ndarray
    curve: np.ndarray


def temporal_correlation(series_a: np.ndarray, series_b: np.ndarray) -> TemporalCorrelation:
    """Pearson over time (axis 0) at every (channel, site); NaN where a series is constant.

    ``curve`` is the per-channel average over sites of the defined entries.
    """
    a, b = _pair(series_a, series_b)
    if a.ndim < 2 or a.shape[0] < 2:
        raise ShapeError(f"temporal correlation needs at least two time samples, got shape {a.shape}")
    da = a - a.mean(axis=0)
    db = b - b.mean(axis=0)
    num = np.sum(da * db, axis=0)
    den = np.sqrt(np.sum(da * da, axis=0) * np.sum(db * db, axis=0))
    field = np.full(num.shape, np.nan)
    ok = den > 0.0
    field[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    if field.ndim == 1:
        field = field[None, :]
    curve = np.array([np.nanmean(row) if np.any(np.isfinite(row)) else np.nan for row in field.reshape(field.shape[0], -1)])
    return TemporalCorrelation(field=field, curve=curve)


@dataclass
class SpectrumReport:
    wavenumbers: np.ndarray
    power: np.ndarray


def power_spectrum(trajectory: np.ndarray, times: Optional[np.ndarray] = None) -> SpectrumReport:
    """Time-averaged power per integer wavenumber of (T, L) or (T, C, L) snapshots.

    Orthonormal FFT with +k and -k folded into one bin, so each snapshot's bins sum
    to L * mean(x**2). ``power`` is (bins,) for 2-D input and (C, bins) for 3-D.
    """
    x = np.asarray(trajectory, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise ShapeError(f"spectrum expects (T, L) or (T, C, L), got {x.shape}")
    length = x.shape[-1]
    if length < 4:
        raise ShapeError(f"spectrum needs at least 4 sites, got {length}")
    if times is not None:
        t = np.asarray(times, dtype=np.float64)
        if t.shape != (x.shape[0],):
            raise ShapeError("one time stamp per snapshot required")
        if t.size > 2 and not np.allclose(np.diff(t), t[1] - t[0], rtol=1e-9, atol=0.0):
            raise ShapeError("snapshots are not uniformly sampled in time")
    coeffs = fft.rfft(x, axis=-1, norm="ortho")
    power = np.abs(coeffs) ** 2
    fold = np.full(power.shape[-1], 2.0)
    fold[0] = 1.0
    if length % 2 == 0:
        fold[-1] = 1.0
    mean_power = (power * fold).mean(axis=0)
    return SpectrumReport(wavenumbers=np.arange(power.shape[-1]), power=mean_power)


def lag1_autocorrelation(series: np.ndarray) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    d = x - x.mean(axis=0)
    den = np.sum(d * d, axis=0)
    num = np.sum(d[1:] * d[:-1], axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), 0.0)


def effective_sample_size(n: int, r1: np.ndarray) -> np.ndarray:
    """n (1 - r1) / (1 + r1) with r1 clamped to [0, 1)."""
    r = np.clip(np.asarray(r1, dtype=np.float64), 0.0, 1.0 - 1e-12)
    return n * (1.0 - r) / (1.0 + r)


def significance_mask(bias: np.ndarray, alpha: float = 0.05) -> np.ndarray:
    """Two-sided t-test of zero time-mean bias per site, sample size AR(1)-adjusted.

    ``bias`` is (T, ...); the mask has the trailing shape.
    """
    x = np.asarray(bias, dtype=np.float64)
    n = x.shape[0]
    if n < 8:
        raise ShapeError(f"significance needs at least 8 samples, got {n}")
    mean = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    flat = sd == 0.0
    if np.any(flat & (mean != 0.0)):
        raise DegenerateSeriesError("constant nonzero bias series has no variance to test against")
    n_eff = np.maximum(effective_sample_size(n, lag1_autocorrelation(x)), 2.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(flat, 0.0, mean / np.where(flat, 1.0, sd / np.sqrt(n_eff)))
    p = 2.0 * stats.t.sf(np.abs(t), df=n_eff - 1.0)
    return (p < alpha) & ~flat


# ---------------------------------------------------------------------------
# tables


def _cell(value: object) -> str:
    if value is None:
        return "nan"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def table_csv(rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    return buf.getvalue()


def metric_rows(tables: Mapping[str, MetricTable], key: str = "channel") -> List[Dict[str, object]]:
    return [{key: name, **table.as_dict()} for name, table in tables.items()]


def spectrum_csv(spectra: Mapping[str, SpectrumReport]) -> str:
    names = list(spectra)
    rows = []
    first = spectra[names[0]] if names else None
    if first is not None:
        for i, k in enumerate(first.wavenumbers):
            row: Dict[str, object] = {"k": int(k)}
            for name in names:
                power = spectra[name].power
                row[name] = float(power.reshape(-1, power.shape[-1]).mean(axis=0)[i])
            rows.append(row)
    return table_csv(rows, ["k"] + names)


def mask_csv(mask: np.ndarray) -> str:
    grid = np.atleast_2d(np.asarray(mask, dtype=bool))
    return "".join(",".join("1" if v else "0" for v in row) + "\n" for row in grid)
