"""Step 2: water-fraction regression over windows of per-day embeddings."""

import bisect
import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .model import _load_groups, glorot_init, lrelu, read_weights, save_weights
from .sensors import SENSOR_PRIORITY, SensorKind

WINDOW_SIZE = 7
_PRIORITY = {s: i for i, s in enumerate(SENSOR_PRIORITY)}


@dataclass
class EmbeddingWindow:
    center_date: dt.date
    slots: list                 # EmbeddingTensor per nominal offset
    offsets: list[int]
    provenance: list[tuple]     # (sensor, actual date)
    gap_filled: list[bool]

    @property
    def size(self):
        return len(self.slots)

    def stack(self) -> np.ndarray:
        """(T, C, H, W) float32 array of the slot embeddings."""
        return np.stack([np.moveaxis(e.values, -1, 0) for e in self.slots]).astype(np.float32)


class _DateIndex:
    """Per-date best embedding (by sensor priority) with sorted date lookup."""

    def __init__(self, series):
        best = {}
        for i, e in enumerate(series):
            cur = best.get(e.date)
            if cur is None or _PRIORITY[e.sensor] < _PRIORITY[series[cur].sensor]:
                best[e.date] = i
        self.series = series
        self.dates = sorted(best)
        self.best = best

    def nearest(self, day):
        """Embedding on the date closest to ``day``; ties go to the earlier date."""
        k = bisect.bisect_left(self.dates, day)
        cands = []
        if k < len(self.dates):
            cands.append(self.dates[k])
        if k > 0:
            cands.append(self.dates[k - 1])
        pick = min(cands, key=lambda d: (abs((d - day).days), d))
        return self.series[self.best[pick]]


def build_window(series, center_date, size: int = WINDOW_SIZE, center=None, index=None) -> EmbeddingWindow:
    """Window of ``size`` embeddings around ``center_date``, one per nominal day offset.

    Each slot takes the embedding dated closest to its nominal day (ties to
    the earlier date; several sensors on one day resolved SAR > VIIRS >
    MODIS). ``center`` pins the central slot to one specific embedding, so
    that each same-day observation gets its own window.
    """
    if not series:
        raise ValueError("empty series")
    if size < 1 or size % 2 == 0:
        raise ValueError("window size must be a positive odd number")
    index = index or _DateIndex(series)
    if center_date not in index.best:
        raise ValueError(f"no embedding on {center_date}")
    half = size // 2
    slots, prov, gaps, offsets = [], [], [], []
    for k in range(-half, half + 1):
        nominal = center_date + dt.timedelta(k)
        e = center if (k == 0 and center is not None) else index.nearest(nominal)
        slots.append(e)
        prov.append((e.sensor, e.date))
        gaps.append(e.date != nominal)
        offsets.append(k)
    return EmbeddingWindow(center_date, slots, offsets, prov, gaps)


def windows_for_series(series, size: int = WINDOW_SIZE) -> list[EmbeddingWindow]:
    """One window per embedding, centred on that embedding."""
    index = _DateIndex(series)
    return [build_window(series, e.date, size, center=e, index=index) for e in series]


class TemporalRegressor(nn.Module):
    """Per-day 3x3 convs (weights shared over days), collapse time into channels,
    three more convs, then a fully connected layer with sigmoid output."""

    def __init__(self, embed_channels=32, window=WINDOW_SIZE, hw=(12, 12),
                 per_day=(32, 16, 8), joint=(64, 32, 16), seed=None):
        super().__init__()
        self.window = window
        self.embed_channels = embed_channels
        self.hw = tuple(hw)
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            chans = (embed_channels, *per_day)
            self.per_day = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans, chans[1:]))
            chans = (window * per_day[-1], *joint)
            self.joint = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(chans, chans[1:]))
            self.fc = nn.Linear(joint[-1] * hw[0] * hw[1], 1)
            glorot_init(self)

    def forward(self, x):
        """x: (B, T, C, H, W) -> (B,) fractions in [0, 1]."""
        if x.ndim != 5 or x.shape[1] != self.window or x.shape[2] != self.embed_channels \
                or tuple(x.shape[-2:]) != self.hw:
            raise ValueError(f"expected (B, {self.window}, {self.embed_channels}, *{self.hw}), "
                             f"got {tuple(x.shape)}")
        B, T = x.shape[:2]
        y = x.reshape(B * T, *x.shape[2:])
        for conv in self.per_day:
            y = lrelu(conv(y))
        y = y.reshape(B, T * y.shape[1], *y.shape[2:])
        for conv in self.joint:
            y = lrelu(conv(y))
        return torch.sigmoid(self.fc(y.flatten(1))).squeeze(1)

    def config_dict(self):
        return {"embed_channels": self.embed_channels, "window": self.window, "hw": list(self.hw),
                "per_day": [c.out_channels for c in self.per_day],
                "joint": [c.out_channels for c in self.joint]}


@torch.no_grad()
def regress_fraction(window: EmbeddingWindow, regressor: TemporalRegressor) -> float:
    if window.size != regressor.window:
        raise ValueError("window size does not match the regressor")
    dtype = next(regressor.parameters()).dtype
    x = torch.as_tensor(window.stack(), dtype=dtype)[None]
    return float(regressor(x)[0])


@torch.no_grad()
def regress_windows(windows, regressor: TemporalRegressor, batch_size=64) -> np.ndarray:
    dtype = next(regressor.parameters()).dtype
    out = []
    for i in range(0, len(windows), batch_size):
        x = torch.as_tensor(np.stack([w.stack() for w in windows[i:i + batch_size]]), dtype=dtype)
        out.append(regressor(x).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class DailyPrediction:
    date: dt.date
    per_observation: list[tuple] = field(default_factory=list)   # (sensor, value)
    fused: float = float("nan")
    ensemble_mu: float | None = None
    ensemble_sigma: float | None = None

    def by_sensor(self) -> dict:
        out = {}
        for s, v in self.per_observation:
            out.setdefault(SensorKind(s), []).append(v)
        return {s: float(np.mean(v)) for s, v in out.items()}


def fuse_daily(date, predictions) -> DailyPrediction:
    """Mean of the per-observation predictions of one day.

    ``predictions`` is a sequence of floats or of (sensor, float) pairs.
    """
    preds = list(predictions)
    if not preds:
        raise ValueError("no predictions for this date")
    pairs = [p if isinstance(p, tuple) else (None, p) for p in preds]
    values = sorted(float(v) for _, v in pairs)     # sorted: order-invariant float sum
    fused = float(np.mean(values))
    return DailyPrediction(date, [(s, float(v)) for s, v in pairs], fused)


def fuse_series(dates, sensors, values) -> list[DailyPrediction]:
    """Group per-observation predictions by date and fuse each day."""
    by_day: dict = {}
    for d, s, v in zip(dates, sensors, values):
        by_day.setdefault(d, []).append((SensorKind(s), float(v)))
    return [fuse_daily(d, by_day[d]) for d in sorted(by_day)]


def ensemble_daily(member_series: list[list[DailyPrediction]]) -> list[DailyPrediction]:
    """Combine daily predictions of several models: mean and standard deviation per day."""
    if not member_series:
        raise ValueError("no ensemble members")
    days = sorted({p.date for series in member_series for p in series})
    lookup = [{p.date: p for p in series} for series in member_series]
    out = []
    for d in days:
        members = [m[d] for m in lookup if d in m]
        fused = np.array([m.fused for m in members])
        obs = [pair for m in members for pair in m.per_observation]
        out.append(DailyPrediction(d, obs, float(fused.mean()), float(fused.mean()),
                                   float(fused.std())))
    return out


PREDICTION_COLUMNS = ["date", *(s.value for s in SensorKind), "fused", "ensemble_mu", "ensemble_sigma"]


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def write_prediction_table(path, predictions: list[DailyPrediction]):
    """Comma-separated daily table, empty cells where a sensor did not image the lake."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS)
        for p in predictions:
            per = p.by_sensor()
            mu = p.fused if p.ensemble_mu is None else p.ensemble_mu
            sigma = 0.0 if p.ensemble_sigma is None else p.ensemble_sigma
            w.writerow([p.date.isoformat(), *(_fmt(per.get(s)) for s in SensorKind),
                        _fmt(p.fused), _fmt(mu), _fmt(sigma)])


def read_prediction_table(path) -> list[DailyPrediction]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            per = [(s, float(row[s.value])) for s in SensorKind if row.get(s.value)]
            out.append(DailyPrediction(dt.date.fromisoformat(row["date"]), per, float(row["fused"]),
                                       float(row["ensemble_mu"]), float(row["ensemble_sigma"])))
    return out


def save_regressor(path, regressor: TemporalRegressor, extra: dict | None = None):
    header = {"kind": "regressor", "stage": "regression", "regressor_config": regressor.config_dict()}
    header.update(extra or {})
    save_weights(path, {"regressor": regressor}, header)


def load_regressor(path) -> tuple[TemporalRegressor, dict]:
    header, groups = read_weights(path)
    if header.get("kind") != "regressor":
        raise ValueError(f"{path} is not a regression checkpoint")
    c = header["regressor_config"]
    reg = TemporalRegressor(c["embed_channels"], c["window"], tuple(c["hw"]), tuple(c["per_day"]),
                            tuple(c["joint"]))
    _load_groups({"regressor": reg}, groups)
    reg.eval()
    return reg, header
