"""Segmentation metrics and lake ice phenology from water-fraction time series."""

import csv
import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .sensors import CLASS_NAMES

GCOS_TOLERANCE_DAYS = 2


class ConfusionMatrix:
    """3x3 counts, rows = reference class, columns = predicted class."""

    def __init__(self, counts=None, n_classes=len(CLASS_NAMES)):
        self.counts = (np.zeros((n_classes, n_classes), dtype=np.int64) if counts is None
                       else np.asarray(counts, dtype=np.int64).copy())
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred, label, mask=None):
        pred = np.asarray(pred).ravel()
        label = np.asarray(label).ravel()
        if mask is not None:
            keep = np.asarray(mask, dtype=bool).ravel()
            pred, label = pred[keep], label[keep]
        n = self.counts.shape[0]
        self.counts += np.bincount(label.astype(np.int64) * n + pred, minlength=n * n).reshape(n, n)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    @classmethod
    def from_maps(cls, pred, label, mask=None):
        return cls().update(pred, label, mask)


def mean_pixel_accuracy(cm: ConfusionMatrix) -> float:
    """Share of correctly classified pixels, in percent."""
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    return 100.0 * np.trace(cm.counts) / cm.total


def per_class_iou(cm: ConfusionMatrix) -> dict[int, float]:
    """IoU = TP / (TP + FP + FN) for every class present in the reference."""
    c = cm.counts
    out = {}
    for k in range(c.shape[0]):
        if c[k].sum() == 0:
            continue
        tp = c[k, k]
        out[k] = tp / (c[k].sum() + c[:, k].sum() - tp)
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes present in the reference, in percent."""
    ious = per_class_iou(cm)
    if not ious:
        raise ValueError("no class present in the reference")
    return 100.0 * float(np.mean(list(ious.values())))


@dataclass
class WaterFractionSeries:
    lake_id: str
    winter_id: str
    dates: list[dt.date]
    fractions: list[float]
    source: str = "prediction"

    def __post_init__(self):
        if len(self.dates) != len(self.fractions):
            raise ValueError("dates and fractions differ in length")
        for a, b in zip(self.dates, self.dates[1:]):
            if not a < b:
                raise ValueError("dates must be strictly increasing")
        if any(not 0.0 <= f <= 1.0 for f in self.fractions):
            raise ValueError("fractions must lie in [0, 1]")

    @classmethod
    def from_pairs(cls, lake_id, winter_id, pairs, source="prediction"):
        """Build from (date, fraction) pairs; repeated identical pairs collapse."""
        merged = {}
        for d, f in pairs:
            if d in merged and merged[d] != f:
                raise ValueError(f"conflicting fractions on {d}")
            merged[d] = float(f)
        days = sorted(merged)
        return cls(lake_id, winter_id, days, [merged[d] for d in days], source)


@dataclass
class PhenologyEvents:
    ice_on: dt.date | None
    ice_off: dt.date | None
    threshold: float
    ice_on_candidates: list[dt.date] = field(default_factory=list)
    ice_off_candidates: list[dt.date] = field(default_factory=list)
    persistence: str = "next available observation"

    def __post_init__(self):
        if self.ice_on and self.ice_off and not self.ice_on < self.ice_off:
            raise ValueError("ice-on must precede ice-off")


def extract_ice_dates(series, threshold: float = 0.3) -> PhenologyEvents:
    """Ice-on / ice-off with a two-observation persistence rule.

    Ice-on is the first date with fraction < threshold whose next available
    observation is also below it; ice-off is the first later date with
    fraction > threshold whose next observation stays above. Scanning on
    after each event yields further candidates (a re-freeze after a thaw
    gives a second ice-on candidate, and so on), earliest first.
    """
    if not isinstance(series, WaterFractionSeries):
        series = WaterFractionSeries.from_pairs("", "", series)
    dates, f = series.dates, series.fractions
    if len(dates) < 2:
        raise ValueError("at least two observations are needed")
    on, off = [], []
    frozen = False
    for i in range(len(f) - 1):
        if not frozen and f[i] < threshold and f[i + 1] < threshold:
            on.append(dates[i])
            frozen = True
        elif frozen and f[i] > threshold and f[i + 1] > threshold:
            off.append(dates[i])
            frozen = False
    return PhenologyEvents(on[0] if on else None, off[0] if off else None, threshold, on, off)


@dataclass
class EventComparison:
    event: str
    predicted: dt.date | None
    reference: tuple[dt.date, dt.date] | None
    offset_days: int | None
    gcos_pass: bool
    status: str


def _as_range(ref):
    if ref is None:
        return None
    if isinstance(ref, dt.date):
        return (ref, ref)
    lo, hi = ref
    return (lo, hi) if lo <= hi else (hi, lo)


def date_offset(predicted: dt.date, reference) -> int:
    """Signed days from the reference (date or inclusive range) to the prediction; 0 inside."""
    lo, hi = _as_range(reference)
    if predicted < lo:
        return (predicted - lo).days
    if predicted > hi:
        return (predicted - hi).days
    return 0


def compare_to_reference(events: PhenologyEvents, reference: dict) -> list[EventComparison]:
    """Compare ice-on / ice-off with reference dates or date ranges.

    ``reference`` maps "ice_on" / "ice_off" to a date, a (start, end) range
    or None. Passing means |offset| <= 2 days.
    """
    out = []
    for name in ("ice_on", "ice_off"):
        pred = getattr(events, name)
        ref = _as_range(reference.get(name))
        if pred is None or ref is None:
            out.append(EventComparison(name, pred, ref, None, False, "not detected"))
            continue
        off = date_offset(pred, ref)
        ok = abs(off) <= GCOS_TOLERANCE_DAYS
        out.append(EventComparison(name, pred, ref, off, ok, "pass" if ok else "fail"))
    return out


# -- reports -------------------------------------------------------------------

def mean_sigma(values) -> tuple[float, float]:
    """Mean and (population) standard deviation across ensemble members."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def write_metrics_report(path, rows: dict):
    """Per-sensor mAcc / mIoU table: ``rows[sensor] = {"mAcc": [...], "mIoU": [...]}``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor", "mAcc_mu", "mAcc_sigma", "mIoU_mu", "mIoU_sigma", "n_models"])
        for sensor, m in rows.items():
            a_mu, a_sd = mean_sigma(m["mAcc"])
            i_mu, i_sd = mean_sigma(m["mIoU"])
            w.writerow([sensor, f"{a_mu:.2f}", f"{a_sd:.2f}", f"{i_mu:.2f}", f"{i_sd:.2f}",
                        len(m["mAcc"])])


def _fmt_date(d):
    return "" if d is None else d.isoformat()


def _fmt_range(r):
    if r is None:
        return ""
    lo, hi = r
    return lo.isoformat() if lo == hi else f"{lo.isoformat()}/{hi.isoformat()}"


PHENOLOGY_COLUMNS = ["lake", "winter", "event", "reference", "threshold", "prediction",
                     "offset_days", "gcos_pass", "status", "candidates"]


def phenology_rows(lake, winter, events: PhenologyEvents, comparisons):
    for c in comparisons:
        cands = events.ice_on_candidates if c.event == "ice_on" else events.ice_off_candidates
        yield [lake, winter, c.event, _fmt_range(c.reference), f"{events.threshold:.2f}",
               _fmt_date(c.predicted), "" if c.offset_days is None else f"{c.offset_days:+d}",
               "yes" if c.gcos_pass else "no", c.status, " ".join(d.isoformat() for d in cands)]


def write_phenology_report(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PHENOLOGY_COLUMNS)
        for r in rows:
            w.writerow(r)
