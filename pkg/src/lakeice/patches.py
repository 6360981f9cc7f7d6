"""Network-ready input patches built from per-sensor lake grids."""

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

from .sensors import BACKGROUND, SensorKind

BACKGROUND_FILL = 0.0
CLOUD_THRESHOLD = 0.3


@dataclass
class SensorObservation:
    """One dated acquisition of one lake by one sensor.

    ``values`` is (H, W, C) float32 with H, W the sensor patch shape.
    ``valid_mask`` marks clean, cloud-free lake pixels. ``labels`` is an
    optional (H, W) class map (frozen / non_frozen / background), present
    on non-transition days only.
    """

    sensor: SensorKind
    date: dt.date
    lake_id: str
    values: np.ndarray
    valid_mask: np.ndarray
    cloud_free_fraction: float
    clean_mask: np.ndarray = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)
    winter_id: str = ""

    def __post_init__(self):
        h, w = self.sensor.patch_shape
        if self.values.shape != (h, w, self.sensor.channels):
            raise ValueError(f"{self.sensor.value} values must be {(h, w, self.sensor.channels)}, "
                             f"got {self.values.shape}")
        if self.valid_mask.shape != (h, w):
            raise ValueError("valid_mask shape does not match patch")
        if self.clean_mask is None:
            self.clean_mask = self.valid_mask.copy()
        if not 0.0 <= self.cloud_free_fraction <= 1.0:
            raise ValueError("cloud_free_fraction must lie in [0, 1]")

    @property
    def supervised_mask(self) -> np.ndarray:
        """Pixels that enter the segmentation loss: valid lake pixels and background."""
        if self.labels is None:
            return self.valid_mask.copy()
        return self.valid_mask | (self.labels == BACKGROUND)

    @property
    def key(self):
        return (self.lake_id, self.winter_id, self.date, self.sensor.value)


def _window(lo, hi, size, extent):
    """Start index of a ``size``-long window over [0, extent) centred on [lo, hi]."""
    if extent <= size:
        return 0
    start = lo - (size - (hi - lo + 1)) // 2
    return int(min(max(start, 0), extent - size))


def _place(values, clean_mask, patch_hw):
    """Offsets (r_src, c_src, r_dst, c_dst, h, w) that map the sensor grid into the patch."""
    P, Q = patch_hw
    H, W = clean_mask.shape
    rows, cols = np.nonzero(clean_mask)
    if rows.size == 0:
        raise ValueError("no clean pixels")
    if rows.max() - rows.min() + 1 > P or cols.max() - cols.min() + 1 > Q:
        raise ValueError("lake too large for patch")
    r0 = _window(rows.min(), rows.max(), P, H)
    c0 = _window(cols.min(), cols.max(), Q, W)
    return r0, c0, min(P, H), min(Q, W)


def pad_to_patch(values, clean_mask, sensor: SensorKind, cloud_mask=None, *,
                 date=None, lake_id="", labels=None, winter_id="") -> SensorObservation:
    """Place clean lake pixels of an optical grid into a fixed-size patch.

    Grids no larger than the patch keep their pixel positions; larger grids
    are cropped to a window around the clean pixels. Everything that is not
    a clean pixel becomes background fill, as do cloudy clean pixels, which
    are also dropped from ``valid_mask``.
    """
    sensor = SensorKind(sensor)
    values = np.asarray(values, dtype=np.float32)
    clean_mask = np.asarray(clean_mask, dtype=bool)
    if values.ndim == 2:
        values = values[..., None]
    if values.shape[:2] != clean_mask.shape:
        raise ValueError("values and clean mask disagree in shape")
    if values.shape[2] != sensor.channels:
        raise ValueError(f"{sensor.value} expects {sensor.channels} channels, got {values.shape[2]}")
    cloud = np.zeros_like(clean_mask) if cloud_mask is None else np.asarray(cloud_mask, dtype=bool)

    r0, c0, h, w = _place(values, clean_mask, sensor.patch_shape)
    P, Q = sensor.patch_shape
    clean = np.zeros((P, Q), dtype=bool)
    clean[:h, :w] = clean_mask[r0:r0 + h, c0:c0 + w]
    valid = clean.copy()
    valid[:h, :w] &= ~cloud[r0:r0 + h, c0:c0 + w]

    out = np.full((P, Q, sensor.channels), BACKGROUND_FILL, dtype=np.float32)
    out[:h, :w] = values[r0:r0 + h, c0:c0 + w]
    out[~valid] = BACKGROUND_FILL

    lab = None
    if labels is not None:
        lab = np.full((P, Q), BACKGROUND, dtype=np.int8)
        lab[:h, :w] = np.asarray(labels)[r0:r0 + h, c0:c0 + w]
        lab[~clean] = BACKGROUND

    n_clean = int(clean_mask.sum())
    frac = float(valid.sum()) / n_clean
    return SensorObservation(sensor, date, lake_id, out, valid, frac,
                             clean_mask=clean, labels=lab, winter_id=winter_id)


def crop_sar_scene(values, clean_mask, *, date=None, lake_id="", labels=None,
                   winter_id="") -> SensorObservation:
    """Crop a SAR scene to 128x128 around the lake, keeping surrounding backscatter.

    Unlike optical patches, pixels outside the lake carry real data; only
    cells beyond the scene border are background fill. SAR is cloud-free.
    """
    sensor = SensorKind.SAR
    values = np.asarray(values, dtype=np.float32)
    clean_mask = np.asarray(clean_mask, dtype=bool)
    if values.ndim != 3 or values.shape[2] != sensor.channels:
        raise ValueError(f"SAR scene must be (H, W, {sensor.channels})")
    r0, c0, h, w = _place(values, clean_mask, sensor.patch_shape)
    P, Q = sensor.patch_shape
    out = np.full((P, Q, sensor.channels), BACKGROUND_FILL, dtype=np.float32)
    out[:h, :w] = values[r0:r0 + h, c0:c0 + w]
    clean = np.zeros((P, Q), dtype=bool)
    clean[:h, :w] = clean_mask[r0:r0 + h, c0:c0 + w]
    lab = None
    if labels is not None:
        lab = np.full((P, Q), BACKGROUND, dtype=np.int8)
        lab[:h, :w] = np.asarray(labels)[r0:r0 + h, c0:c0 + w]
        lab[~clean] = BACKGROUND
    return SensorObservation(sensor, date, lake_id, out, clean.copy(), 1.0,
                             clean_mask=clean, labels=lab, winter_id=winter_id)


def filter_by_cloud_fraction(obs: SensorObservation, threshold: float = CLOUD_THRESHOLD) -> bool:
    """Keep/drop decision: strictly more than ``threshold`` of the lake must be cloud-free."""
    if obs.sensor is SensorKind.SAR:
        return True
    return obs.cloud_free_fraction > threshold


def read_valid(obs: SensorObservation) -> np.ndarray:
    """Values of the valid cells, (n_valid, C), in row-major order."""
    return obs.values[obs.valid_mask]
