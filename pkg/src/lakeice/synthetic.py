"""Synthetic multi-sensor lake seasons with known ground truth.

The world is a 12x12 unit square (one unit = one MODIS pixel). Each sensor
samples it on its own grid: MODIS 12x12 (cell 1), VIIRS 8x8 (cell 1.5),
SAR 128x128 (cell 12/128). The open-water fraction follows a double
sigmoid through the season; which pixels are open is decided by a smooth
random "freeze field" that is rank-normalised over the lake, so the
frozen area grows from one side of the lake in a spatially coherent way.
"""

import datetime as dt
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .acquisition import AcquisitionCalendar
from .geometry import GridSpec, LakeGeometry, ellipse_polygon, pixel_centres
from .patches import SensorObservation, crop_sar_scene, filter_by_cloud_fraction, pad_to_patch
from .sensors import BACKGROUND, FROZEN, NON_FROZEN, SENSOR_PRIORITY, SensorKind

WORLD = 12.0
SENSOR_GRIDS = {
    SensorKind.MODIS: GridSpec(12, 12, 1.0),
    SensorKind.VIIRS: GridSpec(8, 8, 1.5),
    SensorKind.SAR: GridSpec(128, 128, WORLD / 128),
}
EMBED_GRID = SENSOR_GRIDS[SensorKind.MODIS]

# mean reflectance per class, one value per band
_OPTICAL_SIGNATURE = {
    SensorKind.MODIS: {
        "water": np.array([.06, .05, .04, .03, .02, .015, .01, .07, .065, .06, .055, .05]),
        "ice": np.array([.72, .70, .68, .62, .45, .12, .08, .74, .73, .72, .71, .70]),
    },
    SensorKind.VIIRS: {
        "water": np.array([.05, .035, .02, .015, .012]),
        "ice": np.array([.70, .64, .13, .09, .06]),
    },
}
# linear backscatter (VV, VH)
_SAR_SIGNATURE = {
    "water": np.array([0.012, 0.0025]),
    "ice": np.array([0.05, 0.010]),
    "land": np.array([0.15, 0.035]),
}
_SAR_LOOKS = 4


@dataclass
class DayLabel:
    date: dt.date
    water_fraction: float
    is_transition: bool
    per_pixel_labels: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.water_fraction <= 1.0:
            raise ValueError("water_fraction must lie in [0, 1]")
        if self.is_transition and self.per_pixel_labels is not None:
            raise ValueError("per-pixel labels exist only for non-transition days")
        if not self.is_transition and self.water_fraction not in (0.0, 1.0):
            raise ValueError("non-transition days are fully frozen or fully open")


def _default_noise():
    return {SensorKind.MODIS: 0.02, SensorKind.VIIRS: 0.03, SensorKind.SAR: 0.5}


def _default_clouds():
    return {SensorKind.MODIS: 0.45, SensorKind.VIIRS: 0.45, SensorKind.SAR: 0.0}


def _default_revisit():
    return {SensorKind.MODIS: 1, SensorKind.VIIRS: 1, SensorKind.SAR: 4}


@dataclass
class SyntheticSeasonConfig:
    """Generator settings. Steepness is the sigmoid slope in 1/day."""

    seed: int = 0
    lake_id: str = "lake"
    winter_id: str = "2016-17"
    season_start: dt.date = dt.date(2016, 12, 1)
    season_end: dt.date = dt.date(2017, 3, 31)
    freeze_center: dt.date = dt.date(2017, 1, 5)
    freeze_steepness: float = 0.8
    breakup_center: dt.date = dt.date(2017, 3, 10)
    breakup_steepness: float = 0.8
    noise: dict = field(default_factory=_default_noise)
    cloud_prob: dict = field(default_factory=_default_clouds)
    revisit_days: dict = field(default_factory=_default_revisit)
    lake_polygon: list = field(default_factory=lambda: ellipse_polygon(6, 6, 4.6, 2.6, -15))

    def __post_init__(self):
        self.noise = {SensorKind(k): float(v) for k, v in self.noise.items()}
        self.cloud_prob = {SensorKind(k): float(v) for k, v in self.cloud_prob.items()}
        self.revisit_days = {SensorKind(k): int(v) for k, v in self.revisit_days.items()}
        self.validate()

    def validate(self):
        if not self.season_start <= self.freeze_center < self.breakup_center <= self.season_end:
            raise ValueError("freeze-up centre must precede break-up centre inside the season")
        if self.freeze_steepness <= 0 or self.breakup_steepness <= 0:
            raise ValueError("steepness must be positive")
        if any(v < 0 for v in self.noise.values()):
            raise ValueError("noise levels must be >= 0")
        if any(not 0.0 <= p <= 1.0 for p in self.cloud_prob.values()):
            raise ValueError("cloud probabilities must lie in [0, 1]")
        if self.cloud_prob.get(SensorKind.SAR, 0.0) != 0.0:
            raise ValueError("SAR is not affected by clouds")
        if any(v < 1 for v in self.revisit_days.values()):
            raise ValueError("revisit period must be >= 1 day")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "lake_id": self.lake_id, "winter_id": self.winter_id,
            "season_start": self.season_start.isoformat(), "season_end": self.season_end.isoformat(),
            "freeze_center": self.freeze_center.isoformat(), "freeze_steepness": self.freeze_steepness,
            "breakup_center": self.breakup_center.isoformat(),
            "breakup_steepness": self.breakup_steepness,
            "noise": {k.value: v for k, v in self.noise.items()},
            "cloud_prob": {k.value: v for k, v in self.cloud_prob.items()},
            "revisit_days": {k.value: v for k, v in self.revisit_days.items()},
            "lake_polygon": [list(p) for p in self.lake_polygon],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSeasonConfig":
        d = dict(d)
        for key in ("season_start", "season_end", "freeze_center", "breakup_center"):
            if key in d and isinstance(d[key], str):
                d[key] = dt.date.fromisoformat(d[key])
        if "lake_polygon" in d:
            d["lake_polygon"] = [tuple(p) for p in d["lake_polygon"]]
        return cls(**d)


@dataclass
class SeasonData:
    """Everything known about one lake in one winter."""

    lake_id: str
    winter_id: str
    observations: list[SensorObservation]
    labels: list[DayLabel]
    calendar: AcquisitionCalendar
    embed_mask: np.ndarray
    config: SyntheticSeasonConfig | None = None

    def label_for(self, date) -> DayLabel | None:
        if not hasattr(self, "_label_index"):
            self._label_index = {lab.date: lab for lab in self.labels}
        return self._label_index.get(date)

    def label_series(self):
        return [(lab.date, lab.water_fraction) for lab in self.labels]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def true_water_fraction(cfg: SyntheticSeasonConfig, date) -> float:
    """Generating curve: 1 before freeze-up, 0 mid-winter, 1 after break-up."""
    t = (date - cfg.season_start).days
    tf = (cfg.freeze_center - cfg.season_start).days
    tb = (cfg.breakup_center - cfg.season_start).days
    f = 1.0 - _sigmoid(cfg.freeze_steepness * (t - tf)) + _sigmoid(cfg.breakup_steepness * (t - tb))
    # rounding keeps saturated tails at exactly 0 or 1
    return float(np.clip(np.round(f, 9), 0.0, 1.0))


class _SmoothField:
    """Sum of random low-frequency cosines over world coordinates."""

    def __init__(self, rng, n_modes=6, min_wavelength=4.0, max_wavelength=16.0):
        lam = rng.uniform(min_wavelength, max_wavelength, n_modes)
        theta = rng.uniform(0, 2 * np.pi, n_modes)
        self.k = np.stack([np.cos(theta), np.sin(theta)], 1) * (2 * np.pi / lam)[:, None]
        self.phase = rng.uniform(0, 2 * np.pi, n_modes)
        self.amp = rng.uniform(0.5, 1.0, n_modes)

    def __call__(self, x, y):
        x = np.asarray(x)[..., None]
        y = np.asarray(y)[..., None]
        return (self.amp * np.cos(self.k[:, 0] * x + self.k[:, 1] * y + self.phase)).sum(-1)


def _db_texture(rng, scale, std_db):
    """Multiplicative lognormal texture with ``std_db`` spread and correlation length ``scale`` px."""
    g = ndimage.gaussian_filter(rng.standard_normal((128, 128)), scale)
    return 10 ** (g / g.std() * std_db / 10)


def _subpixel_points(grid: GridSpec, n=5):
    """(H, W, n*n) sample coordinates inside each pixel."""
    off = (np.arange(n) + 0.5) / n * grid.cell
    cx, cy = pixel_centres(grid)
    x0 = cx - grid.cell / 2
    y0 = cy - grid.cell / 2
    ox, oy = np.meshgrid(off, off)
    return x0[..., None] + ox.ravel(), y0[..., None] + oy.ravel()


def _cloud_mask(rng, clean, frac):
    """Spatially coherent cloud mask hiding ``round(frac * n_clean)`` clean pixels."""
    n = int(clean.sum())
    k = int(round(frac * n))
    mask = np.zeros_like(clean)
    if k == 0:
        return mask
    noise = ndimage.gaussian_filter(rng.standard_normal(clean.shape), 1.5)
    idx = np.flatnonzero(clean)
    order = idx[np.argsort(noise.ravel()[idx], kind="stable")]
    mask.ravel()[order[:k]] = True
    return mask


def generate_synthetic_season(cfg: SyntheticSeasonConfig) -> SeasonData:
    """Deterministic season of observations, daily labels and calendar for one lake."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    geoms = {s: LakeGeometry(cfg.lake_id, g, list(cfg.lake_polygon)) for s, g in SENSOR_GRIDS.items()}
    sar_geom = geoms[SensorKind.SAR]
    if sar_geom.n_clean == 0:
        raise ValueError("lake has no clean pixels at SAR resolution")

    # rank-normalised freeze field, midpoint ranks (i - 0.5) / N: a pixel is open
    # water iff its rank is below the water fraction, i.e. the open count is
    # the fraction rounded to whole pixels
    freeze = _SmoothField(rng)
    sx, sy = pixel_centres(sar_geom.grid)
    ref = np.sort(freeze(sx, sy)[sar_geom.clean_pixel_mask])

    def rank(x, y):
        return (np.maximum(np.searchsorted(ref, freeze(x, y), side="right"), 1) - 0.5) / ref.size

    sar_rank = rank(sx, sy)
    ex, ey = pixel_centres(EMBED_GRID)
    embed_rank = rank(ex, ey)
    embed_mask = geoms[SensorKind.MODIS].clean_pixel_mask
    opt_rank = {}
    for s in (SensorKind.MODIS, SensorKind.VIIRS):
        px, py = _subpixel_points(geoms[s].grid)
        opt_rank[s] = (rank(*pixel_centres(geoms[s].grid)), rank(px, py))

    # static SAR textures
    land_tex = _db_texture(rng, 4.0, 3.0)
    ice_tex = _db_texture(rng, 2.0, 1.5)
    sar_lake = sar_geom.clean_pixel_mask

    n_days = (cfg.season_end - cfg.season_start).days + 1
    days = [cfg.season_start + dt.timedelta(d) for d in range(n_days)]
    phase = {s: int(rng.integers(0, cfg.revisit_days.get(s, 1))) for s in SensorKind}

    labels, observations = [], []
    calendar = AcquisitionCalendar(cfg.season_start, cfg.season_end)
    for d, day in enumerate(days):
        f = true_water_fraction(cfg, day)
        sar_open = sar_rank < f
        wf = float(sar_open[sar_lake].mean())
        transition = 0.0 < wf < 1.0
        day_map = None
        if not transition:
            day_map = np.full(embed_mask.shape, BACKGROUND, dtype=np.int8)
            day_map[embed_mask] = NON_FROZEN if wf == 1.0 else FROZEN
        labels.append(DayLabel(day, wf, transition, day_map))

        # draws happen for every sensor every day so that settings of one
        # sensor do not shift the random stream of another
        for sensor in SENSOR_PRIORITY[::-1]:
            day_rng = np.random.default_rng([cfg.seed, d, list(SensorKind).index(sensor)])
            rev = cfg.revisit_days.get(sensor, 1)
            if (d - phase[sensor]) % rev != 0:
                continue
            geom = geoms[sensor]
            if geom.n_clean == 0:
                continue
            if sensor is SensorKind.SAR:
                obs = _sar_observation(cfg, day_rng, day, sar_open, sar_lake, land_tex, ice_tex,
                                       None if transition else wf)
            else:
                obs = _optical_observation(cfg, day_rng, sensor, day, geom, opt_rank[sensor], f,
                                           None if transition else wf)
            if filter_by_cloud_fraction(obs):
                observations.append(obs)
                calendar.add(sensor, day)

    return SeasonData(cfg.lake_id, cfg.winter_id, observations, labels, calendar,
                      embed_mask.copy(), cfg)


def _optical_observation(cfg, rng, sensor, day, geom, ranks, f, label_wf):
    centre_rank, sub_rank = ranks
    water_share = (sub_rank < f).mean(-1)
    sig = _OPTICAL_SIGNATURE[sensor]
    albedo = rng.uniform(0.45, 1.0)        # snow-covered vs bare ice
    turbidity = rng.uniform(0.8, 1.2)
    gain = rng.uniform(0.9, 1.1)
    ice = sig["ice"] * albedo
    water = sig["water"] * turbidity
    values = gain * (water_share[..., None] * water + (1 - water_share[..., None]) * ice)
    values = values + rng.normal(0.0, cfg.noise.get(sensor, 0.0), values.shape)

    clean = geom.clean_pixel_mask
    p = cfg.cloud_prob.get(sensor, 0.0)
    overcast = rng.random() < p
    scattered = rng.random() < p
    if overcast:
        cloud = _cloud_mask(rng, clean, 1.0 - rng.uniform(0.0, 0.3))
    elif scattered:
        cloud = _cloud_mask(rng, clean, rng.uniform(0.05, 0.5))
    else:
        cloud = np.zeros_like(clean)

    lab = None
    if label_wf is not None:
        lab = np.full(clean.shape, BACKGROUND, dtype=np.int8)
        lab[clean] = NON_FROZEN if label_wf == 1.0 else FROZEN
    return pad_to_patch(values, clean, sensor, cloud, date=day, lake_id=cfg.lake_id,
                        labels=lab, winter_id=cfg.winter_id)


def _sar_observation(cfg, rng, day, sar_open, sar_lake, land_tex, ice_tex, label_wf):
    wind = 10 ** (rng.normal(0.0, 2.0) / 10)
    inten = np.empty((128, 128, 2))
    water = _SAR_SIGNATURE["water"] * wind
    ice = _SAR_SIGNATURE["ice"][None, None] * ice_tex[..., None]
    land = _SAR_SIGNATURE["land"][None, None] * land_tex[..., None]
    lake_val = np.where(sar_open[..., None], water[None, None], ice)
    inten[:] = np.where(sar_lake[..., None], lake_val, land)
    speckle = rng.gamma(_SAR_LOOKS, 1.0 / _SAR_LOOKS, inten.shape)
    db = 10 * np.log10(inten * speckle)
    db += rng.normal(0.0, cfg.noise.get(SensorKind.SAR, 0.0), db.shape)

    lab = None
    if label_wf is not None:
        lab = np.full((128, 128), BACKGROUND, dtype=np.int8)
        lab[sar_lake] = NON_FROZEN if label_wf == 1.0 else FROZEN
    return crop_sar_scene(db, sar_lake, date=day, lake_id=cfg.lake_id, labels=lab,
                          winter_id=cfg.winter_id)


# Four lakes of decreasing size, loosely shaped after Alpine lakes; the
# smallest has no clean pixel on the VIIRS grid.
DESK_LAKES = {
    "sihl": ellipse_polygon(6.0, 6.0, 5.3, 3.4, 25),
    "sils": ellipse_polygon(6.0, 6.0, 4.6, 2.6, -15),
    "silvaplana": ellipse_polygon(6.0, 6.0, 3.6, 2.4, 40),
    "stmoritz": ellipse_polygon(6.0, 6.0, 2.1, 1.6, 10),
}
DESK_WINTERS = ("2016-17", "2017-18")
# SAR every second day, inside the 1.5-4.5 day span of the real constellation
DESK_REVISIT = {SensorKind.MODIS: 1, SensorKind.VIIRS: 1, SensorKind.SAR: 2}


def desk_configs(seed=0, lakes=None, winters=DESK_WINTERS, **overrides) -> list[SyntheticSeasonConfig]:
    """Seeded configs for lakes x winters, with jittered freeze-up and break-up dates."""
    lakes = DESK_LAKES if lakes is None else {k: DESK_LAKES[k] for k in lakes}
    rng = np.random.default_rng(seed)
    out = []
    for w, winter in enumerate(winters):
        y0 = int(winter[:4])
        for i, (lake, poly) in enumerate(lakes.items()):
            fc = dt.date(y0 + 1, 1, 1) + dt.timedelta(int(rng.integers(-10, 11)))
            bc = dt.date(y0 + 1, 3, 8) + dt.timedelta(int(rng.integers(-8, 9)))
            kw = dict(
                seed=int(rng.integers(0, 2**31 - 1)), lake_id=lake, winter_id=winter,
                season_start=dt.date(y0, 12, 1), season_end=dt.date(y0 + 1, 3, 31),
                freeze_center=fc, breakup_center=bc, lake_polygon=list(poly),
                revisit_days=dict(DESK_REVISIT),
            )
            kw.update(overrides)
            out.append(SyntheticSeasonConfig.from_dict(kw))
    return out


def generate_desk_dataset(seed=0, **kw) -> list[SeasonData]:
    return [generate_synthetic_season(c) for c in desk_configs(seed, **kw)]
