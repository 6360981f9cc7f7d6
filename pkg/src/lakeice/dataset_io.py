"""On-disk dataset layout.

One directory per lake and winter holding ``manifest.json`` and array
payloads in the LIF1 format: a 16-byte header (magic ``LIF1`` then H, W, C
as little-endian uint32) followed by H*W*C little-endian float32 values.
A ``dataset.json`` at the root lists the season directories.
"""

import datetime as dt
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .acquisition import AcquisitionCalendar
from .patches import SensorObservation
from .sensors import SensorKind
from .synthetic import DayLabel, SeasonData, SyntheticSeasonConfig

MAGIC = b"LIF1"
_HEADER = struct.Struct("<4sIII")
FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


def write_array(path, arr):
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError("LIF1 arrays are (H, W) or (H, W, C)")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_array(path) -> np.ndarray:
    """(H, W, C) float32 array from a LIF1 file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    n = h * w * c
    if len(raw) != _HEADER.size + 4 * n:
        raise DatasetError(f"{path}: payload size does not match header {h}x{w}x{c}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).astype(np.float32)


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def season_dirname(season) -> str:
    return f"{season.lake_id}_{season.winter_id}"


def write_season(root, season: SeasonData) -> Path:
    d = Path(root) / season_dirname(season)
    d.mkdir(parents=True, exist_ok=True)
    write_array(d / "embed_mask.lif", season.embed_mask)
    obs_records, seen = [], {}
    for o in season.observations:
        stem = f"{o.sensor.value}_{o.date.isoformat()}"
        k = seen.get(stem, 0)
        seen[stem] = k + 1
        stem = f"{stem}_{k}"
        rec = {"sensor": o.sensor.value, "date": o.date.isoformat(), "file": f"{stem}.lif",
               "cloud_free_fraction": round(float(o.cloud_free_fraction), 9),
               "mask_file": f"{stem}_mask.lif", "clean_file": f"{stem}_clean.lif"}
        write_array(d / rec["file"], o.values)
        write_array(d / rec["mask_file"], o.valid_mask)
        write_array(d / rec["clean_file"], o.clean_mask)
        if o.labels is not None:
            rec["label_file"] = f"{stem}_labels.lif"
            write_array(d / rec["label_file"], o.labels)
        obs_records.append(rec)
    label_records = []
    for lab in season.labels:
        rec = {"date": lab.date.isoformat(), "water_fraction": lab.water_fraction,
               "is_transition": lab.is_transition}
        if lab.per_pixel_labels is not None:
            rec["label_file"] = f"day_{lab.date.isoformat()}_labels.lif"
            write_array(d / rec["label_file"], lab.per_pixel_labels)
        label_records.append(rec)
    manifest = {
        "format_version": FORMAT_VERSION,
        "lake_id": season.lake_id,
        "winter_id": season.winter_id,
        "season_start": season.calendar.start.isoformat(),
        "season_end": season.calendar.end.isoformat(),
        "embed_mask_file": "embed_mask.lif",
        "observations": obs_records,
        "labels": label_records,
        "generator": season.config.to_dict() if season.config is not None else None,
    }
    _dump_json(d / "manifest.json", manifest)
    return d


def write_dataset(root, seasons, meta: dict | None = None) -> Path:
    """Write every season plus a root ``dataset.json``; returns the root path."""
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc.strerror}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset directory {root} is not writable")
    dirs = [write_season(root, s).name for s in seasons]
    _dump_json(root / "dataset.json", {"format_version": FORMAT_VERSION, "seasons": dirs,
                                       "meta": meta or {}})
    return root


def _mask(path):
    return read_array(path)[..., 0] > 0.5


def _labels(path):
    return np.rint(read_array(path)[..., 0]).astype(np.int8)


def read_season(path) -> SeasonData:
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"{d}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{d}: manifest is not valid JSON ({exc.msg})") from exc
    try:
        lake, winter = manifest["lake_id"], manifest["winter_id"]
        obs = []
        for rec in manifest["observations"]:
            sensor = SensorKind.parse(rec["sensor"])
            values = read_array(d / rec["file"])
            valid = _mask(d / rec["mask_file"]) if "mask_file" in rec else np.ones(values.shape[:2], bool)
            clean = _mask(d / rec["clean_file"]) if "clean_file" in rec else valid.copy()
            labels = _labels(d / rec["label_file"]) if rec.get("label_file") else None
            obs.append(SensorObservation(sensor, dt.date.fromisoformat(rec["date"]), lake, values,
                                         valid, float(rec["cloud_free_fraction"]), clean, labels, winter))
        labels = []
        for rec in manifest["labels"]:
            lab_map = _labels(d / rec["label_file"]) if rec.get("label_file") else None
            labels.append(DayLabel(dt.date.fromisoformat(rec["date"]), float(rec["water_fraction"]),
                                   bool(rec["is_transition"]), lab_map))
        cal = AcquisitionCalendar(dt.date.fromisoformat(manifest["season_start"]),
                                  dt.date.fromisoformat(manifest["season_end"]))
        for o in obs:
            cal.add(o.sensor, o.date)
        embed_mask = _mask(d / manifest["embed_mask_file"])
        gen = manifest.get("generator")
        cfg = SyntheticSeasonConfig.from_dict(gen) if gen else None
    except KeyError as exc:
        raise DatasetError(f"{d}: manifest lacks field {exc.args[0]!r}") from exc
    except FileNotFoundError as exc:
        raise DatasetError(f"{d}: missing payload {Path(exc.filename).name}") from exc
    return SeasonData(lake, winter, obs, labels, cal, embed_mask, cfg)


def read_dataset(root) -> list[SeasonData]:
    root = Path(root)
    index = root / "dataset.json"
    if not index.is_file():
        raise DatasetError(f"{root}: no dataset.json")
    try:
        dirs = json.loads(index.read_text(encoding="utf-8"))["seasons"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise DatasetError(f"{index}: malformed dataset index") from exc
    return [read_season(root / name) for name in dirs]


def dataset_hash(root) -> str:
    """SHA-256 over every file of the dataset, in sorted relative-path order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()[:16]
