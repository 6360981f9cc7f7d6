"""Figure writers: plotted data tables and projection diagnostics."""

import csv
import datetime as dt
import json

import numpy as np
import pytest

from lakeice.plotting import (linear_probe_accuracy, plot_embeddings, plot_timeseries, project_embeddings,
                              sensor_silhouette)


def _series(n=40):
    start = dt.date(2016, 12, 1)
    return [(start + dt.timedelta(k), float(np.clip(1 - abs(k - 20) / 10, 0, 1))) for k in range(n)]


def test_identical_series_lie_on_the_reference_line(tmp_path):
    ref = _series()
    png = plot_timeseries(tmp_path / "ts.png", ref, ref, title="x")
    assert png.stat().st_size > 0
    rows = list(csv.DictReader(open(tmp_path / "ts.csv", encoding="utf-8")))
    assert len(rows) == len(ref)
    assert all(r["reference"] == r["prediction"] for r in rows)
    assert {int(r["month"]) for r in rows} == {12, 1}


def test_timeseries_table_is_byte_identical(tmp_path):
    ref, pred = _series(), [(d, f * 0.9) for d, f in _series()[::3]]
    plot_timeseries(tmp_path / "a.png", ref, pred)
    plot_timeseries(tmp_path / "b.png", ref, pred)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_timeseries_without_predictions_fails(tmp_path):
    with pytest.raises(ValueError, match="no predictions"):
        plot_timeseries(tmp_path / "x.png", _series(), [])


def _clusters(seed=0, n=60):
    rng = np.random.default_rng(seed)
    cls = np.repeat([0, 1], n)
    sensors = np.tile(["MODIS", "SAR"], n)
    vec = rng.normal(0, 0.3, (2 * n, 8))
    vec[:, 0] += 4 * cls
    vec[:, 1] += 2 * (sensors == "SAR")
    return vec, sensors, cls


def test_projection_keeps_separable_classes_and_sensor_clusters():
    vec, sensors, cls = _clusters()
    pts = project_embeddings(vec, 2, seed=0)
    assert pts.shape == (len(vec), 2)
    assert linear_probe_accuracy(pts, cls) > 0.9
    assert sensor_silhouette(pts, sensors) > 0


def test_projection_input_checks():
    with pytest.raises(ValueError):
        project_embeddings(np.zeros((0, 4)))
    with pytest.raises(ValueError):
        sensor_silhouette(np.zeros((4, 2)), ["SAR"] * 4)
    assert linear_probe_accuracy(np.zeros((3, 2)), [1, 1, 1]) == 1.0


def test_embedding_figure_files_and_metadata(tmp_path):
    vec, sensors, cls = _clusters(n=25)
    meta = plot_embeddings(tmp_path, vec, sensors, cls.astype(float), cls, seed=1)
    for dims in (2, 3):
        assert (tmp_path / f"embedding_{dims}d.png").stat().st_size > 0
        header = (tmp_path / f"embedding_{dims}d.csv").read_text().splitlines()[0].split(",")
        assert header == [*(f"x{i}" for i in range(dims)), "sensor", "fraction", "class"]
    on_disk = json.loads((tmp_path / "embedding_meta.json").read_text())
    assert on_disk == meta
    assert (meta["method"], meta["perplexity"], meta["iterations"]) == ("t-SNE", 30, 1000)
    assert meta["n_points"] == len(vec) and meta["linear_probe_accuracy_2d"] > 0.9
    first = (tmp_path / "embedding_2d.csv").read_bytes()
    plot_embeddings(tmp_path, vec, sensors, cls.astype(float), cls, seed=1)
    assert (tmp_path / "embedding_2d.csv").read_bytes() == first
