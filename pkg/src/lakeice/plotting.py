"""Figure artefacts: water-fraction time series and embedding projections.

Every figure is written as a PNG next to a CSV table holding exactly the
plotted numbers, so the data behind a plot can be diffed byte for byte.
"""

import csv
import datetime as dt
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.linear_model import LogisticRegression  # noqa: E402
from sklearn.manifold import TSNE  # noqa: E402
from sklearn.metrics import silhouette_score  # noqa: E402

TSNE_PERPLEXITY = 30
TSNE_ITERATIONS = 1000
_SENSOR_MARKERS = {"MODIS": "o", "VIIRS": "s", "SAR": "^"}


def _season_axis(dates):
    """Sep 1 to May 31 of the winter that contains ``dates``."""
    first = min(dates)
    y0 = first.year if first.month >= 9 else first.year - 1
    return dt.date(y0, 9, 1), dt.date(y0 + 1, 5, 31)


def plot_timeseries(path, reference, predictions, title=""):
    """Reference fraction as a line, predictions as dots coloured by month.

    ``reference`` and ``predictions`` are sequences of (date, fraction).
    Writes ``path`` (PNG) and ``path`` with suffix ``.csv``.
    """
    reference = sorted(reference)
    predictions = sorted(predictions)
    if not predictions:
        raise ValueError("no predictions to plot")
    path = Path(path)
    ref_map = dict(reference)
    with open(path.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "reference", "prediction", "month"])
        for d, f in predictions:
            r = ref_map.get(d)
            w.writerow([d.isoformat(), "" if r is None else f"{r:.6f}", f"{f:.6f}", d.month])

    fig, ax = plt.subplots(figsize=(9, 3.5))
    if reference:
        ax.plot([d for d, _ in reference], [f for _, f in reference], color="k", lw=1.2,
                label="reference")
    months = np.array([d.month for d, _ in predictions])
    cmap = plt.get_cmap("tab10")
    for k, m in enumerate(sorted(set(months), key=lambda m: (m < 9, m))):
        sel = [p for p, mm in zip(predictions, months) if mm == m]
        ax.scatter([d for d, _ in sel], [f for _, f in sel], s=12, color=cmap(k % 10),
                   label=dt.date(2000, m, 1).strftime("%b"), zorder=3)
    lo, hi = _season_axis([d for d, _ in predictions] + [d for d, _ in reference])
    ax.set_xlim(lo, hi)
    ax.set_ylim(-0.05, 1.05)
    ax.set_ylabel("fraction of water")
    ax.set_title(title)
    ax.legend(fontsize=7, ncol=5, loc="center right")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def project_embeddings(vectors, dims=2, seed=0):
    """Stochastic-neighbour embedding of (N, D) vectors to (N, dims)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty (N, D) array of embedding vectors")
    perplexity = min(TSNE_PERPLEXITY, max(1.0, (x.shape[0] - 1) / 3))
    tsne = TSNE(n_components=dims, perplexity=perplexity, max_iter=TSNE_ITERATIONS,
                init="pca", random_state=seed)
    return tsne.fit_transform(x)


def linear_probe_accuracy(points, labels, seed=0) -> float:
    """Training accuracy of a logistic-regression separator on the projected points."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return 1.0
    clf = LogisticRegression(random_state=seed, max_iter=1000).fit(points, labels)
    return float(clf.score(points, labels))


def sensor_silhouette(points, sensors) -> float:
    sensors = np.asarray(sensors)
    if len(np.unique(sensors)) < 2:
        raise ValueError("silhouette needs at least two sensors")
    return float(silhouette_score(points, sensors))


def plot_embeddings(out_dir, vectors, sensors, fractions, classes=None, seed=0, stem="embedding"):
    """2-D and 3-D projections coloured by predicted water fraction, marked by sensor.

    Writes ``<stem>_2d.png``/``.csv``, ``<stem>_3d.png``/``.csv`` and
    ``<stem>_meta.json``; returns the metadata dict (including the probe
    accuracy when ``classes`` is given and the per-sensor silhouette).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sensors = np.asarray(sensors)
    fractions = np.asarray(fractions, dtype=np.float64)
    meta = {"method": "t-SNE", "perplexity": TSNE_PERPLEXITY, "iterations": TSNE_ITERATIONS,
            "seed": seed, "n_points": int(len(sensors))}
    for dims in (2, 3):
        pts = project_embeddings(vectors, dims, seed)
        with open(out_dir / f"{stem}_{dims}d.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*(f"x{i}" for i in range(dims)), "sensor", "fraction"]
                       + (["class"] if classes is not None else []))
            for k in range(len(pts)):
                w.writerow([*(f"{v:.6f}" for v in pts[k]), sensors[k], f"{fractions[k]:.6f}"]
                           + ([int(classes[k])] if classes is not None else []))
        fig = plt.figure(figsize=(5.5, 4.5))
        ax = fig.add_subplot(projection="3d" if dims == 3 else None)
        for s in sorted(set(sensors)):
            sel = sensors == s
            sc = ax.scatter(*pts[sel].T, c=fractions[sel], cmap="coolwarm", vmin=0, vmax=1, s=6,
                            marker=_SENSOR_MARKERS.get(str(s), "o"), label=str(s))
        fig.colorbar(sc, ax=ax, label="predicted water fraction")
        ax.legend(fontsize=7)
        fig.savefig(out_dir / f"{stem}_{dims}d.png", dpi=100,
                    metadata={"Description": json.dumps(meta, sort_keys=True)})
        plt.close(fig)
        if dims == 2:
            if classes is not None:
                meta["linear_probe_accuracy_2d"] = linear_probe_accuracy(pts, classes, seed)
            if len(set(sensors)) > 1:
                meta["sensor_silhouette_2d"] = sensor_silhouette(pts, sensors)
    (out_dir / f"{stem}_meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                               encoding="utf-8")
    return meta
