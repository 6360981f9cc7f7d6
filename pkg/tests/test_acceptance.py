"""Acceptance suite: each test measures one criterion and records a pass/fail line.

The summary lines are printed at the end of the pytest session.
"""

import datetime as dt
import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
import torch

import oracles
from lakeice.acquisition import AcquisitionCalendar, effective_temporal_resolution
from lakeice.cli import _embedding_points
from lakeice.evaluation import compare_to_reference, date_offset, extract_ice_dates
from lakeice.losses import intra_day_coherence_loss, line_loss, masked_cross_entropy, mse_loss
from lakeice.model import FusionModel, Resize, embed_observation, segment
from lakeice.patches import SensorObservation
from lakeice.plotting import linear_probe_accuracy, project_embeddings, sensor_silhouette
from lakeice.regression import TemporalRegressor
from lakeice.sensors import SensorKind
from lakeice.synthetic import generate_desk_dataset, true_water_fraction
from lakeice.training import TrainConfig, evaluate_model, make_split, train_ensemble, train_pipeline
from test_gradients import regression_gradient_errors, segmentation_gradient_errors

D = dt.date


# -- 1. loss oracles ------------------------------------------------------------------

def test_criterion_1_loss_oracles(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {"line": 0.0, "idc": 0.0, "mse": 0.0, "ce": 0.0}
    for _ in range(1000):
        b = int(rng.integers(2, 12))
        y = rng.random(b).tolist()
        t = rng.random(b).tolist()
        days = sorted(rng.integers(0, 4, b).tolist())
        worst["line"] = max(worst["line"], abs(float(line_loss(y)) - oracles.line(y)))
        worst["idc"] = max(worst["idc"], abs(float(intra_day_coherence_loss(y, days)) - oracles.idc(y, days)))
        worst["mse"] = max(worst["mse"], abs(float(mse_loss(y, t)) - oracles.mse(y, t)))
        h, w = rng.integers(1, 6, 2)
        logits = rng.normal(size=(3, h, w)) * 3
        probs = np.exp(logits) / np.exp(logits).sum(0)
        labels = rng.integers(0, 3, (h, w))
        mask = rng.random((h, w)) > 0.3
        mask.flat[0] = True
        got = float(masked_cross_entropy(probs, labels, mask))
        worst["ce"] = max(worst["ce"], abs(got - oracles.cross_entropy(probs.tolist(), labels.tolist(),
                                                                       mask.tolist())))
    worked = float(line_loss([0.0, 1.0, 0.0, 1.0]))
    seconds = time.perf_counter() - t0
    ok_oracle = acceptance(1, "max |err|", max(worst.values()) <= 1e-9,
                           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    ok_worked = acceptance(1, "[0,1,0,1] ->", abs(worked - 0.3638) < 5e-5, f"{worked:.4f}")
    ok_time = acceptance(1, "runtime", seconds < 10, f"{seconds:.1f}s")
    assert ok_oracle and ok_worked and ok_time


# -- 2. gradient checks ------------------------------------------------------------------

def test_criterion_2_gradient_checks(acceptance):
    t0 = time.perf_counter()
    seg = segmentation_gradient_errors(100)
    reg = regression_gradient_errors(100)
    seconds = time.perf_counter() - t0
    ok_seg = acceptance(2, "segmentation", len(seg) >= 100 and seg.max() < 1e-4,
                        f"{len(seg)} points, max rel err {seg.max():.1e}")
    ok_reg = acceptance(2, "regression", len(reg) >= 100 and reg.max() < 1e-4,
                        f"{len(reg)} points, max rel err {reg.max():.1e}")
    ok_time = acceptance(2, "runtime", seconds < 120, f"{seconds:.1f}s")
    assert ok_seg and ok_reg and ok_time


# -- 3. shapes and invariances --------------------------------------------------------------

def _random_obs(sensor, seed):
    rng = np.random.default_rng(seed)
    h, w = sensor.patch_shape
    valid = rng.random((h, w)) > 0.2
    return SensorObservation(sensor, D(2017, 1, 5), "x", rng.normal(size=(h, w, sensor.channels)), valid, 1.0)


def test_criterion_3_shapes_and_invariances(acceptance):
    model = FusionModel(seed=0)
    shapes, prob_err = set(), 0.0
    for k in range(10):
        for sensor in SensorKind:
            emb = embed_observation(_random_obs(sensor, k), model)
            shapes.add((sensor.value, emb.values.shape))
            prob_err = max(prob_err, float(np.abs(segment(emb, model).sum(-1) - 1).max()))
    ok_shape = acceptance(3, "embeddings", all(s == (12, 12, 32) for _, s in shapes),
                          "12x12x32 for " + "/".join(sorted({n for n, _ in shapes})))
    ok_prob = acceptance(3, "max |sum p - 1|", prob_err < 1e-6, f"{prob_err:.1e}")

    g = torch.Generator().manual_seed(0)
    reg = TemporalRegressor(seed=0)
    with torch.no_grad():
        out = torch.cat([reg(torch.randn(8, 7, 32, 12, 12, generator=g) * s) for s in (0.1, 1, 10, 100)])
    ok_reg = acceptance(3, "regression output", bool(((out >= 0) & (out <= 1)).all()),
                        f"in [{float(out.min()):.3f}, {float(out.max()):.3f}]")

    r, lin_err = Resize(), 0.0
    for _ in range(20):
        x, y = (torch.randn(2, 4, 128, 128, generator=g, dtype=torch.float64) for _ in range(2))
        a, b = (float(v) for v in torch.randn(2, generator=g, dtype=torch.float64) * 3)
        lin_err = max(lin_err, float((r(a * x + b * y) - (a * r(x) + b * r(y))).abs().max()))
    ok_lin = acceptance(3, "resize linearity err", lin_err <= 1e-6, f"{lin_err:.1e}")
    assert ok_shape and ok_prob and ok_reg and ok_lin


# -- 4. synthetic end-to-end -------------------------------------------------------------

@pytest.fixture(scope="module")
def e2e():
    """Four lakes x two winters, leave-2017-18-out, desk profile at epoch scale 0.1."""
    t0 = time.perf_counter()
    data = generate_desk_dataset(0)
    split = make_split(data, "lowo", "2017-18")
    trained = train_pipeline(split.train, TrainConfig.desk(0.1))
    metrics = evaluate_model(trained, split.test)
    return SimpleNamespace(split=split, trained=trained, metrics=metrics, seconds=time.perf_counter() - t0)


def _truth_events(season):
    c = season.config
    days = [c.season_start + dt.timedelta(k) for k in range((c.season_end - c.season_start).days + 1)]
    return extract_ice_dates([(d, true_water_fraction(c, d)) for d in days], 0.3)


@pytest.mark.slow
def test_criterion_4_segmentation(e2e, acceptance):
    ok = True
    for sensor in SensorKind:
        acc, iou = e2e.metrics[f"{sensor.value}/mAcc"], e2e.metrics[f"{sensor.value}/mIoU"]
        ok &= acceptance(4, f"{sensor.value} mAcc/mIoU", acc >= 90 and iou >= 60, f"{acc:.1f}/{iou:.1f}")
    assert ok


@pytest.mark.slow
def test_criterion_4_fraction_mae(e2e, acceptance):
    mae = e2e.metrics["fraction_mae"]
    assert acceptance(4, "MAE", mae <= 0.10, f"{mae:.3f}")


@pytest.mark.slow
def test_criterion_4_ice_dates(e2e, acceptance):
    offsets, ok = [], True
    for season in e2e.split.test:
        _, _, daily = e2e.trained.predict_season(season)
        events = extract_ice_dates([(p.date, p.fused) for p in daily], 0.3)
        truth = _truth_events(season)
        for cmp in compare_to_reference(events, {"ice_on": truth.ice_on, "ice_off": truth.ice_off}):
            offsets.append(f"{season.lake_id} {cmp.event.replace('ice_', '')} {cmp.offset_days:+d}"
                           if cmp.offset_days is not None else f"{season.lake_id} {cmp.event} missing")
            ok &= cmp.gcos_pass
    acceptance(4, "ice dates within 2 d", ok, "(" + ", ".join(offsets) + ")")
    assert ok, offsets


@pytest.mark.slow
def test_criterion_4_runtime(e2e, acceptance):
    assert acceptance(4, "runtime", e2e.seconds <= 20 * 60, f"{e2e.seconds / 60:.1f} min")


@pytest.mark.slow
def test_overfit_sanity_on_training_partition(e2e):
    train_metrics = evaluate_model(e2e.trained, e2e.split.train)
    for sensor in SensorKind:
        assert train_metrics[f"{sensor.value}/mAcc"] > 95, train_metrics


@pytest.mark.slow
def test_embedding_projection_is_separable_and_keeps_sensor_clusters(e2e):
    rng = np.random.default_rng(0)
    vecs, sensors, _, classes = _embedding_points(e2e.trained, e2e.split.test, 2, rng)
    pick = rng.choice(len(vecs), min(600, len(vecs)), replace=False)
    pts = project_embeddings(vecs[pick], 2, seed=0)
    assert linear_probe_accuracy(pts, np.asarray(classes)[pick]) > 0.9
    assert sensor_silhouette(pts, np.asarray(sensors)[pick]) > 0


# -- 5. phenology oracle -------------------------------------------------------------------

def _scenario(kind, rng):
    n = int(rng.integers(8, 30))
    if kind == "no-event":
        f = rng.uniform(0.35, 1.0, n)
    elif kind == "single-dip":
        f = rng.uniform(0.35, 1.0, n)
        f[rng.integers(1, n - 1)] = rng.uniform(0, 0.29)
    else:
        down = np.sort(rng.random(n // 2))[::-1]
        f = np.concatenate([down, np.sort(rng.random(n - n // 2))]) + rng.normal(0, 0.1, n)
        f = np.clip(f, 0, 1)
    gaps = rng.integers(1, 4, n)
    days = [D(2016, 11, 1) + dt.timedelta(int(s)) for s in np.cumsum(gaps)]
    return days, f.tolist()


def test_criterion_5_phenology_oracle(acceptance):
    rng = np.random.default_rng(5)
    kinds = ["no-event", "single-dip", "v-shape", "range-reference"]
    mismatches = 0
    for k in range(50):
        kind = kinds[k % 4]
        days, f = _scenario(kind, rng)
        thr = float(rng.choice([0.1, 0.3]))
        ev = extract_ice_dates(list(zip(days, f)), thr)
        want_on, want_off = oracles.ice_dates(days, f, thr)
        mismatches += (ev.ice_on, ev.ice_off) != (want_on, want_off)
        if kind == "no-event":
            mismatches += ev.ice_on is not None
        if kind == "single-dip":
            mismatches += ev.ice_on is not None
        if kind == "range-reference" and ev.ice_on is not None:
            start = ev.ice_on + dt.timedelta(int(rng.integers(-5, 6)))
            ref = (start, start + dt.timedelta(int(rng.integers(0, 4))))
            lo, hi = ref
            want = 0 if lo <= ev.ice_on <= hi else (ev.ice_on - lo).days if ev.ice_on < lo else (ev.ice_on - hi).days
            on = compare_to_reference(ev, {"ice_on": ref})[0]
            mismatches += on.offset_days != want or on.gcos_pass != (abs(want) <= 2)
            mismatches += date_offset(ev.ice_on, ref) != want
    ok_cases = acceptance(5, "hand-evaluated scenarios", mismatches == 0, f"50 cases, {mismatches} mismatches")

    violations = 0
    for _ in range(1000):
        n1, n2 = rng.integers(1, 16, 2)
        f = list(np.sort(rng.random(n1))[::-1]) + list(np.sort(rng.random(n2)))
        if len(f) < 2:
            continue
        t1, t2 = np.sort(rng.uniform(0.01, 0.99, 2))
        d = [D(2017, 1, 1) + dt.timedelta(k) for k in range(len(f))]
        e1, e2 = extract_ice_dates(list(zip(d, f)), t1), extract_ice_dates(list(zip(d, f)), t2)
        violations += bool(e1.ice_on and e2.ice_on and e2.ice_on > e1.ice_on)
        violations += bool(e1.ice_off and e2.ice_off and e2.ice_off < e1.ice_off)
    ok_mono = acceptance(5, "threshold monotonicity", violations == 0, f"1000 series, {violations} violations")
    assert ok_cases and ok_mono


# -- 6. temporal resolution -------------------------------------------------------------------

def _calendar(rng, start=D(2016, 12, 1), span=120):
    spec = {}
    for s in SensorKind:
        if rng.random() < 0.8 or not spec:
            offs = rng.choice(span + 1, int(rng.integers(1, 40)), replace=False)
            spec[s] = sorted(start + dt.timedelta(int(o)) for o in offs)
    return spec


def test_criterion_6_temporal_resolution(acceptance):
    rng = np.random.default_rng(6)
    start, end = D(2016, 12, 1), D(2017, 3, 31)
    exact = never_worse = dup = 0
    n = 0
    while n < 1000:
        spec = _calendar(rng)
        cal = AcquisitionCalendar(start, end, spec)
        if len(cal.union()) < 2:
            continue
        n += 1
        exact += effective_temporal_resolution(cal) == oracles.gap_mean(cal.union())

        first, last = min(cal.union()), max(cal.union())
        common = AcquisitionCalendar(start, end, {s: sorted(set(v) | {first, last}) for s, v in spec.items()})
        never_worse += all(effective_temporal_resolution(common) <= effective_temporal_resolution(common, [s])
                           for s in spec)

        s0 = next(iter(spec))
        other = next(s for s in SensorKind if s is not s0)
        doubled = AcquisitionCalendar(start, end, {s0: spec[s0], other: spec[s0]})
        dup += (len(spec[s0]) < 2
                or effective_temporal_resolution(doubled) == effective_temporal_resolution(doubled, [s0]))
    example = AcquisitionCalendar(start, end, {SensorKind.MODIS: [D(2016, 12, 1), D(2016, 12, 3)],
                                               SensorKind.VIIRS: [D(2016, 12, 1), D(2016, 12, 3)]})
    dup_example = effective_temporal_resolution(example)
    ok_exact = acceptance(6, "gap-mean oracle", exact == 1000, f"{exact}/1000 exact")
    ok_union = acceptance(6, "union never worse (common span)", never_worse == 1000, f"{never_worse}/1000")
    ok_dup = acceptance(6, "same-day counted once", dup == 1000 and dup_example == 2.0,
                        f"{dup}/1000, example {dup_example}")
    assert ok_exact and ok_union and ok_dup


# -- 7. ensemble contract -----------------------------------------------------------------

def test_criterion_7_ensemble_contract(toy_seasons, acceptance):
    cfg = TrainConfig(epoch_scale=0.002)
    data = toy_seasons[:2]
    distinct = train_ensemble(data, cfg, n=5, seeds=[0, 1, 2, 3, 4])
    sig = [s for _, s in distinct.summary.values()]
    ok_distinct = acceptance(7, "5 distinct seeds", len(distinct.members) == 5 and min(sig) >= 0
                             and all(isinstance(v, tuple) and len(v) == 2 for v in distinct.summary.values()),
                             f"sigma >= 0 on {len(sig)} metrics (max {max(sig):.3g})")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        same = train_ensemble(data, cfg, n=5, seeds=[3] * 5)
    zero = all(s == 0.0 for _, s in same.summary.values())
    ok_same = acceptance(7, "identical seeds", zero, "sigma == 0 exactly" if zero else "sigma != 0")
    assert ok_distinct and ok_same


# -- 8. published hyper-parameters --------------------------------------------------------------

PUBLISHED = {
    "sar_pretrain": {"epochs": 500, "batch_size": 16, "optimizer": "adam", "lr": 5e-5,
                     "decay_steps": 375, "decay_rate": 0.9, "warmup_steps": None},
    "optical_pretrain": {"epochs": 40, "batch_size": 8, "optimizer": "adam", "lr": 5e-4,
                         "decay_steps": None, "decay_rate": None, "warmup_steps": None},
    "finetune": {"epochs": 250, "batch_size": 16, "optimizer": "adam", "lr": 1e-5,
                 "decay_steps": 150, "decay_rate": 0.9, "warmup_steps": None},
    "regression": {"epochs": 100, "batch_size": 4, "optimizer": "sgd", "lr": 5e-4,
                   "decay_steps": None, "decay_rate": None, "warmup_steps": None},
    "window": 7, "beta": 0.25, "gamma": 0.08,
}


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def test_criterion_8_published_hyper_parameters(acceptance):
    shipped = _flatten({k: v for k, v in TrainConfig().to_dict().items() if k in PUBLISHED})
    wanted = _flatten(PUBLISHED)
    diff = {k: (shipped.get(k), wanted.get(k)) for k in set(shipped) | set(wanted)
            if shipped.get(k) != wanted.get(k) or (k in shipped) != (k in wanted)}
    assert acceptance(8, "config diff", not diff, "empty" if not diff else str(sorted(diff.items())))
