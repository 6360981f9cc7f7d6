"""``lakeice`` command line: synth, train, predict, eval, phenology, plot.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 contract
violation. Failures print one line ``error: <code-name>: <reason>`` to
stderr.
"""

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from . import dataset_io, plotting
from .evaluation import (compare_to_reference, extract_ice_dates, mean_iou, mean_pixel_accuracy,
                         mean_sigma, phenology_rows, write_metrics_report, write_phenology_report)
from .model import FusionModel, load_checkpoint, save_checkpoint
from .regression import ensemble_daily, load_regressor, read_prediction_table, save_regressor, \
    write_prediction_table
from .sensors import NON_FROZEN, SensorKind
from .synthetic import DESK_LAKES, DESK_WINTERS, desk_configs, generate_synthetic_season
from .training import (STEP1_STAGES, TrainConfig, TrainedModel, finetune_shared_with_sar, fraction_mae,
                       make_split, parse_split, pretrain_optical_and_shared, pretrain_sar_encoder,
                       segmentation_confusion, train_regression)

OUTPUT_ROOT_ENV = "LAKEICE_OUTPUT_ROOT"
EXIT_CONFIG, EXIT_DATA, EXIT_CONTRACT = 2, 3, 4
_EXIT_NAMES = {EXIT_CONFIG: "config", EXIT_DATA: "data", EXIT_CONTRACT: "contract"}

log = logging.getLogger("lakeice")


class CliError(Exception):
    def __init__(self, code, reason):
        super().__init__(reason)
        self.code = code
        self.reason = reason


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    try:
        return "v" + metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "v0.0.0-unknown"


def _hash_obj(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _load_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{what} is not valid JSON: {exc.msg} at line {exc.lineno}") from None


def _output_dir(args, default_name):
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV, "lakeice_out")
    return Path(root) / default_name


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_DATA, f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise CliError(EXIT_DATA, f"output directory {path} is not writable")
    return Path(path)


def _run_manifest(out, command, config_obj, seed, extra=None):
    rec = {"command": command, "config_hash": _hash_obj(config_obj), "seed": seed,
           "version": version_string()}
    rec.update(extra or {})
    _write_json(Path(out) / "run_manifest.json", rec)
    return rec


def _read_data(path):
    try:
        return dataset_io.read_dataset(path)
    except dataset_io.DatasetError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None


# -- synth ---------------------------------------------------------------------

def cmd_synth(args):
    overrides = _load_json(args.config, "synthetic config") if args.config else {}
    lakes = args.lakes.split(",") if args.lakes else overrides.pop("lakes", list(DESK_LAKES))
    winters = args.winters.split(",") if args.winters else overrides.pop("winters", list(DESK_WINTERS))
    overrides.pop("lakes", None)
    overrides.pop("winters", None)
    if args.cloud_prob is not None:
        overrides["cloud_prob"] = {"MODIS": args.cloud_prob, "VIIRS": args.cloud_prob, "SAR": 0.0}
    try:
        cfgs = desk_configs(args.seed, lakes, winters, **overrides)
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid synthetic config: {exc}") from None
    out = _mkdir(_output_dir(args, "dataset"))
    seasons = [generate_synthetic_season(c) for c in cfgs]
    meta = {"seed": args.seed, "configs": [c.to_dict() for c in cfgs]}
    try:
        dataset_io.write_dataset(out, seasons, meta)
    except OSError as exc:
        raise CliError(EXIT_DATA, str(exc)) from None
    _run_manifest(out, "synth", meta, args.seed,
                  {"n_observations": sum(len(s.observations) for s in seasons)})
    print(f"wrote {len(seasons)} lake-winters to {out}")


# -- train ---------------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    d = _load_json(args.config, "training config") if args.config else {}
    try:
        if args.profile == "desk":
            base = TrainConfig.desk(args.epoch_scale if args.epoch_scale is not None else 0.1)
        else:
            base = TrainConfig()
        cfg = TrainConfig.from_dict({**base.to_dict(), **d})
        if args.epoch_scale is not None:
            cfg = TrainConfig.from_dict({**cfg.to_dict(), "epoch_scale": args.epoch_scale})
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid training config: {exc}") from None
    return cfg


def _split(seasons, spec):
    try:
        mode, key = parse_split(spec)
        return make_split(seasons, mode, key)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    except KeyError as exc:
        raise CliError(EXIT_CONFIG, exc.args[0]) from None


def _member_seeds(cfg, n, seed):
    base = cfg.seed if seed is None else seed
    return list(range(base, base + n))


def cmd_train(args):
    cfg = _train_config(args)
    if args.ensemble < 1:
        raise CliError(EXIT_CONFIG, "--ensemble must be >= 1")
    seasons = _read_data(args.dataset)
    split = _split(seasons, args.split)
    out = _mkdir(_output_dir(args, "checkpoints"))
    ds_hash = dataset_io.dataset_hash(args.dataset)
    seeds = _member_seeds(cfg, args.ensemble, args.seed)
    run = {"dataset_hash": ds_hash, "split": args.split, "train_config": cfg.to_dict(),
           "config_hash": cfg.hash(), "seeds": seeds,
           "train": [f"{s.lake_id}_{s.winter_id}" for s in split.train],
           "test": [f"{s.lake_id}_{s.winter_id}" for s in split.test]}
    for k, seed in enumerate(seeds):
        member_cfg = cfg.with_seed(seed)
        mdir = _mkdir(out / f"member_{k}")
        history = {}
        stamp = {"dataset_hash": ds_hash, "config_hash": cfg.hash(), "seed": seed, "split": args.split}
        if args.stages in ("all", "1"):
            model = FusionModel(seed=seed)
            try:
                pretrain_sar_encoder(split.train, member_cfg, model, history)
                save_checkpoint(mdir / "sar_pretrain.ckpt", model, "sar_pretrain", stamp)
                pretrain_optical_and_shared(split.train, member_cfg, model, history)
                save_checkpoint(mdir / "optical_pretrain.ckpt", model, "optical_pretrain", stamp)
                finetune_shared_with_sar(split.train, member_cfg, model, history)
            except ValueError as exc:
                raise CliError(EXIT_DATA, str(exc)) from None
            save_checkpoint(mdir / "step1.ckpt", model, "finetune", stamp)
        if args.stages in ("all", "2"):
            model, header = _load_step1(mdir, ds_hash, cfg)
            try:
                reg = train_regression(split.train, member_cfg, model, history=history)
            except ValueError as exc:
                code = EXIT_CONTRACT if "missing" in str(exc) else EXIT_DATA
                raise CliError(code, str(exc)) from None
            save_regressor(mdir / "step2.ckpt", reg, stamp)
        hist = {k: v for k, v in history.items() if k != "regression_batches"}
        _write_json(mdir / "history.json", hist)
    _write_json(out / "train_run.json", run)
    _run_manifest(out, "train", cfg.to_dict(), cfg.seed, {"split": args.split, "ensemble": args.ensemble})
    print(f"trained {len(seeds)} member(s) into {out}")


def _load_step1(mdir, ds_hash=None, cfg=None):
    path = Path(mdir) / "step1.ckpt"
    if not path.is_file():
        raise CliError(EXIT_CONTRACT, "missing step-1 weights")
    model, header = load_checkpoint(path)
    if not set(STEP1_STAGES) <= set(model.stages_done):
        raise CliError(EXIT_CONTRACT, "missing step-1 weights")
    if ds_hash is not None and header.get("dataset_hash") != ds_hash:
        raise CliError(EXIT_CONTRACT, "checkpoint/dataset mismatch: dataset hash differs")
    if cfg is not None and header.get("config_hash") != cfg.hash():
        raise CliError(EXIT_CONTRACT, "checkpoint/config mismatch: config hash differs")
    return model, header


def _load_members(ckpt_dir, dataset):
    ckpt_dir = Path(ckpt_dir)
    run = _load_json(ckpt_dir / "train_run.json", "training run record")
    if run["dataset_hash"] != dataset_io.dataset_hash(dataset):
        raise CliError(EXIT_CONTRACT, "checkpoint/dataset mismatch: dataset hash differs")
    cfg = TrainConfig.from_dict(run["train_config"])
    if cfg.hash() != run["config_hash"]:
        raise CliError(EXIT_CONTRACT, "checkpoint/config mismatch: config hash differs")
    members = []
    for k in range(len(run["seeds"])):
        mdir = ckpt_dir / f"member_{k}"
        model, _ = _load_step1(mdir, run["dataset_hash"], cfg)
        reg = None
        if (mdir / "step2.ckpt").is_file():
            reg, header = load_regressor(mdir / "step2.ckpt")
            if header.get("config_hash") != cfg.hash():
                raise CliError(EXIT_CONTRACT, "checkpoint/config mismatch: config hash differs")
        members.append(TrainedModel(model, reg, cfg.with_seed(run["seeds"][k])))
    return run, members


def _test_seasons(args, run):
    seasons = _read_data(args.dataset)
    split = _split(seasons, run["split"])
    if getattr(args, "partition", "test") == "train":
        return split.train
    return split.test


# -- predict / eval / phenology -------------------------------------------------

def cmd_predict(args):
    run, members = _load_members(args.checkpoints, args.dataset)
    if any(m.regressor is None for m in members):
        raise CliError(EXIT_CONTRACT, "missing step-2 weights")
    out = _mkdir(_output_dir(args, "predictions"))
    for season in _test_seasons(args, run):
        daily = ensemble_daily([m.predict_season(season)[2] for m in members])
        write_prediction_table(out / f"{season.lake_id}_{season.winter_id}.csv", daily)
    _run_manifest(out, "predict", run, run["seeds"][0], {"checkpoints": str(args.checkpoints)})
    print(f"wrote predictions to {out}")


def cmd_eval(args):
    run, members = _load_members(args.checkpoints, args.dataset)
    seasons = _test_seasons(args, run)
    out = _mkdir(_output_dir(args, "eval"))
    rows = {}
    for sensor in SensorKind:
        accs, ious = [], []
        for m in members:
            cm = segmentation_confusion(m.fusion, seasons, sensor)
            if cm.total:
                accs.append(mean_pixel_accuracy(cm))
                ious.append(mean_iou(cm))
        if accs:
            rows[sensor.value] = {"mAcc": accs, "mIoU": ious}
    if not rows:
        raise CliError(EXIT_DATA, "no labelled observations in the evaluated partition")
    write_metrics_report(out / "metrics.csv", rows)
    if all(m.regressor is not None for m in members):
        mu, sd = mean_sigma([fraction_mae(m, seasons) for m in members])
        (out / "fraction_mae.csv").write_text(f"metric,mu,sigma\nmae_non_transition,{mu:.6f},{sd:.6f}\n",
                                              encoding="utf-8")
    _run_manifest(out, "eval", run, run["seeds"][0], {"partition": args.partition})
    print((out / "metrics.csv").read_text(encoding="utf-8"), end="")


def _reference_events(season, threshold):
    truth = extract_ice_dates(season.label_series(), threshold)
    return {"ice_on": truth.ice_on, "ice_off": truth.ice_off}


def cmd_phenology(args):
    if not 0.0 < args.threshold < 1.0:
        raise CliError(EXIT_CONFIG, "--threshold must lie in (0, 1)")
    run, members = _load_members(args.checkpoints, args.dataset)
    if any(m.regressor is None for m in members):
        raise CliError(EXIT_CONTRACT, "missing step-2 weights")
    out = _mkdir(_output_dir(args, "phenology"))
    rows = []
    for season in _test_seasons(args, run):
        daily = ensemble_daily([m.predict_season(season)[2] for m in members])
        series = [(p.date, float(np.clip(p.ensemble_mu, 0.0, 1.0))) for p in daily]
        if len(series) < 2:
            raise CliError(EXIT_DATA, f"{season.lake_id} {season.winter_id}: too few predictions")
        events = extract_ice_dates(series, args.threshold)
        comps = compare_to_reference(events, _reference_events(season, args.threshold))
        rows.extend(phenology_rows(season.lake_id, season.winter_id, events, comps))
    write_phenology_report(out / "phenology.csv", rows)
    _run_manifest(out, "phenology", {"run": run, "threshold": args.threshold}, run["seeds"][0])
    print((out / "phenology.csv").read_text(encoding="utf-8"), end="")


# -- plot ------------------------------------------------------------------------

def _plot_timeseries(args, out):
    pred_dir = Path(args.predictions or "")
    files = sorted(pred_dir.glob("*.csv")) if pred_dir.is_dir() else []
    if not files:
        raise CliError(EXIT_DATA, "no prediction tables to plot")
    seasons = {f"{s.lake_id}_{s.winter_id}": s for s in _read_data(args.dataset)} if args.dataset else {}
    for f in files:
        preds = [(p.date, p.ensemble_mu) for p in read_prediction_table(f)]
        season = seasons.get(f.stem)
        ref = season.label_series() if season is not None else []
        plotting.plot_timeseries(out / f"{f.stem}_timeseries.png", ref, preds, title=f.stem)


@torch.no_grad()
def _embedding_points(member, seasons, per_obs, rng):
    vecs, sensors, fracs, classes = [], [], [], []
    for season in seasons:
        se, preds, _ = member.predict_season(season)
        for o, emb, p in zip(se.observations, se.embeddings, preds):
            lab = season.label_for(o.date)
            if lab is None or lab.is_transition:
                continue
            lake = np.argwhere(season.embed_mask & (o.valid_mask if o.sensor.is_optical else True))
            if len(lake) == 0:
                continue
            pick = lake[rng.choice(len(lake), min(per_obs, len(lake)), replace=False)]
            for r, c in pick:
                vecs.append(emb[:, r, c])
                sensors.append(o.sensor.value)
                fracs.append(float(p))
                classes.append(int(lab.per_pixel_labels[r, c] == NON_FROZEN))
    return np.array(vecs), sensors, fracs, classes


def _plot_embedding(args, out):
    run, members = _load_members(args.checkpoints, args.dataset)
    seasons = _test_seasons(args, run)
    rng = np.random.default_rng(args.seed)
    vecs, sensors, fracs, classes = _embedding_points(members[0], seasons, args.points_per_obs, rng)
    if len(vecs) == 0:
        raise CliError(EXIT_DATA, "no embeddings to plot")
    meta = plotting.plot_embeddings(out, vecs, sensors, fracs, classes, seed=args.seed)
    print(json.dumps(meta, sort_keys=True))


def cmd_plot(args):
    out = _mkdir(_output_dir(args, "plots"))
    if args.kind == "timeseries":
        _plot_timeseries(args, out)
    else:
        if not args.checkpoints or not args.dataset:
            raise CliError(EXIT_CONFIG, "embedding plots need --checkpoints and --dataset")
        _plot_embedding(args, out)
    _run_manifest(out, "plot", {"kind": args.kind, "seed": args.seed}, args.seed)


# -- entry point -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="lakeice", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
        if dataset:
            sp.add_argument("--dataset", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-sensor dataset")
    common(s, dataset=False)
    s.add_argument("--config", help="JSON overrides for the generator")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lakes", help="comma-separated lake ids")
    s.add_argument("--winters", help="comma-separated winter ids")
    s.add_argument("--cloud-prob", type=float, help="cloud probability for optical sensors")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run the staged training schedule")
    common(s)
    s.add_argument("--config", help="JSON training config (defaults: published settings)")
    s.add_argument("--split", required=True, help="lowo:<winter> or lolo:<lake>")
    s.add_argument("--stages", choices=("all", "1", "2"), default="all")
    s.add_argument("--ensemble", type=int, default=1)
    s.add_argument("--seed", type=int, help="seed of the first ensemble member")
    s.add_argument("--epoch-scale", type=float)
    s.add_argument("--profile", choices=("published", "desk"), default="published",
                   help="published settings, or the compressed schedule for short synthetic runs")
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("predict", cmd_predict, "daily water-fraction tables"),
                                 ("eval", cmd_eval, "segmentation metrics report"),
                                 ("phenology", cmd_phenology, "ice-on / ice-off report")):
        s = sub.add_parser(name, help=helptext)
        common(s)
        s.add_argument("--checkpoints", required=True)
        s.add_argument("--partition", choices=("test", "train"), default="test")
        if name == "phenology":
            s.add_argument("--threshold", type=float, default=0.3)
        s.set_defaults(func=func)

    s = sub.add_parser("plot", help="time-series or embedding figures")
    s.add_argument("--out")
    s.add_argument("--kind", choices=("timeseries", "embedding"), required=True)
    s.add_argument("--predictions", help="directory of prediction tables (timeseries)")
    s.add_argument("--dataset")
    s.add_argument("--checkpoints")
    s.add_argument("--partition", choices=("test", "train"), default="test")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points-per-obs", type=int, default=4)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except CliError as exc:
        print(f"error: {_EXIT_NAMES[exc.code]}: {exc.reason}", file=sys.stderr)
        return exc.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
