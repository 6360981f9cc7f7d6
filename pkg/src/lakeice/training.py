"""Staged training schedule, experiment splits and ensembles.

Step 1 runs three stages in order:

1. SAR encoder pre-training with a native-resolution auxiliary head;
2. MODIS / VIIRS encoders + shared block + segmentation head, one epoch per
   sensor in strict alternation;
3. SAR encoder + shared block fine-tuned through the parameter-free resize,
   optical encoders and segmentation head frozen.

Step 2 trains the temporal regressor on frozen step-1 embeddings.
"""

import copy
import dataclasses
import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .evaluation import ConfusionMatrix, mean_iou, mean_pixel_accuracy, mean_sigma
from .losses import LossWeights, masked_cross_entropy_logits, regression_loss
from .model import FusionModel, EncoderConfig
from .regression import TemporalRegressor, _DateIndex, build_window, ensemble_daily, fuse_series
from .sensors import BACKGROUND, SENSOR_PRIORITY, SensorKind

log = logging.getLogger(__name__)

STEP1_STAGES = ("sar_pretrain", "optical_pretrain", "finetune")
_PRIORITY = {s: i for i, s in enumerate(SENSOR_PRIORITY)}


@dataclass
class StageConfig:
    epochs: int
    batch_size: int
    optimizer: str
    lr: float
    decay_steps: int | None = None
    decay_rate: float | None = None
    warmup_steps: int | None = None

    def lr_at(self, step: int) -> float:
        """Staircase exponential decay on optimiser steps, after an optional linear warm-up."""
        lr = self.lr
        if self.warmup_steps:
            lr *= min(1.0, (step + 1) / self.warmup_steps)
        if self.decay_steps:
            lr *= self.decay_rate ** (step // self.decay_steps)
        return lr


def _sar_stage():
    return StageConfig(500, 16, "adam", 5e-5, 375, 0.9)


def _optical_stage():
    return StageConfig(40, 8, "adam", 5e-4)


def _finetune_stage():
    return StageConfig(250, 16, "adam", 1e-5, 150, 0.9)


def _regression_stage():
    return StageConfig(100, 4, "sgd", 5e-4)


@dataclass
class TrainConfig:
    """Hyper-parameters of all four training stages.

    ``optical_pretrain.epochs`` counts both sensors together (half each).
    ``epoch_scale`` shrinks every epoch count by the same factor for quick runs.
    """

    sar_pretrain: StageConfig = field(default_factory=_sar_stage)
    optical_pretrain: StageConfig = field(default_factory=_optical_stage)
    finetune: StageConfig = field(default_factory=_finetune_stage)
    regression: StageConfig = field(default_factory=_regression_stage)
    window: int = 7
    beta: float = 0.25
    gamma: float = 0.08
    seed: int = 0
    epoch_scale: float = 1.0

    def __post_init__(self):
        for name in ("sar_pretrain", "optical_pretrain", "finetune", "regression"):
            st = getattr(self, name)
            if isinstance(st, dict):
                setattr(self, name, StageConfig(**st))
        if not 0.0 < self.epoch_scale <= 1.0:
            raise ValueError("epoch_scale must lie in (0, 1]")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma)

    def scaled_epochs(self, stage: str) -> int:
        if stage == "optical_pretrain":
            return 2 * self.optical_epochs_per_sensor()
        return max(1, round(getattr(self, stage).epochs * self.epoch_scale))

    def optical_epochs_per_sensor(self) -> int:
        return max(1, round(self.optical_pretrain.epochs / 2 * self.epoch_scale))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "TrainConfig":
        return dataclasses.replace(self, seed=seed)

    @classmethod
    def desk(cls, epoch_scale=0.1, seed=0) -> "TrainConfig":
        """Compressed schedule for short synthetic runs.

        With ``epoch_scale`` s every stage sees roughly s times the optimiser
        steps, so learning rates grow by 1/s and decay intervals shrink by s.
        The SAR fine-tune runs at 1e-3 after a 100-step linear warm-up: at the
        compressed 1e-4 the SAR path stays at the class prior within the step
        budget, and without warm-up the SAR features collapse more deeply
        before they recover.
        """
        def compress(st: StageConfig) -> StageConfig:
            steps = max(1, round(st.decay_steps * epoch_scale)) if st.decay_steps else None
            return dataclasses.replace(st, lr=st.lr / epoch_scale, decay_steps=steps)

        base = cls()
        return cls(sar_pretrain=compress(base.sar_pretrain),
                   optical_pretrain=compress(base.optical_pretrain),
                   finetune=dataclasses.replace(base.finetune, lr=1e-3, decay_steps=None, decay_rate=None,
                                                warmup_steps=100),
                   regression=compress(base.regression), seed=seed, epoch_scale=epoch_scale)


# -- helpers -------------------------------------------------------------------

def _optimizer(params, stage: StageConfig):
    params = list(params)
    if stage.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=stage.lr)
    elif stage.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=stage.lr)
    else:
        raise ValueError(f"unknown optimizer {stage.optimizer!r}")
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda step: stage.lr_at(step) / stage.lr)
    return opt, sched


def _batches(n, batch_size, gen, drop_last=False):
    order = torch.randperm(n, generator=gen)
    stop = n - n % batch_size if drop_last else n
    for i in range(0, stop, batch_size):
        yield order[i:i + batch_size]


def _fit_segmentation(logits_fn, params, X, Y, M, stage: StageConfig, epochs, gen, losses,
                      opt=None):
    opt, sched = opt or _optimizer(params, stage)
    for _ in range(epochs):
        total, count = 0.0, 0
        for idx in _batches(X.shape[0], stage.batch_size, gen):
            loss = masked_cross_entropy_logits(logits_fn(X[idx]), Y[idx], M[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        losses.append(total / count)
    return opt, sched


def _stack_labels(maps, masks):
    return (torch.as_tensor(np.stack(maps)).long(), torch.as_tensor(np.stack(masks)).bool())


def _seeded_gen(seed, stage_no):
    return torch.Generator().manual_seed(int(seed) * 7919 + stage_no)


def segmentation_samples(seasons, sensor, grid="native"):
    """Non-transition observations of ``sensor`` with label maps and supervision masks.

    ``grid="embed"`` returns SAR labels on the 12x12 embedding grid.
    """
    sensor = SensorKind(sensor)
    obs, maps, masks = [], [], []
    for season in seasons:
        for o in season.observations:
            if o.sensor is not sensor or o.labels is None:
                continue
            if grid == "embed" and not sensor.is_optical:
                day = season.label_for(o.date)
                if day is None or day.per_pixel_labels is None:
                    continue
                lab = day.per_pixel_labels
                mask = season.embed_mask | (lab == BACKGROUND)
            else:
                lab, mask = o.labels, o.supervised_mask
            obs.append(o)
            maps.append(lab)
            masks.append(mask)
    return obs, maps, masks


def _channel_stats(arrays):
    x = np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrays]).astype(np.float64)
    return x.mean(0), x.std(0)


# -- step 1 --------------------------------------------------------------------

def pretrain_sar_encoder(data, config: TrainConfig, model: FusionModel | None = None,
                         history: dict | None = None) -> FusionModel:
    obs, maps, masks = segmentation_samples(data, SensorKind.SAR)
    if not obs:
        raise ValueError("no non-transition SAR samples")
    model = model or FusionModel(seed=config.seed)
    history = {} if history is None else history
    all_sar = [o.values for s in data for o in s.observations if o.sensor is SensorKind.SAR]
    model.set_normalization(SensorKind.SAR, *_channel_stats(all_sar))
    X = model.prepare(SensorKind.SAR, np.stack([o.values for o in obs]))
    Y, M = _stack_labels(maps, masks)
    params = list(model.encoders["SAR"].parameters()) + list(model.sar_aux_head.parameters())
    model.train()
    losses = history.setdefault("sar_pretrain", [])
    _fit_segmentation(model.sar_aux_logits, params, X, Y, M, config.sar_pretrain,
                      config.scaled_epochs("sar_pretrain"), _seeded_gen(config.seed, 1), losses)
    model.eval()
    _mark(model, "sar_pretrain")
    log.info("SAR pre-training: %d samples, final loss %.4f", len(obs), losses[-1])
    return model


def pretrain_optical_and_shared(data, config: TrainConfig, model: FusionModel | None = None,
                                history: dict | None = None) -> FusionModel:
    model = model or FusionModel(seed=config.seed)
    history = {} if history is None else history
    tensors = {}
    for sensor in (SensorKind.MODIS, SensorKind.VIIRS):
        obs, maps, masks = segmentation_samples(data, sensor)
        if not obs:
            warnings.warn(f"no {sensor.value} samples; its epochs are skipped")
            continue
        model.set_normalization(sensor, *_channel_stats([o.values[o.valid_mask] for o in obs]))
        X = model.prepare(sensor, np.stack([o.values for o in obs]), np.stack([o.valid_mask for o in obs]))
        tensors[sensor] = (X, *_stack_labels(maps, masks))
    if not tensors:
        raise ValueError("no optical samples")
    stage = config.optical_pretrain
    params = (list(model.encoders["MODIS"].parameters()) + list(model.encoders["VIIRS"].parameters())
              + list(model.shared_block.parameters()) + list(model.segmentation_head.parameters()))
    opt = _optimizer(params, stage)
    gen = _seeded_gen(config.seed, 2)
    losses = history.setdefault("optical_pretrain", [])
    sequence = history.setdefault("optical_sequence", [])
    model.train()
    for e in range(config.scaled_epochs("optical_pretrain")):
        sensor = (SensorKind.MODIS, SensorKind.VIIRS)[e % 2]
        if sensor not in tensors:
            continue
        X, Y, M = tensors[sensor]
        _fit_segmentation(lambda x, s=sensor: model(s, x), params, X, Y, M, stage, 1, gen, losses,
                          opt=opt)
        sequence.append(sensor.value[0])
    model.eval()
    _mark(model, "optical_pretrain")
    return model


def finetune_shared_with_sar(data, config: TrainConfig, model: FusionModel,
                             history: dict | None = None) -> FusionModel:
    if model is None or not {"sar_pretrain", "optical_pretrain"} <= set(model.stages_done):
        raise ValueError("missing prerequisite weights: both pre-training stages must run first")
    history = {} if history is None else history
    obs, maps, masks = segmentation_samples(data, SensorKind.SAR, grid="embed")
    if not obs:
        raise ValueError("no non-transition SAR samples")
    X = model.prepare(SensorKind.SAR, np.stack([o.values for o in obs]))
    Y, M = _stack_labels(maps, masks)
    params = list(model.encoders["SAR"].parameters()) + list(model.shared_block.parameters())
    losses = history.setdefault("finetune", [])
    model.train()
    _fit_segmentation(lambda x: model(SensorKind.SAR, x), params, X, Y, M, config.finetune,
                      config.scaled_epochs("finetune"), _seeded_gen(config.seed, 3), losses)
    model.eval()
    _mark(model, "finetune")
    return model


def _mark(model, stage):
    if stage not in model.stages_done:
        model.stages_done.append(stage)


def train_step1(data, config: TrainConfig, history=None) -> FusionModel:
    history = {} if history is None else history
    model = FusionModel(seed=config.seed)
    pretrain_sar_encoder(data, config, model, history)
    pretrain_optical_and_shared(data, config, model, history)
    finetune_shared_with_sar(data, config, model, history)
    return model


# -- step 2 --------------------------------------------------------------------

def _sorted_obs(season):
    return sorted(season.observations, key=lambda o: (o.date, _PRIORITY[o.sensor]))


@torch.no_grad()
def embed_observations(model: FusionModel, observations, batch_size=32) -> np.ndarray:
    """(N, 32, 12, 12) embeddings, batched per sensor, in input order."""
    model.eval()
    out = [None] * len(observations)
    for sensor in SensorKind:
        idx = [i for i, o in enumerate(observations) if o.sensor is sensor]
        for k in range(0, len(idx), batch_size):
            chunk = idx[k:k + batch_size]
            vals = np.stack([observations[i].values for i in chunk])
            masks = np.stack([observations[i].valid_mask for i in chunk])
            emb = model.embed(sensor, model.prepare(sensor, vals, masks)).float().numpy()
            for i, e in zip(chunk, emb):
                out[i] = e
    if not out:
        return np.zeros((0, model.config.embed_channels, *model.config.embed_hw), dtype=np.float32)
    return np.stack(out)


@dataclass
class _Slot:
    sensor: SensorKind
    date: object
    index: int


def window_indices(observations, size) -> np.ndarray:
    """Slot indices (N, size) of one window per observation (see ``build_window``)."""
    slots = [_Slot(o.sensor, o.date, i) for i, o in enumerate(observations)]
    index = _DateIndex(slots)
    return np.array([[s.index for s in build_window(slots, sl.date, size, center=sl, index=index).slots]
                     for sl in slots], dtype=np.int64)


@dataclass
class SeasonEmbeddings:
    season: object
    observations: list
    embeddings: np.ndarray
    windows: np.ndarray
    targets: np.ndarray
    day_ids: np.ndarray


def prepare_season(model: FusionModel, season, window: int) -> SeasonEmbeddings:
    obs = _sorted_obs(season)
    emb = embed_observations(model, obs)
    win = window_indices(obs, window) if obs else np.zeros((0, window), dtype=np.int64)
    targets = np.array([season.label_for(o.date).water_fraction if season.label_for(o.date) else np.nan
                        for o in obs], dtype=np.float32)
    days = np.array([o.date.toordinal() for o in obs], dtype=np.int64)
    return SeasonEmbeddings(season, obs, emb, win, targets, days)


def _contiguous_batches(lengths, batch_size, rng):
    """Random contiguous runs of ``batch_size`` entries per sequence; partial runs dropped."""
    batches = []
    for k, n in enumerate(lengths):
        if n < batch_size:
            continue
        start = int(rng.integers(0, batch_size))
        if start + batch_size > n:
            start = 0
        for i in range(start, n - batch_size + 1, batch_size):
            batches.append((k, i))
    order = rng.permutation(len(batches))
    return [batches[j] for j in order]


def train_regression(data, config: TrainConfig, model: FusionModel,
                     regressor: TemporalRegressor | None = None,
                     history: dict | None = None) -> TemporalRegressor:
    """Fit the temporal regressor on frozen embeddings of all labelled days."""
    if model is None or not set(STEP1_STAGES) <= set(model.stages_done):
        raise ValueError("missing step-1 weights")
    history = {} if history is None else history
    prepared = []
    for season in data:
        se = prepare_season(model, season, config.window)
        if len({o.date for o in se.observations}) < config.window:
            raise ValueError(f"{season.lake_id} {season.winter_id}: fewer dates than the window size")
        keep = ~np.isnan(se.targets)
        if not keep.all():
            raise ValueError("every observation needs a water-fraction label")
        prepared.append(se)
    regressor = regressor or TemporalRegressor(model.config.embed_channels, config.window,
                                               model.config.embed_hw, seed=config.seed + 1)
    stage = config.regression
    opt, sched = _optimizer(regressor.parameters(), stage)
    rng = np.random.default_rng(config.seed + 4)
    E = [torch.from_numpy(se.embeddings) for se in prepared]
    losses = history.setdefault("regression", [])
    mses = history.setdefault("regression_mse", [])
    batch_log = history.setdefault("regression_batches", [])
    weights = config.loss_weights
    regressor.train()
    for epoch in range(config.scaled_epochs("regression")):
        tot, tot_mse, nb = 0.0, 0.0, 0
        for k, i in _contiguous_batches([len(se.observations) for se in prepared],
                                        stage.batch_size, rng):
            se = prepared[k]
            sl = slice(i, i + stage.batch_size)
            x = E[k][torch.from_numpy(se.windows[sl])]
            pred = regressor(x)
            target = torch.from_numpy(se.targets[sl]).to(pred.dtype)
            loss = regression_loss(pred, target, torch.from_numpy(se.day_ids[sl]), weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            tot += float(loss.detach())
            tot_mse += float(((pred - target) ** 2).mean().detach())
            nb += 1
            if epoch == 0:
                batch_log.append([o.date for o in se.observations[sl]])
        if nb == 0:
            raise ValueError("no complete mini-batch of adjacent dates")
        losses.append(tot / nb)
        mses.append(tot_mse / nb)
    regressor.eval()
    return regressor


# -- full pipeline ---------------------------------------------------------------

@dataclass
class TrainedModel:
    fusion: FusionModel
    regressor: TemporalRegressor | None
    config: TrainConfig
    history: dict = field(default_factory=dict)

    def predict_season(self, season):
        """Per-observation predictions and fused daily predictions of one lake-winter."""
        if self.regressor is None:
            raise ValueError("missing step-2 weights")
        se = prepare_season(self.fusion, season, self.regressor.window)
        if not se.observations:
            return se, np.zeros(0), []
        with torch.no_grad():
            E = torch.from_numpy(se.embeddings)
            preds = np.concatenate([
                self.regressor(E[torch.from_numpy(se.windows[i:i + 64])]).numpy()
                for i in range(0, len(se.observations), 64)])
        daily = fuse_series([o.date for o in se.observations], [o.sensor for o in se.observations], preds)
        return se, preds, daily


def train_pipeline(data, config: TrainConfig, history=None) -> TrainedModel:
    history = {} if history is None else history
    fusion = train_step1(data, config, history)
    regressor = train_regression(data, config, fusion, history=history)
    return TrainedModel(fusion, regressor, config, history)


# -- splits ----------------------------------------------------------------------

@dataclass
class ExperimentSplit:
    mode: str
    holdout: str
    train: list
    test: list


def make_split(seasons, mode: str, holdout: str) -> ExperimentSplit:
    """Leave-one-winter-out (``lowo``) or leave-one-lake-out (``lolo``) partition."""
    mode = mode.upper()
    if mode == "LOWO":
        key = lambda s: s.winter_id  # noqa: E731
    elif mode == "LOLO":
        key = lambda s: s.lake_id  # noqa: E731
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    keys = {key(s) for s in seasons}
    if holdout not in keys:
        raise KeyError(f"unknown {mode} key {holdout!r}; available: {sorted(keys)}")
    test = [s for s in seasons if key(s) == holdout]
    train = [s for s in seasons if key(s) != holdout]
    return ExperimentSplit(mode, holdout, train, test)


def parse_split(spec: str) -> tuple[str, str]:
    mode, sep, key = spec.partition(":")
    if not sep or not key or mode.lower() not in ("lowo", "lolo"):
        raise ValueError(f"split must look like lowo:<winter> or lolo:<lake>, got {spec!r}")
    return mode.upper(), key


# -- evaluation of trained models ---------------------------------------------------

@torch.no_grad()
def segmentation_confusion(model: FusionModel, seasons, sensor) -> ConfusionMatrix:
    """Confusion matrix of step-1 segmentation on the embedding grid for one sensor."""
    sensor = SensorKind(sensor)
    obs, maps, masks = segmentation_samples(seasons, sensor, grid="embed")
    cm = ConfusionMatrix()
    for k in range(0, len(obs), 32):
        chunk = obs[k:k + 32]
        x = model.prepare(sensor, np.stack([o.values for o in chunk]), np.stack([o.valid_mask for o in chunk]))
        pred = model(sensor, x).argmax(1).numpy()
        for p, lab, m in zip(pred, maps[k:k + 32], masks[k:k + 32]):
            cm.update(p, lab, m)
    return cm


def segmentation_metrics(model: FusionModel, seasons) -> dict:
    out = {}
    for sensor in SensorKind:
        cm = segmentation_confusion(model, seasons, sensor)
        if cm.total:
            out[sensor.value] = {"mAcc": mean_pixel_accuracy(cm), "mIoU": mean_iou(cm)}
    return out


def fraction_mae(trained: TrainedModel, seasons, non_transition_only=True) -> float:
    errs = []
    for season in seasons:
        _, _, daily = trained.predict_season(season)
        for p in daily:
            lab = season.label_for(p.date)
            if lab is None or (non_transition_only and lab.is_transition):
                continue
            errs.append(abs(p.fused - lab.water_fraction))
    return float(np.mean(errs)) if errs else float("nan")


def evaluate_model(trained: TrainedModel, seasons) -> dict[str, float]:
    """Flat metric dict: per-sensor mAcc / mIoU and fused water-fraction MAE."""
    flat = {}
    for sensor, m in segmentation_metrics(trained.fusion, seasons).items():
        flat[f"{sensor}/mAcc"] = m["mAcc"]
        flat[f"{sensor}/mIoU"] = m["mIoU"]
    if trained.regressor is not None:
        flat["fraction_mae"] = fraction_mae(trained, seasons)
    return flat


@dataclass
class EnsembleResult:
    members: list[TrainedModel]
    seeds: list[int]
    member_metrics: list[dict]
    summary: dict[str, tuple[float, float]]

    def daily_predictions(self, season):
        return ensemble_daily([m.predict_season(season)[2] for m in self.members])


def train_ensemble(train_data, config: TrainConfig, n: int = 5, seeds=None, eval_data=None,
                   trainer=train_pipeline) -> EnsembleResult:
    """Train ``n`` independently initialised pipelines; summarise metrics as (mean, std)."""
    if n < 1:
        raise ValueError("ensemble needs at least one member")
    seeds = list(range(config.seed, config.seed + n)) if seeds is None else list(seeds)
    if len(seeds) != n:
        raise ValueError("need one seed per member")
    if len(set(seeds)) < len(seeds):
        warnings.warn("duplicate ensemble seeds: members will be identical")
    eval_data = train_data if eval_data is None else eval_data
    members, metrics = [], []
    for s in seeds:
        member = trainer(train_data, config.with_seed(s))
        members.append(member)
        metrics.append(evaluate_model(member, eval_data))
    keys = sorted(set().union(*metrics))
    summary = {k: mean_sigma([m[k] for m in metrics if k in m]) for k in keys}
    return EnsembleResult(members, seeds, metrics, summary)


def clone_model(model: FusionModel) -> FusionModel:
    new = copy.deepcopy(model)
    new.stages_done = list(model.stages_done)
    return new


__all__ = [
    "EncoderConfig", "TrainConfig", "StageConfig", "TrainedModel", "ExperimentSplit", "EnsembleResult",
    "pretrain_sar_encoder", "pretrain_optical_and_shared", "finetune_shared_with_sar", "train_step1",
    "train_regression", "train_pipeline", "make_split", "train_ensemble", "evaluate_model",
]
