"""Step-1 network: per-sensor encoders, shared block and segmentation head.

Tensors inside the network are NCHW. The public helpers at the bottom take
and return channel-last numpy grids (H, W, C), which is how observations
and embeddings are stored.
"""

import datetime as dt
import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .sensors import EMBED_SHAPE, NON_FROZEN, SensorKind

LEAKY_SLOPE = 0.1
N_CLASSES = 3


def lrelu(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def glorot_init(module: nn.Module):
    """Glorot-uniform weights and zero biases for every conv / linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class OpticalEncoder(nn.Module):
    """1x1 convolution + leaky ReLU."""

    def __init__(self, in_channels, out_channels=32):
        super().__init__()
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        return lrelu(self.conv(x))


class SAREncoder(nn.Module):
    """Small U-net: two strided downsamplings, transposed-conv upsampling with skips.

    All hidden layers use leaky ReLU; the output layer is a 1x1 conv with a
    sigmoid, so features live in (0, 1).
    """

    def __init__(self, in_channels=2, widths=(16, 32, 64), out_channels=32):
        super().__init__()
        w1, w2, w3 = widths
        self.in_channels = in_channels
        self.enc1 = nn.Conv2d(in_channels, w1, 3, padding=1)
        self.down1 = nn.Conv2d(w1, w2, 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(w2, w3, 3, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(w3, w2, 2, stride=2)
        self.dec2 = nn.Conv2d(2 * w2, w2, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(w2, w1, 2, stride=2)
        self.dec1 = nn.Conv2d(2 * w1, w1, 3, padding=1)
        self.out = nn.Conv2d(w1, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        x1 = lrelu(self.enc1(x))
        x2 = lrelu(self.down1(x1))
        x3 = lrelu(self.down2(x2))
        y = lrelu(self.up2(x3))
        y = lrelu(self.dec2(torch.cat([y, x2], 1)))
        y = lrelu(self.up1(y))
        y = lrelu(self.dec1(torch.cat([y, x1], 1)))
        return torch.sigmoid(self.out(y))


class Resize(nn.Module):
    """Parameter-free bilinear resampling to the embedding grid.

    Antialiasing keeps the 128 -> 12 reduction from sampling isolated
    speckle; the operation stays linear in its input.
    """

    def __init__(self, size=EMBED_SHAPE[:2]):
        super().__init__()
        self.size = tuple(size)

    def forward(self, x):
        if tuple(x.shape[-2:]) == self.size:
            return x
        return F.interpolate(x, size=self.size, mode="bilinear", align_corners=False,
                             antialias=True)


class SharedBlock(nn.Module):
    """Two 1x1-conv stages whose outputs are concatenated, then a 1x1 projection."""

    def __init__(self, in_channels=32, width=32, out_channels=32):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, width, 1)
        self.conv2 = nn.Conv2d(in_channels + width, width, 1)
        self.proj = nn.Conv2d(2 * width, out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"shared block expects {self.in_channels} channels, got {x.shape[1]}")
        a = lrelu(self.conv1(x))
        b = lrelu(self.conv2(torch.cat([x, a], 1)))
        return lrelu(self.proj(torch.cat([a, b], 1)))


# Branch registry; a new sensor needs an entry here and one in sensors.py.
BRANCHES = {
    SensorKind.MODIS: lambda width, sar_widths: OpticalEncoder(SensorKind.MODIS.channels, width),
    SensorKind.VIIRS: lambda width, sar_widths: OpticalEncoder(SensorKind.VIIRS.channels, width),
    SensorKind.SAR: lambda width, sar_widths: SAREncoder(SensorKind.SAR.channels, sar_widths, width),
}


@dataclass
class EncoderConfig:
    leaky_slope: float = LEAKY_SLOPE
    feature_width: int = 32
    sar_widths: tuple = (16, 32, 64)
    embed_channels: int = EMBED_SHAPE[2]
    embed_hw: tuple = EMBED_SHAPE[:2]

    def to_dict(self):
        return {"leaky_slope": self.leaky_slope, "feature_width": self.feature_width,
                "sar_widths": list(self.sar_widths), "embed_channels": self.embed_channels,
                "embed_hw": list(self.embed_hw)}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("leaky_slope", LEAKY_SLOPE), d["feature_width"], tuple(d["sar_widths"]),
                   d["embed_channels"], tuple(d["embed_hw"]))


class FusionModel(nn.Module):
    """All step-1 weights plus per-sensor input standardisation statistics."""

    def __init__(self, config: EncoderConfig | None = None, seed: int | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        if self.config.leaky_slope != LEAKY_SLOPE:
            raise ValueError("leaky ReLU slope is fixed at 0.1")
        c = self.config
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self.encoders = nn.ModuleDict({
                s.value: make(c.feature_width, c.sar_widths) for s, make in BRANCHES.items()})
            self.resize = Resize(c.embed_hw)
            self.shared_block = SharedBlock(c.feature_width, c.embed_channels, c.embed_channels)
            self.segmentation_head = nn.Conv2d(c.embed_channels, N_CLASSES, 1)
            # native-resolution head used only while pre-training the SAR encoder
            self.sar_aux_head = nn.Conv2d(c.feature_width, N_CLASSES, 1)
            glorot_init(self)
        for s in BRANCHES:
            self.register_buffer(f"norm_mean_{s.value}", torch.zeros(s.channels))
            self.register_buffer(f"norm_std_{s.value}", torch.ones(s.channels))
        self.stages_done: list[str] = []

    # -- input standardisation ------------------------------------------------
    def set_normalization(self, sensor, mean, std):
        sensor = SensorKind(sensor)
        getattr(self, f"norm_mean_{sensor.value}").copy_(torch.as_tensor(mean, dtype=torch.float32))
        getattr(self, f"norm_std_{sensor.value}").copy_(
            torch.as_tensor(std, dtype=torch.float32).clamp(min=1e-6))

    def normalization(self, sensor):
        sensor = SensorKind(sensor)
        return (getattr(self, f"norm_mean_{sensor.value}"), getattr(self, f"norm_std_{sensor.value}"))

    def prepare(self, sensor, values, valid_mask=None):
        """Channel-last arrays -> standardised NCHW tensor.

        Optical cells outside ``valid_mask`` stay at the background fill 0.
        SAR is standardised everywhere since background carries backscatter.
        """
        sensor = SensorKind(sensor)
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(np.asarray(values), dtype=dtype)
        if x.ndim == 3:
            x = x[None]
        mean, std = self.normalization(sensor)
        x = (x - mean.to(dtype)) / std.to(dtype)
        if sensor.is_optical and valid_mask is not None:
            m = torch.as_tensor(np.asarray(valid_mask), dtype=torch.bool)
            if m.ndim == 2:
                m = m[None]
            x = x * m[..., None].to(dtype)
        return x.permute(0, 3, 1, 2).contiguous()

    # -- forward paths --------------------------------------------------------
    def encode(self, sensor, x, resize=True):
        sensor = SensorKind(sensor)
        feats = self.encoders[sensor.value](x)
        if resize and not sensor.is_optical:
            feats = self.resize(feats)
        return feats

    def embed(self, sensor, x):
        return self.shared_block(self.encode(sensor, x))

    def forward(self, sensor, x):
        """Segmentation logits on the embedding grid."""
        return self.segmentation_head(self.embed(sensor, x))

    def sar_aux_logits(self, x):
        return self.sar_aux_head(self.encode(SensorKind.SAR, x, resize=False))

    def weight_groups(self) -> dict[str, nn.Module]:
        groups = {f"{s.lower()}_encoder": m for s, m in self.encoders.items()}
        groups.update(shared_block=self.shared_block, segmentation_head=self.segmentation_head,
                      sar_aux_head=self.sar_aux_head)
        return groups


@dataclass
class EmbeddingTensor:
    values: np.ndarray
    sensor: SensorKind
    date: dt.date | None = None
    lake_id: str = ""

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("embedding must be (H, W, C)")


def _to_hwc(t):
    return t[0].permute(1, 2, 0).detach().cpu().numpy()


def _check_obs(obs, allowed):
    if obs.sensor not in allowed:
        raise ValueError(f"{obs.sensor.value} observation not accepted here")


@torch.no_grad()
def encode_optical(obs, model: FusionModel) -> np.ndarray:
    """Optical branch features, (12, 12, K)."""
    _check_obs(obs, (SensorKind.MODIS, SensorKind.VIIRS))
    x = model.prepare(obs.sensor, obs.values, obs.valid_mask)
    return _to_hwc(model.encode(obs.sensor, x))


@torch.no_grad()
def encode_sar(obs, model: FusionModel, native=False) -> np.ndarray:
    """SAR branch features resized to (12, 12, K); ``native=True`` skips the resize."""
    _check_obs(obs, (SensorKind.SAR,))
    x = model.prepare(SensorKind.SAR, obs.values)
    return _to_hwc(model.encode(SensorKind.SAR, x, resize=not native))


@torch.no_grad()
def shared_embed(features, model: FusionModel, sensor=None, date=None) -> EmbeddingTensor:
    features = np.asarray(features)
    hw = tuple(model.config.embed_hw)
    if features.shape != (*hw, model.config.feature_width):
        raise ValueError(f"features must be {(*hw, model.config.feature_width)}, got {features.shape}")
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(features, dtype=dtype).permute(2, 0, 1)[None]
    return EmbeddingTensor(_to_hwc(model.shared_block(x)), sensor, date)


@torch.no_grad()
def segment(emb, model: FusionModel) -> np.ndarray:
    """Per-pixel class probabilities (H, W, 3) over frozen / non_frozen / background."""
    values = emb.values if isinstance(emb, EmbeddingTensor) else np.asarray(emb)
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(values, dtype=dtype).permute(2, 0, 1)[None]
    return _to_hwc(torch.softmax(model.segmentation_head(x), dim=1))


@torch.no_grad()
def embed_observation(obs, model: FusionModel) -> EmbeddingTensor:
    if obs.sensor.is_optical:
        feats = encode_optical(obs, model)
    else:
        feats = encode_sar(obs, model)
    emb = shared_embed(feats, model, obs.sensor, obs.date)
    emb.lake_id = obs.lake_id
    return emb


def water_fraction_from_map(class_map, valid_mask) -> float:
    """Share of valid lake pixels classified as open water."""
    class_map = np.asarray(class_map)
    valid_mask = np.asarray(valid_mask, dtype=bool)
    n = int(valid_mask.sum())
    if n == 0:
        raise ValueError("no valid pixels")
    return float(((class_map == NON_FROZEN) & valid_mask).sum()) / n


# -- checkpoints ---------------------------------------------------------------

def _write_array(zf, name, arr):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr, dtype="<f4"))
    zf.writestr(name, buf.getvalue())


def save_weights(path, modules: dict[str, nn.Module], header: dict):
    """Zip archive: ``header.json`` plus one little-endian float32 .npy per tensor."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        for group, module in modules.items():
            for name, t in module.state_dict().items():
                _write_array(zf, f"{group}/{name}.npy", t.detach().cpu().numpy())


def read_weights(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    groups: dict[str, dict[str, np.ndarray]] = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json").decode("utf-8"))
        for name in zf.namelist():
            if not name.endswith(".npy"):
                continue
            group, _, pname = name.partition("/")
            arr = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            groups.setdefault(group, {})[pname[:-4]] = arr
    return header, groups


def _load_groups(modules: dict[str, nn.Module], groups):
    for group, module in modules.items():
        if group not in groups:
            raise KeyError(f"checkpoint lacks weight group {group!r}")
        state = {k: torch.from_numpy(v.copy()) for k, v in groups[group].items()}
        module.load_state_dict(state)


def save_checkpoint(path, model: FusionModel, stage: str, extra: dict | None = None):
    modules = dict(model.weight_groups())
    modules["normalization"] = _NormView(model)
    header = {"kind": "fusion", "stage": stage, "stages_done": list(model.stages_done),
              "encoder_config": model.config.to_dict(), "init": "glorot_uniform"}
    header.update(extra or {})
    save_weights(path, modules, header)


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    header, groups = read_weights(path)
    if header.get("kind") != "fusion":
        raise ValueError(f"{path} is not a step-1 checkpoint")
    model = FusionModel(EncoderConfig.from_dict(header["encoder_config"]))
    modules = dict(model.weight_groups())
    modules["normalization"] = _NormView(model)
    _load_groups(modules, groups)
    model.stages_done = list(header.get("stages_done", []))
    return model, header


class _NormView(nn.Module):
    """Exposes the normalisation buffers of a model as a state-dict-able group."""

    def __init__(self, model):
        super().__init__()
        object.__setattr__(self, "_model", model)

    def state_dict(self, *args, **kwargs):
        return {k: v for k, v in self._model.named_buffers() if k.startswith("norm_")}

    def load_state_dict(self, state, strict=True):
        for k, v in state.items():
            getattr(self._model, k).copy_(v)
