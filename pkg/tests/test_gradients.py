"""Analytic gradients against central finite differences on miniature float64 networks."""

import numpy as np
import torch

from lakeice.losses import line_deviations, masked_cross_entropy_logits, regression_loss
from lakeice.model import EncoderConfig, FusionModel
from lakeice.regression import TemporalRegressor
from lakeice.sensors import SensorKind

N_POINTS = 100
EPS = 1e-6
MINI = EncoderConfig(feature_width=4, sar_widths=(2, 3, 4), embed_channels=4, embed_hw=(4, 4))


def _directional_check(loss_fn, params, gen):
    """Relative error between grad . v and the central difference along v.

    Returns None at kinks of the leaky ReLU / absolute value, recognised by
    disagreeing one-sided differences.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    vs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    analytic = sum((p.grad * v).sum() for p, v in zip(params, vs)).item()
    with torch.no_grad():
        for p, v in zip(params, vs):
            p.add_(EPS * v)
        plus = loss_fn().item()
        for p, v in zip(params, vs):
            p.sub_(2 * EPS * v)
        minus = loss_fn().item()
        for p, v in zip(params, vs):
            p.add_(EPS * v)
    centre = loss.item()
    forward, backward = (plus - centre) / EPS, (centre - minus) / EPS
    if abs(forward - backward) > 1e-3 * max(abs(forward), abs(backward), 1e-8):
        return None
    numeric = (plus - minus) / (2 * EPS)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def segmentation_gradient_errors(n_points=N_POINTS, seed=0):
    gen = torch.Generator().manual_seed(seed)
    errors = []
    k = -1
    while len(errors) < n_points:
        k += 1
        model = FusionModel(MINI, seed=seed * 1000 + k).double()
        sensor = list(SensorKind)[k % 3]
        size = 8 if sensor is SensorKind.SAR else 4
        x = torch.randn(2, sensor.channels, size, size, generator=gen, dtype=torch.float64)
        groups = {"encoder": model.encoders[sensor.value], "shared_block": model.shared_block,
                  "segmentation_head": model.segmentation_head}
        if sensor is SensorKind.SAR and k % 2:
            hw, logits_fn = size, model.sar_aux_logits
            groups = {"encoder": model.encoders["SAR"], "sar_aux_head": model.sar_aux_head}
        else:
            hw, logits_fn = 4, lambda x, s=sensor: model(s, x)
        labels = torch.randint(0, 3, (2, hw, hw), generator=gen)
        mask = torch.rand(2, hw, hw, generator=gen) > 0.3
        mask[0, 0, 0] = True
        name = list(groups)[k % len(groups)]
        params = list(groups[name].parameters())
        err = _directional_check(lambda: masked_cross_entropy_logits(logits_fn(x), labels, mask), params, gen)
        if err is not None:
            errors.append(err)
    return np.array(errors)


def regression_gradient_errors(n_points=N_POINTS, seed=0):
    gen = torch.Generator().manual_seed(seed)
    errors = []
    k = 0
    while len(errors) < n_points:
        k += 1
        reg = TemporalRegressor(embed_channels=3, window=3, hw=(3, 3), per_day=(3, 2, 2), joint=(3, 2, 2),
                                seed=seed * 1000 + k).double()
        x = torch.randn(4, 3, 3, 3, 3, generator=gen, dtype=torch.float64)
        target = torch.rand(4, generator=gen, dtype=torch.float64)
        days = torch.tensor([0, 1, 1, 2])
        with torch.no_grad():
            # d^0 vanishes identically (the line starts at y^0); the others must stay off the kink
            if line_deviations(reg(x))[1:].min() < 1e-3:
                continue
        layers = [*reg.per_day, *reg.joint, reg.fc]
        params = list(layers[k % len(layers)].parameters())
        err = _directional_check(lambda: regression_loss(reg(x), target, days), params, gen)
        if err is not None:
            errors.append(err)
    return np.array(errors)


def test_segmentation_loss_gradients():
    err = segmentation_gradient_errors()
    assert len(err) >= 100
    assert err.max() < 1e-4, err.max()


def test_regression_loss_gradients():
    err = regression_gradient_errors()
    assert len(err) >= 100
    assert err.max() < 1e-4, err.max()
