import datetime as dt

import numpy as np
import pytest
import torch

from lakeice.synthetic import SyntheticSeasonConfig, generate_synthetic_season

torch.set_num_threads(1)


def pytest_report_header(config):
    return f"torch {torch.__version__}, numpy {np.__version__}"


@pytest.fixture(scope="session")
def small_season():
    """A short, cheap season with one freeze-up and one break-up."""
    cfg = SyntheticSeasonConfig(seed=3, lake_id="toy", winter_id="2016-17",
                                season_start=dt.date(2016, 12, 20), season_end=dt.date(2017, 2, 10),
                                freeze_center=dt.date(2016, 12, 28), breakup_center=dt.date(2017, 2, 1))
    return generate_synthetic_season(cfg)


@pytest.fixture(scope="session")
def toy_seasons():
    """Two lakes x two winters of short seasons, enough for split/ensemble plumbing.

    Steep transitions leave fully frozen and fully open days with label maps.
    """
    out = []
    for lake, seed in (("alpha", 11), ("beta", 12)):
        for winter, y in (("2016-17", 2016), ("2017-18", 2017)):
            cfg = SyntheticSeasonConfig(
                seed=seed + y, lake_id=lake, winter_id=winter,
                season_start=dt.date(y, 12, 22), season_end=dt.date(y + 1, 1, 25),
                freeze_center=dt.date(y, 12, 30), breakup_center=dt.date(y + 1, 1, 18),
                freeze_steepness=2.0, breakup_steepness=2.0)
            out.append(generate_synthetic_season(cfg))
    return out


ACCEPTANCE_CRITERIA = {
    1: "loss oracles", 2: "gradient checks", 3: "shapes and invariances", 4: "synthetic end-to-end",
    5: "phenology oracle", 6: "temporal resolution", 7: "ensemble contract", 8: "published hyper-parameters",
}
_acceptance_results: dict[int, list] = {}


@pytest.fixture(scope="session")
def acceptance():
    """Record one measured part of an acceptance criterion; returns ``passed``."""
    def record(criterion, part, passed, detail=""):
        _acceptance_results.setdefault(criterion, []).append((part, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for c, name in ACCEPTANCE_CRITERIA.items():
        parts = _acceptance_results.get(c)
        if not parts:
            terminalreporter.write_line(f"criterion {c} ({name}): NOT RUN")
            continue
        status = "PASS" if all(ok for _, ok, _ in parts) else "FAIL"
        detail = "; ".join(f"{part} {d}".strip() + ("" if ok else " [fail]") for part, ok, d in parts)
        terminalreporter.write_line(f"criterion {c} ({name}): {status} | {detail}")
