"""Acquisition calendars and effective temporal resolution."""

import datetime as dt
from dataclasses import dataclass, field

from .sensors import SensorKind


@dataclass
class AcquisitionCalendar:
    start: dt.date
    end: dt.date
    dates: dict[SensorKind, list[dt.date]] = field(default_factory=dict)

    def __post_init__(self):
        if self.end < self.start:
            raise ValueError("season end precedes start")
        for sensor, days in self.dates.items():
            for a, b in zip(days, days[1:]):
                if not a < b:
                    raise ValueError(f"{sensor} dates must be strictly increasing")
            if days and (days[0] < self.start or days[-1] > self.end):
                raise ValueError(f"{sensor} dates fall outside the season window")

    def add(self, sensor: SensorKind, date: dt.date):
        days = self.dates.setdefault(SensorKind(sensor), [])
        if date < self.start or date > self.end:
            raise ValueError("date outside season window")
        if date not in days:
            days.append(date)
            days.sort()

    def union(self, sensors=None) -> list[dt.date]:
        sensors = self.dates.keys() if sensors is None else [SensorKind(s) for s in sensors]
        days = set()
        for s in sensors:
            days.update(self.dates.get(s, ()))
        return sorted(days)


def effective_temporal_resolution(calendar: AcquisitionCalendar, sensors=None) -> float:
    """Mean gap in days between distinct usable acquisition days.

    A day imaged by several of the selected sensors counts once.
    """
    days = calendar.union(sensors)
    if len(days) < 2:
        raise ValueError("insufficient acquisitions")
    return (days[-1] - days[0]).days / (len(days) - 1)
