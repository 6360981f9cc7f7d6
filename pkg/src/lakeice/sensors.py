"""Sensor roster: channel counts and patch shapes per input branch."""

import enum


class SensorKind(str, enum.Enum):
    MODIS = "MODIS"
    VIIRS = "VIIRS"
    SAR = "SAR"

    @property
    def channels(self) -> int:
        return _CHANNELS[self]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return _PATCH[self]

    @property
    def is_optical(self) -> bool:
        return self is not SensorKind.SAR

    @classmethod
    def parse(cls, name: str) -> "SensorKind":
        try:
            return cls(name.upper())
        except ValueError:
            raise ValueError(f"unknown sensor {name!r}") from None


_CHANNELS = {SensorKind.MODIS: 12, SensorKind.VIIRS: 5, SensorKind.SAR: 2}
_PATCH = {SensorKind.MODIS: (12, 12), SensorKind.VIIRS: (12, 12), SensorKind.SAR: (128, 128)}

# slot-filling priority for temporal windows, highest first
SENSOR_PRIORITY = (SensorKind.SAR, SensorKind.VIIRS, SensorKind.MODIS)

EMBED_SHAPE = (12, 12, 32)

# class indices of the segmentation task
FROZEN, NON_FROZEN, BACKGROUND = 0, 1, 2
CLASS_NAMES = ("frozen", "non_frozen", "background")
IGNORE = -1
