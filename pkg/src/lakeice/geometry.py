"""Lake outlines rasterised onto sensor grids.

A pixel is *clean* when its whole footprint lies inside the lake outline.
The test is done on the four pixel corners plus the pixel centre, with
points on the boundary counting as inside.
"""

from dataclasses import dataclass, field

import numpy as np
import shapely
from shapely.geometry import Polygon


@dataclass(frozen=True)
class GridSpec:
    """Regular grid. Pixel (r, c) covers [x0 + c*cell, x0 + (c+1)*cell] x [y0 + r*cell, ...]."""

    height: int
    width: int
    cell: float = 1.0
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("grid must be non-empty")
        if self.cell <= 0:
            raise ValueError("cell size must be positive")


@dataclass
class LakeGeometry:
    lake_id: str
    grid: GridSpec
    polygon: list[tuple[float, float]]
    clean_pixel_mask: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.clean_pixel_mask is None:
            self.clean_pixel_mask = build_clean_pixel_mask(self.polygon, self.grid)

    @property
    def n_clean(self) -> int:
        return int(self.clean_pixel_mask.sum())


def build_clean_pixel_mask(polygon, grid: GridSpec) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose corners and centre are all inside ``polygon``.

    ``polygon`` is a sequence of (x, y) vertices in the same coordinates as
    the grid origin. Raises ``ValueError("empty lake geometry")`` for
    polygons with zero area.
    """
    poly = Polygon(polygon)
    if len(polygon) < 3 or poly.area <= 0:
        raise ValueError("empty lake geometry")
    if not poly.is_valid:
        raise ValueError("lake polygon must be simple")

    H, W, s = grid.height, grid.width, grid.cell
    # corner lattice (H+1, W+1) shared between neighbouring pixels
    cx = grid.x0 + s * np.arange(W + 1)
    cy = grid.y0 + s * np.arange(H + 1)
    gx, gy = np.meshgrid(cx, cy)
    corners = shapely.covers(poly, shapely.points(gx, gy))

    mx = grid.x0 + s * (np.arange(W) + 0.5)
    my = grid.y0 + s * (np.arange(H) + 0.5)
    hx, hy = np.meshgrid(mx, my)
    centres = shapely.covers(poly, shapely.points(hx, hy))

    return (corners[:-1, :-1] & corners[:-1, 1:] & corners[1:, :-1]
            & corners[1:, 1:] & centres)


def ellipse_polygon(cx, cy, a, b, angle_deg=0.0, n=48):
    """Vertices of an ellipse approximated by an n-gon."""
    t = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    th = np.deg2rad(angle_deg)
    x = a * np.cos(t)
    y = b * np.sin(t)
    xr = cx + x * np.cos(th) - y * np.sin(th)
    yr = cy + x * np.sin(th) + y * np.cos(th)
    return [(float(u), float(v)) for u, v in zip(xr, yr)]


def pixel_centres(grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) coordinates of every pixel centre, each shaped (H, W)."""
    mx = grid.x0 + grid.cell * (np.arange(grid.width) + 0.5)
    my = grid.y0 + grid.cell * (np.arange(grid.height) + 0.5)
    return np.meshgrid(mx, my)


def lake_cover_fraction(polygon, grid: GridSpec) -> np.ndarray:
    """Share of each pixel's area covered by the lake, (H, W) in [0, 1]."""
    poly = Polygon(polygon)
    s = grid.cell
    x0 = grid.x0 + s * np.arange(grid.width)
    y0 = grid.y0 + s * np.arange(grid.height)
    gx, gy = np.meshgrid(x0, y0)
    boxes = shapely.box(gx, gy, gx + s, gy + s)
    return shapely.area(shapely.intersection(boxes, poly)) / (s * s)
