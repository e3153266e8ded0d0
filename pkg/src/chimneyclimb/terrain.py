"""Curriculum terrain: two opposing walls with an annealed elliptical fillet.

The gap is a half-pipe in the x-z plane. The flat floor spans |x| <= w/2 - r
and blends into vertical walls at |x| = w/2 through a quarter-ellipse with
horizontal radius r and vertical radius 1.0 m. A curriculum level anneals r
from 0.3 m down to 0 while ramping up correlated wall roughness.
"""

from dataclasses import dataclass

import numpy as np

JUNCTION_VERTICAL_RADIUS = 1.0
R_START = 0.3


class InvalidSpec(Exception):
    """Terrain specification violates its invariants."""


class OutOfBounds(Exception):
    """Query point lies outside the simulated region."""


@dataclass(frozen=True)
class TerrainSpec:
    wall_width: float = 0.9
    junction_r: float = R_START
    junction_a: float = JUNCTION_VERTICAL_RADIUS
    roughness_amp: float = 0.0
    wall_height: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.junction_r <= self.wall_width / 2.0 + 1e-12:
            raise InvalidSpec("junction radius must be in [0, wall_width/2]")
        if self.junction_a != JUNCTION_VERTICAL_RADIUS:
            raise InvalidSpec("vertical junction radius is fixed at 1.0 m")
        if self.roughness_amp < 0:
            raise InvalidSpec("roughness amplitude must be non-negative")
        if self.wall_height <= self.junction_a:
            raise InvalidSpec("walls must extend above the junction")


@dataclass(frozen=True)
class CurriculumLevel:
    level: int
    r_of_level: float
    roughness_of_level: float


@dataclass(frozen=True)
class CGCLConfig:
    levels: int = 10  # L; level runs 0..L inclusive
    roughness_max: float = 0.03
    r_start: float = R_START


def curriculum_params(level: int, config: CGCLConfig = CGCLConfig()) -> CurriculumLevel:
    """Linear schedule: r anneals r_start -> 0, roughness ramps 0 -> max."""
    if not 0 <= level <= config.levels:
        raise ValueError(f"level must be in [0, {config.levels}]")
    frac = level / config.levels
    return CurriculumLevel(
        level=level,
        r_of_level=config.r_start * (1.0 - frac),
        roughness_of_level=config.roughness_max * frac,
    )


def junction_x(z, spec: TerrainSpec, side: str = "right"):
    """Smooth-surface |x| at height z, signed for the requested wall.

    Quarter-ellipse for z in [0, 1]: horizontal tangent at the floor,
    vertical tangent at z = 1; plain vertical wall above.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < -1e-12) or np.any(z > spec.wall_height + 1e-12):
        raise OutOfBounds("z outside [0, wall_height]")
    a = spec.junction_a
    zc = np.clip(z, 0.0, a)
    absx = spec.wall_width / 2.0 - spec.junction_r + spec.junction_r * np.sqrt(
        np.maximum(zc * (2.0 * a - zc), 0.0)
    ) / a
    absx = np.where(z >= a, spec.wall_width / 2.0, absx)
    sign = {"right": 1.0, "left": -1.0}[side]
    return sign * absx


def _value_noise(rng, n_knots, n_samples, amp):
    """Smoothly interpolated bounded noise, one value per sample index."""
    knots = rng.uniform(-amp, amp, size=n_knots)
    t = np.linspace(0.0, n_knots - 1.0, n_samples)
    i0 = np.minimum(t.astype(int), n_knots - 2)
    frac = t - i0
    w = 0.5 - 0.5 * np.cos(np.pi * frac)  # cosine ease keeps values in [-amp, amp]
    return knots[i0] * (1.0 - w) + knots[i0 + 1] * w


class TerrainProfile:
    """Sampled terrain surface with signed-distance / normal queries.

    The surface is stored as one polyline per side running from the gap
    center along the floor, around the fillet, and up the wall. Roughness
    displaces the smooth surface along its local normal.
    """

    CORRELATION_LENGTH = 0.05  # m, roughness knot spacing

    def __init__(self, spec: TerrainSpec, resolution: float = 0.004):
        self.spec = spec
        self.resolution = resolution
        rng = np.random.default_rng(spec.seed)
        self._polylines = {}
        self._wall_sections = {}  # z-monotone wall part, for x(z) interpolation
        for side in ("left", "right"):
            poly, n_floor = self._build_side(spec, side, rng, resolution)
            self._polylines[side] = poly
            self._wall_sections[side] = poly[n_floor:]
        # Concatenated vertex table for nearest-point queries.
        pts = np.concatenate([self._polylines["left"], self._polylines["right"]])
        self._pts = pts

    def _build_side(self, spec, side, rng, res):
        sign = 1.0 if side == "right" else -1.0
        w2 = spec.wall_width / 2.0
        # Arc length parameterization: floor run + fillet + wall.
        floor_run = max(w2 - spec.junction_r, 0.0)
        n_floor = max(int(np.ceil(floor_run / res)), 2)
        floor_x = np.linspace(0.0, floor_run, n_floor)
        floor_pts = np.column_stack([sign * floor_x, np.zeros(n_floor)])

        # Fillet + wall sampled on a z grid fine enough for the fillet arc.
        n_wall = max(int(np.ceil(spec.wall_height / (res * 0.5))), 4)
        z = np.linspace(0.0, spec.wall_height, n_wall)[1:]
        x = junction_x(z, spec, side)
        wall_pts = np.column_stack([x, z])
        smooth = np.concatenate([floor_pts, wall_pts])

        if spec.roughness_amp > 0.0:
            seg = np.diff(smooth, axis=0)
            arclen = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
            n_knots = max(int(arclen[-1] / self.CORRELATION_LENGTH) + 2, 2)
            noise = _value_noise(rng, n_knots, smooth.shape[0], spec.roughness_amp)
            # Roughness fades to zero on the floor section so the start
            # platform stays flat.
            fade = np.clip(smooth[:, 1] / 0.05, 0.0, 1.0)
            normals = self._polyline_normals(smooth, sign)
            smooth = smooth + (noise * fade)[:, None] * normals
        return smooth, n_floor

    @staticmethod
    def _polyline_normals(pts, sign):
        """Unit normals pointing into free space (toward the gap center)."""
        seg = np.gradient(pts, axis=0)
        tang = seg / np.maximum(np.hypot(seg[:, 0], seg[:, 1]), 1e-12)[:, None]
        normal = np.column_stack([-tang[:, 1], tang[:, 0]])
        # Orient: on the right wall free space is -x; on the floor it is +z.
        flip = np.sign(normal[:, 1] * 1.0 + normal[:, 0] * (-sign) + 1e-12)
        return normal * flip[:, None]

    def surface_points(self, side):
        return self._polylines[side]

    def query(self, point):
        """Signed distance (negative inside solid) and free-space normal."""
        x, z = float(point[0]), float(point[1])
        w2 = self.spec.wall_width / 2.0
        if abs(x) > w2 + 0.5 or z < -0.5 or z > self.spec.wall_height + 0.5:
            raise OutOfBounds(f"query point {point} outside simulation bounds")
        d, n = self._nearest(np.array([[x, z]]))
        return float(d[0]), n[0]

    def query_batch(self, points):
        """Vectorized `query` without bounds checking; points shape (n, 2)."""
        return self._nearest(np.asarray(points, dtype=float))

    def wall_query(self, point):
        """Distance and free-space normal of the nearest wall (floor ignored).

        Used for the privileged wall-distance observation: at the gap center
        of a w=1 chimney this is 0.5 m with a horizontal normal.
        """
        x, z = float(point[0]), float(point[1])
        best_d, best_n = None, None
        for side in ("left", "right"):
            pts = self._wall_sections[side]
            d2 = (pts[:, 0] - x) ** 2 + (pts[:, 1] - z) ** 2
            i = int(np.argmin(d2))
            d = float(np.sqrt(d2[i]))
            if best_d is None or d < best_d:
                delta = np.array([x, z]) - pts[i]
                if d > 1e-9:
                    n = delta / d
                else:
                    n = np.array([-1.0, 0.0]) if x > 0 else np.array([1.0, 0.0])
                best_d, best_n = d, n
        inside = bool(self._inside_solid(np.array([[x, z]]))[0])
        return (0.0 if inside else best_d), best_n

    def _nearest(self, q):
        pts = self._pts
        # Nearest polyline vertex; the sampling is fine enough that vertex
        # distance matches true segment distance to within the resolution.
        d2 = (
            (q[:, 0, None] - pts[None, :, 0]) ** 2
            + (q[:, 1, None] - pts[None, :, 1]) ** 2
        )
        idx = np.argmin(d2, axis=1)
        nearest = pts[idx]
        delta = q - nearest
        dist = np.sqrt(np.sum(delta**2, axis=1))

        inside = self._inside_solid(q)
        sdist = np.where(inside, -dist, dist)

        # Normal: from the nearest surface point toward the query for outside
        # points, opposite for inside; degenerate (on-surface) points fall
        # back to the local surface normal.
        with np.errstate(invalid="ignore", divide="ignore"):
            n = delta / np.maximum(dist[:, None], 1e-12)
        n = np.where(inside[:, None], -n, n)
        degen = dist < 1e-9
        if np.any(degen):
            fallback = np.where(q[degen, 0:1] > 0, [[-1.0, 0.0]], [[1.0, 0.0]])
            n[degen] = fallback
        return sdist, n

    def _inside_solid(self, q):
        """Solid region test: below floor level or beyond the wall curve."""
        x, z = q[:, 0], q[:, 1]
        below = z < self._floor_height(x)
        beyond = np.zeros_like(below)
        pos = z >= 0
        if np.any(pos):
            bx_r = self._surface_x(z[pos], "right")
            bx_l = self._surface_x(z[pos], "left")
            beyond[pos] = (x[pos] > bx_r) | (x[pos] < bx_l)
        return below | beyond

    def _floor_height(self, x):
        # The floor proper is at z=0; under the fillet/walls the solid starts
        # at z of the surface directly above only for |x| within the curve.
        return np.zeros_like(x)

    def _surface_x(self, z, side):
        """Actual (possibly rough) wall x at height z via interpolation."""
        pts = self._wall_sections[side]
        zcol, xcol = pts[:, 1], pts[:, 0]
        zq = np.clip(z, zcol.min(), zcol.max())
        return np.interp(zq, zcol, xcol)


def make_terrain(spec: TerrainSpec, resolution: float = 0.004) -> TerrainProfile:
    """Construct the sampled terrain; deterministic for a fixed seed."""
    return TerrainProfile(spec, resolution=resolution)


def surface_query(profile: TerrainProfile, point):
    """Signed distance and free-space unit normal at an (x, z) point."""
    return profile.query(point)


def export_heightfield_csv(profile: TerrainProfile, path, dz: float = 0.01, meta=""):
    """Write `z,x_left,x_right` samples of the realized surface."""
    spec = profile.spec
    z = np.arange(0.0, spec.wall_height + dz / 2, dz)
    xl = profile._surface_x(z, "left")
    xr = profile._surface_x(z, "right")
    with open(path, "w") as fh:
        fh.write(
            "# terrain heightfield; units m; "
            f"wall_width={spec.wall_width} junction_r={spec.junction_r} "
            f"roughness_amp={spec.roughness_amp} wall_height={spec.wall_height} "
            f"seed={spec.seed} {meta}\n"
        )
        fh.write("z,x_left,x_right\n")
        for zi, li, ri in zip(z, xl, xr):
            fh.write(f"{zi:.4f},{li:.6f},{ri:.6f}\n")
