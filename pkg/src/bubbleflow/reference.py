"""Stationary standard double bubble and the junction coupling machinery.

Curve indexing convention (fixed throughout the package):

* curve 1 is the middle interface, shared boundary of both enclosed regions;
* curve 2 is the cap closing region 12 (drawn to the left of the junction
  chord);
* curve 3 is the cap closing region 13 (to the right).

All three curves run from the lower junction (s = 0) to the upper junction
(s = 1) on a shared parameter grid.  Normals are the clockwise rotation of
the unit tangent; this is the orientation for which the junction coupling
matrix in its standard entry pattern maps normal displacements to exactly
the tangential displacements of rigid junction motions (the opposite
rotation would require the negated matrix).  The three signed curvatures sum
to zero on a stationary bubble and the three normals sum to zero at each
junction, so rigid motions are representable.

Geometry of the construction: both junctions sit at (0, +-d).  Every curve
is a circular arc through the two junctions, so it is determined by a signed
"bulge" half-angle w (positive = bulging toward +x): center (-d/tan w, 0),
curvature -sin(w)/d with the normal convention above.  The 120-degree
junction angles force the three half-angles to be (w1 - 2pi/3, w1,
w1 + 2pi/3); the tilt w1 of the middle is the single root-find unknown
fixed by the target area ratio, and d is the overall scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import (
    NotConverged,
    SupportCollision,
    TriangleInequalityViolated,
    Unsupported,
)

TWO_THIRDS_PI = 2.0 * math.pi / 3.0

# Half-angle of a cap at which the cap closes into a full circle; the tilt
# root-find must stay strictly inside (-pi/3, pi/3).
_TILT_LIMIT = math.pi / 3.0


@dataclass(frozen=True)
class Tensions:
    """Surface tensions and the junction angles they induce via Young's law."""

    gamma: tuple[float, float, float]
    theta: tuple[float, float, float]

    def young_residual(self) -> float:
        """Worst deviation of sin(theta_i)/gamma_i from their common value."""
        ratios = [math.sin(t) / g for t, g in zip(self.theta, self.gamma)]
        return max(ratios) - min(ratios)

    def angle_sum_residual(self) -> float:
        return abs(sum(self.theta) - 2.0 * math.pi)

    @property
    def is_equal(self) -> bool:
        g = self.gamma
        return abs(g[0] - g[1]) < 1e-14 and abs(g[1] - g[2]) < 1e-14


def solve_young_angles(gamma) -> Tensions:
    """Junction angles for given tensions, in closed form.

    Force balance at the junction closes the three vectors gamma_i * t_i into
    a triangle with side lengths gamma_i; the angle between the conormals of
    curves i and j is then read off the tension triangle by the law of
    cosines.

    Raises TriangleInequalityViolated when one tension is >= the sum of the
    other two (no junction can balance).
    """
    g = tuple(float(x) for x in gamma)
    if len(g) != 3 or any(x <= 0.0 for x in g):
        raise ValueError("need three positive tensions")
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        if g[k] >= g[i] + g[j] - 1e-15 * max(g):
            raise TriangleInequalityViolated(
                f"gamma{k + 1} = {g[k]} >= {g[i]} + {g[j]}"
            )
    theta = []
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        c = (g[k] ** 2 - g[i] ** 2 - g[j] ** 2) / (2.0 * g[i] * g[j])
        theta.append(math.acos(max(-1.0, min(1.0, c))))
    return Tensions(gamma=g, theta=tuple(theta))


def _blend_step(x: np.ndarray) -> np.ndarray:
    """C^4 ramp: 0 at 0, 1 at 1, first four derivatives zero at both ends.

    The tapered tangential field is differentiated four times by the flow
    operator; a merely C^2 blend would leave jumps in the third derivative
    whose fourth differences blow up like 1/h at the support edges.
    """
    x = np.clip(x, 0.0, 1.0)
    return x**5 * (126.0 + x * (-420.0 + x * (540.0 + x * (-315.0 + 70.0 * x))))


@dataclass(frozen=True)
class ArcSpec:
    """One circular arc (or straight chord) between the two junction points."""

    kind: str  # "arc" or "straight"
    half_angle: float  # signed bulge half-angle w
    center: tuple[float, float] | None
    signed_radius: float  # 1/curvature; inf for straight
    kappa: float  # signed curvature = sin(w)/d
    length: float
    endpoints: tuple[tuple[float, float], tuple[float, float]]


def _arc_spec(w: float, d: float) -> ArcSpec:
    p0, p1 = (0.0, -d), (0.0, d)
    if abs(w) < 1e-14:
        return ArcSpec("straight", 0.0, None, math.inf, 0.0, 2.0 * d, (p0, p1))
    xc = -d / math.tan(w)
    return ArcSpec(
        "arc", w, (xc, 0.0), -d / math.sin(w), -math.sin(w) / d,
        2.0 * d * w / math.sin(w), (p0, p1),
    )


def _sample_arc(spec: ArcSpec, s: np.ndarray, d: float):
    """Positions, unit tangents, unit normals of an arc on the grid s."""
    if spec.kind == "straight":
        pos = np.column_stack([np.zeros_like(s), -d + 2.0 * d * s])
        tan = np.tile([0.0, 1.0], (s.size, 1))
        nor = np.tile([1.0, 0.0], (s.size, 1))
        return pos, tan, nor
    w = spec.half_angle
    phi = w * (2.0 * s - 1.0)
    r_geo = -spec.signed_radius  # sampling radius d/sin(w)
    xc = spec.center[0]
    pos = np.column_stack([xc + r_geo * np.cos(phi), r_geo * np.sin(phi)])
    tan = np.column_stack([-np.sin(phi), np.cos(phi)])
    nor = np.column_stack([tan[:, 1], -tan[:, 0]])
    return pos, tan, nor


def _segment_area(w: float) -> float:
    """Signed area between the chord (half-length 1) and the arc of bulge w."""
    if abs(w) < 1e-9:
        # series of (w - sin w cos w)/sin^2 w, odd in w
        return 2.0 * w / 3.0 + 4.0 * w**3 / 45.0
    return (w - math.sin(w) * math.cos(w)) / math.sin(w) ** 2


def _unit_areas(w1: float) -> tuple[float, float]:
    """Areas of regions 12 and 13 at unit half-separation d = 1."""
    a12 = _segment_area(w1) - _segment_area(w1 - TWO_THIRDS_PI)
    a13 = _segment_area(w1 + TWO_THIRDS_PI) - _segment_area(w1)
    return a12, a13


@dataclass(frozen=True)
class ReferenceBubble:
    """Sampled stationary standard double bubble.

    Immutable after construction; the per-arc sample arrays live in
    ``positions``, ``tangents``, ``normals`` (lists of (m+1, 2) arrays indexed
    by curve), with constant signed curvature ``kappa[i]`` and constant
    parameter speed ``speeds[i]`` (= arc length) per curve.
    """

    arcs: tuple[ArcSpec, ArcSpec, ArcSpec]
    junctions: tuple[tuple[float, float], tuple[float, float]]
    tensions: Tensions
    areas: tuple[float, float]
    grid_size: int
    half_separation: float
    s: np.ndarray = field(repr=False)
    positions: tuple[np.ndarray, ...] = field(repr=False)
    tangents: tuple[np.ndarray, ...] = field(repr=False)
    normals: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def kappa(self) -> np.ndarray:
        return np.array([a.kappa for a in self.arcs])

    @property
    def speeds(self) -> np.ndarray:
        return np.array([a.length for a in self.arcs])

    @property
    def lengths(self) -> np.ndarray:
        return self.speeds

    @property
    def min_cap_radius(self) -> float:
        return min(abs(a.signed_radius) for a in self.arcs)

    def conormals(self) -> np.ndarray:
        """Outward unit conormals, shape (2 junctions, 3 curves, 2)."""
        out = np.empty((2, 3, 2))
        for i in range(3):
            out[0, i] = -self.tangents[i][0]
            out[1, i] = self.tangents[i][-1]
        return out

    def with_grid(self, grid_size: int) -> "ReferenceBubble":
        return build_reference(self.areas, self.tensions, grid_size)


def build_reference(areas, tensions: Tensions, grid_size: int) -> ReferenceBubble:
    """Construct the standard double bubble enclosing the two target areas.

    The middle tilt w1 is found by a bracketed 1-D root-find on the area
    ratio (bisection bracket, Brent polish to 1e-13); the half-separation d
    then scales the unit-d closed-form segment areas onto the targets.
    """
    a12_t, a13_t = float(areas[0]), float(areas[1])
    if a12_t <= 0.0 or a13_t <= 0.0:
        raise ValueError("enclosed areas must be positive")
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    if not tensions.is_equal:
        raise Unsupported("general tensions are reserved; v1 requires gamma=(1,1,1)")

    target = math.log(a12_t / a13_t)
    if abs(target) < 1e-14:
        w1 = 0.0
    else:
        eps = 1e-9

        def f(w):
            a12, a13 = _unit_areas(w)
            return math.log(a12 / a13) - target

        lo, hi = -_TILT_LIMIT + eps, _TILT_LIMIT - eps
        if f(lo) * f(hi) > 0.0:
            raise NotConverged("area ratio outside the bracket of the tilt angle")
        try:
            w1 = brentq(f, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
        except RuntimeError as exc:  # pragma: no cover - brentq rarely fails
            raise NotConverged(str(exc)) from exc

    a12_u, _ = _unit_areas(w1)
    d = math.sqrt(a12_t / a12_u)

    ws = (w1, w1 - TWO_THIRDS_PI, w1 + TWO_THIRDS_PI)
    arcs = tuple(_arc_spec(w, d) for w in ws)
    s = np.linspace(0.0, 1.0, grid_size + 1)
    sampled = [_sample_arc(a, s, d) for a in arcs]
    return ReferenceBubble(
        arcs=arcs,
        junctions=((0.0, -d), (0.0, d)),
        tensions=tensions,
        areas=(a12_t, a13_t),
        grid_size=grid_size,
        half_separation=d,
        s=s,
        positions=tuple(p for p, _, _ in sampled),
        tangents=tuple(t for _, t, _ in sampled),
        normals=tuple(n for _, _, n in sampled),
    )


@dataclass(frozen=True)
class TangentialCoupling:
    """Junction coupling matrix T and the tapered tangential direction field.

    ``matrix`` maps the three normal displacements at one parameter value to
    the three tangential coefficients.  ``taper`` is the [0,1] profile that is
    1 at both junctions and 0 on the middle (1 - 2*delta_supp) fraction of
    each arc; ``tau_fields[i]`` is the ready-to-use vector field
    (signed taper) x (unit tangent), equal to the outward conormal at both
    ends of curve i.
    """

    matrix: np.ndarray
    taper: np.ndarray
    delta_supp: float
    tau_fields: tuple[np.ndarray, ...]

    def mu(self, rho: np.ndarray) -> np.ndarray:
        """Tangential coefficients (3, m+1) for normal displacements rho."""
        return self.matrix @ rho


def tangential_matrix(
    tensions: Tensions, ref: ReferenceBubble, delta_supp: float = 0.15
) -> TangentialCoupling:
    """Assemble T from the junction angles plus the taper profile."""
    s1, s2, s3 = (math.sin(t) for t in tensions.theta)
    c1, c2, c3 = (math.cos(t) for t in tensions.theta)
    mat = np.array(
        [
            [0.0, c2 / s1, -c3 / s1],
            [-c1 / s2, 0.0, c3 / s2],
            [c1 / s3, -c2 / s3, 0.0],
        ]
    )
    s = ref.s
    ramp0 = 1.0 - _blend_step(s / delta_supp)
    ramp1 = 1.0 - _blend_step((1.0 - s) / delta_supp)
    signed = -ramp0 + ramp1
    taper = ramp0 + ramp1
    tau_fields = tuple(signed[:, None] * ref.tangents[i] for i in range(3))
    return TangentialCoupling(
        matrix=mat, taper=taper, delta_supp=delta_supp, tau_fields=tau_fields
    )


@dataclass(frozen=True)
class BumpPair:
    """Unit-mass volume-control profiles on curves 1 and 2.

    Each profile lives on the shared grid, is zero on the other two curves,
    is supported strictly inside the taper-free middle of its arc, and
    integrates to exactly 1 against the arc-length trapezoid weights.
    """

    f1: np.ndarray
    f2: np.ndarray
    support: tuple[float, float]


def build_bumps(ref: ReferenceBubble, coupling: TangentialCoupling) -> BumpPair:
    delta = coupling.delta_supp
    free = 1.0 - 2.0 * delta
    if free < 0.2:
        raise SupportCollision(
            f"delta_supp = {delta} leaves only {free:.2f} of each arc taper-free"
        )
    pad = 0.15 * free
    lo, hi = delta + pad, 1.0 - delta - pad
    s = ref.s
    u = (2.0 * s - (lo + hi)) / (hi - lo)
    # C^4 at the support edge: the bump rides through fourth-order stencils
    profile = np.where(np.abs(u) < 1.0, (1.0 - np.minimum(u * u, 1.0)) ** 5, 0.0)

    m = ref.grid_size
    h = 1.0 / m
    w_trap = np.full(m + 1, h)
    w_trap[0] = w_trap[-1] = h / 2.0

    f1 = profile / np.sum(profile * w_trap * ref.lengths[0])
    f2 = profile / np.sum(profile * w_trap * ref.lengths[1])
    return BumpPair(f1=f1, f2=f2, support=(lo, hi))
