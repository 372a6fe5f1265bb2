"""Discrete cluster states: unknowns on the shared grid and realized geometry.

The three curves share one parameter grid s_j = j/m with the junctions at
s = 0 and s = 1, so the tangential coupling mu = T rho is a pointwise 3x3
multiply.  Position derivatives up to fourth order come from single-stage
finite-difference stencils in the parameter (centered second-order interior,
higher-order one-sided at the two rows next to each junction); curvature,
its arc-length derivative and its surface Laplacian are then assembled
algebraically from those fields, which keeps the pointwise error O(h^2) at
every sample including the ends.  Quadrature is trapezoid with metric
weights, consistent with the stencils.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import EmbeddingGuard, GridMismatch, OpenLoop
from .reference import ReferenceBubble, TangentialCoupling, Tensions

EMBEDDING_GUARD_FACTOR = 0.5


@dataclass
class GraphState:
    """Normal displacements of the three curves over the reference."""

    rho: np.ndarray  # (3, m+1)
    time: float = 0.0

    def copy(self) -> "GraphState":
        return GraphState(rho=self.rho.copy(), time=self.time)

    @property
    def grid_size(self) -> int:
        return self.rho.shape[1] - 1


def zero_state(ref: ReferenceBubble) -> GraphState:
    return GraphState(rho=np.zeros((3, ref.grid_size + 1)))


def fd_stencil(offsets, deriv: int) -> np.ndarray:
    """Finite-difference weights for the given derivative on integer offsets."""
    offs = np.asarray(offsets, dtype=float)
    n = offs.size
    a = np.vander(offs, n, increasing=True).T
    b = np.zeros(n)
    b[deriv] = float(math.factorial(deriv))
    return np.linalg.solve(a, b)


def _deriv_matrix(m: int, deriv: int, end_width: int) -> np.ndarray:
    """Derivative matrix: centered interior rows, one-sided near the ends."""
    h = 1.0 / m
    d = np.zeros((m + 1, m + 1))
    half = max(1, (deriv + 1) // 2)
    ctr = fd_stencil(range(-half, half + 1), deriv)
    if deriv >= 3:
        half = 2
        ctr = fd_stencil(range(-2, 3), deriv)
    for j in range(half, m + 1 - half):
        d[j, j - half : j + half + 1] = ctr
    for j in range(half):
        d[j, :end_width] = fd_stencil(np.arange(end_width) - j, deriv)
        d[m - j, m + 1 - end_width :] = fd_stencil(
            np.arange(end_width) - (end_width - 1) + j, deriv
        )
    return d / h**deriv


@lru_cache(maxsize=32)
def deriv_matrices(m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(D1, D2, D3, D4) parameter-derivative matrices for the shared grid."""
    return (
        _deriv_matrix(m, 1, 5),
        _deriv_matrix(m, 2, 6),
        _deriv_matrix(m, 3, 6),
        _deriv_matrix(m, 4, 7),
    )


@lru_cache(maxsize=32)
def trap_weights(m: int) -> np.ndarray:
    w = np.full(m + 1, 1.0 / m)
    w[0] = w[-1] = 0.5 / m
    return w


_REF_DERIV_CACHE: dict[int, tuple] = {}


def reference_derivatives(ref: ReferenceBubble):
    """FD derivative fields of the sampled reference positions, cached.

    Realizing a state differences only the displacement against these fixed
    fields; in exact arithmetic that equals differencing the full positions,
    but it keeps the rounding noise of the high-order stencils proportional
    to the displacement size instead of the absolute coordinates (the
    fourth-derivative chain amplifies position-level rounding by ~m^4, which
    would otherwise put a noise floor above the flow's stopping tolerance).
    """
    key = id(ref)
    cached = _REF_DERIV_CACHE.get(key)
    if cached is not None:
        return cached
    mats = deriv_matrices(ref.grid_size)
    out = tuple(
        tuple(d @ ref.positions[i] for i in range(3)) for d in mats
    )
    _REF_DERIV_CACHE[key] = out
    return out


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]


@dataclass
class ClusterGeometry:
    """Realized curves of Phi(rho) with all derived fields on the grid."""

    positions: np.ndarray  # (3, m+1, 2)
    unit_tangent: np.ndarray  # (3, m+1, 2)
    unit_normal: np.ndarray  # (3, m+1, 2)
    jac: np.ndarray  # (3, m+1) parameter speed |x_s|
    jac_s: np.ndarray  # (3, m+1) d|x_s|/ds
    kappa: np.ndarray  # (3, m+1) signed curvature
    kappa_s: np.ndarray  # (3, m+1) arc-length derivative of kappa
    kappa_lap: np.ndarray  # (3, m+1) surface Laplacian of kappa
    dH: np.ndarray  # (3, m+1) arc-length quadrature weights
    conormals: np.ndarray  # (2, 3, 2) outward conormals at both junctions

    @property
    def grid_size(self) -> int:
        return self.kappa.shape[1] - 1

    def curve_lengths(self) -> np.ndarray:
        return self.dH.sum(axis=1)


@dataclass(frozen=True)
class EnclosedAreas:
    a12: float
    a13: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.a12, self.a13)


def realize(
    ref: ReferenceBubble, coupling: TangentialCoupling, state: GraphState
) -> ClusterGeometry:
    """Map the graph unknowns to curves: Phi = sigma + rho N* + mu tau*.

    mu is the slaved tangential coefficient (T rho pointwise); tau* carries
    the taper, so interior samples outside the junction neighborhoods move
    purely along the reference normal.
    """
    m = ref.grid_size
    if state.rho.shape != (3, m + 1):
        raise GridMismatch(
            f"state grid {state.rho.shape} does not match reference m={m}"
        )
    guard = EMBEDDING_GUARD_FACTOR * ref.min_cap_radius
    amax = float(np.abs(state.rho).max())
    if amax > guard:
        raise EmbeddingGuard(f"max|rho| = {amax:.3g} exceeds guard {guard:.3g}")

    mu = coupling.mu(state.rho)
    d1, d2, d3, d4 = deriv_matrices(m)
    ref_derivs = reference_derivatives(ref)
    wq = trap_weights(m)

    positions = np.empty((3, m + 1, 2))
    tangent = np.empty_like(positions)
    normal = np.empty_like(positions)
    jac = np.empty((3, m + 1))
    jac_s = np.empty_like(jac)
    kappa = np.empty_like(jac)
    kappa_s = np.empty_like(jac)
    kappa_lap = np.empty_like(jac)
    dH = np.empty_like(jac)

    for i in range(3):
        disp = (
            state.rho[i][:, None] * ref.normals[i]
            + mu[i][:, None] * coupling.tau_fields[i]
        )
        pos = ref.positions[i] + disp
        xs = ref_derivs[0][i] + d1 @ disp
        xss = ref_derivs[1][i] + d2 @ disp
        xsss = ref_derivs[2][i] + d3 @ disp
        xssss = ref_derivs[3][i] + d4 @ disp

        j = np.hypot(xs[:, 0], xs[:, 1])
        js = np.einsum("ij,ij->i", xs, xss) / j
        jss = (np.einsum("ij,ij->i", xss, xss) + np.einsum("ij,ij->i", xs, xsss)) / j
        jss -= js * js / j

        # signed curvature w.r.t. the clockwise normal: flip the cross products
        c2 = -_cross(xs, xss)
        c3 = -_cross(xs, xsss)
        c4 = -(_cross(xss, xsss) + _cross(xs, xssss))

        k = c2 / j**3
        kp = c3 / j**3 - 3.0 * k * js / j
        kpp = (
            c4 / j**3
            - 6.0 * c3 * js / j**4
            - 3.0 * c2 * jss / j**4
            + 12.0 * c2 * js**2 / j**5
        )

        that = xs / j[:, None]
        positions[i] = pos
        tangent[i] = that
        normal[i] = np.column_stack([that[:, 1], -that[:, 0]])
        jac[i] = j
        jac_s[i] = js
        kappa[i] = k
        kappa_s[i] = kp / j
        kappa_lap[i] = kpp / j**2 - kp * js / j**3
        dH[i] = wq * j

    conormals = np.empty((2, 3, 2))
    conormals[0] = -tangent[:, 0, :]
    conormals[1] = tangent[:, -1, :]

    return ClusterGeometry(
        positions=positions,
        unit_tangent=tangent,
        unit_normal=normal,
        jac=jac,
        jac_s=jac_s,
        kappa=kappa,
        kappa_s=kappa_s,
        kappa_lap=kappa_lap,
        dH=dH,
        conormals=conormals,
    )


def _edge_turn(geom: ClusterGeometry, i: int):
    """Chord vectors and signed tangent turn angles of curve i's edges."""
    pos = geom.positions[i]
    that = geom.unit_tangent[i]
    delta = pos[1:] - pos[:-1]
    t0, t1 = that[:-1], that[1:]
    sin_phi = t0[:, 0] * t1[:, 1] - t0[:, 1] * t1[:, 0]
    cos_phi = np.einsum("ij,ij->i", t0, t1)
    return delta, np.arctan2(sin_phi, cos_phi)


def curve_length(geom: ClusterGeometry, i: int) -> float:
    """Arc length of curve i by the chord/turn-angle rule (exact on circles)."""
    delta, phi = _edge_turn(geom, i)
    c = np.hypot(delta[:, 0], delta[:, 1])
    half = 0.5 * phi
    small = np.abs(half) < 1e-6
    fac = np.empty_like(half)
    fac[small] = 1.0 + half[small] ** 2 / 6.0
    fac[~small] = half[~small] / np.sin(half[~small])
    return float(np.sum(c * fac))


def energy(geom: ClusterGeometry, tensions: Tensions) -> float:
    """Tension-weighted total length.

    Edge lengths use the chord/turn-angle correction, which reproduces
    circular arcs exactly and is fourth-order on general smooth curves; the
    energy of a sampled stationary bubble therefore matches the closed-form
    perimeter to near machine precision.
    """
    g = np.asarray(tensions.gamma)
    return float(sum(g[i] * curve_length(geom, i) for i in range(3)))


def _signed_shoelace(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return 0.5 * float(np.sum(x * yn - xn * y))


def _loop_area(
    fwd: np.ndarray,
    bwd: np.ndarray,
    fwd_corr: np.ndarray,
    bwd_corr: np.ndarray,
    tol: float,
) -> float:
    """Signed area of curve fwd joined with curve bwd traversed backwards.

    The polygon shoelace is augmented with per-edge circular-sliver
    corrections (precomputed per curve in forward orientation), restoring
    fourth-order accuracy for sampled smooth curves.
    """
    if (
        np.linalg.norm(fwd[-1] - bwd[-1]) > tol
        or np.linalg.norm(fwd[0] - bwd[0]) > tol
    ):
        raise OpenLoop("curve endpoints disagree beyond tolerance")
    loop = np.vstack([fwd[:-1], bwd[::-1][:-1]])
    return _signed_shoelace(loop) + float(fwd_corr.sum()) - float(bwd_corr.sum())


def _edge_slivers(geom: ClusterGeometry, i: int) -> np.ndarray:
    """Signed area between each chord and the curve, forward orientation.

    Circular-segment formula driven by the signed tangent turn angle; exact
    for circular arcs, O(h^5) per edge on general smooth curves.
    """
    delta, phi = _edge_turn(geom, i)
    c2 = delta[:, 0] ** 2 + delta[:, 1] ** 2
    small = np.abs(phi) < 1e-4
    out = np.empty_like(phi)
    p = phi[small]
    out[small] = c2[small] * (p / 12.0) * (1.0 + p * p / 30.0)
    p = phi[~small]
    out[~small] = c2[~small] * (p - np.sin(p)) / (8.0 * np.sin(0.5 * p) ** 2)
    return out


def enclosed_areas(geom: ClusterGeometry, tol: float = 1e-9) -> EnclosedAreas:
    """Areas of the two enclosed regions.

    Region 12 is bounded by the middle (curve 1) and cap 2, region 13 by the
    middle and cap 3; traversal order follows the normal conventions and the
    unsigned areas are returned.
    """
    mid, cap2, cap3 = geom.positions
    slivers = [_edge_slivers(geom, i) for i in range(3)]
    a12 = _loop_area(mid, cap2, slivers[0], slivers[1], tol)
    a13 = _loop_area(cap3, mid, slivers[2], slivers[0], tol)
    return EnclosedAreas(a12=abs(a12), a13=abs(a13))


def area_gradients(geom: ClusterGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Polygon-level derivatives of the two areas w.r.t. node motion.

    Returns (g12, g13), each (3, m+1, 2): change of the unsigned region area
    per unit displacement of node (i, j).  Junction nodes are attributed per
    the loop composition; callers moving nodes away from the junctions get
    the exact polygon-area derivative.
    """
    m = geom.grid_size

    def loop_grad(loop: np.ndarray) -> np.ndarray:
        prev = np.roll(loop, 1, axis=0)
        nxt = np.roll(loop, -1, axis=0)
        g = np.empty_like(loop)
        g[:, 0] = 0.5 * (nxt[:, 1] - prev[:, 1])
        g[:, 1] = 0.5 * (prev[:, 0] - nxt[:, 0])
        return g

    mid, cap2, cap3 = geom.positions
    out = []
    for fwd_idx, bwd_idx, fwd, bwd in ((0, 1, mid, cap2), (2, 0, cap3, mid)):
        loop = np.vstack([fwd[:-1], bwd[::-1][:-1]])
        sign = 1.0 if _signed_shoelace(loop) >= 0.0 else -1.0
        g = sign * loop_grad(loop)
        grad = np.zeros((3, m + 1, 2))
        grad[fwd_idx, :-1] += g[:m]
        grad[bwd_idx, 1:] += g[m:][::-1]
        out.append(grad)
    return out[0], out[1]


def area_gradients_rho(
    geom: ClusterGeometry,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
) -> tuple[np.ndarray, np.ndarray]:
    """Chain the polygon area gradients through the realize map, (3, m+1)."""
    g12, g13 = area_gradients(geom)
    tmat = coupling.matrix
    out = []
    for gvec in (g12, g13):
        g = np.empty((3, geom.grid_size + 1))
        for k in range(3):
            g[k] = np.einsum("jc,jc->j", gvec[k], ref.normals[k])
            for i in range(3):
                if tmat[i, k] != 0.0:
                    g[k] += tmat[i, k] * np.einsum(
                        "jc,jc->j", gvec[i], coupling.tau_fields[i]
                    )
        out.append(g)
    return out[0], out[1]


def velocity_field(geom: ClusterGeometry) -> np.ndarray:
    """Normal velocity of surface diffusion: V = -Delta_Gamma kappa."""
    return -geom.kappa_lap
