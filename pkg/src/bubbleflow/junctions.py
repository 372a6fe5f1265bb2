"""Nonlinear junction operator: residuals, compatibility checks, projection.

Six conditions per junction close the three fourth-order interior equations:
concurrency of the trace (cc), the two angle conditions (ac), continuity of
the chemical potential (ccp), and the two flux balances (fb).  The
compatibility report additionally evaluates the second-order condition
(acc0) that smooth-in-time starts require.

Residuals are evaluated from the same one-sided stencils the realized
geometry uses; a patch evaluator recomputes a single junction's residuals
from the few boundary nodes they depend on, which keeps the flow solver's
per-step re-linearization cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotConverged
from .reference import ReferenceBubble, TangentialCoupling, Tensions
from .state import (
    ClusterGeometry,
    GraphState,
    deriv_matrices,
    realize,
    reference_derivatives,
)

PATCH_WIDTH = 7  # widest one-sided stencil (fourth derivative end row)
CONDITION_NAMES = ("cc", "ac12", "ac23", "ccp", "fb12", "fb23")


@dataclass
class JunctionResidual:
    """Residuals of the six boundary conditions at one junction."""

    cc: float
    ac: tuple[float, float]
    ccp: float
    fb: tuple[float, float]
    acc0: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cc, *self.ac, self.ccp, *self.fb])

    def max_abs(self) -> float:
        return float(np.abs(self.as_array()).max())


def _residuals_from_fields(
    rho_node: np.ndarray,
    normals: np.ndarray,
    kappa: np.ndarray,
    kappa_s: np.ndarray,
    kappa_lap: np.ndarray,
    out_sign: float,
    tensions: Tensions,
) -> JunctionResidual:
    gam = np.asarray(tensions.gamma)
    theta = tensions.theta
    cc = float(gam @ rho_node)
    ac = (
        float(normals[0] @ normals[1] - math.cos(theta[2])),
        float(normals[1] @ normals[2] - math.cos(theta[0])),
    )
    ccp = float(gam @ kappa)
    flux = out_sign * kappa_s
    fb = (float(flux[0] - flux[1]), float(flux[1] - flux[2]))
    acc0 = float(gam @ (-kappa_lap))
    return JunctionResidual(cc=cc, ac=ac, ccp=ccp, fb=fb, acc0=acc0)


def residuals(
    geom: ClusterGeometry, state: GraphState, tensions: Tensions
) -> tuple[JunctionResidual, JunctionResidual]:
    """Evaluate all six conditions (plus acc0) at both junctions."""
    out = []
    for jn, node, sign in ((0, 0, -1.0), (1, geom.grid_size, 1.0)):
        out.append(
            _residuals_from_fields(
                state.rho[:, node],
                geom.unit_normal[:, node, :],
                geom.kappa[:, node],
                geom.kappa_s[:, node],
                geom.kappa_lap[:, node],
                sign,
                tensions,
            )
        )
    return out[0], out[1]


def residual_vector(
    geom: ClusterGeometry, state: GraphState, tensions: Tensions
) -> np.ndarray:
    """Flat 12-vector of the G-conditions (both junctions, acc0 excluded)."""
    r0, r1 = residuals(geom, state, tensions)
    return np.concatenate([r0.as_array(), r1.as_array()])


def flux_sum(geom: ClusterGeometry, tensions: Tensions) -> np.ndarray:
    """Sum of signed conormal curvature fluxes per junction (identity check)."""
    gam = np.asarray(tensions.gamma)
    out = np.empty(2)
    for jn, node, sign in ((0, 0, -1.0), (1, geom.grid_size, 1.0)):
        out[jn] = float(gam @ (sign * geom.kappa_s[:, node]))
    return out


def junction_patch_residuals(
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
    rho: np.ndarray,
    junction: int,
) -> np.ndarray:
    """Six G-residuals of one junction from the boundary node patch only.

    Bit-compatible with the full evaluation: the same one-sided stencils are
    applied to the same realized positions, restricted to the nodes they
    actually read.
    """
    m = ref.grid_size
    d1, d2, d3, d4 = deriv_matrices(m)
    ref_derivs = reference_derivatives(ref)
    if junction == 0:
        cols = slice(0, PATCH_WIDTH)
        row = 0
        out_sign = -1.0
    else:
        cols = slice(m + 1 - PATCH_WIDTH, m + 1)
        row = m
        out_sign = 1.0
    mu = coupling.matrix @ rho[:, cols]
    rows1 = d1[row, cols]
    rows2 = d2[row, cols]
    rows3 = d3[row, cols]
    rows4 = d4[row, cols]

    dtype = rho.dtype
    normals = np.empty((3, 2), dtype=dtype)
    kappa = np.empty(3, dtype=dtype)
    kappa_s = np.empty(3, dtype=dtype)
    kappa_lap = np.empty(3, dtype=dtype)
    for i in range(3):
        disp = (
            rho[i, cols][:, None] * ref.normals[i][cols]
            + mu[i][:, None] * coupling.tau_fields[i][cols]
        )
        xs = ref_derivs[0][i][row] + rows1 @ disp
        xss = ref_derivs[1][i][row] + rows2 @ disp
        xsss = ref_derivs[2][i][row] + rows3 @ disp
        xssss = ref_derivs[3][i][row] + rows4 @ disp
        # all operations analytic so a complex-step rho yields exact
        # derivatives in the imaginary part
        j = np.sqrt(xs[0] * xs[0] + xs[1] * xs[1])
        js = (xs @ xss) / j
        jss = ((xss @ xss) + (xs @ xsss)) / j - js * js / j
        c2 = -(xs[0] * xss[1] - xs[1] * xss[0])
        c3 = -(xs[0] * xsss[1] - xs[1] * xsss[0])
        c4 = -((xss[0] * xsss[1] - xss[1] * xsss[0]) + (xs[0] * xssss[1] - xs[1] * xssss[0]))
        k = c2 / j**3
        kp = c3 / j**3 - 3.0 * k * js / j
        kpp = (
            c4 / j**3
            - 6.0 * c3 * js / j**4
            - 3.0 * c2 * jss / j**4
            + 12.0 * c2 * js**2 / j**5
        )
        that = xs / j
        normals[i] = (that[1], -that[0])
        kappa[i] = k
        kappa_s[i] = kp / j
        kappa_lap[i] = kpp / j**2 - kp * js / j**3

    gam = np.asarray(tensions.gamma)
    theta = tensions.theta
    node = 0 if junction == 0 else m
    out = np.empty(6, dtype=dtype)
    out[0] = gam @ rho[:, node]
    out[1] = normals[0] @ normals[1] - math.cos(theta[2])
    out[2] = normals[1] @ normals[2] - math.cos(theta[0])
    out[3] = gam @ kappa
    flux = out_sign * kappa_s
    out[4] = flux[0] - flux[1]
    out[5] = flux[1] - flux[2]
    return out


def junction_fluxes(
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
    rho: np.ndarray,
    junction: int,
) -> np.ndarray:
    """Outward conormal curvature fluxes of the three curves at one junction."""
    m = ref.grid_size
    d1, d2, d3, d4 = deriv_matrices(m)
    ref_derivs = reference_derivatives(ref)
    if junction == 0:
        cols = slice(0, PATCH_WIDTH)
        row = 0
        out_sign = -1.0
    else:
        cols = slice(m + 1 - PATCH_WIDTH, m + 1)
        row = m
        out_sign = 1.0
    mu = coupling.matrix @ rho[:, cols]
    out = np.empty(3, dtype=rho.dtype)
    for i in range(3):
        disp = (
            rho[i, cols][:, None] * ref.normals[i][cols]
            + mu[i][:, None] * coupling.tau_fields[i][cols]
        )
        xs = ref_derivs[0][i][row] + d1[row, cols] @ disp
        xss = ref_derivs[1][i][row] + d2[row, cols] @ disp
        xsss = ref_derivs[2][i][row] + d3[row, cols] @ disp
        j = np.sqrt(xs[0] * xs[0] + xs[1] * xs[1])
        js = (xs @ xss) / j
        c2 = -(xs[0] * xss[1] - xs[1] * xss[0])
        c3 = -(xs[0] * xsss[1] - xs[1] * xsss[0])
        k = c2 / j**3
        kp = c3 / j**3 - 3.0 * k * js / j
        out[i] = out_sign * kp / j
    return out


def junction_flux_jacobian(
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
    rho: np.ndarray,
    junction: int,
    step: float = 1e-30,
) -> tuple[np.ndarray, np.ndarray]:
    """Complex-step Jacobian of the three junction fluxes, (3, 3, PATCH_WIDTH)."""
    base = junction_fluxes(ref, coupling, tensions, rho, junction)
    m = ref.grid_size
    nodes = range(PATCH_WIDTH) if junction == 0 else range(m + 1 - PATCH_WIDTH, m + 1)
    jac = np.empty((3, 3, PATCH_WIDTH))
    work = rho.astype(complex)
    for i in range(3):
        for col, j in enumerate(nodes):
            work[i, j] += 1j * step
            pert = junction_fluxes(ref, coupling, tensions, work, junction)
            work[i, j] = rho[i, j]
            jac[:, i, col] = pert.imag / step
    return jac, base.real


def junction_jacobian(
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
    rho: np.ndarray,
    junction: int,
    step: float = 1e-30,
) -> tuple[np.ndarray, np.ndarray]:
    """Complex-step Jacobian of one junction's residuals.

    Returns (jac, base) with jac of shape (6, 3, PATCH_WIDTH): sensitivity of
    each residual to the rho values on the patch nodes of each curve.  The
    flux rows mix entries of size O(m^3) that cancel almost completely
    against smooth directions, so the derivatives must be exact; the
    complex step delivers them to machine precision.
    """
    base = junction_patch_residuals(ref, coupling, tensions, rho, junction)
    m = ref.grid_size
    nodes = range(PATCH_WIDTH) if junction == 0 else range(m + 1 - PATCH_WIDTH, m + 1)
    jac = np.empty((6, 3, PATCH_WIDTH))
    work = rho.astype(complex)
    for i in range(3):
        for col, j in enumerate(nodes):
            work[i, j] += 1j * step
            pert = junction_patch_residuals(ref, coupling, tensions, work, junction)
            work[i, j] = rho[i, j]
            jac[:, i, col] = pert.imag / step
    return jac, base.real


@dataclass
class CompatibilityEntry:
    junction: int
    condition: str
    residual: float
    passed: bool


@dataclass
class CompatibilityReport:
    entries: list[CompatibilityEntry]
    passed: bool  # all six G-conditions at both junctions
    smooth_start_ok: bool  # acc0 as well
    worst_junction: int
    worst_condition: str
    worst_magnitude: float


def check_compatibility(
    geom: ClusterGeometry,
    state: GraphState,
    tensions: Tensions,
    tol: float = 1e-6,
) -> CompatibilityReport:
    """Pass/fail per boundary condition; acc0 failures downgrade to warning."""
    pair = residuals(geom, state, tensions)
    entries = []
    worst = (0, "cc", 0.0)
    g_ok = True
    acc_ok = True
    for jn, res in enumerate(pair):
        values = dict(zip(CONDITION_NAMES, res.as_array()))
        values["acc0"] = res.acc0
        for name, val in values.items():
            ok = abs(val) <= tol
            entries.append(
                CompatibilityEntry(junction=jn, condition=name, residual=float(val), passed=ok)
            )
            if name == "acc0":
                acc_ok &= ok
            else:
                g_ok &= ok
            if abs(val) > worst[2]:
                worst = (jn, name, abs(val))
    return CompatibilityReport(
        entries=entries,
        passed=g_ok,
        smooth_start_ok=g_ok and acc_ok,
        worst_junction=worst[0],
        worst_condition=worst[1],
        worst_magnitude=worst[2],
    )


def _correction_basis(ref: ReferenceBubble, coupling: TangentialCoupling) -> np.ndarray:
    """Smooth trace-control fields, shape (24, 3, m+1).

    Field (jn, i, p) is the monomial (s/delta)^p under a flat-topped C^4
    cutoff supported in the taper region of junction jn on curve i (zero on
    the other curves).  Near the junction the profiles are pure monomials,
    so corrections of the trace derivatives carry no spurious curvature
    there, and the decay zone is wide enough that the fourth-order operator
    sees only O(1) fields.
    """
    m = ref.grid_size
    s = ref.s
    delta = coupling.delta_supp
    x = s / delta
    flat = 0.45
    y = np.clip((x - flat) / (1.0 - flat), 0.0, 1.0)
    ramp = y**5 * (126.0 + y * (-420.0 + y * (540.0 + y * (-315.0 + 70.0 * y))))
    cutoff = np.where(x < 1.0, 1.0 - ramp, 0.0)
    basis = np.zeros((2, 3, 4, 3, m + 1))
    for p in range(4):
        prof0 = x**p * cutoff
        for i in range(3):
            basis[0, i, p, i] = prof0
            basis[1, i, p, i] = prof0[::-1]
    return basis.reshape(24, 3, m + 1)


def residual_scales(ref: ReferenceBubble) -> np.ndarray:
    """Nondimensionalizing factors (one junction's worth) for the six rows."""
    d = ref.half_separation
    return np.array([1.0 / d, 1.0, 1.0, d, d * d, d * d])


def project_initial(
    state: GraphState,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
    tol: float = 1e-10,
    max_iter: int = 25,
) -> GraphState:
    """Newton-project a state onto the junction-condition manifold.

    Gauss-Newton with minimal-norm steps over smooth trace-control profiles
    supported in the taper regions; samples outside the taper support are
    untouched and corrections are kept tangent to both enclosed areas so the
    projection cannot leak volume.  The Jacobian is chorded (reused while
    the residual contracts) and rebuilt when contraction stalls.  Raises
    NotConverged when the start residual is outside the contraction region
    (in nondimensional units) or the iteration stalls.
    """
    from .state import area_gradients_rho

    try:
        geom = realize(ref, coupling, state)
    except Exception as exc:  # guard and grid errors cannot be projected away
        raise NotConverged(f"projection cannot start: {exc}") from exc
    r = residual_vector(geom, state, tensions)
    scales = np.tile(residual_scales(ref), 2)
    if np.abs(r * scales).max() > 10.0:
        raise NotConverged(
            f"scaled junction residual {np.abs(r * scales).max():.3g} outside "
            "Newton contraction"
        )
    basis = _correction_basis(ref, coupling)
    rho = state.rho.copy()
    jac = None
    prev = np.inf
    stalls = 0
    for _ in range(max_iter):
        rmax = np.abs(r).max()
        if rmax <= tol:
            return GraphState(rho=rho, time=state.time)
        if jac is None or rmax > 0.5 * prev:
            if jac is not None:
                stalls += 1
                if stalls > 6:
                    raise NotConverged("junction projection stalled")
            jac = np.empty((14, 24))
            for jn in (0, 1):
                jj, _ = junction_jacobian(ref, coupling, tensions, rho, jn)
                cols = (
                    slice(0, PATCH_WIDTH) if jn == 0 else slice(-PATCH_WIDTH, None)
                )
                for b in range(24):
                    jac[6 * jn : 6 * jn + 6, b] = np.einsum(
                        "ric,ic->r", jj, basis[b][:, cols]
                    )
            ga12, ga13 = area_gradients_rho(geom, ref, coupling)
            arows = np.stack([ga12.ravel(), ga13.ravel()])
            arows /= np.linalg.norm(arows, axis=1)[:, None]
            jac[12] = arows[0] @ basis.reshape(24, -1).T
            jac[13] = arows[1] @ basis.reshape(24, -1).T
        prev = rmax
        rhs = np.concatenate([-r, [0.0, 0.0]])
        step, *_ = np.linalg.lstsq(jac, rhs, rcond=None)
        rho = rho + np.einsum("b,bij->ij", step, basis)
        try:
            geom = realize(ref, coupling, GraphState(rho=rho, time=state.time))
        except Exception as exc:
            raise NotConverged(f"projection left the guard region: {exc}") from exc
        r = residual_vector(geom, GraphState(rho=rho), tensions)
    raise NotConverged("junction projection did not converge")
