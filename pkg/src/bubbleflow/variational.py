"""Variational machinery: constrained first/second variation, spectrum,
volume enforcement, the weak junction Laplacian, and inequality probes.

Constraint space (equal tensions): rho with sum_i rho_i = 0 at both
junctions and equal arc-length integrals across the three curves.  All
pairings against reference quantities use the reference arc-length measure;
the second-variation form and its mass matrix are assembled with
fourth-order stencils and Gregory end-corrected weights so that the rigid
kernel modes of the continuum form stay numerically near zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import eigh, null_space

from .errors import (
    IncompatibleData,
    NotConverged,
    RankDeficientConstraints,
    SingularSystem,
)
from .reference import BumpPair, ReferenceBubble, TangentialCoupling, Tensions
from .state import (
    ClusterGeometry,
    GraphState,
    area_gradients,
    enclosed_areas,
    energy,
    fd_stencil,
    realize,
    trap_weights,
)

SQRT3 = math.sqrt(3.0)


# ---------------------------------------------------------------------------
# quadrature and stencils for the form assembly


@lru_cache(maxsize=32)
def gregory_weights(m: int) -> np.ndarray:
    """Fourth-order end-corrected trapezoid weights on [0, 1]."""
    if m < 8:
        raise ValueError("Gregory weights need m >= 8")
    w = np.ones(m + 1)
    ends = np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])
    w[:3] = ends
    w[-3:] = ends[::-1]
    return w / m


@lru_cache(maxsize=32)
def diff4_matrix(m: int) -> np.ndarray:
    """First derivative, fourth-order: centered interior, one-sided ends."""
    h = 1.0 / m
    d = np.zeros((m + 1, m + 1))
    ctr = fd_stencil(range(-2, 3), 1)
    for j in range(2, m - 1):
        d[j, j - 2 : j + 3] = ctr
    for j in range(2):
        d[j, :5] = fd_stencil(np.arange(5) - j, 1)
        d[m - j, m - 4 :] = fd_stencil(np.arange(5) - 4 + j, 1)
    return d / h


def _flat(i: int, j: int, m: int) -> int:
    return i * (m + 1) + j


# ---------------------------------------------------------------------------
# constraint basis


@dataclass
class ConstraintBasis:
    """Linear functionals cutting out the constrained perturbation space."""

    junction_rows: np.ndarray  # (2, 3(m+1))
    mean_rows: np.ndarray  # (2, 3(m+1))
    volume_coeffs: tuple[float, float] = (0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        return np.vstack([self.junction_rows, self.mean_rows])

    def null_basis(self) -> np.ndarray:
        z = null_space(self.matrix)
        if z.shape[1] != self.matrix.shape[1] - self.matrix.shape[0]:
            raise RankDeficientConstraints("constraint rows are linearly dependent")
        return z


def constraint_basis(ref: ReferenceBubble) -> ConstraintBasis:
    m = ref.grid_size
    n = 3 * (m + 1)
    gam = ref.tensions.gamma
    jrows = np.zeros((2, n))
    for i in range(3):
        jrows[0, _flat(i, 0, m)] = gam[i]
        jrows[1, _flat(i, m, m)] = gam[i]
    wt = trap_weights(m)
    mrows = np.zeros((2, n))
    for i, sign, row in ((0, 1.0, 0), (1, -1.0, 0), (1, 1.0, 1), (2, -1.0, 1)):
        mrows[row, _flat(i, 0, m) : _flat(i, m, m) + 1] += sign * wt * ref.lengths[i]
    basis = ConstraintBasis(junction_rows=jrows, mean_rows=mrows)
    basis.null_basis()  # rank check at assembly
    return basis


# ---------------------------------------------------------------------------
# second variation


@dataclass
class SecondVariationForm:
    """Assembled bilinear form of the volume-constrained length functional."""

    matrix: np.ndarray
    mass: np.ndarray
    ref: ReferenceBubble

    def apply(self, rho: np.ndarray) -> np.ndarray:
        return (self.matrix @ rho.ravel()).reshape(rho.shape)

    def value(self, rho: np.ndarray, other: np.ndarray | None = None) -> float:
        a = rho.ravel()
        b = a if other is None else other.ravel()
        return float(a @ self.matrix @ b)


def junction_q(ref: ReferenceBubble) -> np.ndarray:
    """Junction curvature coefficients of the boundary part of the form.

    Cyclic differences of the per-arc signed curvatures over sqrt(3); this
    per-curve assignment is the one validated by the finite-difference
    master oracle (it also annihilates rigid translations and rotations,
    which the naive transcription does not).
    """
    k = ref.kappa
    return np.array([k[1] - k[2], k[2] - k[0], k[0] - k[1]]) / SQRT3


def second_variation_form(
    ref: ReferenceBubble, coupling: TangentialCoupling, tensions: Tensions
) -> SecondVariationForm:
    """B(rho, rho~) = sum_i int (rho_i' rho~_i' - kappa_i^2 rho_i rho~_i) dH
    minus the junction q-term at both junctions."""
    m = ref.grid_size
    n = 3 * (m + 1)
    d1 = diff4_matrix(m)
    wg = gregory_weights(m)
    b = np.zeros((n, n))
    mass = np.zeros((n, n))
    q = junction_q(ref)
    gam = np.asarray(tensions.gamma)
    for i in range(3):
        lo, hi = _flat(i, 0, m), _flat(i, m, m) + 1
        length = ref.lengths[i]
        stiff = d1.T @ np.diag(wg / length) @ d1
        blk = gam[i] * (stiff - np.diag(wg * length * ref.kappa[i] ** 2))
        b[lo:hi, lo:hi] += blk
        mass[lo:hi, lo:hi] += np.diag(wg * length)
        b[lo, lo] -= q[i]
        b[hi - 1, hi - 1] -= q[i]
    b = 0.5 * (b + b.T)
    return SecondVariationForm(matrix=b, mass=mass, ref=ref)


@dataclass
class SpectrumReport:
    """Constrained eigenpairs of the second variation."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (k, 3, m+1), mass-orthonormal
    kernel_candidates: np.ndarray  # residuals of projected translation modes
    min_eig: float
    grid: int


def translation_modes(ref: ReferenceBubble) -> np.ndarray:
    """Normal components of the two unit translations, shape (2, 3, m+1)."""
    out = np.empty((2, 3, ref.grid_size + 1))
    for a, e in enumerate((np.array([1.0, 0.0]), np.array([0.0, 1.0]))):
        for i in range(3):
            out[a, i] = ref.normals[i] @ e
    return out


def rotation_mode(ref: ReferenceBubble) -> np.ndarray:
    """Normal component of the rigid rotation field about the origin."""
    out = np.empty((3, ref.grid_size + 1))
    for i in range(3):
        pos = ref.positions[i]
        v = np.column_stack([-pos[:, 1], pos[:, 0]])
        out[i] = np.einsum("ij,ij->i", v, ref.normals[i])
    return out


def stability_spectrum(
    form: SecondVariationForm,
    mass: np.ndarray | None,
    constraints: ConstraintBasis | None,
    k: int = 10,
    deflate_rigid: bool = True,
    near_zero_tol: float = 1e-6,
) -> SpectrumReport:
    """Lowest constrained eigenpairs by explicit null-space projection.

    The rigid modes (two translations and the rotation) are exact kernel
    directions of the continuum form; discretization leaves them with an
    O(h^2) residual vector whose coupling to the positive spectrum pulls
    spurious small negatives into the projected solve.  With
    ``deflate_rigid`` the known kernel is projected out of the operator so
    that it reappears as exact zeros; genuine negative directions are
    unaffected.  Passing ``constraints=None`` solves the unconstrained
    problem (used to demonstrate that dropping the volume conditions
    destabilizes) without deflation.
    """
    b = form.matrix
    mm = form.mass if mass is None else mass
    n = b.shape[0]
    mref = form.ref
    if constraints is None:
        z = np.eye(n)
    else:
        z = constraints.null_basis()
        if deflate_rigid:
            rigid = np.stack(
                [
                    translation_modes(mref)[0].ravel(),
                    translation_modes(mref)[1].ravel(),
                    rotation_mode(mref).ravel(),
                ]
            )
            # M-orthonormalize the rigid span inside the constrained space
            gram = z.T @ mm @ z
            coefs = np.linalg.solve(gram, z.T @ mm @ rigid.T)
            r = (z @ coefs).T
            rg = r @ mm @ r.T
            low = np.linalg.cholesky(rg)
            r = np.linalg.solve(low, r)
            proj = np.eye(n) - r.T @ (r @ mm)
            b = proj.T @ b @ proj
    a_proj = z.T @ b @ z
    m_proj = z.T @ mm @ z
    a_proj = 0.5 * (a_proj + a_proj.T)
    m_proj = 0.5 * (m_proj + m_proj.T)
    vals, vecs = eigh(a_proj, m_proj)
    k = min(k, vals.size)
    modes = (z @ vecs[:, :k]).T
    mshape = (3, mref.grid_size + 1)

    kernel_res = np.empty(2)
    trans = translation_modes(mref)
    near_zero = modes[np.abs(vals[:k]) <= near_zero_tol] if k else modes[:0]
    for a in range(2):
        t = trans[a].ravel()
        if constraints is not None:
            gram = z.T @ mm @ z
            coef = np.linalg.solve(gram, z.T @ mm @ t)
            t = z @ coef
        tn = t / math.sqrt(t @ mm @ t)
        if near_zero.shape[0]:
            q_basis = near_zero
            gram = q_basis @ mm @ q_basis.T
            coef = np.linalg.solve(gram, q_basis @ mm @ tn)
            resid = tn - q_basis.T @ coef
            kernel_res[a] = math.sqrt(max(resid @ mm @ resid, 0.0))
        else:
            kernel_res[a] = 1.0

    return SpectrumReport(
        eigenvalues=vals[:k],
        eigenvectors=modes.reshape(k, *mshape),
        kernel_candidates=kernel_res,
        min_eig=float(vals[0]),
        grid=mref.grid_size,
    )


# ---------------------------------------------------------------------------
# volume enforcement (the discrete version of the constraint parametrization)


def enforce_volumes(
    state: GraphState,
    targets,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    bumps: BumpPair,
    tensions: Tensions,
    tol: float = 1e-12,
    max_iter: int = 25,
) -> GraphState:
    """Add multiples of the two bump profiles to restore both areas exactly.

    Newton on the coefficients (a, b) with the transport-theorem Jacobian
    evaluated at the current realized state; quadratic convergence near the
    constraint manifold.
    """
    t12, t13 = float(targets[0]), float(targets[1])
    scale = 0.5 * (abs(t12) + abs(t13))
    rho = state.rho.copy()
    geom = realize(ref, coupling, GraphState(rho=rho, time=state.time))
    ea = enclosed_areas(geom)
    if abs(ea.a12 - t12) > 0.1 * scale + 0.1 * abs(t12) or abs(
        ea.a13 - t13
    ) > 0.1 * scale + 0.1 * abs(t13):
        raise NotConverged("start residual too large for volume Newton")

    coeffs = np.zeros(2)
    for _ in range(max_iter):
        res = np.array([ea.a12 - t12, ea.a13 - t13])
        if np.abs(res).max() <= tol * max(scale, 1.0):
            st = GraphState(rho=rho, time=state.time)
            return st
        g12, g13 = area_gradients(geom)
        jac = np.empty((2, 2))
        for col, (ci, prof) in enumerate(((0, bumps.f1), (1, bumps.f2))):
            direction = prof[:, None] * ref.normals[ci]
            jac[0, col] = np.sum(g12[ci] * direction)
            jac[1, col] = np.sum(g13[ci] * direction)
        try:
            step = np.linalg.solve(jac, res)
        except np.linalg.LinAlgError as exc:
            raise NotConverged("singular volume Jacobian") from exc
        coeffs -= step
        rho = state.rho.copy()
        rho[0] += coeffs[0] * bumps.f1
        rho[1] += coeffs[1] * bumps.f2
        geom = realize(ref, coupling, GraphState(rho=rho, time=state.time))
        ea = enclosed_areas(geom)
    raise NotConverged("volume Newton did not converge")


def constrained_energy(
    rho: np.ndarray,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    bumps: BumpPair,
    tensions: Tensions,
    targets=None,
) -> float:
    """Energy of the volume-restored state gamma(rho); the oracle functional."""
    if targets is None:
        targets = ref.areas
    st = enforce_volumes(
        GraphState(rho=np.asarray(rho, dtype=float)),
        targets,
        ref,
        coupling,
        bumps,
        tensions,
    )
    return energy(realize(ref, coupling, st), tensions)


def d2_energy_fd(
    rho: np.ndarray,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    bumps: BumpPair,
    tensions: Tensions,
    eps: float = 2e-3,
) -> float:
    """5-point central second difference of the constrained energy at 0."""

    def f(t: float) -> float:
        return constrained_energy(t * rho, ref, coupling, bumps, tensions)

    e0 = f(0.0)
    return (
        -f(2 * eps) + 16.0 * f(eps) - 30.0 * e0 + 16.0 * f(-eps) - f(-2 * eps)
    ) / (12.0 * eps * eps)


# ---------------------------------------------------------------------------
# first variation


def first_variation(
    state: GraphState,
    ref: ReferenceBubble,
    coupling: TangentialCoupling,
    tensions: Tensions,
):
    """Constrained gradient representative of the parametrized energy.

    Returns (interior, junction_pairs): interior is (3, m+1) in the
    reference-measure pairing with the volume-multiplier component projected
    out (so it vanishes pointwise at the critical point); junction_pairs is
    a (2, 2) array of the trace coefficients paired against rho_2, rho_3 at
    the two junctions.
    """
    geom = realize(ref, coupling, state)
    m = ref.grid_size
    kap = geom.kappa
    raw = np.empty((3, m + 1))
    tau_dot_n = np.empty((3, m + 1))
    nstar_dot_n = np.empty((3, m + 1))
    for i in range(3):
        tau_dot_n[i] = np.einsum("jk,jk->j", coupling.tau_fields[i], geom.unit_normal[i])
        nstar_dot_n[i] = np.einsum("jk,jk->j", ref.normals[i], geom.unit_normal[i])
    jfac = geom.jac / ref.lengths[:, None]
    for i in range(3):
        prev_i, next_i = (i - 1) % 3, (i + 1) % 3
        tangential = (
            kap[prev_i] * tau_dot_n[prev_i] - kap[next_i] * tau_dot_n[next_i]
        ) / SQRT3
        raw[i] = -(kap[i] * nstar_dot_n[i] + tangential) * jfac[i]

    # project out the volume-gradient (pressure multiplier) directions
    wt = trap_weights(m)
    dh = wt[None, :] * ref.lengths[:, None]
    d12 = np.zeros((3, m + 1))
    d12[0] = -nstar_dot_n[0] * jfac[0]
    d12[1] = nstar_dot_n[1] * jfac[1]
    d13 = np.zeros((3, m + 1))
    d13[0] = nstar_dot_n[0] * jfac[0]
    d13[2] = -nstar_dot_n[2] * jfac[2]
    basis = np.stack([d12.ravel(), d13.ravel()])
    wvec = dh.ravel()
    gram = (basis * wvec) @ basis.T
    rhs = (basis * wvec) @ raw.ravel()
    alpha = np.linalg.solve(gram, rhs)
    interior = raw - (alpha[0] * d12 + alpha[1] * d13)

    junction_pairs = np.empty((2, 2))
    for jn, node in ((0, 0), (1, m)):
        nu = geom.conormals[jn]
        nstar = np.stack([ref.normals[i][node] for i in range(3)])
        taustar = np.stack([coupling.tau_fields[i][node] for i in range(3)])
        dot_n = np.einsum("ik,ik->i", nstar, nu)
        dot_t = np.einsum("ik,ik->i", taustar, nu)
        b2 = (
            dot_n[1]
            - dot_n[0]
            - dot_t[0] / SQRT3
            - dot_t[1] / SQRT3
            + 2.0 * dot_t[2] / SQRT3
        )
        b3 = (
            dot_n[2]
            - dot_n[0]
            + dot_t[0] / SQRT3
            - 2.0 * dot_t[1] / SQRT3
            + dot_t[2] / SQRT3
        )
        junction_pairs[jn] = (-b2, -b3)
    return interior, junction_pairs


def pair_first_variation(
    interior: np.ndarray,
    junction_pairs: np.ndarray,
    eta: np.ndarray,
    ref: ReferenceBubble,
) -> float:
    """Duality pairing of a first-variation representative with a direction."""
    m = ref.grid_size
    dh = trap_weights(m)[None, :] * ref.lengths[:, None]
    val = float(np.sum(interior * eta * dh))
    for jn, node in ((0, 0), (1, m)):
        val += junction_pairs[jn, 0] * eta[1, node]
        val += junction_pairs[jn, 1] * eta[2, node]
    return val


# ---------------------------------------------------------------------------
# weak junction Laplacian and the H^-1 norm


@dataclass
class Hm1Value:
    value: float
    potential: np.ndarray  # (3, m+1)


@dataclass
class _Hm1Solver:
    stiffness: np.ndarray
    mass_diag: np.ndarray
    z: np.ndarray
    a_factor: tuple
    ref: ReferenceBubble


_HM1_SOLVERS: dict[int, _Hm1Solver] = {}


def _hm1_solver(ref: ReferenceBubble, tensions: Tensions) -> _Hm1Solver:
    key = id(ref)
    solver = _HM1_SOLVERS.get(key)
    if solver is not None:
        return solver
    m = ref.grid_size
    n = 3 * (m + 1)
    h = 1.0 / m
    k = np.zeros((n, n))
    mdiag = np.zeros(n)
    wt = trap_weights(m)
    for i in range(3):
        length = ref.lengths[i]
        lo = _flat(i, 0, m)
        coef = 1.0 / (h * length)
        for j in range(m):
            a, b = lo + j, lo + j + 1
            k[a, a] += coef
            k[b, b] += coef
            k[a, b] -= coef
            k[b, a] -= coef
        mdiag[lo : lo + m + 1] = wt * length
    basis = constraint_basis(ref)
    z = basis.null_basis()
    a_proj = z.T @ k @ z
    a_proj = 0.5 * (a_proj + a_proj.T)
    try:
        from scipy.linalg import cho_factor

        factor = cho_factor(a_proj)
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise SingularSystem(str(exc)) from exc
    solver = _Hm1Solver(stiffness=k, mass_diag=mdiag, z=z, a_factor=factor, ref=ref)
    _HM1_SOLVERS[key] = solver
    return solver


def hm1_norm(
    f: np.ndarray,
    ref: ReferenceBubble,
    tensions: Tensions,
    compat_tol: float = 1e-9,
) -> Hm1Value:
    """Dual norm of f through the junction-coupled weak Laplacian.

    Solves -Lap u_i = f_i with gamma-weighted concurrency of the trace and
    equal conormal derivatives (natural conditions of the weak form), then
    returns the square root of the Dirichlet energy of the potential.
    """
    from scipy.linalg import cho_solve

    f = np.asarray(f, dtype=float)
    m = ref.grid_size
    if f.shape != (3, m + 1):
        raise ValueError("data shape mismatch")
    solver = _hm1_solver(ref, tensions)
    wt = trap_weights(m)
    integrals = np.array([float(np.sum(wt * ref.lengths[i] * f[i])) for i in range(3)])
    scale = max(1.0, float(np.abs(f).max()))
    if np.abs(integrals - integrals.mean()).max() > compat_tol * scale:
        raise IncompatibleData(
            f"per-curve integrals {integrals} violate solvability"
        )
    rhs = solver.z.T @ (solver.mass_diag * f.ravel())
    y = cho_solve(solver.a_factor, rhs)
    u = (solver.z @ y).reshape(3, m + 1)
    dirichlet = float(u.ravel() @ solver.stiffness @ u.ravel())
    return Hm1Value(value=math.sqrt(max(dirichlet, 0.0)), potential=u)


def h1_norm(rho: np.ndarray, ref: ReferenceBubble) -> float:
    """Full Sobolev norm sqrt(int |rho'|^2 + |rho|^2 dH)."""
    m = ref.grid_size
    h = 1.0 / m
    wt = trap_weights(m)
    total = 0.0
    for i in range(3):
        length = ref.lengths[i]
        du = np.diff(rho[i])
        total += float(np.sum(du * du)) / (h * length)
        total += float(np.sum(wt * length * rho[i] ** 2))
    return math.sqrt(total)


def l2_norm(rho: np.ndarray, ref: ReferenceBubble) -> float:
    m = ref.grid_size
    wt = trap_weights(m)
    total = 0.0
    for i in range(3):
        total += float(np.sum(wt * ref.lengths[i] * rho[i] ** 2))
    return math.sqrt(total)


def admissible_projection(rho: np.ndarray, ref: ReferenceBubble) -> np.ndarray:
    """Correct a field onto the linear constraint space with smooth profiles.

    Point constraints (junction sums) are fixed by smooth ramps rather than
    a Euclidean least-squares correction; the latter would concentrate
    grid-scale spikes at the junction nodes and destroy the smoothness the
    variational forms rely on.
    """
    basis = constraint_basis(ref)
    c = basis.matrix
    m = ref.grid_size
    s = ref.s
    ramp0 = (1.0 - s) ** 2 * (1.0 + 2.0 * s)  # cubic: 1 at s=0, 0 at s=1, flat ends
    ramp1 = ramp0[::-1].copy()
    hump = np.sin(math.pi * s) ** 2
    profiles = np.zeros((4, 3, m + 1))
    profiles[0, 0] = ramp0
    profiles[1, 0] = ramp1
    profiles[2, 0] = hump
    profiles[3, 1] = hump
    a = c @ profiles.reshape(4, -1).T
    coef = np.linalg.solve(a, c @ rho.ravel())
    return rho - np.einsum("p,pij->ij", coef, profiles)


def poincare_check(
    samples: int,
    ref: ReferenceBubble,
    tensions: Tensions,
    seed: int = 0,
    candidates=None,
) -> float:
    """Worst ratio ||rho||_L2 / ||rho'||_L2 over admissible random fields.

    Provided candidates are admissibility-filtered (constraint residual
    relative to the field size); generated candidates are random smooth
    Fourier fields projected onto the constraint space.
    """
    m = ref.grid_size
    basis = constraint_basis(ref)
    cmat = basis.matrix
    rng = np.random.default_rng(seed)
    worst = 0.0
    h = 1.0 / m
    wt = trap_weights(m)

    def ratio(rho: np.ndarray) -> float:
        num = l2_norm(rho, ref)
        den = 0.0
        for i in range(3):
            du = np.diff(rho[i])
            den += float(np.sum(du * du)) / (h * ref.lengths[i])
        den = math.sqrt(den)
        return num / den if den > 0 else math.inf

    if candidates is not None:
        for rho in candidates:
            rho = np.asarray(rho, dtype=float)
            res = np.abs(cmat @ rho.ravel()).max()
            if res > 1e-8 * max(1.0, float(np.abs(rho).max())):
                continue  # inadmissible candidate rejected
            worst = max(worst, ratio(rho))
        return worst

    s = ref.s
    for _ in range(samples):
        rho = np.zeros((3, m + 1))
        for i in range(3):
            for k in range(1, 9):
                rho[i] += rng.normal() * np.sin(math.pi * k * s)
                rho[i] += rng.normal() * np.cos(math.pi * k * s)
            rho[i] += rng.normal()
        rho = admissible_projection(rho, ref)
        worst = max(worst, ratio(rho))
    return worst
