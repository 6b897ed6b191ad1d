"""Self-contained convex solvers.

A dense primal-dual interior-point method for conic programs over products of
nonnegative orthants and second-order cones::

    minimize    1/2 x'Px + c'x
    subject to  Gx + s = h,  s in K
                Ax = b

with Nesterov-Todd scaling and a Mehrotra predictor-corrector.  On top of it
sit the three problem families the synthesis pipeline needs: bound/inequality
constrained QPs, the density-space perspective program and the stabilization
feasibility LP.  A structured solver for row-stochastic least squares (the
NSDMD fit) lives here as well because it shares the same path-following logic
but exploits block structure that the dense solver cannot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200
KAPPA_MIN = 1e-6


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cone algebra


class Cone:
    """Product cone R^l_+ x Q^{q_1} x ... x Q^{q_m}.

    Second-order cones are grouped by dimension so that all per-block
    operations vectorize.
    """

    def __init__(self, n_lp: int, soc_dims=()):
        self.n_lp = int(n_lp)
        self.soc_dims = [int(q) for q in soc_dims]
        if any(q < 2 for q in self.soc_dims):
            raise ValueError("second-order cones need dimension >= 2")
        self.dim = self.n_lp + sum(self.soc_dims)
        self.degree = self.n_lp + len(self.soc_dims)
        # index arrays, one (count, q) array per distinct dimension
        self.groups: list[np.ndarray] = []
        off = self.n_lp
        starts: dict[int, list[int]] = {}
        for q in self.soc_dims:
            starts.setdefault(q, []).append(off)
            off += q
        for q, st in starts.items():
            self.groups.append(np.asarray(st)[:, None] + np.arange(q)[None, :])

    def identity(self) -> np.ndarray:
        e = np.zeros(self.dim)
        e[: self.n_lp] = 1.0
        for idx in self.groups:
            e[idx[:, 0]] = 1.0
        return e

    def min_eig(self, x) -> float:
        vals = [np.inf]
        if self.n_lp:
            vals.append(x[: self.n_lp].min())
        for idx in self.groups:
            b = x[idx]
            vals.append((b[:, 0] - np.linalg.norm(b[:, 1:], axis=1)).min())
        return float(min(vals))

    def prod(self, u, v) -> np.ndarray:
        """Jordan product u o v."""
        out = np.empty(self.dim)
        n = self.n_lp
        out[:n] = u[:n] * v[:n]
        for idx in self.groups:
            ub, vb = u[idx], v[idx]
            out[idx[:, 0]] = np.einsum("ij,ij->i", ub, vb)
            out[idx[:, 1:]] = ub[:, :1] * vb[:, 1:] + vb[:, :1] * ub[:, 1:]
        return out

    def div(self, u, r) -> np.ndarray:
        """Solve u o x = r for x (u in the interior)."""
        out = np.empty(self.dim)
        n = self.n_lp
        out[:n] = r[:n] / u[:n]
        for idx in self.groups:
            ub, rb = u[idx], r[idx]
            u0, u1, r0, r1 = ub[:, 0], ub[:, 1:], rb[:, 0], rb[:, 1:]
            det = u0 ** 2 - np.einsum("ij,ij->i", u1, u1)
            x0 = (u0 * r0 - np.einsum("ij,ij->i", u1, r1)) / det
            out[idx[:, 0]] = x0
            out[idx[:, 1:]] = (r1 - x0[:, None] * u1) / u0[:, None]
        return out

    def max_step(self, x, d) -> float:
        """Largest alpha with x + alpha*d in the cone (inf if unbounded)."""
        alpha = np.inf
        n = self.n_lp
        if n:
            neg = d[:n] < 0
            if neg.any():
                alpha = min(alpha, float(np.min(-x[:n][neg] / d[:n][neg])))
        for idx in self.groups:
            xb, db = x[idx], d[idx]
            a = db[:, 0] ** 2 - np.einsum("ij,ij->i", db[:, 1:], db[:, 1:])
            b = xb[:, 0] * db[:, 0] - np.einsum("ij,ij->i", xb[:, 1:], db[:, 1:])
            c = xb[:, 0] ** 2 - np.einsum("ij,ij->i", xb[:, 1:], xb[:, 1:])
            hit = ~((a >= 0) & (b >= 0))
            if hit.any():
                disc = np.sqrt(np.maximum(b[hit] ** 2 - a[hit] * c[hit], 0.0))
                den = -b[hit] + disc
                with np.errstate(divide="ignore", invalid="ignore"):
                    steps = np.where(den > 0, c[hit] / den, np.inf)  # den <= 0: no boundary crossing
                alpha = min(alpha, float(np.min(steps)))
        return alpha


def _jnorm(b):
    """sqrt(x0^2 - |x1|^2) per block, factored for accuracy near the boundary."""
    r = np.linalg.norm(b[:, 1:], axis=1)
    return np.sqrt(np.maximum((b[:, 0] - r) * (b[:, 0] + r), 0.0))


class NTScaling:
    """Nesterov-Todd scaling W (symmetric) with W z = W^{-1} s = lambda."""

    def __init__(self, cone: Cone, s, z):
        self.cone = cone
        n = cone.n_lp
        self.d = np.sqrt(s[:n] / z[:n])
        self.blocks = []
        for idx in cone.groups:
            sb, zb = s[idx], z[idx]
            sjs = _jnorm(sb)
            zjz = _jnorm(zb)
            sn, zn = sb / sjs[:, None], zb / zjz[:, None]
            gam = np.sqrt(0.5 * (1.0 + np.einsum("ij,ij->i", sn, zn)))
            zn[:, 1:] *= -1.0  # J zbar
            wbar = (sn + zn) / (2.0 * gam[:, None])
            beta = np.sqrt(sjs / zjz)
            self.blocks.append((idx, wbar, beta))
        self.lam = self.apply(z)

    def apply(self, x, inverse=False) -> np.ndarray:
        """W x (or W^{-1} x); x may be a vector or a matrix (columns)."""
        cone = self.cone
        n = cone.n_lp
        out = np.empty_like(x, dtype=float)
        d = 1.0 / self.d if inverse else self.d
        out[:n] = (d[:, None] * x[:n]) if x.ndim == 2 else d * x[:n]
        for idx, wbar, beta in self.blocks:
            xb = x[idx]  # (count, q) or (count, q, k)
            mat = xb.ndim == 3
            if not mat:
                xb = xb[:, :, None]
            # W = beta [[w0, w1'], [w1, I + w1 w1'/(1 + w0)]];  W^{-1} flips the sign of w1
            w0, w1 = wbar[:, 0], wbar[:, 1:]
            sgn = -1.0 if inverse else 1.0
            x0, x1 = xb[:, 0, :], xb[:, 1:, :]
            w1x1 = np.einsum("iq,iqk->ik", w1, x1)
            res = np.empty_like(xb)
            res[:, 0, :] = w0[:, None] * x0 + sgn * w1x1
            coef = sgn * x0 + w1x1 / (1.0 + w0)[:, None]
            res[:, 1:, :] = x1 + w1[:, :, None] * coef[:, None, :]
            if inverse:
                res /= beta[:, None, None]
            else:
                res *= beta[:, None, None]
            out[idx] = res if mat else res[:, :, 0]
        return out


# ---------------------------------------------------------------------------
# generic conic IPM


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    gap: float
    y: np.ndarray | None = None
    z: np.ndarray | None = None
    s: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        out = {
            "status": self.status,
            "objective": self.objective,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "gap": self.gap,
            "x": self.x.tolist(),
        }
        out.update({k: v for k, v in self.info.items() if _jsonable(v)})
        return out


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


@dataclass
class ConicProgram:
    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    cone: Cone
    P: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, float)
        n = self.c.size
        self.G = np.asarray(self.G, float).reshape(-1, n)
        self.h = np.asarray(self.h, float)
        if self.G.shape[0] != self.cone.dim or self.h.size != self.cone.dim:
            raise ValueError("G/h rows must match the cone dimension")
        if self.A is None:
            self.A = np.zeros((0, n))
            self.b = np.zeros(0)
        self.A = np.asarray(self.A, float).reshape(-1, n)
        self.b = np.asarray(self.b, float)
        if self.P is not None:
            self.P = np.asarray(self.P, float)
            self.P = 0.5 * (self.P + self.P.T)

    def objective(self, x) -> float:
        val = self.c @ x
        if self.P is not None:
            val += 0.5 * x @ self.P @ x
        return float(val)

    def residuals(self, x, y, z, s=None):
        """Independent KKT residuals (inf-norms) of a candidate point."""
        cone = self.cone
        px = self.P @ x if self.P is not None else 0.0
        stat = px + self.c + self.A.T @ y + self.G.T @ z
        slack = self.h - self.G @ x if s is None else s
        prim_eq = self.A @ x - self.b
        prim_cone = max(0.0, -cone.min_eig(self.h - self.G @ x))
        dual_cone = max(0.0, -cone.min_eig(z))
        return {
            "stationarity": float(np.max(np.abs(stat), initial=0.0)),
            "equality": float(np.max(np.abs(prim_eq), initial=0.0)),
            "cone_violation": prim_cone,
            "dual_cone_violation": dual_cone,
            "complementarity": float(abs(slack @ z)),
        }


def _kkt_solve(H, A, rhs_x, rhs_y, reg=1e-13):
    n, p = H.shape[0], A.shape[0]
    K = np.zeros((n + p, n + p))
    K[:n, :n] = H
    K[:n, n:] = A.T
    K[n:, :n] = A
    scale = max(1.0, np.abs(np.diag(H)).max(initial=0.0))
    Kreg = K.copy()
    Kreg[np.arange(n), np.arange(n)] += reg * scale
    Kreg[n + np.arange(p), n + np.arange(p)] -= reg * scale
    lu = sla.lu_factor(Kreg, check_finite=False)

    def solve(rx, ry):
        r = np.concatenate([rx, ry])
        sol = sla.lu_solve(lu, r, check_finite=False)
        for _ in range(2):  # refinement against the unregularized matrix
            sol += sla.lu_solve(lu, r - K @ sol, check_finite=False)
        return sol[:n], sol[n:]

    return solve(rhs_x, rhs_y), solve


def solve_conic(prog: ConicProgram, tol: float = DEFAULT_TOL,
                max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    cone = prog.cone
    c, G, h, A, b = prog.c, prog.G, prog.h, prog.A, prog.b
    n, p = c.size, A.shape[0]
    P = prog.P if prog.P is not None else np.zeros((n, n))
    e = cone.identity()
    nrm_c = max(1.0, np.linalg.norm(c, np.inf))
    nrm_bh = max(1.0, np.linalg.norm(np.concatenate([b, h]), np.inf))

    # starting point: least-norm solution of the KKT system with W = I
    (x, y), _ = _kkt_solve(P + G.T @ G, A, -c + G.T @ h, b)
    z = G @ x - h
    s = -z.copy()
    for v in (s, z):
        t = cone.min_eig(v)
        if t < 1.0:
            v += (1.0 - t) * e

    status = "max_iter"
    it = 0
    best = None  # (merit, it, x, y, z, s, pres, dres, gap)
    for it in range(1, max_iter + 1):
        rx = P @ x + c + A.T @ y + G.T @ z
        ry = A @ x - b
        rz = G @ x + s - h
        gap = float(s @ z)
        mu = gap / max(cone.degree, 1)
        pres = max(np.linalg.norm(ry, np.inf) if p else 0.0,
                   np.linalg.norm(rz, np.inf) if rz.size else 0.0) / nrm_bh
        dres = np.linalg.norm(rx, np.inf) / nrm_c
        if not np.isfinite([pres, dres, gap]).all():
            status = "numerical_error"
            break
        pobj = prog.objective(x)
        scale = max(1.0, abs(pobj))
        merit = max(pres, dres, mu / scale)
        if best is None or merit < best[0]:
            best = (merit, it, x, y, z, s, pres, dres, gap)
        if pres <= tol and dres <= tol and mu <= tol * scale:
            status = "optimal"
            break
        if gap > 1e30 or np.abs(x).max(initial=0.0) > 1e30:
            status = "infeasible" if pres > tol else "unbounded"
            break
        if merit > 1e6 * best[0] and best[0] < 1e-4:
            status = "numerical_error"  # iterates degrading; fall back below
            break

        with np.errstate(all="ignore"):
            W = NTScaling(cone, s, z)
            lam = W.lam
            Gs = W.apply(G, inverse=True)
            H = P + Gs.T @ Gs
        if not (np.isfinite(H).all() and np.isfinite(lam).all()):
            status = "numerical_error"
            break
        try:
            _, solve = _kkt_solve(H, A, np.zeros(n), np.zeros(p))
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SolverError(f"KKT factorization failed: {exc}") from exc

        def newton(bs):
            # eliminate ds and dz, solve the reduced (x, y) system
            t = cone.div(lam, bs)
            u = t - W.apply(-rz, inverse=True)
            dx, dy = solve(-rx - Gs.T @ u, -ry)
            dz = W.apply(Gs @ dx + u, inverse=True)
            ds = -rz - G @ dx  # exact form of W t - W^2 dz
            return dx, dy, dz, ds

        ll = cone.prod(lam, lam)
        dxa, dya, dza, dsa = newton(-ll)
        a_aff = min(1.0, cone.max_step(s, dsa), cone.max_step(z, dza))
        sig = max(0.0, min(1.0, ((s + a_aff * dsa) @ (z + a_aff * dza)) / gap)) ** 3
        corr = cone.prod(W.apply(dsa, inverse=True), W.apply(dza))
        dx, dy, dz, ds = newton(-ll - corr + sig * mu * e)
        alpha = min(1.0, 0.99 * min(cone.max_step(s, ds), cone.max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        if alpha < 1e-12:
            status = "stalled"
            break
    if status != "optimal" and best is not None:
        merit, _, bx, by, bz, bs_, bp, bd, bg = best
        x, y, z, s, pres, dres, gap = bx, by, bz, bs_, bp, bd, bg
        if bp <= tol and bd <= tol and bg / max(cone.degree, 1) <= tol * max(1.0, abs(prog.objective(x))):
            status = "optimal"
        elif merit <= 1e3 * tol:
            status = "inaccurate"
        elif status in ("max_iter", "stalled", "numerical_error"):
            if pres > 1e3 * tol and dres <= 1e3 * tol:
                status = "infeasible"
            elif dres > 1e3 * tol and pres <= 1e3 * tol:
                status = "unbounded"
    return SolveReport(x=x, objective=prog.objective(x), status=status,
                       iterations=it, primal_residual=float(pres),
                       dual_residual=float(dres), gap=float(gap), y=y, z=z, s=s)


# ---------------------------------------------------------------------------
# QP


@dataclass
class QpProblem:
    """min 1/2 z'Hz + c'z  s.t. Aeq z = beq, z >= lb, Ain z <= bin."""

    H: np.ndarray
    c: np.ndarray
    Aeq: np.ndarray | None = None
    beq: np.ndarray | None = None
    lb: np.ndarray | None = None
    Ain: np.ndarray | None = None
    bin: np.ndarray | None = None

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, float))
        self.H = 0.5 * (H + H.T)
        if np.linalg.eigvalsh(self.H).min() < -1e-8 * max(1.0, np.abs(self.H).max()):
            raise ValueError("QP Hessian is not positive semidefinite")
        self.c = np.asarray(self.c, float)

    def to_conic(self) -> ConicProgram:
        n = self.c.size
        rows, rhs = [], []
        if self.lb is not None:
            lb = np.broadcast_to(np.asarray(self.lb, float), (n,))
            fin = np.isfinite(lb)
            rows.append(-np.eye(n)[fin])
            rhs.append(-lb[fin])
        if self.Ain is not None:
            rows.append(np.asarray(self.Ain, float).reshape(-1, n))
            rhs.append(np.asarray(self.bin, float).ravel())
        G = np.vstack(rows) if rows else np.zeros((0, n))
        h = np.concatenate(rhs) if rhs else np.zeros(0)
        return ConicProgram(c=self.c, G=G, h=h, cone=Cone(G.shape[0]), P=self.H,
                            A=self.Aeq, b=self.beq)

    def to_json(self) -> str:
        return json.dumps({k: (None if v is None else np.asarray(v).tolist())
                           for k, v in self.__dict__.items()})


def solve_qp(p: QpProblem, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    prog = p.to_conic()
    if prog.cone.dim == 0:
        # pure equality-constrained QP: one KKT solve
        (x, y), _ = _kkt_solve(prog.P, prog.A, -prog.c, prog.b, reg=0.0)
        res = prog.residuals(x, y, np.zeros(0))
        return SolveReport(x=x, objective=prog.objective(x), status="optimal", iterations=1,
                           primal_residual=res["equality"], dual_residual=res["stationarity"],
                           gap=0.0, y=y, z=np.zeros(0), s=np.zeros(0), info={"kkt": res})
    rep = solve_conic(prog, tol=tol, max_iter=max_iter)
    rep.info["kkt"] = prog.residuals(rep.x, rep.y, rep.z, rep.s)
    return rep


# ---------------------------------------------------------------------------
# perspective program


@dataclass
class PerspectiveProgram:
    """Density-space optimal control program.

    Variables are the density coefficients v (rho = Psi'v) and the
    control-density coefficients w (rho_bar = Psi'w).  Two forms:

    ``pointwise`` (default)
        min  d'v + r * sum_j omega_j * rho_bar(x_j)^2 / rho(x_j)
        with one rotated cone per collocation point x_j.
    ``kappa``
        min  d'v + r * w'Dw / kappa,   kappa <= s * 1'v,  kappa >= kappa_min
        (single global perspective; a lower bound of the pointwise cost).

    Both share the transport equality -(M0 v + Mg w)[rows] = m[rows],
    v >= 0, the optional input bound |w_k| <= u_max * v_k (which bounds
    |u| <= u_max everywhere since Psi >= 0) and optional equalities
    c_R'v = 0 for forbidden regions.
    """

    d_lin: np.ndarray
    r: float
    M0: np.ndarray
    Mg: np.ndarray
    m: np.ndarray
    colloc: np.ndarray | None = None
    weights: np.ndarray | None = None
    D_quad: np.ndarray | None = None
    s: float = 1.0
    rows: np.ndarray | None = None
    u_max: float | None = None
    c_R: np.ndarray | None = None
    form: str = "pointwise"

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("control weight r must be positive")
        K = self.M0.shape[0]
        self.rows = np.ones(K, bool) if self.rows is None else np.asarray(self.rows, bool)
        if self.form == "pointwise" and (self.colloc is None or self.weights is None):
            raise ValueError("pointwise form needs collocation points and weights")
        if self.form == "kappa":
            if self.D_quad is None:
                raise ValueError("kappa form needs D_quad")
            Dq = 0.5 * (self.D_quad + self.D_quad.T)
            if np.linalg.eigvalsh(Dq).min() <= 0:
                raise ValueError("D_quad must be positive definite")
            self.D_quad = Dq

    @property
    def K(self) -> int:
        return self.M0.shape[0]

    def n_vars(self) -> int:
        if self.form == "pointwise":
            return 2 * self.K + self.colloc.shape[0]
        return 2 * self.K + 2

    def to_conic(self) -> ConicProgram:
        K = self.K
        n = self.n_vars()
        eye = np.eye(K)
        # equality rows
        Aeq = [np.hstack([-self.M0[self.rows], -self.Mg[self.rows], np.zeros((self.rows.sum(), n - 2 * K))])]
        beq = [self.m[self.rows]]
        if self.c_R is not None:
            cr = np.atleast_2d(self.c_R)
            Aeq.append(np.hstack([cr, np.zeros((cr.shape[0], n - K))]))
            beq.append(np.zeros(cr.shape[0]))
        A, b = np.vstack(Aeq), np.concatenate(beq)

        lp_rows, lp_h = [np.hstack([-eye, np.zeros((K, n - K))])], [np.zeros(K)]
        if self.u_max is not None:
            U = float(self.u_max)
            lp_rows.append(np.hstack([-U * eye, eye, np.zeros((K, n - 2 * K))]))
            lp_rows.append(np.hstack([-U * eye, -eye, np.zeros((K, n - 2 * K))]))
            lp_h += [np.zeros(K), np.zeros(K)]
        c = np.zeros(n)
        c[:K] = self.d_lin
        soc_rows = []
        if self.form == "pointwise":
            Q = self.colloc.shape[0]
            Pq = self.colloc
            c[2 * K:] = self.r * np.asarray(self.weights, float)
            # || (2 rbar_j, t_j - rho_j) || <= t_j + rho_j
            blk = np.zeros((Q, 3, n))
            blk[:, 0, :K] = -Pq
            blk[:, 0, 2 * K + np.arange(Q)] = 0.0
            blk[:, 1, K:2 * K] = -2.0 * Pq
            blk[:, 2, :K] = Pq
            tcols = 2 * K + np.arange(Q)
            blk[np.arange(Q), 0, tcols] = -1.0
            blk[np.arange(Q), 2, tcols] = -1.0
            soc_rows.append(blk.reshape(3 * Q, n))
            soc_dims = [3] * Q
        else:
            kap, t = 2 * K, 2 * K + 1
            c[t] = 1.0
            lp_rows.append(np.zeros((1, n)))
            lp_rows[-1][0, kap] = 1.0
            lp_rows[-1][0, :K] = -self.s
            lp_h.append(np.zeros(1))
            lp_rows.append(np.zeros((1, n)))
            lp_rows[-1][0, kap] = -1.0
            lp_h.append(np.array([-KAPPA_MIN]))
            # || (2 sqrt(r) L w, t - kappa) || <= t + kappa,  D = L'L
            L = np.linalg.cholesky(self.D_quad).T
            blk = np.zeros((K + 2, n))
            blk[0, t] = -1.0
            blk[0, kap] = -1.0
            blk[1:K + 1, K:2 * K] = -2.0 * np.sqrt(self.r) * L
            blk[K + 1, t] = -1.0
            blk[K + 1, kap] = 1.0
            soc_rows.append(blk)
            soc_dims = [K + 2]
        G = np.vstack(lp_rows + soc_rows)
        n_lp = sum(r.shape[0] for r in lp_rows)
        h = np.concatenate(lp_h + [np.zeros(G.shape[0] - n_lp)])
        return ConicProgram(c=c, G=G, h=h, cone=Cone(n_lp, soc_dims), A=A, b=b)

    def objective_at(self, v, w) -> float:
        """Objective value at a (v, w) pair, +inf if rho vanishes where rho_bar does not."""
        base = float(self.d_lin @ v)
        if self.form == "pointwise":
            rho, rb = self.colloc @ v, self.colloc @ w
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(rb == 0, 0.0, rb ** 2 / rho)
            return base + self.r * float(np.asarray(self.weights) @ frac)
        kappa = self.s * v.sum()
        return base + self.r * float(w @ self.D_quad @ w) / kappa

    def to_json(self) -> str:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return json.dumps(out)


def solve_perspective(p: PerspectiveProgram, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    prog = p.to_conic()
    rep = solve_conic(prog, tol=tol, max_iter=max_iter)
    K = p.K
    v, w = rep.x[:K], rep.x[K:2 * K]
    rep.info["v"], rep.info["w"] = v, w
    rep.info["equality_residual"] = float(np.max(np.abs(p.M0[p.rows] @ v + p.Mg[p.rows] @ w + p.m[p.rows]),
                                                 initial=0.0))
    rep.info["kkt"] = prog.residuals(rep.x, rep.y, rep.z, rep.s)
    if p.form == "kappa":
        rep.info["kappa"] = float(rep.x[2 * K])
        rep.info["kappa_min"] = KAPPA_MIN
    return rep


# ---------------------------------------------------------------------------
# stabilization feasibility


def solve_feasibility(M0, Mg, eps: float, rows=None, u_max: float | None = None,
                      cap: float = 1.0, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER) -> SolveReport:
    """Find v >= 0, 1'v = 1 with -(M0 v + Mg w)[rows] >= eps.

    Phase-1 LP: maximize the common margin tau (capped at ``cap`` so the LP is
    bounded); the problem is declared infeasible at ``eps`` if tau* < eps.
    """
    M0, Mg = np.asarray(M0, float), np.asarray(Mg, float)
    K = M0.shape[0]
    rows = np.ones(K, bool) if rows is None else np.asarray(rows, bool)
    nr = int(rows.sum())
    U = 1e3 if u_max is None else float(u_max)
    if U < 0:
        raise ValueError("u_max must be nonnegative")
    kw = 0 if U == 0 else K  # a zero input bound removes w from the problem
    n = K + kw + 1
    eye = np.eye(K)
    Gr = [np.hstack([M0[rows], Mg[rows][:, :kw], np.ones((nr, 1))]),
          np.hstack([-eye, np.zeros((K, kw + 1))])]
    hr = [np.zeros(nr), np.zeros(K)]
    if kw:
        Gr.append(np.hstack([-U * eye, eye, np.zeros((K, 1))]))
        Gr.append(np.hstack([-U * eye, -eye, np.zeros((K, 1))]))
        hr += [np.zeros(K), np.zeros(K)]
    top = np.zeros((1, n))
    top[0, -1] = 1.0
    Gr.append(top)
    hr.append(np.array([cap]))
    G, h = np.vstack(Gr), np.concatenate(hr)
    c = np.zeros(n)
    c[-1] = -1.0
    A = np.zeros((1, n))
    A[0, :K] = 1.0
    prog = ConicProgram(c=c, G=G, h=h, cone=Cone(G.shape[0]), A=A, b=np.ones(1))
    rep = solve_conic(prog, tol=tol, max_iter=max_iter)
    v, tau = rep.x[:K], float(rep.x[-1])
    w = rep.x[K:K + kw] if kw else np.zeros(K)
    margin = float(np.min(-(M0[rows] @ v + Mg[rows] @ w), initial=np.inf))
    rep.info.update(v=v, w=w, margin=margin, tau=tau, eps=eps,
                    kkt=prog.residuals(rep.x, rep.y, rep.z, rep.s))
    if rep.status in ("optimal", "inaccurate") and margin < eps - 10 * tol:
        rep.status = "infeasible"
    return rep


# ---------------------------------------------------------------------------
# row-stochastic least squares


def solve_row_stochastic_ls(Gh, Ah, tol: float = 1e-10, max_iter: int = 100,
                            polish: bool = True) -> SolveReport:
    """min ||Gh X - Ah||_F  s.t.  X >= 0,  X 1 = 1.

    The objective separates over columns x_j of X while the row-sum
    constraint couples them (sum_j x_j = 1).  Each Newton step therefore
    factors K small blocks B_j = Gh'Gh + Z_j/X_j and a K x K Schur
    complement sum_j B_j^{-1} for the shared multiplier.
    """
    Gh, Ah = np.asarray(Gh, float), np.asarray(Ah, float)
    K = Gh.shape[1]
    scale = max(1.0, np.linalg.norm(Gh, 2) ** 2)
    Q = Gh.T @ Gh / scale
    Q = 0.5 * (Q + Q.T) + 1e-13 * np.eye(K)
    C = -(Gh.T @ Ah) / scale  # column j is the linear term of x_j
    X = np.full((K, K), 1.0 / K)
    Z = np.ones((K, K))
    y = np.zeros(K)
    ones = np.ones(K)
    ar = np.arange(K)
    status, it = "max_iter", 0
    for it in range(1, max_iter + 1):
        # KKT: Q x_j + c_j + y - z_j = 0 ;  sum_j x_j = 1 ;  X o Z = mu
        Rd = Q @ X + C + y[:, None] - Z
        re = X.sum(axis=1) - ones
        gap = float(np.sum(X * Z))
        mu = gap / K ** 2
        if (np.abs(Rd).max() <= tol and np.abs(re).max() <= tol and mu <= tol * 1e-2):
            status = "optimal"
            break
        D = Z / X
        B = np.repeat(Q[None, :, :], K, axis=0)
        B[:, ar, ar] += D.T  # B[j] = Q + diag(D[:, j])
        # B_j^{-1} = L_j^{-T} L_j^{-1} keeps every block (and S) symmetric PSD
        Linv = np.linalg.inv(np.linalg.cholesky(B))
        Binv = np.matmul(Linv.transpose(0, 2, 1), Linv)
        S = Binv.sum(axis=0)
        S = 0.5 * (S + S.T)
        try:
            Sf = sla.cho_factor(S)
            s_solve = lambda r: sla.cho_solve(Sf, r)  # noqa: E731
        except np.linalg.LinAlgError:
            s_solve = lambda r: np.linalg.lstsq(S, r, rcond=None)[0]  # noqa: E731

        def newton(Rc):
            # dz_j = (Rc_j - z_j dx_j)/x_j ; (Q + D_j) dx_j + dy = -Rd_j + Rc_j/x_j =: g_j
            g = -Rd + Rc / X
            Bg = np.matmul(Binv, g.T[:, :, None])[:, :, 0].T
            dy = s_solve(Bg.sum(axis=1) + re)
            dX = Bg - (Binv @ dy).T
            dZ = (Rc - Z * dX) / X
            return dX, dy, dZ

        def step(V, dV):
            neg = dV < 0
            return float(np.min(-V[neg] / dV[neg])) if neg.any() else np.inf

        dXa, dya, dZa = newton(-X * Z)
        aa = min(1.0, step(X, dXa), step(Z, dZa))
        sig = (np.sum((X + aa * dXa) * (Z + aa * dZa)) / gap) ** 3
        dX, dy, dZ = newton(-X * Z - dXa * dZa + sig * mu)
        alpha = min(1.0, 0.99 * min(step(X, dX), step(Z, dZ)))
        X += alpha * dX
        y += alpha * dy
        Z += alpha * dZ
    if polish:
        X = _polish_row_stochastic(Q, C, X, Z)
    X = np.maximum(X, 0.0)
    obj = float(np.linalg.norm(Gh @ X - Ah))
    return SolveReport(x=X, objective=obj, status=status, iterations=it,
                       primal_residual=float(np.abs(X.sum(axis=1) - 1).max()),
                       dual_residual=float(np.abs(Rd).max()) * scale, gap=gap * scale,
                       y=y * scale, z=Z * scale, info={"min_entry": float(X.min())})


def _polish_row_stochastic(Q, C, X, Z):
    """Active-set refinement: fix entries the IPM drove to zero and solve the
    equality-constrained problem on the remaining support exactly.  Kept
    only if it stays feasible and does not increase the objective."""
    K = X.shape[0]
    free = X > Z  # strict complementarity split
    if not free.any(axis=1).all():
        return X

    def obj(M):
        return 0.5 * np.sum(M * (Q @ M)) + np.sum(C * M)

    # On the free set F_j of column j: Q_FF x_F + c_F + y_F = 0, and the row
    # sums give a K x K system for the shared multiplier y.
    S = np.zeros((K, K))
    t = np.zeros(K)
    sols = []
    for j in range(K):
        F = np.where(free[:, j])[0]
        if not len(F):
            sols.append((F, None, None))
            continue
        QF = Q[np.ix_(F, F)]
        try:
            cf = sla.cho_factor(QF)
            Qi = sla.cho_solve(cf, np.eye(len(F)))
        except np.linalg.LinAlgError:
            return X
        S[np.ix_(F, F)] += Qi
        a = Qi @ C[F, j]
        t[F] += a
        sols.append((F, Qi, a))
    try:
        y = np.linalg.solve(S, -1.0 - t)
    except np.linalg.LinAlgError:
        return X
    Xp = np.zeros_like(X)
    for j, (F, Qi, a) in enumerate(sols):
        if len(F):
            Xp[F, j] = -a - Qi @ y[F]
    if Xp.min() < -1e-12 or obj(Xp) > obj(X) + 1e-12 * max(1.0, abs(obj(X))):
        return X
    return np.maximum(Xp, 0.0)
