"""Self-contained solver for the per-step command program.

The program minimizes ``|u|^2 + gamma * s`` over stacked robot velocities
``u`` and slack ``s >= 0`` subject to one slacked linear tracking row, one
linear safety row, and per-robot convex energy and speed constraints.  With
the quadratic consumption model the energy constraint completes the square
to a disc, so the feasible set is an intersection of halfspaces and discs.

At the optimum the slack equals ``max(0, tracking residual)``, which splits
the problem into two Euclidean projections: the origin projected onto the
set including the tracking halfspace (residual <= 0 branch), and the pulled
point ``-gamma g / 2`` projected onto the set without it (residual >= 0
branch).  Each projection is computed by operator splitting -- alternating
projections with dual correction updates (Dykstra) over the halfspaces and
the closed-form per-robot disc intersections -- and finished to machine
precision by an active-set Newton step.  The better valid branch wins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InfeasibleProgramError
from .world import LINEAR, QUADRATIC


class SolveStatus(Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"


@dataclass
class ConvexProgram:
    """One control step's optimization data.

    The energy constraint per robot is either a disc
    ``|u_i - mu_i| <= sqrt(r_sq_i)`` (quadratic consumption) or the set
    ``c1 |u_i| - kappa d_i . u_i <= rhs_i`` (linear consumption).  The point
    ``u_i = u_max * dhat_i`` with slack absorbing the tracking row is always
    feasible when every robot's energy margin is nonnegative.
    """

    gamma: float
    clf_g: np.ndarray  # (2n,)
    clf_offset: float  # b_v: row reads clf_g . u + b_v <= s
    cbf_a: np.ndarray  # (2n,)
    cbf_offset: float  # b_s: row reads cbf_a . u + b_s >= 0
    u_max: float
    dhat: np.ndarray  # (n, 2) unit path directions (zero rows inside charger)
    energy_mode: str = QUADRATIC
    mu: np.ndarray | None = None  # (n, 2) disc centers, quadratic mode
    r_sq: np.ndarray | None = None  # (n,) squared disc radii, quadratic mode
    lin_c1: float | None = None
    lin_kappa: float | None = None
    lin_rhs: np.ndarray | None = None  # (n,), linear mode
    _radii: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.clf_g = np.asarray(self.clf_g, dtype=float)
        self.cbf_a = np.asarray(self.cbf_a, dtype=float)
        self.dhat = np.asarray(self.dhat, dtype=float)
        n = self.dhat.shape[0]
        if self.clf_g.shape != (2 * n,) or self.cbf_a.shape != (2 * n,):
            raise ValueError("row coefficient length must be 2 * n_robots")
        if self.gamma <= 0 or self.u_max <= 0:
            raise ValueError("gamma and u_max must be positive")
        if self.energy_mode == QUADRATIC:
            self.mu = np.asarray(self.mu, dtype=float)
            self.r_sq = np.asarray(self.r_sq, dtype=float)
            for i, r2 in enumerate(self.r_sq):
                if r2 < 0:
                    raise InfeasibleProgramError(
                        i,
                        f"robot {i}: energy disc has negative squared radius "
                        f"{r2:.3e}; energy margin already violated",
                    )
        else:
            self.lin_rhs = np.asarray(self.lin_rhs, dtype=float)

    @property
    def n_robots(self) -> int:
        return self.dhat.shape[0]


@dataclass
class Solution:
    u: np.ndarray
    s: float
    status: SolveStatus
    kkt_residual: float
    iterations: int
    _state: tuple = field(default=None, repr=False, compare=False)

    def objective(self, gamma: float) -> float:
        return float(self.u @ self.u + gamma * self.s)


def feasible_point(p: ConvexProgram) -> tuple[np.ndarray, float]:
    """The always-feasible anchor: full speed along each planned path.

    Robots with a zero path direction (already at the charger) get a zero
    command.  Raises when a robot's energy constraint is empty, which only
    happens once its energy margin has gone negative.
    """
    if p.energy_mode == QUADRATIC:
        for i, r2 in enumerate(p.r_sq):
            if r2 < 0:
                raise InfeasibleProgramError(
                    i, f"robot {i}: energy margin violated (r^2 = {r2:.3e})"
                )
    u = (p.u_max * p.dhat).ravel()
    viol = constraint_violations(p, u, None)
    if p.energy_mode == LINEAR and viol["energy"] > 1e-9:
        worst = int(np.argmax(_linear_energy_residuals(p, u)))
        raise InfeasibleProgramError(
            worst, f"robot {worst}: linear energy constraint empty at anchor"
        )
    s = max(0.0, float(p.clf_g @ u) + p.clf_offset)
    return u, s


def _linear_energy_residuals(p: ConvexProgram, u: np.ndarray) -> np.ndarray:
    ui = u.reshape(-1, 2)
    speed = np.hypot(ui[:, 0], ui[:, 1])
    along = (ui * p.dhat).sum(axis=1)
    return p.lin_c1 * speed - p.lin_kappa * along - p.lin_rhs


def constraint_violations(p: ConvexProgram, u: np.ndarray, s: float | None) -> dict:
    """Worst-case violation of every constraint family at (u, s)."""
    ui = u.reshape(-1, 2)
    speed_viol = float(np.hypot(ui[:, 0], ui[:, 1]).max(initial=0.0) - p.u_max)
    if p.energy_mode == QUADRATIC:
        dist = np.sqrt(((ui - p.mu) ** 2).sum(axis=1))
        energy_viol = float(np.max(dist - np.sqrt(np.maximum(p.r_sq, 0.0)), initial=0.0))
    else:
        energy_viol = float(np.max(_linear_energy_residuals(p, u), initial=0.0))
    cbf_viol = float(-(p.cbf_a @ u + p.cbf_offset))
    out = {
        "speed": max(0.0, speed_viol),
        "energy": max(0.0, energy_viol),
        "cbf": max(0.0, cbf_viol),
    }
    if s is not None:
        out["clf"] = max(0.0, float(p.clf_g @ u) + p.clf_offset - s)
        out["slack_sign"] = max(0.0, -s)
    return out


def _project_two_discs(pts, radius, centers, radii):
    """Euclidean projection of each row of ``pts`` onto disc(0, radius) ∩ disc(center, r).

    Exact closed form in 2D: keep the point if inside both; otherwise the
    single-disc projection if it lands in the other disc; otherwise the
    nearer of the two circle-intersection points.
    """
    pts = np.asarray(pts, dtype=float)
    out = np.empty_like(pts)
    for i in range(pts.shape[0]):
        out[i] = _project_two_discs_one(pts[i], radius, centers[i], radii[i])
    return out


def _project_two_discs_one(pt, big_r, mu, r):
    px, py = pt
    mx, my = mu
    n0 = math.hypot(px, py)
    in0 = n0 <= big_r + 1e-15
    dx, dy = px - mx, py - my
    n1 = math.hypot(dx, dy)
    in1 = n1 <= r + 1e-15
    if in0 and in1:
        return pt
    if not in0:
        scale = big_r / n0
        q = (px * scale, py * scale)
        if math.hypot(q[0] - mx, q[1] - my) <= r + 1e-12:
            return np.array(q)
    if not in1 and n1 > 0:
        scale = r / n1
        q = (mx + dx * scale, my + dy * scale)
        if math.hypot(q[0], q[1]) <= big_r + 1e-12:
            return np.array(q)
    # Both single-disc projections left the other disc: the answer lies on
    # the intersection circle of the two boundaries.
    d = math.hypot(mx, my)
    if d == 0.0:
        # concentric; the smaller disc is the intersection
        rr = min(big_r, r)
        if n0 == 0.0:
            return np.array((rr, 0.0))
        return np.array((px * rr / n0, py * rr / n0))
    a = (big_r**2 - r**2 + d**2) / (2.0 * d)
    h_sq = big_r**2 - a**2
    h = math.sqrt(max(0.0, h_sq))
    ux, uy = mx / d, my / d
    bx, by = a * ux, a * uy
    c1 = (bx - h * uy, by + h * ux)
    c2 = (bx + h * uy, by - h * ux)
    d1 = (c1[0] - px) ** 2 + (c1[1] - py) ** 2
    d2 = (c2[0] - px) ** 2 + (c2[1] - py) ** 2
    return np.array(c1 if d1 <= d2 else c2)


def _project_linear_energy(pt, c1, kappa, d, rhs):
    """Projection onto {v : c1 |v| - kappa d.v <= rhs} (linear consumption set)."""
    px, py = pt
    val = c1 * math.hypot(px, py) - kappa * (d[0] * px + d[1] * py)
    if val <= rhs + 1e-15:
        return np.array(pt, dtype=float)

    def active_point(lam):
        wx = px + lam * kappa * d[0]
        wy = py + lam * kappa * d[1]
        wn = math.hypot(wx, wy)
        t = wn - lam * c1
        if t <= 0.0 or wn == 0.0:
            return np.zeros(2), -rhs  # v = 0; residual of constraint at 0
        vx, vy = wx * t / wn, wy * t / wn
        res = c1 * t - kappa * (d[0] * vx + d[1] * vy) - rhs
        return np.array((vx, vy)), res

    lo, hi = 0.0, 1.0
    _, res_hi = active_point(hi)
    guard = 0
    while res_hi > 0 and guard < 200:
        hi *= 2.0
        _, res_hi = active_point(hi)
        guard += 1
    for _ in range(120):
        mid = 0.5 * (lo + hi)
        _, res = active_point(mid)
        if res > 0:
            lo = mid
        else:
            hi = mid
    v, _ = active_point(hi)
    return v


def _project_two_discs_batch(pts, big_r, mu, radii):
    """Vectorized two-disc projection across robots (same logic as the
    scalar version; the intersection-circle branch is evaluated only when
    some robot needs it)."""
    n0 = np.hypot(pts[:, 0], pts[:, 1])
    rel = pts - mu
    n1 = np.hypot(rel[:, 0], rel[:, 1])
    in0 = n0 <= big_r + 1e-15
    in1 = n1 <= radii + 1e-15
    done = in0 & in1
    if done.all():
        return pts.copy()
    n0_safe = np.where(n0 > 0, n0, 1.0)
    q1 = pts * np.minimum(1.0, big_r / n0_safe)[:, None]
    n1_safe = np.where(n1 > 0, n1, 1.0)
    q2 = mu + rel * np.minimum(1.0, radii / n1_safe)[:, None]
    q1_ok = np.hypot(q1[:, 0] - mu[:, 0], q1[:, 1] - mu[:, 1]) <= radii + 1e-12
    q2_ok = np.hypot(q2[:, 0], q2[:, 1]) <= big_r + 1e-12
    out = np.where(
        done[:, None], pts, np.where(q1_ok[:, None], q1, np.where(q2_ok[:, None], q2, 0.0))
    )
    hard = ~(done | q1_ok | q2_ok)
    for i in np.flatnonzero(hard):
        out[i] = _project_two_discs_one(pts[i], big_r, mu[i], radii[i])
    return out


def _project_robot_sets(p: ConvexProgram, u_flat: np.ndarray) -> np.ndarray:
    """Project stacked velocities onto every robot's speed ∩ energy set."""
    ui = u_flat.reshape(-1, 2)
    if p.energy_mode == QUADRATIC:
        if p._radii is None:
            p._radii = np.sqrt(np.maximum(p.r_sq, 0.0))
        return _project_two_discs_batch(ui, p.u_max, p.mu, p._radii).ravel()
    out = np.empty_like(ui)
    for i in range(ui.shape[0]):
        v = ui[i]
        # Dykstra between the speed disc and the consumption set; both
        # projections are cheap and the sets intersect (anchor feasibility).
        q = np.zeros(2)
        r = np.zeros(2)
        x = v.copy()
        for _ in range(60):
            y = x + q
            n = math.hypot(y[0], y[1])
            x1 = y if n <= p.u_max else y * (p.u_max / n)
            q = y - x1
            z = x1 + r
            x2 = _project_linear_energy(z, p.lin_c1, p.lin_kappa, p.dhat[i], p.lin_rhs[i])
            r = z - x2
            if np.max(np.abs(x2 - x)) < 1e-14:
                x = x2
                break
            x = x2
        out[i] = x
    return out.ravel()


def _circle_intersections(big_r: float, mu, r: float):
    """Intersection points of circle(0, big_r) and circle(mu, r), or None."""
    d = math.hypot(mu[0], mu[1])
    if d < 1e-300:
        return None
    a = (big_r**2 - r**2 + d**2) / (2.0 * d)
    h_sq = big_r**2 - a**2
    if h_sq < 0.0:
        return None
    h = math.sqrt(h_sq)
    ux, uy = mu[0] / d, mu[1] / d
    bx, by = a * ux, a * uy
    return (
        np.array((bx - h * uy, by + h * ux)),
        np.array((bx + h * uy, by - h * ux)),
    )


def _polish(
    p: ConvexProgram, u: np.ndarray, pull: np.ndarray, with_clf: bool
) -> np.ndarray | None:
    """Active-set Newton refinement of an approximate projection.

    Solves min |u - pull|^2 subject to the safety halfspace, the per-robot
    disc sets and (optionally) the tracking halfspace, starting from the
    active set detected at ``u``.  Multiplier initialization is least
    squares, the Newton iteration is damped, and one constraint is added or
    dropped per repair pass.  Returns the refined point or None; quadratic
    energy mode only.
    """
    if p.energy_mode != QUADRATIC:
        return None
    n = p.n_robots
    g = p.clf_g
    a = p.cbf_a
    g_norm = float(np.linalg.norm(g))
    a_norm = float(np.linalg.norm(a))
    act_tol = 1e-5 * max(1.0, p.u_max)
    feas_tol = 1e-9
    radii = np.sqrt(np.maximum(p.r_sq, 0.0))

    ui = u.reshape(n, 2).copy()
    zero_disc = radii <= 1e-12
    ui[zero_disc] = p.mu[zero_disc]
    speed_act = np.abs(np.hypot(ui[:, 0], ui[:, 1]) - p.u_max) <= act_tol
    energy_act = (
        np.abs(np.hypot(ui[:, 0] - p.mu[:, 0], ui[:, 1] - p.mu[:, 1]) - radii) <= act_tol
    ) & ~zero_disc
    vertex = speed_act & energy_act
    for r in np.flatnonzero(vertex):
        pts = _circle_intersections(p.u_max, p.mu[r], radii[r])
        if pts is None:
            vertex[r] = False
            continue
        d0 = (pts[0][0] - ui[r, 0]) ** 2 + (pts[0][1] - ui[r, 1]) ** 2
        d1 = (pts[1][0] - ui[r, 0]) ** 2 + (pts[1][1] - ui[r, 1]) ** 2
        ui[r] = pts[0] if d0 <= d1 else pts[1]
    speed_act &= ~vertex
    energy_act &= ~vertex
    pinned = zero_disc | vertex

    clf_scale = max(1.0, g_norm * p.u_max)
    clf_act = (
        with_clf
        and g_norm > 1e-12
        and abs(float(g @ ui.ravel()) + p.clf_offset) <= act_tol * clf_scale
    )
    cbf_act = a_norm > 1e-12 and abs(float(a @ ui.ravel()) + p.cbf_offset) <= act_tol * max(
        1.0, a_norm * p.u_max
    )

    for _attempt in range(24):
        free_idx = np.flatnonzero(~pinned)
        # unknowns are the active multipliers only; for fixed multipliers the
        # stationarity equations give each free robot's command in closed
        # form, so Newton runs on the small well-scaled equality system
        mult_keys = []
        if clf_act:
            mult_keys.append(("clf", -1))
        if cbf_act:
            mult_keys.append(("cbf", -1))
        for r in free_idx:
            if speed_act[r]:
                mult_keys.append(("speed", r))
            if energy_act[r]:
                mult_keys.append(("energy", r))
        dim = len(mult_keys)
        pull2 = pull.reshape(n, 2)

        def commands(m):
            nu = lam = 0.0
            beta = np.zeros(n)
            eta = np.zeros(n)
            for val, (kind, r) in zip(m, mult_keys):
                if kind == "clf":
                    nu = val
                elif kind == "cbf":
                    lam = val
                elif kind == "speed":
                    beta[r] = val
                else:
                    eta[r] = val
            out = ui.copy()
            with np.errstate(all="ignore"):
                denom = 2.0 + 2.0 * beta + 2.0 * eta
                denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
                g2 = g.reshape(n, 2)
                a2 = a.reshape(n, 2)
                num = 2.0 * pull2 + lam * a2 - nu * g2 + 2.0 * eta[:, None] * p.mu
                free = ~pinned
                out[free] = num[free] / denom[free, None]
            return out

        def residual(m):
            uu = commands(m)
            uf = uu.ravel()
            R = np.empty(dim)
            for j, (kind, r) in enumerate(mult_keys):
                if kind == "clf":
                    R[j] = float(g @ uf) + p.clf_offset
                elif kind == "cbf":
                    R[j] = float(a @ uf) + p.cbf_offset
                elif kind == "speed":
                    R[j] = uu[r] @ uu[r] - p.u_max**2
                else:
                    rel = uu[r] - p.mu[r]
                    R[j] = rel @ rel - p.r_sq[r]
            return R

        m = np.zeros(dim)
        ok = True
        if dim > 0:
            # least-squares initialization from stationarity at the iterate
            rows, rhs = [], []
            for r in free_idx:
                base = 2.0 * (ui[r] - pull2[r])
                for axis in (0, 1):
                    row = np.zeros(dim)
                    for j, (kind, rr) in enumerate(mult_keys):
                        if kind == "clf":
                            row[j] = g[2 * r + axis]
                        elif kind == "cbf":
                            row[j] = -a[2 * r + axis]
                        elif kind == "speed" and rr == r:
                            row[j] = 2.0 * ui[r, axis]
                        elif kind == "energy" and rr == r:
                            row[j] = 2.0 * (ui[r, axis] - p.mu[r, axis])
                    rows.append(row)
                    rhs.append(-base[axis])
            if rows:
                m, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)

            def jacobian(m):
                """Analytic derivative of the active equalities wrt multipliers.

                u_r is rational in the multipliers, so each du_r/dm_j is
                closed form and the equality rows chain directly.
                """
                nu = lam = 0.0
                beta = np.zeros(n)
                eta = np.zeros(n)
                for val, (kind, r) in zip(m, mult_keys):
                    if kind == "clf":
                        nu = val
                    elif kind == "cbf":
                        lam = val
                    elif kind == "speed":
                        beta[r] = val
                    else:
                        eta[r] = val
                uu = commands(m)
                g2 = g.reshape(n, 2)
                a2 = a.reshape(n, 2)
                denom = 2.0 + 2.0 * beta + 2.0 * eta
                denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
                # du[r] / dm[j], shape (dim, n, 2); pinned robots do not move
                du = np.zeros((dim, n, 2))
                free = ~pinned
                for j, (kind, r) in enumerate(mult_keys):
                    if kind == "clf":
                        du[j][free] = -g2[free] / denom[free, None]
                    elif kind == "cbf":
                        du[j][free] = a2[free] / denom[free, None]
                    elif kind == "speed":
                        if free[r]:
                            du[j, r] = -2.0 * uu[r] / denom[r]
                    else:
                        if free[r]:
                            du[j, r] = 2.0 * (p.mu[r] - uu[r]) / denom[r]
                J = np.empty((dim, dim))
                for i_row, (kind, r) in enumerate(mult_keys):
                    if kind == "clf":
                        J[i_row] = (du * g2[None, :, :]).sum(axis=(1, 2))
                    elif kind == "cbf":
                        J[i_row] = (du * a2[None, :, :]).sum(axis=(1, 2))
                    elif kind == "speed":
                        J[i_row] = 2.0 * (du[:, r, :] * uu[r][None, :]).sum(axis=1)
                    else:
                        J[i_row] = 2.0 * (du[:, r, :] * (uu[r] - p.mu[r])[None, :]).sum(axis=1)
                return J

            scale_r = max(1.0, p.u_max) ** 2
            for _newton in range(80):
                R = residual(m)
                r_norm = np.max(np.abs(R))
                if r_norm < 1e-13 * scale_r:
                    break
                try:
                    dm = np.linalg.solve(jacobian(m), -R)
                except np.linalg.LinAlgError:
                    ok = False
                    break
                step = 1.0
                for _bt in range(50):
                    R_try = residual(m + step * dm)
                    if np.all(np.isfinite(R_try)) and np.max(np.abs(R_try)) < r_norm:
                        break
                    step *= 0.5
                else:
                    ok = False
                    break
                m = m + step * dm
            if ok:
                ok = np.max(np.abs(residual(m))) < 1e-9 * scale_r
        if not ok:
            return None

        u_mat = commands(m)
        u_flat = u_mat.ravel()
        nu = lam = 0.0
        worst_drop = None
        worst_val = -1e-9
        for val, (kind, r) in zip(m, mult_keys):
            if kind == "clf":
                nu = val
            elif kind == "cbf":
                lam = val
            elif val < worst_val:
                worst_val = val
                worst_drop = (kind, r)

        cone_fail = None
        for r in np.flatnonzero(vertex):
            uu = u_flat[2 * r : 2 * r + 2]
            res = -(
                2.0 * (uu - pull[2 * r : 2 * r + 2])
                + nu * g[2 * r : 2 * r + 2]
                - lam * a[2 * r : 2 * r + 2]
            )
            n1 = 2.0 * uu
            n2v = 2.0 * (uu - p.mu[r])
            det = n1[0] * n2v[1] - n1[1] * n2v[0]
            if abs(det) < 1e-12:
                cone_fail = (r, True)
                break
            beta = (res[0] * n2v[1] - res[1] * n2v[0]) / det
            eta = (n1[0] * res[1] - n1[1] * res[0]) / det
            if beta < -1e-7 or eta < -1e-7:
                cone_fail = (r, beta >= eta)
                break

        viol = constraint_violations(p, u_flat, None)
        clf_viol = max(0.0, float(g @ u_flat) + p.clf_offset) if with_clf else 0.0
        feas_ok = max(viol["speed"], viol["energy"], viol["cbf"]) <= feas_tol
        clf_ok = not with_clf or clf_act or clf_viol <= feas_tol * clf_scale
        mult_ok = nu >= -1e-9 and lam >= -1e-9

        if mult_ok and worst_drop is None and cone_fail is None and feas_ok and clf_ok:
            return u_flat

        if cone_fail is not None:
            r, keep_speed = cone_fail
            vertex[r] = False
            pinned[r] = False
            speed_act[r] = keep_speed
            energy_act[r] = not keep_speed
            continue
        if worst_drop is not None:
            kind, r = worst_drop
            if kind == "speed":
                speed_act[r] = False
            else:
                energy_act[r] = False
            continue
        if not mult_ok:
            if nu < -1e-9:
                clf_act = False
            elif lam < -1e-9:
                cbf_act = False
            continue
        # activate exactly one constraint per repair pass (activating many at
        # once can assemble a contradictory equality system)
        best = None  # (violation, kind, robot)
        if not clf_ok and g_norm > 1e-12 and not clf_act:
            best = (clf_viol / clf_scale, "clf", -1)
        if viol["cbf"] > feas_tol and a_norm > 1e-12 and not cbf_act:
            v = viol["cbf"] / max(1.0, a_norm)
            if best is None or v > best[0]:
                best = (v, "cbf", -1)
        ui_new = u_flat.reshape(n, 2)
        for r in range(n):
            if pinned[r]:
                continue
            sv = math.hypot(ui_new[r, 0], ui_new[r, 1]) - p.u_max
            if sv > feas_tol and not speed_act[r] and (best is None or sv > best[0]):
                best = (sv, "speed", r)
            ev = math.hypot(*(ui_new[r] - p.mu[r])) - radii[r]
            if ev > feas_tol and not energy_act[r] and (best is None or ev > best[0]):
                best = (ev, "energy", r)
        if best is None:
            return None
        _, kind, r = best
        if kind == "clf":
            clf_act = True
        elif kind == "cbf":
            cbf_act = True
        elif kind == "speed":
            speed_act[r] = True
        else:
            energy_act[r] = True
        continue
    return None


def _dykstra_project(
    p: ConvexProgram,
    pull: np.ndarray,
    with_clf: bool,
    max_sweeps: int,
    tol: float,
    state: tuple | None = None,
) -> tuple[np.ndarray, int, tuple, bool]:
    """Alternating projections with dual corrections onto the constraint set.

    Projects ``pull`` onto the intersection of the safety halfspace, the
    per-robot disc sets, and optionally the tracking halfspace.  ``state``
    resumes a previous call on the same pull point.  Returns the iterate,
    the sweep count, the resumable state, and a convergence flag.
    """
    n2 = 2 * p.n_robots
    g = p.clf_g
    a = p.cbf_a
    g_nsq = float(g @ g)
    a_nsq = float(a @ a)
    use_clf = with_clf and g_nsq > 1e-30
    use_cbf = a_nsq > 1e-30

    if state is None:
        x = pull.copy()
        q_clf = np.zeros(n2)
        q_cbf = np.zeros(n2)
        q_k = np.zeros(n2)
    else:
        x, q_clf, q_cbf, q_k = state
    sweeps = 0
    converged = False
    # the iterate can plateau for long stretches while the corrections still
    # move, so convergence must track both
    check = np.concatenate([x, q_clf, q_cbf, q_k])
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        if use_clf:
            y = x + q_clf
            viol = float(g @ y) + p.clf_offset
            x_new = y - (viol / g_nsq) * g if viol > 0.0 else y
            q_clf = y - x_new
            x = x_new
        if use_cbf:
            y = x + q_cbf
            viol = -(float(a @ y) + p.cbf_offset)
            x_new = y + (viol / a_nsq) * a if viol > 0.0 else y
            q_cbf = y - x_new
            x = x_new
        y = x + q_k
        x_new = _project_robot_sets(p, y)
        q_k = y - x_new
        x = x_new
        if sweep % 4 == 3 or sweep == max_sweeps - 1:
            now = np.concatenate([x, q_clf, q_cbf, q_k])
            if float(np.max(np.abs(now - check))) < tol:
                converged = True
                break
            check = now
    return x, sweeps, (x, q_clf, q_cbf, q_k), converged


def _min_linear_over_robot_set(gi, u_max, mu, r):
    """Exact minimum of gi . u over disc(0, u_max) ∩ disc(mu, r)."""
    gn = math.hypot(gi[0], gi[1])
    if gn < 1e-300:
        return 0.0
    if r <= 1e-12:
        return float(gi @ mu)
    ghat = gi / gn
    best = math.inf
    c = -u_max * ghat
    if math.hypot(c[0] - mu[0], c[1] - mu[1]) <= r + 1e-12:
        best = min(best, float(gi @ c))
    c = mu - r * ghat
    if math.hypot(c[0], c[1]) <= u_max + 1e-12:
        best = min(best, float(gi @ c))
    pts = _circle_intersections(u_max, mu, r)
    if pts is not None:
        best = min(best, float(gi @ pts[0]), float(gi @ pts[1]))
    return best


def _clf_attainable(p: ConvexProgram) -> bool:
    """Whether the tracking row can reach zero residual inside the robot sets.

    When it cannot, the zero-slack branch of the objective split is empty and
    is skipped (the CBF halfspace only shrinks the set further).
    """
    if p.energy_mode != QUADRATIC:
        return True
    total = p.clf_offset
    radii = np.sqrt(np.maximum(p.r_sq, 0.0))
    for i in range(p.n_robots):
        total += _min_linear_over_robot_set(
            p.clf_g[2 * i : 2 * i + 2], p.u_max, p.mu[i], radii[i]
        )
    return total <= 1e-12


def _restore_feasibility(p: ConvexProgram, u: np.ndarray) -> np.ndarray:
    """Exact repair: project per-robot sets, then shrink toward the anchor
    until the safety row holds."""
    u = _project_robot_sets(p, u)
    a = p.cbf_a
    if float(a @ a) > 1e-30:
        viol = -(float(a @ u) + p.cbf_offset)
        if viol > 0.0:
            anchor = (p.u_max * p.dhat).ravel()
            denom = float(a @ (anchor - u))
            t = 1.0 if denom <= viol else viol / denom
            u = u + t * (anchor - u)
    return u


def solve(
    p: ConvexProgram,
    warm_start: Solution | None = None,
    tol: float = 1e-7,
    max_iter: int = 5000,
) -> Solution:
    """Solve the per-step program to ``tol`` by split projections.

    Evaluates the two hinge branches of the slack-eliminated objective (see
    module docstring), each as a Dykstra projection finished by an
    active-set Newton step, and returns the better valid branch.  The
    returned point satisfies every constraint up to numerical zero; the
    suboptimality is tied to the projection tolerance.

    ``warm_start`` may shorten the branch evaluation by seeding the active
    set detection; it never changes the returned point beyond ``tol``.
    """
    n2 = 2 * p.n_robots
    g = p.clf_g
    scale = max(1.0, p.u_max)
    branch_budget = max(60, max_iter // 2)
    warm_points = {}
    if warm_start is not None and warm_start._state is not None:
        warm_points = warm_start._state
    elif warm_start is not None and warm_start.u.shape == (n2,):
        warm_points = {"a": warm_start.u, "b": warm_start.u}

    def eval_branch(key, pull, with_clf):
        """Projection of pull onto the branch set; (point, converged, sweeps)."""
        # cheap seeds first: the previous step's branch point, then the pull
        # clipped into the per-robot sets; a verified refinement is exact
        seeds = []
        if warm_points.get(key) is not None:
            seeds.append(warm_points[key])
        seeds.append(_project_robot_sets(p, pull))
        for seed in seeds:
            refined = _polish(p, seed, pull, with_clf)
            if refined is not None:
                return refined, True, 0
        # alternate projection sweeps with polish attempts: the active set
        # usually settles long before the iterate itself converges
        x = pull
        state = None
        total = 0
        for chunk in (40, 200, 1000, branch_budget):
            budget = min(chunk, branch_budget - total)
            if budget <= 0:
                break
            x, sweeps, state, done = _dykstra_project(
                p, pull, with_clf, budget, 1e-12 * scale, state
            )
            total += sweeps
            refined = _polish(p, x, pull, with_clf)
            if refined is not None:
                return refined, True, total
            if done:
                break
        # fall back to the raw iterate with exact feasibility repair
        x = _restore_feasibility(p, x)
        if with_clf:
            viol = float(g @ x) + p.clf_offset
            g_nsq = float(g @ g)
            if viol > 0.0 and g_nsq > 1e-30:
                x = _restore_feasibility(p, x - (viol / g_nsq) * g)
        return x, total < branch_budget, total

    def objective(u):
        return float(u @ u) + p.gamma * max(0.0, float(g @ u) + p.clf_offset)

    candidates = []
    state = {"a": None, "b": None}
    it_total = 0
    if _clf_attainable(p):
        u_a, conv_a, it_a = eval_branch("a", np.zeros(n2), True)
        candidates.append((objective(u_a), u_a, conv_a))
        state["a"] = u_a
        it_total += it_a
    pull_b = -0.5 * p.gamma * g
    u_b, conv_b, it_b = eval_branch("b", pull_b, False)
    state["b"] = u_b
    it_total += it_b
    q_b = float(g @ u_b) + p.clf_offset
    if not candidates or q_b >= -1e-10 * max(1.0, float(np.linalg.norm(g)) * scale):
        candidates.append((objective(u_b), u_b, conv_b))
    candidates.sort(key=lambda c: c[0])
    _, u_best, converged = candidates[0]

    s = max(0.0, float(g @ u_best) + p.clf_offset)
    viol = constraint_violations(p, u_best, s)
    kkt = max(viol.values())
    return Solution(
        u=u_best,
        s=s,
        status=SolveStatus.OPTIMAL if converged else SolveStatus.MAX_ITERATIONS,
        kkt_residual=kkt,
        iterations=it_total,
        _state=state,
    )
