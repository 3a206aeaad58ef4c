"""Independent reference methods used only by the test suite.

Nothing here shares code with the shipped solver or planner: the program
oracle is exhaustive polar-grid search (single robot) or long-horizon
accelerated projected gradient with Dykstra projections (any robot count),
and the geodesic oracle is Dijkstra over the 8-connected cell graph.
"""

from __future__ import annotations

import heapq
import math

import numpy as np

from densityctl.qp import ConvexProgram


def program_objective(p: ConvexProgram, u: np.ndarray) -> float:
    """Objective with the slack eliminated: |u|^2 + gamma max(0, g.u + b_v)."""
    return float(u @ u + p.gamma * max(0.0, float(p.clf_g @ u) + p.clf_offset))


def program_feasible(p: ConvexProgram, u: np.ndarray, tol: float = 1e-9) -> bool:
    ui = u.reshape(-1, 2)
    if np.any(np.hypot(ui[:, 0], ui[:, 1]) > p.u_max + tol):
        return False
    if p.energy_mode == "quadratic":
        dist = np.sqrt(((ui - p.mu) ** 2).sum(axis=1))
        if np.any(dist > np.sqrt(np.maximum(p.r_sq, 0.0)) + tol):
            return False
    else:
        speed = np.hypot(ui[:, 0], ui[:, 1])
        along = (ui * p.dhat).sum(axis=1)
        if np.any(p.lin_c1 * speed - p.lin_kappa * along - p.lin_rhs > tol):
            return False
    if float(p.cbf_a @ u) + p.cbf_offset < -tol:
        return False
    return True


def polar_grid_solve(p: ConvexProgram, passes: int = 48) -> float:
    """Exhaustive polar-grid search over the speed disc, single robot only.

    A dense global polar scan seeds local Cartesian window refinements (the
    problem is convex, so any local basin is the global one); the windows
    also track the feasible anchor so razor-thin feasible lenses near a zero
    energy margin are not missed.  Returns the best objective value found.
    """
    assert p.n_robots == 1

    def feasible_mask(pts):
        tol = 1e-13 * max(1.0, p.u_max)
        ok = np.hypot(pts[:, 0], pts[:, 1]) <= p.u_max + tol
        if p.energy_mode == "quadratic":
            d = np.sqrt(((pts - p.mu[0]) ** 2).sum(axis=1))
            ok &= d <= math.sqrt(max(p.r_sq[0], 0.0)) + tol
        else:
            speed = np.hypot(pts[:, 0], pts[:, 1])
            along = pts @ p.dhat[0]
            ok &= p.lin_c1 * speed - p.lin_kappa * along - p.lin_rhs[0] <= tol
        ok &= pts @ p.cbf_a + p.cbf_offset >= -tol
        return ok

    def objective_arr(pts):
        clf = pts @ p.clf_g + p.clf_offset
        return (pts**2).sum(axis=1) + p.gamma * np.maximum(0.0, clf)

    best_obj = math.inf
    best_pt = None

    def consider(pts):
        nonlocal best_obj, best_pt
        ok = feasible_mask(pts)
        if not ok.any():
            return
        obj = objective_arr(pts)
        obj[~ok] = math.inf
        j = int(np.argmin(obj))
        if obj[j] < best_obj:
            best_obj = float(obj[j])
            best_pt = pts[j].copy()

    seeds = [np.zeros(2), (p.u_max * p.dhat).ravel()]
    consider(np.array(seeds))

    rs = np.linspace(0.0, p.u_max, 280)
    ts = np.linspace(0.0, 2.0 * math.pi, 1120, endpoint=False)
    rr, tt = np.meshgrid(rs, ts, indexing="ij")
    consider(np.stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()], axis=1))

    # the optimum of a convex 2D program is interior-stationary or sits on a
    # constraint curve (or the objective kink line); scan each curve densely
    # with 1-D refinement, and test every curve-intersection vertex
    def scan_curve(param_to_point, t_lo, t_hi):
        nonlocal best_obj, best_pt
        n0 = 4096
        ts = np.linspace(t_lo, t_hi, n0)
        w = (t_hi - t_lo) / n0 * 3.0
        center = None
        pts = param_to_point(ts)
        ok = feasible_mask(pts)
        if ok.any():
            obj = objective_arr(pts)
            obj[~ok] = math.inf
            j = int(np.argmin(obj))
            center = ts[j]
            if obj[j] < best_obj:
                best_obj = float(obj[j])
                best_pt = pts[j].copy()
        if center is None:
            return
        for _ in range(60):
            ts = np.linspace(center - w, center + w, 81)
            pts = param_to_point(ts)
            ok = feasible_mask(pts)
            if ok.any():
                obj = objective_arr(pts)
                obj[~ok] = math.inf
                j = int(np.argmin(obj))
                if obj[j] <= best_obj:
                    best_obj = float(obj[j])
                    best_pt = pts[j].copy()
                    center = ts[j]
            w *= 0.5

    def on_speed_circle(ts):
        return np.stack([p.u_max * np.cos(ts), p.u_max * np.sin(ts)], axis=1)

    scan_curve(on_speed_circle, 0.0, 2.0 * math.pi)
    if p.energy_mode == "quadratic" and p.r_sq[0] > 0:
        r = math.sqrt(p.r_sq[0])
        mu = p.mu[0]

        def on_energy_circle(ts):
            return np.stack([mu[0] + r * np.cos(ts), mu[1] + r * np.sin(ts)], axis=1)

        scan_curve(on_energy_circle, 0.0, 2.0 * math.pi)

    lines = []
    if float(p.cbf_a @ p.cbf_a) > 1e-30:
        lines.append((p.cbf_a.copy(), p.cbf_offset))
    if float(p.clf_g @ p.clf_g) > 1e-30:
        lines.append((p.clf_g.copy(), p.clf_offset))  # objective kink line
    for coef, off in lines:
        nsq = float(coef @ coef)
        p0 = -off * coef / nsq
        tangent = np.array([-coef[1], coef[0]]) / math.sqrt(nsq)
        span = p.u_max + float(np.hypot(*p0)) + 1.0

        def on_line(ts, p0=p0, tangent=tangent):
            return p0[None, :] + ts[:, None] * tangent[None, :]

        scan_curve(on_line, -span, span)

    # interior stationary candidates of both hinge branches
    consider(np.array([np.zeros(2), -0.5 * p.gamma * p.clf_g]))

    # curve-intersection vertices
    verts = []
    if p.energy_mode == "quadratic" and p.r_sq[0] >= 0:
        mu = p.mu[0]
        d = float(np.hypot(*mu))
        if d > 0:
            r = math.sqrt(max(p.r_sq[0], 0.0))
            a_len = (p.u_max**2 - r**2 + d**2) / (2 * d)
            h_sq = p.u_max**2 - a_len**2
            if h_sq >= 0:
                h = math.sqrt(h_sq)
                ux, uy = mu / d
                bx, by = a_len * ux, a_len * uy
                verts += [np.array([bx - h * uy, by + h * ux]),
                          np.array([bx + h * uy, by - h * ux])]
    for coef, off in lines:
        nsq = float(coef @ coef)
        p0 = -off * coef / nsq
        tangent = np.array([-coef[1], coef[0]]) / math.sqrt(nsq)
        # line ∩ speed circle and line ∩ energy circle
        for center, rad in [(np.zeros(2), p.u_max)] + (
            [(p.mu[0], math.sqrt(max(p.r_sq[0], 0.0)))]
            if p.energy_mode == "quadratic"
            else []
        ):
            rel = p0 - center
            b_lin = float(rel @ tangent)
            c_lin = float(rel @ rel) - rad**2
            disc = b_lin**2 - c_lin
            if disc >= 0:
                sq = math.sqrt(disc)
                verts += [p0 + (-b_lin - sq) * tangent, p0 + (-b_lin + sq) * tangent]
    if len(lines) == 2:
        m = np.stack([lines[0][0], lines[1][0]])
        rhs = -np.array([lines[0][1], lines[1][1]])
        if abs(np.linalg.det(m)) > 1e-14:
            verts.append(np.linalg.solve(m, rhs))
    if verts:
        consider(np.array(verts))

    basins = [s for s in seeds if feasible_mask(np.asarray(s)[None, :])[0]]
    if best_pt is not None:
        basins.append(best_pt)
    grid_1d = np.linspace(-1.0, 1.0, 41)
    gx, gy = np.meshgrid(grid_1d, grid_1d)
    offsets = np.stack([gx.ravel(), gy.ravel()], axis=1)
    for seed in basins:
        center = np.asarray(seed, dtype=float)
        w = p.u_max / 16.0
        for _ in range(passes):
            pts = center[None, :] + w * offsets
            ok = feasible_mask(pts)
            if ok.any():
                obj = objective_arr(pts)
                obj[~ok] = math.inf
                j = int(np.argmin(obj))
                if obj[j] <= best_obj:
                    best_obj = float(obj[j])
                    best_pt = pts[j].copy()
                    center = pts[j].copy()
            w *= 0.55
    return best_obj


def _project_two_discs_vec(pts, big_r, mu, r):
    """Projection of each row onto disc(0, R) ∩ disc(mu, r), fully vectorized."""
    pts = np.asarray(pts, dtype=float)
    n0 = np.hypot(pts[:, 0], pts[:, 1])
    rel = pts - mu
    n1 = np.hypot(rel[:, 0], rel[:, 1])
    scale0 = np.where(n0 > big_r, np.divide(big_r, n0, out=np.ones_like(n0), where=n0 > 0), 1.0)
    q1 = pts * scale0[:, None]
    scale1 = np.where(n1 > r, np.divide(r, n1, out=np.ones_like(n1), where=n1 > 0), 1.0)
    q2 = mu + rel * scale1[:, None]
    q1_ok = np.hypot(q1[:, 0] - mu[:, 0], q1[:, 1] - mu[:, 1]) <= r + 1e-12
    q2_ok = np.hypot(q2[:, 0], q2[:, 1]) <= big_r + 1e-12

    # circle-intersection fallback
    d = np.hypot(mu[:, 0], mu[:, 1])
    d_safe = np.where(d > 0, d, 1.0)
    a = (big_r**2 - r**2 + d**2) / (2.0 * d_safe)
    h = np.sqrt(np.maximum(0.0, big_r**2 - a**2))
    ux, uy = mu[:, 0] / d_safe, mu[:, 1] / d_safe
    bx, by = a * ux, a * uy
    c1 = np.stack([bx - h * uy, by + h * ux], axis=1)
    c2 = np.stack([bx + h * uy, by - h * ux], axis=1)
    d1 = ((c1 - pts) ** 2).sum(axis=1)
    d2 = ((c2 - pts) ** 2).sum(axis=1)
    cx = np.where((d1 <= d2)[:, None], c1, c2)
    # concentric discs: the smaller disc is the intersection
    rr = np.minimum(big_r, r)
    n0_safe = np.where(n0 > 0, n0, 1.0)
    conc = pts * np.minimum(1.0, rr / n0_safe)[:, None]
    cx = np.where((d > 0)[:, None], cx, conc)

    out = np.where(q1_ok[:, None], q1, np.where(q2_ok[:, None], q2, cx))
    return out


def _dykstra_batch(x, proj_ops, sweeps=400, tol=1e-13):
    """Dykstra's alternating projections onto an intersection, batched.

    Convergence tracks both the iterate and the correction vectors; the
    iterate alone can plateau for long stretches while corrections grow.
    """
    m = len(proj_ops)
    corrections = [np.zeros_like(x) for _ in range(m)]
    for _ in range(sweeps):
        delta = 0.0
        for i, proj in enumerate(proj_ops):
            y = x + corrections[i]
            x_new = proj(y)
            new_corr = y - x_new
            delta = max(delta, float(np.max(np.abs(new_corr - corrections[i]))))
            corrections[i] = new_corr
            delta = max(delta, float(np.max(np.abs(x_new - x))))
            x = x_new
        if delta < tol:
            break
    return x


def dual_grid_solve(p: ConvexProgram, coarse: int = 81, passes: int = 24) -> float:
    """Independent optimum certificate via exhaustive dual-grid search.

    Dualizing the two linear rows leaves a per-robot minimization whose
    solution is a closed-form two-disc projection, so the dual function is
    evaluated exactly on a grid over the two multipliers and refined around
    the maximizer (the dual is concave, hence single-basin).  By weak
    duality every value is a lower bound on the program optimum; under
    strong duality (the generator guarantees an interior point) the
    maximum attains it.  Quadratic energy mode only.
    """
    assert p.energy_mode == "quadratic"
    n = p.n_robots
    g = p.clf_g.reshape(n, 2)
    a = p.cbf_a.reshape(n, 2)
    has_cbf = float(p.cbf_a @ p.cbf_a) > 1e-30
    radii = np.sqrt(np.maximum(p.r_sq, 0.0))

    def dual_values(l1, l2):
        """q(lambda) on the meshgrid of multiplier vectors l1, l2."""
        M = l1.size
        # c_i = l1 g_i - l2 a_i per robot, stacked (M*n, 2)
        c = l1[:, None, None] * g[None, :, :] - l2[:, None, None] * a[None, :, :]
        pts = (-0.5 * c).reshape(M * n, 2)
        big_r = np.full(M * n, p.u_max)
        mu = np.tile(p.mu, (M, 1))
        rr = np.tile(radii, M)
        v = _project_two_discs_vec(pts, big_r, mu, rr).reshape(M, n, 2)
        inner = (v**2).sum(axis=2) + (c * v).sum(axis=2)
        return inner.sum(axis=1) + l1 * p.clf_offset - l2 * p.cbf_offset

    lam2_hi = 1.0
    if has_cbf:
        scale = (2.0 * p.u_max + p.gamma * float(np.linalg.norm(p.clf_g))) + 1.0
        lam2_hi = 2.0 * scale / max(float(np.linalg.norm(p.cbf_a)), 1e-9)

    for _expand in range(10):
        l1v = np.linspace(0.0, p.gamma, coarse)
        l2v = np.linspace(0.0, lam2_hi, coarse) if has_cbf else np.zeros(1)
        L1, L2 = np.meshgrid(l1v, l2v, indexing="ij")
        q = dual_values(L1.ravel(), L2.ravel())
        j = int(np.argmax(q))
        best = float(q[j])
        b1, b2 = float(L1.ravel()[j]), float(L2.ravel()[j])
        if has_cbf and b2 >= lam2_hi * (1.0 - 1.5 / coarse):
            lam2_hi *= 4.0
            continue
        break

    w1 = p.gamma / (coarse - 1) * 1.5
    w2 = (lam2_hi / (coarse - 1) * 1.5) if has_cbf else 0.0
    for _ in range(passes):
        l1v = np.clip(np.linspace(b1 - w1, b1 + w1, 33), 0.0, p.gamma)
        l2v = np.maximum(np.linspace(b2 - w2, b2 + w2, 33), 0.0) if has_cbf else np.zeros(1)
        L1, L2 = np.meshgrid(l1v, l2v, indexing="ij")
        q = dual_values(L1.ravel(), L2.ravel())
        j = int(np.argmax(q))
        if q[j] > best:
            best = float(q[j])
            b1, b2 = float(L1.ravel()[j]), float(L2.ravel()[j])
        w1 *= 0.4
        w2 *= 0.4
    return best


def dijkstra_geodesic(grid, blocked: np.ndarray, start_cell: int, goal_lookup: np.ndarray):
    """Shortest 8-connected path length (meters) from a cell into a goal set.

    ``blocked`` and ``goal_lookup`` are boolean arrays over flattened cells.
    Returns math.inf when unreachable.
    """
    nx, ny = grid.nx, grid.ny
    spacing = grid.spacing
    diag = spacing * math.sqrt(2.0)
    dist = np.full(grid.n_cells, np.inf)
    dist[start_cell] = 0.0
    heap = [(0.0, start_cell)]
    moves = [
        (-1, 0, spacing), (1, 0, spacing), (0, -1, spacing), (0, 1, spacing),
        (-1, -1, diag), (1, -1, diag), (-1, 1, diag), (1, 1, diag),
    ]
    while heap:
        d, k = heapq.heappop(heap)
        if d > dist[k]:
            continue
        if goal_lookup[k]:
            return d
        ix, iy = k % nx, k // nx
        for dx, dy, w in moves:
            jx, jy = ix + dx, iy + dy
            if not (0 <= jx < nx and 0 <= jy < ny):
                continue
            j = jy * nx + jx
            if blocked[j]:
                continue
            nd = d + w
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return math.inf
