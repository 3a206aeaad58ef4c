import numpy as np

from densityctl.qp import ConvexProgram


def random_program(rng: np.random.Generator, n_robots: int) -> ConvexProgram:
    """Random feasible per-step program mirroring what assembly produces.

    The energy discs come from the kappa construction with a nonnegative
    energy margin, and the safety offset is set so the full-speed-along-path
    anchor is feasible; together these guarantee a nonempty feasible set.
    """
    u_max = float(rng.uniform(0.5, 1.5))
    c1 = float(rng.uniform(1e-3, 2e-2))
    c2 = float(rng.uniform(1e-3, 2e-2))
    kappa = c1 * u_max + c2 / u_max
    alpha_e = float(rng.uniform(0.05, 0.5))

    dhat = rng.normal(size=(n_robots, 2))
    dhat /= np.hypot(dhat[:, 0], dhat[:, 1])[:, None]
    at_charger = rng.random(n_robots) < 0.2
    dhat[at_charger] = 0.0

    margins = rng.uniform(0.0, 0.5, n_robots)
    if rng.random() < 0.3:
        # near-exhausted energy margin: a razor-thin (but nondegenerate)
        # feasible lens around the full-speed return command
        margins[rng.integers(n_robots)] = float(rng.uniform(0.0, 1e-5))
    mu = (kappa / (2.0 * c1)) * dhat
    r_sq = (alpha_e * margins - c2) / c1 + kappa**2 / (4.0 * c1**2)

    g = rng.normal(size=2 * n_robots) * rng.uniform(0.05, 2.0)
    b_v = float(rng.normal() * rng.uniform(0.1, 2.0))
    if rng.random() < 0.15:
        a = np.zeros(2 * n_robots)
        b_s = float(rng.uniform(0.0, 1.0))
    else:
        a = rng.normal(size=2 * n_robots) * rng.uniform(0.05, 2.0)
        anchor = (u_max * dhat).ravel()
        b_s = float(-(a @ anchor) + rng.uniform(0.0, 2.0))
    gamma = float(rng.uniform(10.0, 5000.0))
    return ConvexProgram(
        gamma=gamma,
        clf_g=g,
        clf_offset=b_v,
        cbf_a=a,
        cbf_offset=b_s,
        u_max=u_max,
        dhat=dhat,
        mu=mu,
        r_sq=r_sq,
    )
