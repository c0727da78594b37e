"""Independent reference computations used only by the tests."""

import numpy as np


def joint_block_cd(y, z, x_aug, lam, tol=1e-14, max_sweeps=200_000):
    """Minimize ||y - z theta - x_aug zeta||^2 + lam ||theta||_1 jointly.

    Alternates an exact least-squares update of ``zeta`` with one cyclic
    pass of scalar soft-threshold updates over ``theta`` on the raw residual.
    """
    n, p = z.shape
    theta = np.zeros(p)
    col_sq = (z * z).sum(axis=0)
    zeta = np.linalg.lstsq(x_aug, y, rcond=None)[0]
    resid = y - x_aug @ zeta
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            if col_sq[j] == 0:
                continue
            rho = z[:, j] @ resid + col_sq[j] * theta[j]
            new = np.sign(rho) * max(abs(rho) - lam / 2, 0.0) / col_sq[j]
            step = new - theta[j]
            if step:
                resid -= z[:, j] * step
                theta[j] = new
                biggest = max(biggest, abs(step) * np.sqrt(col_sq[j]))
        new_zeta = np.linalg.lstsq(x_aug, resid + x_aug @ zeta, rcond=None)[0]
        shift = x_aug @ (new_zeta - zeta)
        resid -= shift
        zeta = new_zeta
        biggest = max(biggest, np.linalg.norm(shift))
        if biggest < tol * max(np.linalg.norm(y), 1.0):
            break
    obj = resid @ resid + lam * np.abs(theta).sum()
    return theta, zeta, y - resid, obj


def random_partial_lasso(rng, n, d, p):
    """Instance with a few relevant penalized columns correlated with X."""
    x = rng.standard_normal((n, d))
    z = rng.standard_normal((n, p)) + 0.3 * x @ rng.standard_normal((d, p))
    theta = np.zeros(p)
    on = rng.choice(p, size=min(3, p), replace=False)
    theta[on] = rng.uniform(1, 2, size=on.size) * rng.choice([-1, 1], size=on.size)
    y = z @ theta + x @ rng.standard_normal(d) + 0.5 + rng.standard_normal(n)
    return y, z, x


def brute_force_loo(y, z, x, lam, solve):
    """Leave-one-out squared errors by refitting on every n-1 subset."""
    n = y.size
    errs = np.empty(n)
    for i in range(n):
        keep = np.arange(n) != i
        theta, zeta, b0 = solve(y[keep], z[keep], x[keep], lam)
        errs[i] = (y[i] - z[i] @ theta - x[i] @ zeta - b0) ** 2
    return errs.mean()
