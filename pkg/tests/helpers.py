"""Shared test oracles, independent of the implementation paths they check."""

import math

import numpy as np

EULER_GAMMA = 0.57721566490153286060651209008240243


def bessel_k1_oracle(x: float) -> float:
    """Modified Bessel K1 from first principles.

    Power series (A&S 9.6.11) below x = 2, Lentz continued fraction
    (CF2, Numerical Recipes bessik with mu = 0 plus upward recurrence)
    above. Entirely independent of scipy.special.
    """
    if x <= 0:
        raise ValueError("x must be positive")
    if x < 2.0:
        return _k1_series(x)
    return _k1_cf2(x)


def _k1_series(x: float) -> float:
    q = x * x / 4.0
    # I1(x) = (x/2) sum q^k / (k! (k+1)!)
    i1 = 0.0
    term = 1.0
    harmonic = 0.0  # psi(1) + gamma = 0
    s = 0.0
    k = 0
    while True:
        # psi(k+1) + psi(k+2) = -2*gamma + 2*H_k + 1/(k+1)
        psi_sum = -2.0 * EULER_GAMMA + 2.0 * harmonic + 1.0 / (k + 1)
        s += psi_sum * term
        i1 += term
        k += 1
        new_term = term * q / (k * (k + 1))
        if new_term < 1e-18 * max(i1, abs(s)):
            break
        term = new_term
        harmonic += 1.0 / k
    i1 *= x / 2.0
    return 1.0 / x + math.log(x / 2.0) * i1 - (x / 4.0) * s


def _k1_cf2(x: float) -> float:
    # CF2 evaluation of K0, then K1 = K0 * (x + 0.5 - h) / x  (mu = 0)
    eps = 1e-16
    b = 2.0 * (1.0 + x)
    d = 1.0 / b
    h = delh = d
    q1, q2 = 0.0, 1.0
    a1 = 0.25
    q = c = a1
    a = -a1
    s = 1.0 + q * delh
    for i in range(2, 10001):
        a -= 2.0 * (i - 1)
        c = -a * c / i
        qnew = (q1 - b * q2) / a
        q1, q2 = q2, qnew
        q += c * qnew
        b += 2.0
        d = 1.0 / (b + a * d)
        delh = (b * d - 1.0) * delh
        h += delh
        dels = q * delh
        s += dels
        if abs(dels / s) < eps:
            break
    h = a1 * h
    k0 = math.sqrt(math.pi / (2.0 * x)) * math.exp(-x) / s
    return k0 * (x + 0.5 - h) / x


def circumcircle_ok(mesh, tol=1e-12):
    """Brute-force empty-circumcircle oracle: O(n * triangles) scan."""
    v = mesh.vertices
    for tri in mesh.triangles:
        a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
        ax, ay = a
        bx, by = b
        cx, cy = c
        d = 2 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
        ux = (
            (ax**2 + ay**2) * (by - cy)
            + (bx**2 + by**2) * (cy - ay)
            + (cx**2 + cy**2) * (ay - by)
        ) / d
        uy = (
            (ax**2 + ay**2) * (cx - bx)
            + (bx**2 + by**2) * (ax - cx)
            + (cx**2 + cy**2) * (bx - ax)
        ) / d
        r2 = (ax - ux) ** 2 + (ay - uy) ** 2
        scale = max(r2, 1.0)
        for i in range(len(v)):
            if i in tri:
                continue
            d2 = (v[i, 0] - ux) ** 2 + (v[i, 1] - uy) ** 2
            if d2 < r2 - tol * scale:
                return False
    return True


def unit_square_mesh(h: float):
    """Regular lattice mesh over [0,1]^2 with spacing h."""
    from lrssm import mesh as msh

    n = int(round(1.0 / h)) + 1
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    return msh.delaunay_triangulate(pts)


def buffered_unit_square(h: float, kappa: float):
    """Unit-square mesh extended by a two-Matérn-range buffer."""
    from lrssm import mesh as msh

    base = unit_square_mesh(h)
    buffer_width = 2.0 * math.sqrt(8.0) / kappa
    return msh.extend_boundary(base, buffer_width=buffer_width, ring_spacing=h)


def interior_correlation_error(ext_mesh, kappa: float, max_pairs: int = 4000, seed=0):
    """Max abs difference between the correlation implied by Q^{-1} and the
    Matérn reference over random latent-vertex pairs."""
    from lrssm import fem

    mats = fem.assemble(ext_mesh)
    prec = fem.precision(ext_mesh, mats, kappa)
    corr = fem.correlation_from_precision(prec)
    pts = ext_mesh.latent_vertices
    n = len(pts)
    rng = np.random.default_rng(seed)
    ii = rng.integers(0, n, size=max_pairs)
    jj = rng.integers(0, n, size=max_pairs)
    d = np.linalg.norm(pts[ii] - pts[jj], axis=1)
    ref = fem.matern_cov(d, kappa)
    got = corr[ii, jj]
    return float(np.max(np.abs(got - ref)))
