"""Pure-Python implementation of the RANSAC/P3P hot loop.

Mirrors ``_ckernels.pyx`` operation for operation so both backends draw the
same hypotheses and reach the same decisions.  Used when the compiled
extension is unavailable or ``TBSFM_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import math

import numpy as np

DEPTH_EPS = 1e-12
COLLINEAR_EPS = 1e-9
POLISH_ITERS = 30


def _cubic_max_real(b, c, d):
    """Largest real root of x^3 + b x^2 + c x + d."""
    p = c - b * b / 3.0
    q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d
    disc = 0.25 * q * q + p * p * p / 27.0
    if disc > 0:
        sq = math.sqrt(disc)
        y = math.copysign(abs(-0.5 * q + sq) ** (1.0 / 3.0), -0.5 * q + sq) \
            + math.copysign(abs(-0.5 * q - sq) ** (1.0 / 3.0), -0.5 * q - sq)
    else:
        r = math.sqrt(max(-p / 3.0, 0.0))
        if r == 0.0:
            y = 0.0
        else:
            arg = -q / (2.0 * r * r * r)
            arg = min(1.0, max(-1.0, arg))
            y = 2.0 * r * math.cos(math.acos(arg) / 3.0)
    x = y - b / 3.0
    for _ in range(2):
        f = ((x + b) * x + c) * x + d
        df = (3.0 * x + 2.0 * b) * x + c
        if df == 0.0:
            break
        x -= f / df
    return x


def _quartic_real_roots(c4, c3, c2, c1, c0):
    """Real roots of a quartic via the resolvent cubic, Newton polished."""
    scale = max(abs(c4), abs(c3), abs(c2), abs(c1), abs(c0))
    if scale == 0.0 or abs(c4) < 1e-14 * scale:
        return []
    a = c3 / c4
    b = c2 / c4
    c = c1 / c4
    d = c0 / c4
    p = b - 3.0 * a * a / 8.0
    q = c - a * b / 2.0 + a * a * a / 8.0
    r = d - a * c / 4.0 + a * a * b / 16.0 - 3.0 * a * a * a * a / 256.0
    ys = []
    if abs(q) < 1e-14 * (1.0 + abs(p) + abs(r)):
        disc = p * p - 4.0 * r
        if disc >= 0:
            sq = math.sqrt(disc)
            for z in ((-p + sq) / 2.0, (-p - sq) / 2.0):
                if z >= 0:
                    ys.append(math.sqrt(z))
                    ys.append(-math.sqrt(z))
    else:
        m = _cubic_max_real(p, p * p / 4.0 - r, -q * q / 8.0)
        if m <= 0:
            return []
        s = math.sqrt(2.0 * m)
        tol = 1e-12 * (abs(p) + abs(m) + abs(q / s))
        d1 = -2.0 * p - 2.0 * m - 2.0 * q / s
        d2 = -2.0 * p - 2.0 * m + 2.0 * q / s
        if d1 >= -tol:
            sq = math.sqrt(max(d1, 0.0))
            ys.append(0.5 * (s + sq))
            ys.append(0.5 * (s - sq))
        if d2 >= -tol:
            sq = math.sqrt(max(d2, 0.0))
            ys.append(0.5 * (-s + sq))
            ys.append(0.5 * (-s - sq))
    roots = []
    for y in ys:
        x = y - a / 4.0
        for _ in range(3):
            f = (((x + a) * x + b) * x + c) * x + d
            df = ((4.0 * x + 3.0 * a) * x + 2.0 * b) * x + c
            if df == 0.0:
                break
            x -= f / df
        roots.append(x)
    return roots


def _sub(u, v):
    return (u[0] - v[0], u[1] - v[1], u[2] - v[2])


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


def _dot(u, v):
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


def _normalized(u):
    n = math.sqrt(_dot(u, u))
    return (u[0] / n, u[1] / n, u[2] / n)


def _frame(p1, p2, p3):
    e1 = _normalized(_sub(p2, p1))
    n = _normalized(_cross(_sub(p2, p1), _sub(p3, p1)))
    e2 = _cross(n, e1)
    return e1, e2, n


def _min_height(X1, X2, X3):
    cr = _cross(_sub(X2, X1), _sub(X3, X1))
    area2 = math.sqrt(_dot(cr, cr))
    longest = max(math.sqrt(_dot(_sub(X2, X1), _sub(X2, X1))),
                  math.sqrt(_dot(_sub(X3, X1), _sub(X3, X1))),
                  math.sqrt(_dot(_sub(X3, X2), _sub(X3, X2))))
    if longest == 0.0:
        return 0.0
    return area2 / longest


def _det3(a, b, c, d, e, f, g, h, i):
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def _solve3(a, b, c, d, e, f, g, h, i, r0, r1, r2):
    """Cramer's rule for [[a, b, c], [d, e, f], [g, h, i]] x = r."""
    det = _det3(a, b, c, d, e, f, g, h, i)
    if abs(det) < 1e-300:
        return None
    return (_det3(r0, b, c, r1, e, f, r2, h, i) / det,
            _det3(a, r0, c, d, r1, f, g, r2, i) / det,
            _det3(a, b, r0, d, e, r1, g, h, r2) / det)


def p3p_solve(f, X):
    """Camera poses ``(R, c)`` consistent with three bearings and points.

    ``f`` holds unit bearing vectors and ``X`` world points, as 3-tuples.
    """
    f1, f2, f3 = f
    X1, X2, X3 = X
    if _min_height(X1, X2, X3) <= COLLINEAR_EPS:
        return []
    d23, d13, d12 = _sub(X2, X3), _sub(X1, X3), _sub(X1, X2)
    a2, b2, c2 = _dot(d23, d23), _dot(d13, d13), _dot(d12, d12)
    ca, cb, cg = _dot(f2, f3), _dot(f1, f3), _dot(f1, f2)
    k1 = (a2 - c2) / b2
    k2 = (a2 + c2) / b2
    A4 = (k1 - 1.0) ** 2 - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (k1 * (1.0 - k1) * cb - (1.0 - k2) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (k1 * k1 - 1.0 + 2.0 * k1 * k1 * cb * cb + 2.0 * ((b2 - c2) / b2) * ca * ca
                - 4.0 * k2 * ca * cb * cg + 2.0 * ((b2 - a2) / b2) * cg * cg)
    A1 = 4.0 * (-k1 * (1.0 + k1) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - k2) * ca * cg)
    A0 = (1.0 + k1) ** 2 - 4.0 * a2 / b2 * cg * cg

    Fx = _frame(X1, X2, X3)
    out = []
    for v in _quartic_real_roots(A4, A3, A2, A1, A0):
        if v <= 0:
            continue
        den = 1.0 + v * v - 2.0 * v * cb
        if den <= 0:
            continue
        s1 = math.sqrt(b2 / den)
        s3 = v * s1
        disc = c2 - s1 * s1 * (1.0 - cg * cg)
        if disc < 0:
            if disc < -1e-9 * c2:
                continue
            disc = 0.0
        sq = math.sqrt(disc)
        best, s2 = math.inf, 0.0
        for cand in (s1 * cg + sq, s1 * cg - sq):
            if cand <= 0:
                continue
            res = abs(cand * cand + s3 * s3 - 2.0 * cand * s3 * ca - a2)
            if res < best:
                best, s2 = res, cand
        if best == math.inf:
            continue
        # Gauss-Newton polish of the three depths on the distance equations;
        # near-double roots converge only linearly, hence the generous cap
        for _ in range(POLISH_ITERS):
            F0 = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2
            F1 = s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2
            F2 = s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2
            j01, j02 = 2.0 * s2 - 2.0 * s3 * ca, 2.0 * s3 - 2.0 * s2 * ca
            j10, j12 = 2.0 * s1 - 2.0 * s3 * cb, 2.0 * s3 - 2.0 * s1 * cb
            j20, j21 = 2.0 * s1 - 2.0 * s2 * cg, 2.0 * s2 - 2.0 * s1 * cg
            x = _solve3(0.0, j01, j02, j10, 0.0, j12, j20, j21, 0.0, F0, F1, F2)
            if x is None:
                break
            x0, x1, x2 = x
            s1, s2, s3 = s1 - x0, s2 - x1, s3 - x2
            if abs(x0) + abs(x1) + abs(x2) <= 1e-15 * (abs(s1) + abs(s2) + abs(s3)):
                break
        if s1 <= 0 or s2 <= 0 or s3 <= 0:
            continue
        P1 = (s1 * f1[0], s1 * f1[1], s1 * f1[2])
        P2 = (s2 * f2[0], s2 * f2[1], s2 * f2[2])
        P3 = (s3 * f3[0], s3 * f3[1], s3 * f3[2])
        Fp = _frame(P1, P2, P3)
        # R = Fp Fx^T with frames stored as column triples
        R = [[sum(Fp[k][i] * Fx[k][j] for k in range(3)) for j in range(3)] for i in range(3)]
        c = tuple(X1[i] - sum(R[k][i] * P1[k] for k in range(3)) for i in range(3))
        ok = True
        for fi, Xi in ((f1, X1), (f2, X2), (f3, X3)):
            d = _sub(Xi, c)
            p = tuple(sum(R[i][k] * d[k] for k in range(3)) for i in range(3))
            n = math.sqrt(_dot(p, p))
            if p[2] <= DEPTH_EPS or n == 0.0:
                ok = False
                break
            e = (p[0] / n - fi[0], p[1] / n - fi[1], p[2] / n - fi[2])
            if _dot(e, e) > 1e-12:
                ok = False
                break
        if ok:
            out.append((R, c))
    return out


def p3p(bearings, points):
    sols = p3p_solve([tuple(map(float, b)) for b in bearings[:3]],
                     [tuple(map(float, x)) for x in points[:3]])
    return [(np.array(R), np.array(c)) for R, c in sols]


def iterations_needed(n_inliers, n_total, log_one_minus_eta, max_iters):
    """RANSAC bound for drawing one all-inlier 4-point sample."""
    w = n_inliers / n_total
    w4 = w * w * w * w
    if w4 >= 1.0:
        return 1
    if w4 <= 0.0:
        return max_iters
    denom = math.log1p(-w4)
    if denom >= 0.0:
        return max_iters
    need = math.ceil(log_one_minus_eta / denom)
    return int(min(max(need, 1), max_iters))


def _reproj_sq(R, c, X, intr, px):
    d = (X[0] - c[0], X[1] - c[1], X[2] - c[2])
    p0 = R[0][0] * d[0] + R[0][1] * d[1] + R[0][2] * d[2]
    p1 = R[1][0] * d[0] + R[1][1] * d[1] + R[1][2] * d[2]
    p2 = R[2][0] * d[0] + R[2][1] * d[1] + R[2][2] * d[2]
    if p2 <= DEPTH_EPS:
        return math.inf
    du = intr[0] * p0 / p2 + intr[2] - px[0]
    dv = intr[1] * p1 / p2 + intr[3] - px[1]
    return du * du + dv * dv


def count_inliers(R, c, points, pixels, intr, tau):
    R = np.asarray(R, dtype=float).reshape(3, 3)
    c = np.asarray(c, dtype=float).ravel()
    # elementwise in the same order as the compiled kernel, no matmul
    d0, d1, d2 = (points[:, k] - c[k] for k in range(3))
    p0 = R[0, 0] * d0 + R[0, 1] * d1 + R[0, 2] * d2
    p1 = R[1, 0] * d0 + R[1, 1] * d1 + R[1, 2] * d2
    z = R[2, 0] * d0 + R[2, 1] * d1 + R[2, 2] * d2
    ok = z > DEPTH_EPS
    zs = np.where(ok, z, 1.0)
    du = intr[0] * p0 / zs + intr[2] - pixels[:, 0]
    dv = intr[1] * p1 / zs + intr[3] - pixels[:, 1]
    return int(np.count_nonzero(ok & (du * du + dv * dv < tau * tau)))


def ransac_chunk(samples, bearings, pixels, points, intr, tau, best_count, best_R, best_c,
                 iters, bound, max_iters, log_one_minus_eta, min_inliers):
    """Evaluate hypotheses from ``samples`` until ``bound`` iterations are spent.

    Updates ``best_R`` (9,) and ``best_c`` (3,) in place and returns
    ``(best_count, iters, bound)``.
    """
    n = len(points)
    tau2 = tau * tau
    intr = tuple(float(v) for v in intr)
    for row in samples:
        if iters >= bound:
            break
        iters += 1
        i0, i1, i2, i3 = (int(v) for v in row)
        f = [tuple(bearings[i]) for i in (i0, i1, i2)]
        X = [tuple(points[i]) for i in (i0, i1, i2)]
        sols = p3p_solve(f, X)
        chosen, err4 = None, math.inf
        X4 = tuple(points[i3])
        px4 = tuple(pixels[i3])
        for R, c in sols:
            e = _reproj_sq(R, c, X4, intr, px4)
            if e < err4:
                chosen, err4 = (R, c), e
        if chosen is None or not err4 < tau2:
            continue
        R, c = chosen
        score = count_inliers(R, c, points, pixels, intr, tau)
        if score > best_count:
            best_count = score
            best_R[:] = np.array(R).ravel()
            best_c[:] = c
            bound = min(bound, iterations_needed(max(score, min_inliers), n, log_one_minus_eta, max_iters))
    return best_count, iters, bound
