# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled RANSAC/P3P hot loop; mirrors ``_pykernels`` exactly."""

import numpy as np

from libc.math cimport sqrt, fabs, pow, copysign, acos, cos, log1p, ceil, INFINITY

cdef double DEPTH_EPS = 1e-12
cdef double COLLINEAR_EPS = 1e-9
cdef int POLISH_ITERS = 30


cdef double _cubic_max_real(double b, double c, double d) noexcept nogil:
    cdef double p = c - b * b / 3.0
    cdef double q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d
    cdef double disc = 0.25 * q * q + p * p * p / 27.0
    cdef double sq, y, r, arg, x, f, df
    cdef int it
    if disc > 0:
        sq = sqrt(disc)
        y = copysign(pow(fabs(-0.5 * q + sq), 1.0 / 3.0), -0.5 * q + sq) \
            + copysign(pow(fabs(-0.5 * q - sq), 1.0 / 3.0), -0.5 * q - sq)
    else:
        r = sqrt(max(-p / 3.0, 0.0))
        if r == 0.0:
            y = 0.0
        else:
            arg = -q / (2.0 * r * r * r)
            arg = min(1.0, max(-1.0, arg))
            y = 2.0 * r * cos(acos(arg) / 3.0)
    x = y - b / 3.0
    for it in range(2):
        f = ((x + b) * x + c) * x + d
        df = (3.0 * x + 2.0 * b) * x + c
        if df == 0.0:
            break
        x -= f / df
    return x


cdef int _quartic_real_roots(double c4, double c3, double c2, double c1, double c0,
                             double *roots) noexcept nogil:
    cdef double scale = max(max(max(fabs(c4), fabs(c3)), max(fabs(c2), fabs(c1))), fabs(c0))
    cdef double a, b, c, d, p, q, r, disc, sq, z, m, s, tol, d1, d2, x, f, df
    cdef double ys[8]
    cdef int ny = 0, i, it, k
    if scale == 0.0 or fabs(c4) < 1e-14 * scale:
        return 0
    a = c3 / c4
    b = c2 / c4
    c = c1 / c4
    d = c0 / c4
    p = b - 3.0 * a * a / 8.0
    q = c - a * b / 2.0 + a * a * a / 8.0
    r = d - a * c / 4.0 + a * a * b / 16.0 - 3.0 * a * a * a * a / 256.0
    if fabs(q) < 1e-14 * (1.0 + fabs(p) + fabs(r)):
        disc = p * p - 4.0 * r
        if disc >= 0:
            sq = sqrt(disc)
            for k in range(2):
                z = (-p + sq) / 2.0 if k == 0 else (-p - sq) / 2.0
                if z >= 0:
                    ys[ny] = sqrt(z)
                    ys[ny + 1] = -sqrt(z)
                    ny += 2
    else:
        m = _cubic_max_real(p, p * p / 4.0 - r, -q * q / 8.0)
        if m <= 0:
            return 0
        s = sqrt(2.0 * m)
        tol = 1e-12 * (fabs(p) + fabs(m) + fabs(q / s))
        d1 = -2.0 * p - 2.0 * m - 2.0 * q / s
        d2 = -2.0 * p - 2.0 * m + 2.0 * q / s
        if d1 >= -tol:
            sq = sqrt(max(d1, 0.0))
            ys[ny] = 0.5 * (s + sq)
            ys[ny + 1] = 0.5 * (s - sq)
            ny += 2
        if d2 >= -tol:
            sq = sqrt(max(d2, 0.0))
            ys[ny] = 0.5 * (-s + sq)
            ys[ny + 1] = 0.5 * (-s - sq)
            ny += 2
    for i in range(ny):
        x = ys[i] - a / 4.0
        for it in range(3):
            f = (((x + a) * x + b) * x + c) * x + d
            df = ((4.0 * x + 3.0 * a) * x + 2.0 * b) * x + c
            if df == 0.0:
                break
            x -= f / df
        roots[i] = x
    return ny


cdef inline double _dot(const double *u, const double *v) noexcept nogil:
    return u[0] * v[0] + u[1] * v[1] + u[2] * v[2]


cdef inline void _sub(const double *u, const double *v, double *out) noexcept nogil:
    out[0] = u[0] - v[0]
    out[1] = u[1] - v[1]
    out[2] = u[2] - v[2]


cdef inline void _cross(const double *u, const double *v, double *out) noexcept nogil:
    out[0] = u[1] * v[2] - u[2] * v[1]
    out[1] = u[2] * v[0] - u[0] * v[2]
    out[2] = u[0] * v[1] - u[1] * v[0]


cdef inline void _normalize(double *u) noexcept nogil:
    cdef double n = sqrt(_dot(u, u))
    u[0] = u[0] / n
    u[1] = u[1] / n
    u[2] = u[2] / n


cdef void _frame(const double *p1, const double *p2, const double *p3, double *F) noexcept nogil:
    # F holds e1, e2, n consecutively
    cdef double d21[3]
    cdef double d31[3]
    _sub(p2, p1, d21)
    _sub(p3, p1, d31)
    F[0] = d21[0]; F[1] = d21[1]; F[2] = d21[2]
    _normalize(&F[0])
    _cross(d21, d31, &F[6])
    _normalize(&F[6])
    _cross(&F[6], &F[0], &F[3])


cdef double _min_height(const double *X1, const double *X2, const double *X3) noexcept nogil:
    cdef double a[3]
    cdef double b[3]
    cdef double cr[3]
    cdef double e[3]
    cdef double area2, l1, l2, l3, longest
    _sub(X2, X1, a)
    _sub(X3, X1, b)
    _cross(a, b, cr)
    area2 = sqrt(_dot(cr, cr))
    l1 = sqrt(_dot(a, a))
    l2 = sqrt(_dot(b, b))
    _sub(X3, X2, e)
    l3 = sqrt(_dot(e, e))
    longest = max(max(l1, l2), l3)
    if longest == 0.0:
        return 0.0
    return area2 / longest


cdef inline double _det3(double a, double b, double c, double d, double e, double f,
                         double g, double h, double i) noexcept nogil:
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


cdef int p3p_solve(const double *f1, const double *f2, const double *f3,
                   const double *X1, const double *X2, const double *X3,
                   double *Rs, double *cs) noexcept nogil:
    """Up to four poses; rotations row-major in Rs[9 * k], centres in cs[3 * k]."""
    cdef double d23[3]
    cdef double d13[3]
    cdef double d12[3]
    cdef double a2, b2, c2, ca, cb, cg, k1, k2, A4, A3, A2, A1, A0
    cdef double roots[8]
    cdef double Fx[9]
    cdef double Fp[9]
    cdef double P1[3]
    cdef double P2[3]
    cdef double P3[3]
    cdef double R[9]
    cdef double c[3]
    cdef double dd[3]
    cdef double pp[3]
    cdef double v, den, s1, s2, s3, disc, sq, best, cand, res, F0, F1, F2
    cdef double j01, j02, j10, j12, j20, j21, det, x0, x1, x2, nrm, e0, e1, e2, acc
    cdef int nr, ir, it, k, i, j, ok, pi, nsol = 0
    cdef const double *fi
    cdef const double *Xi

    if _min_height(X1, X2, X3) <= COLLINEAR_EPS:
        return 0
    _sub(X2, X3, d23)
    _sub(X1, X3, d13)
    _sub(X1, X2, d12)
    a2 = _dot(d23, d23)
    b2 = _dot(d13, d13)
    c2 = _dot(d12, d12)
    ca = _dot(f2, f3)
    cb = _dot(f1, f3)
    cg = _dot(f1, f2)
    k1 = (a2 - c2) / b2
    k2 = (a2 + c2) / b2
    A4 = pow(k1 - 1.0, 2.0) - 4.0 * c2 / b2 * ca * ca
    A3 = 4.0 * (k1 * (1.0 - k1) * cb - (1.0 - k2) * ca * cg + 2.0 * c2 / b2 * ca * ca * cb)
    A2 = 2.0 * (k1 * k1 - 1.0 + 2.0 * k1 * k1 * cb * cb + 2.0 * ((b2 - c2) / b2) * ca * ca
                - 4.0 * k2 * ca * cb * cg + 2.0 * ((b2 - a2) / b2) * cg * cg)
    A1 = 4.0 * (-k1 * (1.0 + k1) * cb + 2.0 * a2 / b2 * cg * cg * cb - (1.0 - k2) * ca * cg)
    A0 = pow(1.0 + k1, 2.0) - 4.0 * a2 / b2 * cg * cg

    _frame(X1, X2, X3, Fx)
    nr = _quartic_real_roots(A4, A3, A2, A1, A0, roots)
    for ir in range(nr):
        v = roots[ir]
        if v <= 0:
            continue
        den = 1.0 + v * v - 2.0 * v * cb
        if den <= 0:
            continue
        s1 = sqrt(b2 / den)
        s3 = v * s1
        disc = c2 - s1 * s1 * (1.0 - cg * cg)
        if disc < 0:
            if disc < -1e-9 * c2:
                continue
            disc = 0.0
        sq = sqrt(disc)
        best = INFINITY
        s2 = 0.0
        for k in range(2):
            cand = s1 * cg + sq if k == 0 else s1 * cg - sq
            if cand <= 0:
                continue
            res = fabs(cand * cand + s3 * s3 - 2.0 * cand * s3 * ca - a2)
            if res < best:
                best = res
                s2 = cand
        if best == INFINITY:
            continue
        for it in range(POLISH_ITERS):
            F0 = s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * ca - a2
            F1 = s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * cb - b2
            F2 = s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * cg - c2
            j01 = 2.0 * s2 - 2.0 * s3 * ca
            j02 = 2.0 * s3 - 2.0 * s2 * ca
            j10 = 2.0 * s1 - 2.0 * s3 * cb
            j12 = 2.0 * s3 - 2.0 * s1 * cb
            j20 = 2.0 * s1 - 2.0 * s2 * cg
            j21 = 2.0 * s2 - 2.0 * s1 * cg
            det = _det3(0.0, j01, j02, j10, 0.0, j12, j20, j21, 0.0)
            if fabs(det) < 1e-300:
                break
            x0 = _det3(F0, j01, j02, F1, 0.0, j12, F2, j21, 0.0) / det
            x1 = _det3(0.0, F0, j02, j10, F1, j12, j20, F2, 0.0) / det
            x2 = _det3(0.0, j01, F0, j10, 0.0, F1, j20, j21, F2) / det
            s1 = s1 - x0
            s2 = s2 - x1
            s3 = s3 - x2
            if fabs(x0) + fabs(x1) + fabs(x2) <= 1e-15 * (fabs(s1) + fabs(s2) + fabs(s3)):
                break
        if s1 <= 0 or s2 <= 0 or s3 <= 0:
            continue
        for i in range(3):
            P1[i] = s1 * f1[i]
            P2[i] = s2 * f2[i]
            P3[i] = s3 * f3[i]
        _frame(P1, P2, P3, Fp)
        for i in range(3):
            for j in range(3):
                acc = 0.0
                for k in range(3):
                    acc = acc + Fp[3 * k + i] * Fx[3 * k + j]
                R[3 * i + j] = acc
        for i in range(3):
            acc = 0.0
            for k in range(3):
                acc = acc + R[3 * k + i] * P1[k]
            c[i] = X1[i] - acc
        ok = 1
        for pi in range(3):
            if pi == 0:
                fi = f1
                Xi = X1
            elif pi == 1:
                fi = f2
                Xi = X2
            else:
                fi = f3
                Xi = X3
            _sub(Xi, c, dd)
            for i in range(3):
                acc = 0.0
                for k in range(3):
                    acc = acc + R[3 * i + k] * dd[k]
                pp[i] = acc
            nrm = sqrt(_dot(pp, pp))
            if pp[2] <= DEPTH_EPS or nrm == 0.0:
                ok = 0
                break
            e0 = pp[0] / nrm - fi[0]
            e1 = pp[1] / nrm - fi[1]
            e2 = pp[2] / nrm - fi[2]
            if e0 * e0 + e1 * e1 + e2 * e2 > 1e-12:
                ok = 0
                break
        if ok:
            for i in range(9):
                Rs[9 * nsol + i] = R[i]
            for i in range(3):
                cs[3 * nsol + i] = c[i]
            nsol += 1
    return nsol


def p3p(bearings, points):
    cdef double[:, ::1] f = np.ascontiguousarray(bearings[:3], dtype=np.float64)
    cdef double[:, ::1] X = np.ascontiguousarray(points[:3], dtype=np.float64)
    cdef double Rs[72]
    cdef double cs[24]
    cdef int n, k
    with nogil:
        n = p3p_solve(&f[0, 0], &f[1, 0], &f[2, 0], &X[0, 0], &X[1, 0], &X[2, 0], Rs, cs)
    out = []
    for k in range(n):
        out.append((np.array([Rs[9 * k + i] for i in range(9)]).reshape(3, 3),
                    np.array([cs[3 * k + i] for i in range(3)])))
    return out


cdef long _iterations_needed(long n_inliers, long n_total, double log_one_minus_eta, long max_iters) noexcept nogil:
    cdef double w = <double>n_inliers / <double>n_total
    cdef double w4 = w * w * w * w
    cdef double denom, need
    if w4 >= 1.0:
        return 1
    if w4 <= 0.0:
        return max_iters
    denom = log1p(-w4)
    if denom >= 0.0:
        return max_iters
    need = ceil(log_one_minus_eta / denom)
    if need < 1:
        need = 1
    if need > max_iters:
        return max_iters
    return <long>need


def iterations_needed(n_inliers, n_total, log_one_minus_eta, max_iters):
    return _iterations_needed(n_inliers, n_total, log_one_minus_eta, max_iters)


cdef inline double _reproj_sq(const double *R, const double *c, const double *X,
                              const double *intr, const double *px) noexcept nogil:
    cdef double d0 = X[0] - c[0]
    cdef double d1 = X[1] - c[1]
    cdef double d2 = X[2] - c[2]
    cdef double p0 = R[0] * d0 + R[1] * d1 + R[2] * d2
    cdef double p1 = R[3] * d0 + R[4] * d1 + R[5] * d2
    cdef double p2 = R[6] * d0 + R[7] * d1 + R[8] * d2
    cdef double du, dv
    if p2 <= DEPTH_EPS:
        return INFINITY
    du = intr[0] * p0 / p2 + intr[2] - px[0]
    dv = intr[1] * p1 / p2 + intr[3] - px[1]
    return du * du + dv * dv


cdef long _count_inliers(const double *R, const double *c, double[:, ::1] points,
                         double[:, ::1] pixels, const double *intr, double tau2,
                         long must_beat) noexcept nogil:
    """Inlier count, or -1 once it can no longer exceed ``must_beat``."""
    cdef long n = points.shape[0]
    cdef long i, count = 0
    for i in range(n):
        if _reproj_sq(R, c, &points[i, 0], intr, &pixels[i, 0]) < tau2:
            count += 1
        elif count + (n - i - 1) <= must_beat:
            return -1
    return count


def count_inliers(R, c, points, pixels, intr, double tau):
    cdef double[::1] Rv = np.ascontiguousarray(R, dtype=np.float64).ravel()
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64).ravel()
    cdef double[::1] iv = np.ascontiguousarray(intr, dtype=np.float64).ravel()
    cdef double[:, ::1] X = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] px = np.ascontiguousarray(pixels, dtype=np.float64)
    return _count_inliers(&Rv[0], &cv[0], X, px, &iv[0], tau * tau, -1)


def ransac_chunk(long[:, ::1] samples, double[:, ::1] bearings, double[:, ::1] pixels,
                 double[:, ::1] points, double[::1] intr, double tau, long best_count,
                 double[::1] best_R, double[::1] best_c, long iters, long bound,
                 long max_iters, double log_one_minus_eta, long min_inliers):
    """Evaluate hypotheses from ``samples`` until ``bound`` iterations are spent.

    Updates ``best_R`` (9,) and ``best_c`` (3,) in place and returns
    ``(best_count, iters, bound)``.
    """
    cdef long n = points.shape[0]
    cdef long m = samples.shape[0]
    cdef double tau2 = tau * tau
    cdef double Rs[72]
    cdef double cs[24]
    cdef long row, i0, i1, i2, i3, score, need
    cdef int nsol, k, chosen, i
    cdef double err4, e
    with nogil:
        for row in range(m):
            if iters >= bound:
                break
            iters += 1
            i0 = samples[row, 0]
            i1 = samples[row, 1]
            i2 = samples[row, 2]
            i3 = samples[row, 3]
            nsol = p3p_solve(&bearings[i0, 0], &bearings[i1, 0], &bearings[i2, 0],
                             &points[i0, 0], &points[i1, 0], &points[i2, 0], Rs, cs)
            chosen = -1
            err4 = INFINITY
            for k in range(nsol):
                e = _reproj_sq(&Rs[9 * k], &cs[3 * k], &points[i3, 0], &intr[0], &pixels[i3, 0])
                if e < err4:
                    chosen = k
                    err4 = e
            if chosen < 0 or not err4 < tau2:
                continue
            score = _count_inliers(&Rs[9 * chosen], &cs[3 * chosen], points, pixels, &intr[0],
                                   tau2, best_count)
            if score > best_count:
                best_count = score
                for i in range(9):
                    best_R[i] = Rs[9 * chosen + i]
                for i in range(3):
                    best_c[i] = cs[3 * chosen + i]
                need = _iterations_needed(max(score, min_inliers), n, log_one_minus_eta, max_iters)
                if need < bound:
                    bound = need
    return best_count, iters, bound
