"""Flip-equivariant diffeomorphisms on S3 with exact log-Jacobian determinants.

Three transform families act on unit quaternions: symmetrized Moebius maps,
projective convex gradient maps, and affine quaternion maps (the quadratic
special case of the latter). A symmetrized von-Mises-Fisher density serves as
the rotation base. Everything broadcasts over leading axes and runs on the
autodiff tape or plain arrays alike, except the iterative cg_inverse which is
a plain-numpy solver.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ive

from . import autodiff as ad
from .errors import NumericalError
from .geom import quat_normalize, tangent_basis

LOG_UNIFORM_S3 = -np.log(2.0 * np.pi**2)


def moebius_center(v):
    """Realize an unconstrained R4 parameter as a center with ||omega|| < 1."""
    return ad.mul(0.99, ad.tanh_shrink(v))


def moebius_reflect(p, q):
    """Generalized Moebius building block p - 2 proj_{q-p}(p); an involution on S3."""
    p = np.asarray(p, dtype=np.float64)
    u = np.asarray(q, dtype=np.float64) - p
    coef = np.sum(p * u, axis=-1, keepdims=True) / np.sum(u * u, axis=-1, keepdims=True)
    return p - 2.0 * coef * u


def moebius_sym_raw(p, omega):
    """Unsymmetrized-normalization route: normalize(Phi_M(p; w) + Phi_M(p; -w))."""
    return quat_normalize(moebius_reflect(p, omega) + moebius_reflect(p, -omega))


def moebius_planar_forward(x, r):
    """Planar coordinate map of the raw symmetrized Moebius transform."""
    x, r = np.asarray(x, dtype=np.float64), np.asarray(r, dtype=np.float64)
    return x * (r * r - 1.0) / np.sqrt(1.0 + r**4 + r * r * (2.0 - 4.0 * x * x))


def moebius_planar_inverse(xp, r):
    """Inverse of moebius_planar_forward."""
    xp, r = np.asarray(xp, dtype=np.float64), np.asarray(r, dtype=np.float64)
    return -xp * (r * r + 1.0) / np.sqrt(1.0 + r**4 + r * r * (4.0 * xp * xp - 2.0))


def moebius_sym_logdet(p, omega):
    """log volume factor log[(1-r^2)(1+r^2)^3 / (4 q_y^2 + (1-r^2)^2)^2] at p."""
    r2 = ad.dot(omega, omega)
    s = ad.dot(p, omega)
    qy2 = ad.clamp(ad.sub(r2, ad.square(s)), lo=0.0)
    denom = ad.add(ad.mul(4.0, qy2), ad.square(ad.sub(1.0, r2)))
    return ad.sub(
        ad.add(ad.log(ad.sub(1.0, r2)), ad.mul(3.0, ad.log(ad.add(1.0, r2)))),
        ad.mul(2.0, ad.log(denom)),
    )


def moebius_sym_forward(p, omega):
    """Symmetrized Moebius map (identity at omega = 0) with its logdet.

    Frame-free closed form of the planar construction composed with the
    global negation: p' = ((1+r^2) p - 2 <p,w> w) / sqrt((1+r^2)^2 - 4 <p,w>^2).
    """
    r2 = ad.dot(omega, omega, keepdims=True)
    s = ad.dot(p, omega, keepdims=True)
    one_plus = ad.add(1.0, r2)
    d = ad.sub(ad.square(one_plus), ad.mul(4.0, ad.square(s)))
    num = ad.sub(ad.mul(one_plus, p), ad.mul(ad.mul(2.0, s), omega))
    return ad.div(num, ad.sqrt(d)), moebius_sym_logdet(p, omega)


def moebius_sym_inverse(pp, omega):
    """Inverse of moebius_sym_forward."""
    r2 = ad.dot(omega, omega, keepdims=True)
    s = ad.dot(pp, omega, keepdims=True)
    one_minus = ad.sub(1.0, r2)
    d = ad.add(ad.square(one_minus), ad.mul(4.0, ad.square(s)))
    num = ad.add(ad.mul(one_minus, pp), ad.mul(ad.mul(2.0, s), omega))
    return ad.div(num, ad.sqrt(d))


@dataclass
class ConvexPotentialParams:
    """phi(p) = u^T log(b + cosh(W p)) + c p^T p with u, b, c realized positive.

    W has shape (..., H, 4); u_raw and b_raw shape (..., H); c_raw shape (...,).
    Fields may be arrays or autodiff Vars.
    """

    W: object
    u_raw: object
    b_raw: object
    c_raw: object


def _cg_pieces(p, params):
    w = params.W
    u = ad.softplus(params.u_raw)
    b = ad.softplus(params.b_raw)
    cshape = ad.value_of(params.c_raw).shape
    c = ad.reshape(ad.softplus(params.c_raw), cshape + (1,))

    pshape = ad.value_of(p).shape
    pe = ad.reshape(p, pshape[:-1] + (1, 4))
    z = ad.sum(ad.mul(w, pe), axis=-1)
    ch = ad.add(b, ad.cosh(z))
    t = ad.div(ad.sinh(z), ch)
    grad = ad.add(
        ad.sum(ad.mul(w, ad.reshape(ad.mul(u, t), ad.value_of(z).shape + (1,))), axis=-2),
        ad.mul(ad.mul(2.0, c), p),
    )
    # diagonal of the softsign Hessian: cosh(z)(b+cosh) - sinh^2 = 1 + b cosh(z)
    hdiag = ad.mul(u, ad.div(ad.add(1.0, ad.mul(b, ad.cosh(z))), ad.square(ch)))
    return grad, hdiag, c


def cg_forward(p, params):
    """Projective convex gradient map grad phi / ||grad phi|| with exact logdet."""
    grad, hdiag, c = _cg_pieces(p, params)
    gn = ad.norm(grad, keepdims=True)
    pp = ad.div(grad, gn)

    e_in = tangent_basis(p)
    e_out = tangent_basis(pp)
    we = ad.matmul(params.W, e_in)
    hshape = ad.value_of(hdiag).shape
    he = ad.add(
        ad.matmul(ad.swap_last(params.W), ad.mul(ad.reshape(hdiag, hshape + (1,)), we)),
        ad.mul(ad.reshape(ad.mul(2.0, c), ad.value_of(c).shape + (1,)), e_in),
    )
    a = ad.matmul(ad.swap_last(e_out), he)
    det = ad.det3(a)
    gn_flat = ad.reshape(gn, ad.value_of(gn).shape[:-1])
    # log|det| as log(det^2)/2; strict convexity keeps det away from 0
    logdet = ad.sub(ad.mul(0.5, ad.log(ad.square(det))), ad.mul(3.0, ad.log(gn_flat)))
    return pp, logdet


def quad_gradient_map(p, a):
    """Gradient map of the quadratic potential p^T A^T A p, with logdet.

    Runs the same gradient/Hessian tangent-determinant route as cg_forward;
    the affine map W p/||W p|| with W = A^T A must agree exactly.
    """
    m = ad.matmul(ad.swap_last(a), a)
    grad = ad.mul(2.0, _batched_matvec(m, p) if ad.value_of(m).ndim > 2 else ad.matvec(m, p))
    gn = ad.norm(grad, keepdims=True)
    pp = ad.div(grad, gn)
    e_in = tangent_basis(p)
    e_out = tangent_basis(pp)
    he = ad.matmul(ad.mul(2.0, m), e_in)
    a3 = ad.matmul(ad.swap_last(e_out), he)
    nf = ad.reshape(gn, ad.value_of(gn).shape[:-1])
    logdet = ad.sub(ad.mul(0.5, ad.log(ad.square(ad.det3(a3)))), ad.mul(3.0, ad.log(nf)))
    return pp, logdet


def cg_inverse(pp, params, tol=1e-5, max_iter=50, return_iters=False):
    """Invert cg_forward at a single point by BFGS on ||Phi(x/||x||) - p'||^2.

    Starts at p'; raises NumericalError with the final residual if the
    residual does not reach tol within max_iter iterations.
    """
    pp = np.asarray(pp, dtype=np.float64)
    w = ad.value_of(params.W)
    u = np.logaddexp(0.0, ad.value_of(params.u_raw))
    b = np.logaddexp(0.0, ad.value_of(params.b_raw))
    c = np.logaddexp(0.0, ad.value_of(params.c_raw))

    def phi_and_grad_of_loss(x):
        nx = np.linalg.norm(x)
        q = x / nx
        z = w @ q
        ch = b + np.cosh(z)
        g = w.T @ (u * np.sinh(z) / ch) + 2.0 * c * q
        gn = np.linalg.norm(g)
        phi = g / gn
        res = phi - pp
        loss = float(res @ res)
        hdiag = u * (1.0 + b * np.cosh(z)) / ch**2
        hr = w.T @ (hdiag * (w @ (res - phi * (phi @ res)))) + 2.0 * c * (
            res - phi * (phi @ res)
        )
        gl = 2.0 * (hr - q * (q @ hr)) / (nx * gn)
        return loss, gl, np.sqrt(loss)

    x = pp.copy()
    loss, gl, resid = phi_and_grad_of_loss(x)
    binv = np.eye(4)
    iters = 0
    while resid > tol:
        if iters >= max_iter:
            raise NumericalError(
                f"cg_inverse did not converge: residual {resid:.3e} after {max_iter} iterations"
            )
        d = -binv @ gl
        if d @ gl > 0:  # safeguard against a corrupted approximation
            d, binv = -gl, np.eye(4)
        step = _wolfe_cubic(lambda t: phi_and_grad_of_loss(x + t * d)[:2], loss, gl @ d, d)
        x_new = x + step * d
        loss_new, gl_new, resid = phi_and_grad_of_loss(x_new)
        s, y = x_new - x, gl_new - gl
        sy = s @ y
        if sy > 1e-14:
            rho = 1.0 / sy
            v = np.eye(4) - rho * np.outer(s, y)
            binv = v @ binv @ v.T + rho * np.outer(s, s)
        x, loss, gl = x_new, loss_new, gl_new
        iters += 1
    out = quat_normalize(x)
    return (out, iters) if return_iters else out


def _wolfe_cubic(f_and_g, f0, df0, d, c1=1e-4, c2=0.9, max_steps=25):
    """Strong-Wolfe line search with cubic interpolation; returns the step."""

    def eval_at(t):
        f, g = f_and_g(t)
        return f, float(g @ d)

    t_prev, f_prev, df_prev = 0.0, f0, df0
    t = 1.0
    for i in range(max_steps):
        f, df = eval_at(t)
        if f > f0 + c1 * t * df0 or (i > 0 and f >= f_prev):
            return _zoom(eval_at, t_prev, f_prev, df_prev, t, f, df, f0, df0, c1, c2)
        if abs(df) <= -c2 * df0:
            return t
        if df >= 0:
            return _zoom(eval_at, t, f, df, t_prev, f_prev, df_prev, f0, df0, c1, c2)
        t_prev, f_prev, df_prev = t, f, df
        t *= 2.0
    return t


def _zoom(eval_at, lo, flo, dflo, hi, fhi, dfhi, f0, df0, c1, c2, max_steps=25):
    for _ in range(max_steps):
        # cubic interpolation between lo and hi, bisection as fallback
        t = 0.5 * (lo + hi)
        if hi != lo:
            d1 = dflo + dfhi - 3.0 * (flo - fhi) / (lo - hi)
            disc = d1 * d1 - dflo * dfhi
            if disc >= 0:
                d2 = np.sign(hi - lo) * np.sqrt(disc)
                denom = dfhi - dflo + 2.0 * d2
                if denom != 0:
                    cand = hi - (hi - lo) * (dfhi + d2 - d1) / denom
                    if np.isfinite(cand) and min(lo, hi) < cand < max(lo, hi):
                        t = cand
        f, df = eval_at(t)
        if f > f0 + c1 * t * df0 or f >= flo:
            hi, fhi, dfhi = t, f, df
        else:
            if abs(df) <= -c2 * df0:
                return t
            if df * (hi - lo) >= 0:
                hi, fhi, dfhi = lo, flo, dflo
            lo, flo, dflo = t, f, df
        if abs(hi - lo) < 1e-16:
            return t
    return t


def affine_quat_forward(p, w):
    """Affine quaternion map W p / ||W p|| with exact logdet; rejects singular W."""
    wv = ad.value_of(w)
    if wv.ndim == 2:
        dets = np.linalg.det(wv)
    else:
        dets = np.linalg.det(wv.reshape(-1, 4, 4))
    if np.any(np.abs(dets) < 1e-12):
        raise NumericalError("affine quaternion map needs an invertible matrix")
    wp = ad.matvec(w, p) if ad.value_of(w).ndim == 2 else _batched_matvec(w, p)
    n = ad.norm(wp, keepdims=True)
    pp = ad.div(wp, n)
    e_in = tangent_basis(p)
    e_out = tangent_basis(pp)
    a = ad.matmul(ad.swap_last(e_out), ad.matmul(w, e_in))
    nf = ad.reshape(n, ad.value_of(n).shape[:-1])
    logdet = ad.sub(ad.mul(0.5, ad.log(ad.square(ad.det3(a)))), ad.mul(3.0, ad.log(nf)))
    return pp, logdet


def _batched_matvec(w, p):
    pshape = ad.value_of(p).shape
    pe = ad.reshape(p, pshape[:-1] + (1, 4))
    return ad.reshape(ad.matmul(pe, ad.swap_last(w)), pshape)


def affine_quat_map(p, w):
    """W p / ||W p||, the baseline rotation layer."""
    return affine_quat_forward(p, w)[0]


def affine_quat_inverse(pp, w):
    """Closed-form inverse W^{-1} p' / ||W^{-1} p'|| (plain numpy)."""
    wv = ad.value_of(w)
    pv = ad.value_of(pp)
    return quat_normalize(np.linalg.solve(wv, pv[..., None])[..., 0])


@dataclass(frozen=True)
class SymVMFParams:
    """Antipodally symmetrized von-Mises-Fisher density on S3."""

    mu: np.ndarray
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "mu", quat_normalize(np.asarray(self.mu, dtype=np.float64)))
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")


def log_c4(kappa):
    """log of the S3 VMF normalizer kappa / (4 pi^2 I1(kappa))."""
    if kappa == 0.0:
        return LOG_UNIFORM_S3
    # ive(1, k) = I1(k) exp(-k) keeps the large-kappa evaluation finite
    return float(np.log(kappa) - np.log(4.0 * np.pi**2) - (np.log(ive(1, kappa)) + kappa))


def svmf_logpdf(q, params):
    """log[(f(q; mu, kappa) + f(q; -mu, kappa)) / 2] = log C4 + log cosh(kappa <q, mu>).

    cosh is evaluated directly: |kappa <q, mu>| <= kappa stays far below the
    float64 overflow point for any concentration in scope, and evenness of
    cosh makes the result bitwise identical under q -> -q.
    """
    if params.kappa == 0.0:
        t = ad.dot(q, params.mu)
        return ad.add(ad.mul(0.0, t), LOG_UNIFORM_S3)
    a = ad.mul(params.kappa, ad.dot(q, params.mu))
    return ad.add(ad.log(ad.cosh(a)), log_c4(params.kappa))


def svmf_sample(params, rng, n):
    """Draw n quaternions: VMF via Wood's rejection on the cosine, then a coin flip."""
    kappa, mu = params.kappa, params.mu
    b = (-2.0 * kappa + np.sqrt(4.0 * kappa * kappa + 9.0)) / 3.0
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + 3.0 * np.log(1.0 - x0 * x0)

    t = np.empty(n)
    have = 0
    while have < n:
        m = max(n - have, 16)
        z = rng.beta(1.5, 1.5, size=m)
        cand = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        logu = np.log(rng.random(m))
        ok = kappa * cand + 3.0 * np.log(1.0 - x0 * cand) - c >= logu
        take = min(int(ok.sum()), n - have)
        t[have : have + take] = cand[ok][:take]
        have += take

    tang = rng.standard_normal((n, 3))
    tang /= np.linalg.norm(tang, axis=-1, keepdims=True)
    e = ad.value_of(tangent_basis(mu))
    v4 = tang @ e.T
    q = t[:, None] * mu + np.sqrt(np.clip(1.0 - t * t, 0.0, None))[:, None] * v4
    signs = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    return quat_normalize(q * signs[:, None])
