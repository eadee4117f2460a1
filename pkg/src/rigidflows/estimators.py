"""Free-energy estimation: generalized work, LFEP, MBAR, and error bars.

All energies are reduced (dimensionless); free energies are differences of
log partition functions, so constant shifts of either potential cancel.
Everything here is plain numpy on precomputed arrays; the flow side supplies
mapped energies and log-Jacobians.
"""

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError


def generalized_work(u0_vals, u1_vals, logdet):
    """Per-sample work of a mapped proposal: u1(Phi(x)) - u0(x) - logdet J_Phi.

    Exponential averaging of -work over samples of state 0 estimates
    exp(-(F1 - F0)); with the identity map this is the plain energy difference.
    """
    u0_vals = np.asarray(u0_vals, dtype=np.float64)
    u1_vals = np.asarray(u1_vals, dtype=np.float64)
    logdet = np.asarray(logdet, dtype=np.float64)
    try:
        ok = u0_vals.shape == u1_vals.shape and np.broadcast_shapes(u0_vals.shape, logdet.shape) == u0_vals.shape
    except ValueError:
        ok = False
    if not ok:
        raise ValidationError("work terms must share one shape per sample")
    return u1_vals - u0_vals - logdet


@dataclass(frozen=True)
class LfepResult:
    """Exponential-average estimate with its Jensen upper bound.

    `jensen_gap` (mean work minus the estimate) is nonnegative up to Monte
    Carlo noise; a large gap flags poor overlap of the mapped proposal.
    """

    delta_f: float
    mean_work: float
    n_samples: int

    @property
    def jensen_gap(self):
        return self.mean_work - self.delta_f


def lfep_estimate(work):
    """Free-energy difference -log mean(exp(-w)) in log space."""
    work = np.asarray(work, dtype=np.float64).ravel()
    if work.size == 0:
        raise ValidationError("lfep needs at least one work value")
    delta_f = -(logsumexp(-work) - np.log(work.size))
    return LfepResult(delta_f=float(delta_f), mean_work=float(work.mean()), n_samples=work.size)


def kish_ess(log_weights, percentage=False):
    """Kish effective sample size (sum w)^2 / sum w^2, computed in log space.

    Unnormalized log-weights are fine; the ratio is shift-invariant. With
    `percentage` the value is rescaled to 100 * ess / n.
    """
    lw = np.asarray(log_weights, dtype=np.float64).ravel()
    if lw.size == 0:
        raise ValidationError("kish_ess needs at least one weight")
    ess = float(np.exp(2.0 * logsumexp(lw) - logsumexp(2.0 * lw)))
    if percentage:
        return 100.0 * ess / lw.size
    return ess


# ---------------------------------------------------------------------------
# MBAR


def mbar_solve(u_kn, n_k, tol=1e-10, max_iter=10000, return_weights=False):
    """Reduced free energies of K states from pooled samples, F[0] = 0.

    `u_kn[k, n]` is the reduced energy of pooled sample n evaluated at state
    k; `n_k` are per-state sample counts in pooling order. The self-consistent
    iteration runs entirely in log space and stops when every free energy
    moves less than `tol`; non-convergence and non-overlapping states raise
    NumericalError.
    """
    u_kn = np.asarray(u_kn, dtype=np.float64)
    n_k = np.asarray(n_k, dtype=np.int64)
    if u_kn.ndim != 2 or n_k.ndim != 1 or n_k.shape[0] != u_kn.shape[0]:
        raise ValidationError("mbar needs u_kn of shape (K, N) and K sample counts")
    if np.any(n_k <= 0):
        raise ValidationError("every state must contribute at least one sample")
    if int(n_k.sum()) != u_kn.shape[1]:
        raise ValidationError("sample counts do not add up to the pooled sample number")
    k_states = u_kn.shape[0]
    log_n = np.log(n_k.astype(np.float64))
    f = np.zeros(k_states)
    for _ in range(max_iter):
        # log denominator per sample: logsumexp_j (log N_j + f_j - u_jn)
        log_denom = logsumexp(log_n[:, None] + f[:, None] - u_kn, axis=0)
        f_new = -logsumexp(-u_kn - log_denom[None, :], axis=1)
        f_new = f_new - f_new[0]
        delta = float(np.abs(f_new - f).max())
        f = f_new
        if delta < tol:
            break
    else:
        raise NumericalError(f"mbar did not converge within {max_iter} iterations (residual {delta:.3e})")
    log_denom = logsumexp(log_n[:, None] + f[:, None] - u_kn, axis=0)
    log_w = f[:, None] - u_kn - log_denom[None, :]  # log of normalized weights, rows sum to 1
    _check_overlap(log_w, n_k)
    if return_weights:
        return f, log_w
    return f


def _check_overlap(log_w, n_k):
    # overlap matrix O[k, j]: how much state k's weight rests on state j's samples;
    # a vanishing off-diagonal row means the difference to every other state is
    # unidentifiable from the data
    w = np.exp(log_w)
    edges = np.add.reduceat(w, np.r_[0, np.cumsum(n_k)[:-1]], axis=1)
    off = edges.sum(axis=1) - np.diag(edges)
    worst = int(np.argmin(off))
    if off[worst] < 1e-10:
        raise NumericalError(
            f"state {worst} shares no weight with any other state "
            f"(overlap {off[worst]:.3e}); free-energy differences are unidentifiable"
        )


def mbar_pair(u00, u01, u10, u11, tol=1e-10, max_iter=10000):
    """Two-state MBAR from per-state energy evaluations; returns F1 - F0.

    `uab` holds state-b reduced energies of the samples drawn from state a.
    """
    u00, u01, u10, u11 = (np.asarray(v, dtype=np.float64).ravel() for v in (u00, u01, u10, u11))
    if u00.shape != u01.shape or u10.shape != u11.shape:
        raise ValidationError("per-state energy arrays must pair up")
    u_kn = np.stack([np.concatenate([u00, u10]), np.concatenate([u01, u11])])
    f = mbar_solve(u_kn, np.array([u00.size, u10.size]), tol=tol, max_iter=max_iter)
    return float(f[1])


# ---------------------------------------------------------------------------
# resampling error bars


def bootstrap(estimator, sizes, b=10, seed=0):
    """Frame-resampling bootstrap: `estimator` maps index arrays to a float.

    `sizes` is one int (a single sample block) or a sequence of per-block
    sizes; the estimator receives one index array per block, resampled with
    replacement. Returns (values, sigma) with sigma the ddof-1 spread.
    """
    if b < 2:
        raise ValidationError("bootstrap needs at least two replicas")
    single = np.isscalar(sizes)
    block_sizes = [int(sizes)] if single else [int(s) for s in sizes]
    if any(s < 1 for s in block_sizes):
        raise ValidationError("every bootstrap block needs at least one frame")
    rng = np.random.default_rng(seed)
    values = np.empty(b)
    for i in range(b):
        idx = [rng.integers(0, s, size=s) for s in block_sizes]
        values[i] = float(estimator(idx[0] if single else idx))
    return values, float(values.std(ddof=1))


@dataclass(frozen=True)
class FreeEnergyEstimate:
    """A free-energy difference with bootstrap uncertainty."""

    value: float
    sigma: float
    b: int
    sample_counts: tuple
    n_molecules: int = None

    @property
    def per_molecule(self):
        if self.n_molecules is None:
            return None
        return self.value / self.n_molecules


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(np.asarray(arr, dtype=np.float64)).tobytes()).hexdigest()


def report(estimate, method, inputs):
    """Human-readable block with the estimate, its 2-sigma band, and input digests.

    `inputs` maps names to arrays; digests make the provenance of a printed
    number checkable against the exact files/arrays that produced it.
    """
    lines = [f"{method} free-energy estimate"]
    lines.append(f"  delta_f:       {estimate.value:+.10f}")
    if estimate.per_molecule is not None:
        lines.append(f"  per_molecule:  {estimate.per_molecule:+.10f}  (n_molecules {estimate.n_molecules})")
    lines.append(f"  two_sigma:     {2.0 * estimate.sigma:.10f}")
    lines.append(f"  bootstrap_B:   {estimate.b}")
    lines.append(f"  sample_counts: {json.dumps(list(estimate.sample_counts))}")
    lines.append("  inputs:")
    for name in sorted(inputs):
        lines.append(f"    {name}: sha256={_digest(inputs[name])}")
    return "\n".join(lines) + "\n"
