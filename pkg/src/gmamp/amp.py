"""Classical AMP/BAMP recursion and its large-system state-evolution oracle.

One iteration, starting from estimate x, residual z and the residual-based
noise level sigma = ||z||/sqrt(m):

    r      = x + B z                 (B = A^T for classical AMP)
    x+, b+ = denoiser(r, sigma^2)    (b+ = (1/m) sum_n eta'(r_n))
    z+     = y - A x+ + b+ z         (Onsager-corrected residual)
    sigma+ = ||z+|| / sqrt(m)

The denoiser is pluggable: any callable (r, sigma_sq) -> DenoiserOutput.
"""

from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .errors import DivergenceError
from .mixtures import DenoiserOutput, denoise, gm_pdf, posterior_variance, GaussianMixture

DIVERGENCE_FACTOR = 1e3  # stop when sigma exceeds this multiple of its start value


@dataclass(frozen=True)
class LinearModel:
    """One compressed-sensing instance y = A x + w.

    A is m x N with m < N (entries nominally iid N(0, 1/m)), y the m
    observations, noise_var the variance of w (0 for a noiseless instance).
    """

    A: np.ndarray
    y: np.ndarray
    noise_var: float

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if A.ndim != 2:
            raise ValueError("A must be 2-D")
        m, N = A.shape
        if m >= N:
            raise ValueError("need m < N, got A of shape %s" % (A.shape,))
        if y.shape != (m,):
            raise ValueError("y must have shape (%d,), got %s" % (m, y.shape))
        if not np.all(np.isfinite(A)) or not np.all(np.isfinite(y)):
            raise ValueError("A and y must be finite")
        if not self.noise_var >= 0.0:
            raise ValueError("noise_var must be >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "y", y)

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def N(self):
        return self.A.shape[1]


@dataclass(frozen=True)
class AmpState:
    """Per-iteration state: estimate, residual, Onsager scalar, noise level."""

    x_hat: np.ndarray
    z: np.ndarray
    b: float
    sigma: float
    iter: int


def effective_noise(z):
    """Residual-based noise estimate sigma = ||z||_2 / sqrt(m)."""
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        raise ValueError("empty residual")
    return float(np.linalg.norm(z) / np.sqrt(z.shape[-1]))


def initial_state(model):
    """x = 0, z = y, b = 0, sigma = ||y||/sqrt(m)."""
    return AmpState(
        x_hat=np.zeros(model.N),
        z=model.y.copy(),
        b=0.0,
        sigma=effective_noise(model.y),
        iter=0,
    )


def soft_threshold_denoiser(r, sigma_sq, lam, m=None):
    """Soft threshold at lam * sigma: eta(r) = sign(r) max(|r| - lam*sigma, 0).

    The derivative is the support indicator, so the Onsager scalar is the
    support count over m.
    """
    if lam < 0.0:
        raise ValueError("lam must be >= 0")
    r = np.asarray(r, dtype=float)
    theta = lam * np.sqrt(sigma_sq)
    estimate = np.sign(r) * np.maximum(np.abs(r) - theta, 0.0)
    derivative = (np.abs(r) > theta).astype(float)
    if m is None:
        m = r.shape[-1]
    return DenoiserOutput(estimate=estimate, derivative=derivative, onsager_scalar=float(derivative.sum() / m))


def matched_denoiser(gm, m):
    """Denoiser callable for amp_step: the mixture MMSE estimator for `gm`."""

    def eta(r, sigma_sq):
        return denoise(r, sigma_sq, gm, m=m)

    return eta


def l1_denoiser(lam, m):
    """Denoiser callable for amp_step: soft threshold with multiplier lam."""

    def eta(r, sigma_sq):
        return soft_threshold_denoiser(r, sigma_sq, lam, m=m)

    return eta


def amp_step(state, model, denoiser, B=None):
    """One iteration of the recursion; see the module docstring for the order.

    The Onsager coefficient applied in the new residual is the one produced by
    this step's denoiser call.  B defaults to A^T.

    Raises
    ------
    DivergenceError
        If any intermediate quantity is non-finite.
    """
    A, y, m = model.A, model.y, model.m
    if B is None:
        B = A.T
    if state.x_hat.shape != (model.N,) or state.z.shape != (m,):
        raise ValueError("state dimensions do not match the model")
    if B.shape != (model.N, m):
        raise ValueError("B must have shape (N, m) = (%d, %d)" % (model.N, m))
    r = state.x_hat + B @ state.z
    # sigma == 0 only at the exact fixed point (z == 0); the denoiser limit is
    # taken by substituting the smallest positive double.
    sigma_sq = state.sigma**2 if state.sigma > 0.0 else np.finfo(float).tiny
    out = denoiser(r, sigma_sq)
    x_new = out.estimate
    b_new = float(out.onsager_scalar)
    z_new = y - A @ x_new + b_new * state.z
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(z_new)) and np.isfinite(b_new)):
        raise DivergenceError(
            "non-finite state at iteration %d" % (state.iter + 1), iteration=state.iter + 1
        )
    return AmpState(x_hat=x_new, z=z_new, b=b_new, sigma=effective_noise(z_new), iter=state.iter + 1)


def run_amp(model, denoiser, T, B=None):
    """Run T iterations from the standard initial state.

    Returns the list of the T visited states (the initial state excluded).
    Stops early with DivergenceError (carrying the partial trajectory) when
    sigma exceeds DIVERGENCE_FACTOR times its initial value.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    state = initial_state(model)
    sigma0 = max(state.sigma, np.finfo(float).tiny)
    trajectory = []
    for _ in range(T):
        try:
            state = amp_step(state, model, denoiser, B=B)
        except DivergenceError as err:
            raise DivergenceError(str(err), iteration=err.iteration, trajectory=trajectory) from None
        trajectory.append(state)
        if state.sigma > DIVERGENCE_FACTOR * sigma0:
            raise DivergenceError(
                "sigma grew to %.3g (> %g x initial %.3g) at iteration %d"
                % (state.sigma, DIVERGENCE_FACTOR, sigma0, state.iter),
                iteration=state.iter,
                trajectory=trajectory,
            )
    return trajectory


def gm_mmse(prior, tau_sq):
    """MMSE of estimating x ~ prior from x + tau * g, g ~ N(0,1).

    For the matched posterior-mean denoiser this equals E_r[Var(x | r)] with
    r marginally a mixture with variances var_l + tau_sq, which keeps the
    computation a single 1-D integral with point masses summed exactly inside
    the integrand.
    """
    if not tau_sq > 0.0:
        raise ValueError("tau_sq must be > 0")
    widened = GaussianMixture(prior.weights, prior.means, prior.variances + tau_sq)

    def integrand(r):
        return gm_pdf(r, widened) * posterior_variance(np.array([r]), tau_sq, prior)[0]

    spread = 10.0 * np.sqrt(prior.variances + tau_sq)
    lo = float(np.min(prior.means - spread))
    hi = float(np.max(prior.means + spread))
    interior = sorted(float(mu) for mu in prior.means if lo < mu < hi)
    val, abserr = quad(integrand, lo, hi, points=interior, limit=200, epsabs=1e-12, epsrel=1e-10)
    if not np.isfinite(val) or abserr > max(1e-9, 1e-6 * abs(val)):
        raise RuntimeError("mmse quadrature did not converge (value %g, abserr %g)" % (val, abserr))
    return float(val)


def state_evolution(prior, delta, noise_var, T):
    """Scalar state-evolution recursion for the matched mixture denoiser.

    tau2[0] = noise_var + E[x^2]/delta and
    tau2[t+1] = noise_var + mmse(prior, tau2[t]) / delta.

    Returns the length-(T+1) array [tau2_0, ..., tau2_T].  The predicted MSE
    after layer t is (tau2[t] - noise_var) * delta.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError("delta must be in (0, 1]")
    if not noise_var > 0.0:
        raise ValueError("noise_var must be > 0")
    if T < 0:
        raise ValueError("T must be >= 0")
    tau_sq = np.empty(T + 1)
    tau_sq[0] = noise_var + prior.second_moment() / delta
    for t in range(T):
        tau_sq[t + 1] = noise_var + gm_mmse(prior, tau_sq[t]) / delta
    return tau_sq


def se_nmse_db(prior, delta, noise_var, T):
    """Predicted per-layer NMSE in dB for layers 1..T, from state evolution."""
    tau_sq = state_evolution(prior, delta, noise_var, T)
    mse = (tau_sq[1:] - noise_var) * delta
    return 10.0 * np.log10(mse / prior.second_moment())


def trajectory_records(trajectory, x_true=None):
    """Per-iteration (iter, sigma, nmse_db) rows for CSV export.

    nmse_db is None when the ground truth is not supplied.
    """
    rows = []
    for state in trajectory:
        if x_true is not None:
            from .simulate import nmse, nmse_db

            db = nmse_db(nmse(state.x_hat, x_true))
        else:
            db = None
        rows.append({"iter": state.iter, "sigma": state.sigma, "nmse_db": db})
    return rows
