"""Gaussian-mixture priors and the component-wise MMSE denoiser.

A scalar prior p(x) = sum_l w_l N(x; mu_l, var_l) observed through additive
Gaussian noise r = x + v, v ~ N(0, s2), has a Gaussian-mixture posterior whose
mean and input derivative are available in closed form.  Those two quantities
are what the AMP recursion consumes, so they are computed together here.

Zero-variance components are allowed and encode exact point masses (discrete
alphabets); every formula below stays finite for var_l = 0 as long as the
channel noise s2 is strictly positive.
"""

from dataclasses import dataclass

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

_SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class GaussianMixture:
    """An L-component scalar Gaussian mixture.

    Parameters
    ----------
    weights : array_like, shape (L,)
        Component probabilities; must sum to 1.
    means : array_like, shape (L,)
        Component means.
    variances : array_like, shape (L,)
        Component variances, >= 0.  A zero variance is an exact point mass.
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_1d(np.asarray(self.means, dtype=float))
        var = np.atleast_1d(np.asarray(self.variances, dtype=float))
        if not (w.ndim == mu.ndim == var.ndim == 1):
            raise ValueError("weights, means, variances must be 1-D")
        if not (w.size == mu.size == var.size):
            raise ValueError(
                "component count mismatch: %d weights, %d means, %d variances"
                % (w.size, mu.size, var.size)
            )
        if w.size < 1:
            raise ValueError("mixture needs at least one component")
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(mu)) or not np.all(np.isfinite(var)):
            raise ValueError("mixture parameters must be finite")
        if np.any(w < 0.0) or np.any(w > 1.0):
            raise ValueError("weights must lie in [0, 1]")
        if abs(w.sum() - 1.0) > _SIMPLEX_TOL:
            raise ValueError("weights must sum to 1 (got %.17g)" % w.sum())
        if np.any(var < 0.0):
            raise ValueError("variances must be >= 0")
        w.setflags(write=False)
        mu.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def n_components(self):
        return self.weights.size

    def mean(self):
        """Prior mean sum_l w_l mu_l."""
        return float(self.weights @ self.means)

    def second_moment(self):
        """Prior second moment E[x^2] = sum_l w_l (mu_l^2 + var_l)."""
        return float(self.weights @ (self.means**2 + self.variances))

    def variance(self):
        return self.second_moment() - self.mean() ** 2

    def shifted(self, c):
        """The mixture of x + c."""
        return GaussianMixture(self.weights, self.means + c, self.variances)

    def to_dict(self):
        return {
            "L": int(self.n_components),
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        gm = cls(d["weights"], d["means"], d["variances"])
        if "L" in d and int(d["L"]) != gm.n_components:
            raise ValueError("declared L=%s does not match %d components" % (d["L"], gm.n_components))
        return gm


@dataclass(frozen=True)
class PosteriorTerms:
    """Per-entry, per-component posterior decomposition, all shaped (n, L).

    resp is the normalized responsibility of component l for entry n, raw the
    unnormalized version (may underflow to 0 far in the tails; resp is computed
    in the log domain and does not), post_means / post_vars the per-component
    posterior Gaussian parameters.
    """

    resp: np.ndarray
    raw: np.ndarray
    post_means: np.ndarray
    post_vars: np.ndarray


@dataclass(frozen=True)
class DenoiserOutput:
    """Denoiser value, its input derivative, and the Onsager scalar.

    onsager_scalar = (1/m) sum_n derivative_n, i.e. (N/m) * mean(derivative)
    for an N-entry input.
    """

    estimate: np.ndarray
    derivative: np.ndarray
    onsager_scalar: float


def _check_channel(r, sigma_sq):
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("input vector contains non-finite entries")
    sigma_sq = float(sigma_sq)
    if not sigma_sq > 0.0:
        raise ValueError("effective noise variance must be > 0 (got %g)" % sigma_sq)
    return r, sigma_sq


def gm_pdf(x, gm):
    """Mixture density sum_l w_l N(x; mu_l, var_l) at x (scalar or array).

    Undefined when any component is a point mass; the posterior/denoiser path
    handles zero variances analytically, the plain density cannot.
    """
    if np.any(gm.variances == 0.0):
        raise ValueError("density undefined: mixture contains a point-mass (zero-variance) component")
    x = np.asarray(x, dtype=float)
    diff = x[..., None] - gm.means
    comp = np.exp(-0.5 * diff**2 / gm.variances) / np.sqrt(2.0 * np.pi * gm.variances)
    out = comp @ gm.weights
    return float(out) if out.ndim == 0 else out


def _log_responsibilities(r, sigma_sq, gm):
    """log beta with the component axis last: shape (*r.shape, L).

    Computed entirely in the log domain; rows are later normalized by
    max-subtraction so no entry can underflow to an all-zero row.
    """
    d = gm.variances + sigma_sq  # > 0 because sigma_sq > 0
    with np.errstate(divide="ignore"):  # log(0) = -inf for zero-weight components
        logw = np.log(gm.weights)
    diff = np.asarray(r, dtype=float)[..., None] - gm.means
    return logw - 0.5 * (LOG_2PI + np.log(d)) - 0.5 * diff**2 / d


def posterior_terms(r, sigma_sq, gm):
    """Posterior mixture decomposition of p(x_n | r_n) for every entry of r.

    Parameters
    ----------
    r : array_like, shape (n,)
        Noisy pseudo-observations.
    sigma_sq : float
        Effective channel noise variance, > 0.
    gm : GaussianMixture
        Prior.

    Returns
    -------
    PosteriorTerms
    """
    r, sigma_sq = _check_channel(r, sigma_sq)
    log_beta = _log_responsibilities(r, sigma_sq, gm)
    shifted = log_beta - log_beta.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    resp = e / e.sum(axis=-1, keepdims=True)
    d = gm.variances + sigma_sq
    gamma = (r[..., None] * gm.variances + gm.means * sigma_sq) / d
    nu = np.broadcast_to(gm.variances * sigma_sq / d, gamma.shape).copy()
    with np.errstate(under="ignore"):
        raw = np.exp(log_beta)
    return PosteriorTerms(resp=resp, raw=raw, post_means=gamma, post_vars=nu)


def denoise(r, sigma_sq, gm, m=None):
    """MMSE denoiser eta(r) = E[x | r] under the mixture prior, with derivative.

    eta(r_n)    = sum_l resp_nl * gamma_nl
    eta'(r_n)   = sum_l (var_l / (var_l + s2)) resp_nl + gamma_nl * d resp_nl / d r_n
    where d resp_nl / d r_n = resp_nl * (slope_nl - sum_k resp_nk slope_nk) and
    slope_nl = -(r_n - mu_l) / (var_l + s2) is the log-responsibility slope.

    Parameters
    ----------
    r : array_like, shape (n,)
    sigma_sq : float
        Effective noise variance, > 0.
    gm : GaussianMixture
    m : int, optional
        Measurement count used for the Onsager scalar (1/m) sum_n eta'(r_n).
        Defaults to len(r).

    Returns
    -------
    DenoiserOutput
    """
    r, sigma_sq = _check_channel(r, sigma_sq)
    terms = posterior_terms(r, sigma_sq, gm)
    resp, gamma = terms.resp, terms.post_means
    d = gm.variances + sigma_sq
    estimate = np.sum(resp * gamma, axis=-1)
    slope = -(r[..., None] - gm.means) / d
    slope_bar = np.sum(resp * slope, axis=-1, keepdims=True)
    dresp = resp * (slope - slope_bar)
    derivative = np.sum(resp * (gm.variances / d), axis=-1) + np.sum(gamma * dresp, axis=-1)
    if m is None:
        m = r.shape[-1]
    onsager = float(derivative.sum() / m) if derivative.ndim == 1 else derivative.sum(axis=-1) / m
    return DenoiserOutput(estimate=estimate, derivative=derivative, onsager_scalar=onsager)


def posterior_variance(r, sigma_sq, gm):
    """Posterior variance Var[x | r] per entry: sum_l resp (nu + gamma^2) - eta^2."""
    terms = posterior_terms(r, sigma_sq, gm)
    eta = np.sum(terms.resp * terms.post_means, axis=-1)
    second = np.sum(terms.resp * (terms.post_vars + terms.post_means**2), axis=-1)
    return second - eta**2


def gm_from_discrete(alphabet, probs, floor_var=0.0):
    """Mixture encoding a discrete distribution over `alphabet` with `probs`.

    Each symbol becomes a component with variance floor_var (default 0, an
    exact point mass; the denoiser handles that case analytically).
    """
    alphabet = np.atleast_1d(np.asarray(alphabet, dtype=float))
    probs = np.atleast_1d(np.asarray(probs, dtype=float))
    if alphabet.size != probs.size:
        raise ValueError("alphabet and probs must have the same length")
    if np.unique(alphabet).size != alphabet.size:
        raise ValueError("alphabet values must be distinct")
    if np.any(probs < 0.0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probs must be a probability distribution (sum=%.17g)" % probs.sum())
    if floor_var < 0.0:
        raise ValueError("floor_var must be >= 0")
    # Renormalize the <=1e-9 slack away so the mixture invariant holds exactly.
    probs = probs / probs.sum()
    return GaussianMixture(probs, alphabet, np.full(alphabet.size, float(floor_var)))


def gm_sample(gm, n, rng):
    """Draw n i.i.d. samples: a component index ~ weights, then a Gaussian draw.

    Zero-variance components yield the exact point mu_l.  Deterministic for a
    seeded numpy Generator.
    """
    idx = rng.choice(gm.n_components, size=n, p=gm.weights)
    std = np.sqrt(gm.variances[idx])
    x = gm.means[idx].copy()
    cont = std > 0.0
    if np.any(cont):
        x[cont] += std[cont] * rng.standard_normal(int(cont.sum()))
    return x
