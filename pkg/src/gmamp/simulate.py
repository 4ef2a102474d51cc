"""Experiment harness: problem configs, data generation, and Monte-Carlo runs.

A problem instance is a measurement matrix with iid Gaussian entries of
variance 1/m, signals drawn iid from a prior (Bernoulli-Gauss, discrete, or a
general Gaussian mixture), and white Gaussian measurement noise calibrated to
a target SNR in dB.  The Monte-Carlo driver runs recovery algorithms over many
independent trials with a shared matrix, tracks per-layer NMSE with standard
errors, and masks out diverged trials instead of letting them poison the mean.

All randomness derives from a single integer seed through fixed SeedSequence
spawn keys, so identical configs reproduce identical data streams bit for bit.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import network
from .amp import se_nmse_db
from .mixtures import GaussianMixture, gm_from_discrete, gm_sample

# spawn keys carving independent random streams out of the master seed
_ROLE_KEYS = {"matrix": 0, "train": 1, "val": 2, "eval": 3, "tune": 4}

NMSE_DB_FLOOR = 1e-32


# ----------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class PriorSpec:
    """Declarative signal prior; to_mixture() yields the sampling/denoising form.

    Families:
      bg        params {"epsilon", "var"}: zero with prob 1-epsilon, else
                a N(0, var) draw.
      discrete  params {"alphabet", "probs"}: point masses.
      gm        params {"weights", "means", "variances"}: general mixture.
    """

    family: str
    params: dict

    def __post_init__(self):
        expected = {
            "bg": {"epsilon", "var"},
            "discrete": {"alphabet", "probs"},
            "gm": {"weights", "means", "variances"},
        }
        if self.family not in expected:
            raise ValueError("unknown prior family %r" % (self.family,))
        if set(self.params) != expected[self.family]:
            raise ValueError(
                "prior family %r needs params %s, got %s"
                % (self.family, sorted(expected[self.family]), sorted(self.params))
            )
        self.to_mixture()

    def to_mixture(self):
        p = self.params
        if self.family == "bg":
            eps = float(p["epsilon"])
            var = float(p["var"])
            if not 0.0 < eps <= 1.0:
                raise ValueError("epsilon must be in (0, 1]")
            if var <= 0.0:
                raise ValueError("var must be positive")
            return GaussianMixture([1.0 - eps, eps], [0.0, 0.0], [0.0, var])
        if self.family == "discrete":
            return gm_from_discrete(p["alphabet"], p["probs"])
        return GaussianMixture(p["weights"], p["means"], p["variances"])

    @property
    def epsilon(self):
        """Probability that a draw is not an exact zero."""
        gm = self.to_mixture()
        at_zero = (gm.means == 0.0) & (gm.variances == 0.0)
        return float(1.0 - gm.weights[at_zero].sum())

    def to_dict(self):
        out = {}
        for key, value in self.params.items():
            out[key] = list(np.asarray(value, dtype=float)) if np.ndim(value) else float(value)
        return {"family": self.family, "params": out}

    @classmethod
    def from_dict(cls, d):
        if set(d) != {"family", "params"}:
            raise ValueError("prior dict needs exactly the keys 'family' and 'params'")
        return cls(d["family"], dict(d["params"]))


def bernoulli_gauss(epsilon, var=1.0):
    return PriorSpec("bg", {"epsilon": float(epsilon), "var": float(var)})


def discrete_prior(alphabet, probs):
    return PriorSpec("discrete", {"alphabet": list(map(float, alphabet)), "probs": list(map(float, probs))})


# ----------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a training run or evaluation."""

    prior: PriorSpec
    N: int = 500
    delta: float = 0.5
    snr_db: float = 20.0
    L: int = 3
    T_max: int = 8
    variant: str = "learned"
    theta_init: str = "spread"
    seed: int = 0
    batch_train: int = 1000
    batch_val: int = 10000
    lr_new: float = 1e-3
    refine_lrs: tuple = (1e-4, 1e-5)
    max_steps: int = 10000
    eval_every: int = 50
    patience: int = 20
    min_delta_db: float = 0.01

    def __post_init__(self):
        if not isinstance(self.prior, PriorSpec):
            raise TypeError("prior must be a PriorSpec")
        if self.N < 2:
            raise ValueError("N must be at least 2")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if not np.isfinite(self.snr_db):
            raise ValueError("snr_db must be finite")
        if self.L < 1 or self.T_max < 1:
            raise ValueError("L and T_max must be positive")
        if self.variant not in ("learned", "matched"):
            raise ValueError("variant must be 'learned' or 'matched'")
        if self.theta_init not in ("spread", "prior"):
            raise ValueError("theta_init must be 'spread' or 'prior'")
        if self.variant == "matched" and self.L != self.prior.to_mixture().n_components:
            raise ValueError("matched variant requires L equal to the prior component count")
        if self.batch_train < 1 or self.batch_val < 1:
            raise ValueError("batch sizes must be positive")
        if self.lr_new <= 0 or any(lr <= 0 for lr in self.refine_lrs):
            raise ValueError("learning rates must be positive")
        if self.max_steps < 1 or self.eval_every < 1 or self.patience < 1:
            raise ValueError("max_steps, eval_every and patience must be positive")
        if self.min_delta_db < 0:
            raise ValueError("min_delta_db must be nonnegative")
        if not 1 <= self.m < self.N:
            raise ValueError("delta * N must round to m with 1 <= m < N")
        object.__setattr__(self, "refine_lrs", tuple(float(lr) for lr in self.refine_lrs))

    @property
    def m(self):
        return int(round(self.delta * self.N))

    def noise_var(self):
        return noise_variance(self.snr_db, self.delta, self.prior.to_mixture())

    def to_dict(self):
        return {
            "prior": self.prior.to_dict(),
            "N": self.N,
            "delta": self.delta,
            "snr_db": self.snr_db,
            "L": self.L,
            "T_max": self.T_max,
            "variant": self.variant,
            "theta_init": self.theta_init,
            "seed": self.seed,
            "batch_train": self.batch_train,
            "batch_val": self.batch_val,
            "lr_new": self.lr_new,
            "refine_lrs": list(self.refine_lrs),
            "max_steps": self.max_steps,
            "eval_every": self.eval_every,
            "patience": self.patience,
            "min_delta_db": self.min_delta_db,
        }

    @classmethod
    def from_dict(cls, d):
        known = {
            "prior", "N", "delta", "snr_db", "L", "T_max", "variant", "theta_init",
            "seed", "batch_train", "batch_val", "lr_new", "refine_lrs", "max_steps",
            "eval_every", "patience", "min_delta_db",
        }
        unknown = set(d) - known
        if unknown:
            raise ValueError("unknown config keys: %s" % sorted(unknown))
        if "prior" not in d:
            raise ValueError("config needs a 'prior' entry")
        kw = dict(d)
        kw["prior"] = PriorSpec.from_dict(d["prior"])
        if "refine_lrs" in kw:
            kw["refine_lrs"] = tuple(kw["refine_lrs"])
        return cls(**kw)

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


def _role_rng(config, role):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_ROLE_KEYS[role],)))


# ----------------------------------------------------------------------------
# data generation


def gen_matrix(m, N, rng):
    """Measurement matrix with iid N(0, 1/m) entries, shape (m, N)."""
    if m < 1 or N < 1:
        raise ValueError("matrix dimensions must be positive")
    rng = np.random.default_rng(rng)
    return rng.standard_normal((m, N)) / math.sqrt(m)


def design_matrix(config):
    return gen_matrix(config.m, config.N, _role_rng(config, "matrix"))


def gen_signal(prior, N, rng, K=None):
    """Draw signals from the prior: shape (N,) or, with K set, (N, K)."""
    gm = prior.to_mixture() if isinstance(prior, PriorSpec) else prior
    rng = np.random.default_rng(rng)
    if K is None:
        return gm_sample(gm, N, rng)
    return gm_sample(gm, N * K, rng).reshape(K, N).T


def noise_variance(snr_db, delta, prior):
    """Noise variance putting the expected measurement SNR at snr_db.

    With unit-row-energy sensing, E||Ax||^2 equals N times the prior second
    moment while E||w||^2 is m * noise_var, so the calibration divides the
    per-entry signal power by delta and the linear SNR.
    """
    if isinstance(prior, (GaussianMixture,)):
        m2 = prior.second_moment()
    elif isinstance(prior, PriorSpec):
        m2 = prior.to_mixture().second_moment()
    else:
        m2 = float(prior)
    if m2 <= 0:
        raise ValueError("prior second moment must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    return m2 / (delta * 10.0 ** (snr_db / 10.0))


def sample_batch(config, K, role="val", A=None, rng=None):
    """One batch of (X, Y) with K columns, using the role's random stream."""
    if A is None:
        A = design_matrix(config)
    if rng is None:
        rng = _role_rng(config, role)
    gm = config.prior.to_mixture()
    sig = math.sqrt(config.noise_var())
    X = gen_signal(gm, config.N, rng, K=K)
    Y = A @ X + sig * rng.standard_normal((config.m, K))
    return X, Y


def sample_stream(config, role="train", batch=None, A=None):
    """Endless iterator of (X, Y) training batches from one sequential stream."""
    if A is None:
        A = design_matrix(config)
    if batch is None:
        batch = config.batch_train
    rng = _role_rng(config, role)
    while True:
        yield sample_batch(config, batch, A=A, rng=rng)


# ----------------------------------------------------------------------------
# error metrics


def nmse(x_hat, x):
    """Squared-error ratio ||x_hat - x||^2 / ||x||^2."""
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    den = float((x * x).sum())
    if den <= 0.0:
        raise ValueError("reference signal has zero norm")
    diff = x_hat - x
    return float((diff * diff).sum()) / den


def nmse_db(ratio):
    """Ratio in dB, floored so exact recovery reports -320 dB instead of -inf."""
    return 10.0 * math.log10(max(float(ratio), NMSE_DB_FLOOR))


# ----------------------------------------------------------------------------
# Monte-Carlo evaluation


@dataclass
class McResult:
    """Per-layer rows ready for CSV plus run-level extras."""

    rows: list
    lam_l1: float = None
    diverged: dict = field(default_factory=dict)


def _algorithm_plan(config, algorithms, A, model, lam):
    """Resolve algorithm names to (name, B, denoisers) triples."""
    gm = config.prior.to_mixture()
    plan = []
    for name in algorithms:
        if name == "amp_gm":
            dens = [network.gm_layer_denoiser(gm.weights, gm.means, gm.variances)] * config.T_max
            plan.append((name, A.T, dens))
        elif name == "amp_l1":
            if lam is None:
                raise ValueError("amp_l1 requires a threshold scale")
            dens = [network.soft_threshold_layer_denoiser(lam)] * config.T_max
            plan.append((name, A.T, dens))
        elif name == "net":
            if model is None:
                raise ValueError("algorithm 'net' requires a trained model")
            if model.B.shape != (config.N, config.m):
                raise ValueError("model shape does not match the config")
            dens = [
                network.gm_layer_denoiser(g.weights, g.means, g.variances) for g in model.layers
            ]
            label = "net_%s" % config.variant
            plan.append((label, model.B, dens))
        else:
            raise ValueError("unknown algorithm %r" % (name,))
    return plan


def monte_carlo(config, algorithms, n_trials, seed=None, model=None, lam=None, batch_cap=1000):
    """Estimate per-layer NMSE for each algorithm over n_trials fresh signals.

    All algorithms see the same matrix and the same per-trial (x, w) draws.
    Trials whose recursion blows up are flagged, excluded from the averages,
    and reported in diverged_count.  If amp_l1 is requested without a
    threshold, one is tuned by grid search first.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be positive")
    A = design_matrix(config)
    gm = config.prior.to_mixture()
    sig = math.sqrt(config.noise_var())
    if "amp_l1" in algorithms and lam is None:
        lam, _ = tune_l1_threshold(config, A=A)
    plan = _algorithm_plan(config, algorithms, A, model, lam)

    if seed is None:
        base = np.random.SeedSequence(config.seed, spawn_key=(_ROLE_KEYS["eval"],))
    else:
        base = np.random.SeedSequence(seed)
    children = base.spawn(n_trials)

    ratios = {name: np.full((len(dens), n_trials), np.nan) for name, _, dens in plan}
    diverged = {name: 0 for name, _, _ in plan}

    done = 0
    while done < n_trials:
        K = min(batch_cap, n_trials - done)
        X = np.empty((config.N, K))
        Y = np.empty((config.m, K))
        for j in range(K):
            rng = np.random.default_rng(children[done + j])
            X[:, j] = gen_signal(gm, config.N, rng)
            Y[:, j] = A @ X[:, j] + sig * rng.standard_normal(config.m)
        den = (X * X).sum(axis=0)
        ok = den > 0.0
        for name, B, dens in plan:
            ests, _, div = network.forward_batch(B, dens, Y, A, on_divergence="mask")
            keep = ok & ~div
            diverged[name] += int(div.sum())
            for t, est in enumerate(ests):
                diff = est - X
                num = (diff * diff).sum(axis=0)
                ratios[name][t, done : done + K][keep] = num[keep] / den[keep]
        done += K

    rows = []
    for name, _, dens in plan:
        for t in range(len(dens)):
            vals = ratios[name][t]
            vals = vals[np.isfinite(vals)]
            if vals.size == 0:
                mean_db, err_db = float("nan"), float("nan")
            else:
                mean = float(vals.mean())
                mean_db = nmse_db(mean)
                if vals.size > 1 and mean > 0:
                    sem = float(vals.std(ddof=1)) / math.sqrt(vals.size)
                    err_db = 10.0 / math.log(10.0) * sem / mean
                else:
                    err_db = float("nan")
            rows.append(
                {
                    "algorithm": name,
                    "prior": config.prior.family,
                    "N": config.N,
                    "delta": config.delta,
                    "epsilon": config.prior.epsilon,
                    "snr_db": config.snr_db,
                    "layer": t + 1,
                    "nmse_db_mean": mean_db,
                    "nmse_db_stderr": err_db,
                    "diverged_count": diverged[name],
                    "trials": n_trials,
                }
            )
    return McResult(rows=rows, lam_l1=lam, diverged=diverged)


def tune_l1_threshold(config, A=None, grid=None, K=1000):
    """Grid-search the soft-threshold scale minimizing final-layer NMSE.

    Uses a dedicated validation batch drawn from the 'tune' stream.  Returns
    (best_scale, best_nmse_db).
    """
    if A is None:
        A = design_matrix(config)
    if grid is None:
        grid = np.round(np.arange(1, 31) * 0.1, 10)
    X, Y = sample_batch(config, K, role="tune", A=A)
    den = (X * X).sum(axis=0)
    ok = den > 0.0
    best = (None, float("inf"))
    for lam in grid:
        dens = [network.soft_threshold_layer_denoiser(float(lam))] * config.T_max
        ests, _, div = network.forward_batch(A.T, dens, Y, A, on_divergence="mask")
        keep = ok & ~div
        if not keep.any():
            continue
        diff = ests[-1] - X
        ratio = float(((diff * diff).sum(axis=0)[keep] / den[keep]).mean())
        if ratio < best[1]:
            best = (float(lam), ratio)
    if best[0] is None:
        raise RuntimeError("threshold tuning failed: every grid point diverged")
    return best[0], nmse_db(best[1])


def se_prediction(config, T=None):
    """Per-layer NMSE in dB predicted by the scalar recursion for the matched case."""
    if T is None:
        T = config.T_max
    return se_nmse_db(config.prior.to_mixture(), config.delta, config.noise_var(), T)
