"""Unfolded recovery network with trainable filter matrix and mixture layers.

The network unrolls the iterative recovery loop into a fixed number of layers.
All layers share one filter matrix B (initialized to the transpose of the
measurement matrix) and each layer carries its own Gaussian-mixture denoiser
parameters.  Mixture weights are stored as logits and variances as logs so the
trained parameters stay in their feasible sets under unconstrained updates.

Two forward implementations are kept in sync: a fast batched numpy path used
for evaluation and Monte-Carlo work, and a taped path built on the autodiff
module used for training.  Gradients flow through every part of the recursion,
including the correction term and the effective-noise tracking.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, matmul, vexp, vlog, vsum
from .errors import DivergenceError
from .mixtures import LOG_2PI, GaussianMixture

VAR_FLOOR = 1e-12
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
DIVERGENCE_FACTOR = 1e3


# ----------------------------------------------------------------------------
# model container


@dataclass(frozen=True)
class UnfoldedModel:
    """Trained (or initial) network: shared filter B plus per-layer mixtures."""

    B: np.ndarray
    layers: tuple

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        layers = tuple(self.layers)
        if B.ndim != 2:
            raise ValueError("B must be a 2-D array")
        if not np.all(np.isfinite(B)):
            raise ValueError("B contains non-finite entries")
        if not layers:
            raise ValueError("model needs at least one layer")
        L = layers[0].n_components
        for gm in layers:
            if not isinstance(gm, GaussianMixture):
                raise TypeError("layers must be GaussianMixture instances")
            if gm.n_components != L:
                raise ValueError("all layers must use the same number of components")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "layers", layers)

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def N(self):
        return self.B.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def n_components(self):
        return self.layers[0].n_components

    def truncated(self, depth):
        if not 1 <= depth <= self.n_layers:
            raise ValueError("depth must be in [1, %d]" % self.n_layers)
        return UnfoldedModel(self.B, self.layers[:depth])


def _spread_means(n):
    return np.zeros(1) if n == 1 else np.linspace(-2.0, 2.0, n)


def init_theta(L, rng=None, prior_hint=None):
    """Mixture init for the first training stage.

    Default: uniform weights, means spread over [-2, 2], unit variances.
    With `prior_hint` (a GaussianMixture, or anything with to_mixture()) the
    init starts from the prior's own components instead: variances floored at
    1e-3 so the log-variance coordinates stay responsive, truncated to the L
    heaviest components or padded with low-weight unit-variance components at
    spread-out means.  Deterministic; rng is accepted for signature stability
    but unused.
    """
    if L < 1:
        raise ValueError("need at least one component")
    if prior_hint is None:
        return GaussianMixture(np.full(L, 1.0 / L), _spread_means(L), np.ones(L))
    gm = prior_hint.to_mixture() if hasattr(prior_hint, "to_mixture") else prior_hint
    w = np.asarray(gm.weights, dtype=float)
    mu = np.asarray(gm.means, dtype=float)
    var = np.maximum(np.asarray(gm.variances, dtype=float), 1e-3)
    if len(w) > L:
        keep = np.sort(np.argsort(w)[::-1][:L])
        w, mu, var = w[keep], mu[keep], var[keep]
    elif len(w) < L:
        extra = L - len(w)
        w = np.concatenate([w, np.full(extra, 1e-2)])
        mu = np.concatenate([mu, _spread_means(extra)])
        var = np.concatenate([var, np.ones(extra)])
    return GaussianMixture(w / w.sum(), mu, var)


# ----------------------------------------------------------------------------
# flat parameter vector


@dataclass
class ParamVector:
    """Flat trainable-parameter vector plus its layout.

    Layout: B row-major (N*m entries), then per layer [weight logits (L),
    means (L), log variances (L)].
    """

    data: np.ndarray
    N: int
    m: int
    L: int
    n_layers: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.n_params,):
            raise ValueError("data length %d does not match layout" % self.data.size)

    @property
    def n_params(self):
        return self.N * self.m + 3 * self.L * self.n_layers

    @property
    def _b_end(self):
        return self.N * self.m

    def b_matrix(self):
        return self.data[: self._b_end].reshape(self.N, self.m)

    def layer_offset(self, t):
        if not 0 <= t < self.n_layers:
            raise IndexError("layer %d out of range" % t)
        return self._b_end + 3 * self.L * t

    def layer_raw(self, t):
        """Views (logits, means, log_vars) into the flat data for layer t."""
        off, L = self.layer_offset(t), self.L
        return (
            self.data[off : off + L],
            self.data[off + L : off + 2 * L],
            self.data[off + 2 * L : off + 3 * L],
        )

    def copy(self):
        return ParamVector(self.data.copy(), self.N, self.m, self.L, self.n_layers)

    @classmethod
    def from_model(cls, model):
        N, m, L = model.N, model.m, model.n_components
        data = np.empty(N * m + 3 * L * model.n_layers)
        data[: N * m] = model.B.ravel()
        pv = cls(data, N, m, L, model.n_layers)
        for t, gm in enumerate(model.layers):
            logits, means, log_vars = pv.layer_raw(t)
            logits[:] = np.log(np.maximum(gm.weights, 1e-300))
            means[:] = gm.means
            log_vars[:] = np.log(np.maximum(gm.variances, VAR_FLOOR))
        return pv

    def decode_layer(self, t):
        """(weights, means, variances) for layer t after the reparameterization."""
        logits, means, log_vars = self.layer_raw(t)
        e = np.exp(logits - logits.max())
        return e / e.sum(), means.copy(), np.exp(log_vars)

    def to_model(self):
        layers = [GaussianMixture(*self.decode_layer(t)) for t in range(self.n_layers)]
        return UnfoldedModel(self.b_matrix().copy(), layers)

    def with_appended_layer(self):
        """New vector with one extra layer copied from the current last layer."""
        src = self.layer_offset(self.n_layers - 1)
        block = self.data[src : src + 3 * self.L]
        return ParamVector(
            np.concatenate([self.data, block]), self.N, self.m, self.L, self.n_layers + 1
        )

    def mask(self, b=False, layers=()):
        """Boolean trainable mask selecting the B block and/or given layer blocks."""
        out = np.zeros(self.n_params, dtype=bool)
        if b:
            out[: self._b_end] = True
        for t in layers:
            off = self.layer_offset(t)
            out[off : off + 3 * self.L] = True
        return out

    def clamp_variances(self):
        """Project log variances onto [log(floor), inf) in place."""
        for t in range(self.n_layers):
            _, _, log_vars = self.layer_raw(t)
            np.maximum(log_vars, LOG_VAR_FLOOR, out=log_vars)


# ----------------------------------------------------------------------------
# batched plain-numpy forward


def gm_layer_denoiser(weights, means, variances):
    """Batched mixture posterior-mean denoiser: (r, s2) -> (estimate, derivative).

    r has shape (N, K) with one signal per column; s2 is the per-column
    effective noise variance, shape (K,).
    """
    with np.errstate(divide="ignore"):
        logw = np.log(np.asarray(weights, dtype=float))
    mu = np.asarray(means, dtype=float)[:, None, None]
    var = np.asarray(variances, dtype=float)[:, None, None]

    def apply(r, s2):
        s2b = s2[None, None, :]
        d = var + s2b
        pref = logw[:, None, None] - 0.5 * (np.log(d) + LOG_2PI)
        diff = r[None, :, :] - mu
        u = diff / d
        log_beta = pref - 0.5 * (diff * u)
        log_beta -= log_beta.max(axis=0, keepdims=True)
        p = np.exp(log_beta)
        p /= p.sum(axis=0, keepdims=True)
        # posterior mean per component: gamma = r - (r - mu) * s2 / d = r - u * s2
        gamma = r[None, :, :] - u * s2b
        pg = p * gamma
        eta = pg.sum(axis=0)
        shrink = (p * (var / d)).sum(axis=0)
        deriv = shrink + ((p * u).sum(axis=0) * eta - (pg * u).sum(axis=0))
        return eta, deriv

    return apply


def soft_threshold_layer_denoiser(lam):
    """Batched soft-threshold denoiser with threshold lam * sqrt(s2)."""
    if lam < 0:
        raise ValueError("threshold scale must be nonnegative")

    def apply(r, s2):
        t = lam * np.sqrt(s2)[None, :]
        mag = np.abs(r)
        eta = np.sign(r) * np.maximum(mag - t, 0.0)
        return eta, (mag > t).astype(float)

    return apply


def forward_batch(B, denoisers, y, A, on_divergence="raise"):
    """Run the unrolled recursion on a batch of observations (one per column).

    Returns (estimates, sigmas, diverged): a list with the per-layer estimate
    matrices, the per-layer effective noise levels (depth, K), and a boolean
    per-column divergence flag.  With on_divergence="raise" any non-finite or
    exploding column aborts with DivergenceError; with "mask" the offending
    columns are flagged, zeroed, and carried along so the rest of the batch
    finishes.
    """
    if on_divergence not in ("raise", "mask"):
        raise ValueError("on_divergence must be 'raise' or 'mask'")
    y = np.asarray(y, dtype=float)
    if y.ndim != 2:
        raise ValueError("y must be 2-D with one observation per column")
    m, K = y.shape
    N = B.shape[0]
    if B.shape != (N, m) or A.shape != (m, N):
        raise ValueError("B must be (N, m) and A must be (m, N)")
    tiny = np.finfo(float).tiny
    x = np.zeros((N, K))
    z = y.copy()
    with np.errstate(over="ignore", invalid="ignore"):
        s2 = (z * z).sum(axis=0) * (1.0 / m)
        s2_cap = np.maximum(s2, tiny) * DIVERGENCE_FACTOR**2
    diverged = np.zeros(K, dtype=bool)
    estimates, sigmas = [], []
    for t, denoise in enumerate(denoisers):
        # overflow on a blowing-up column is expected right before it gets
        # flagged, so keep numpy quiet about it here
        with np.errstate(over="ignore", invalid="ignore"):
            r = x + B @ z
            eta, deriv = denoise(r, np.maximum(s2, tiny))
            b = deriv.sum(axis=0) * (1.0 / m)
            z = y - A @ eta + b[None, :] * z
            x = eta
            s2 = (z * z).sum(axis=0) * (1.0 / m)
        bad = ~(np.isfinite(x).all(axis=0) & np.isfinite(s2) & (s2 <= s2_cap))
        bad &= ~diverged
        if bad.any():
            if on_divergence == "raise":
                raise DivergenceError(
                    "recursion diverged at layer %d for %d of %d columns"
                    % (t + 1, int(bad.sum()), K),
                    iteration=t + 1,
                )
            diverged |= bad
        if diverged.any():
            # keep flagged columns pinned at zero; their values are meaningless
            # and the residual update would otherwise re-inject y
            x[:, diverged] = 0.0
            z[:, diverged] = 0.0
            s2[diverged] = 0.0
        estimates.append(x)
        sigmas.append(np.sqrt(s2))
    return estimates, np.array(sigmas), diverged


def _model_denoisers(model, depth):
    return [
        gm_layer_denoiser(gm.weights, gm.means, gm.variances) for gm in model.layers[:depth]
    ]


# ----------------------------------------------------------------------------
# taped forward


@dataclass
class Tape:
    """Recorded computation for one forward pass, ready for backward().

    Layers before `start` ran on the plain path (their parameters were frozen,
    so no gradient flows there); b_leaf is None when B was held constant.
    """

    output: Var
    b_leaf: Var
    layer_leaves: list
    estimates: list
    N: int
    m: int
    L: int
    n_layers: int
    depth: int
    start: int = 0


def _gm_graph(r, s2, logits, means, log_vars, L):
    """Taped mixture denoiser; mirrors gm_layer_denoiser on Var nodes."""
    shifted = logits - logits.value.max()
    ew = vexp(shifted)
    logw = shifted - vlog(vsum(ew))
    var = vexp(log_vars)
    logw3 = logw.reshape((L, 1, 1))
    mu3 = means.reshape((L, 1, 1))
    var3 = var.reshape((L, 1, 1))
    d = var3 + s2
    pref = logw3 - 0.5 * (vlog(d) + LOG_2PI)
    diff = r - mu3
    u = diff / d
    log_beta = pref - 0.5 * (diff * u)
    e = vexp(log_beta - log_beta.value.max(axis=0, keepdims=True))
    p = e / vsum(e, axis=0, keepdims=True)
    gamma = r - u * s2
    pg = p * gamma
    eta = vsum(pg, axis=0)
    shrink = vsum(p * (var3 / d), axis=0)
    deriv = shrink + (vsum(p * u, axis=0) * eta - vsum(pg * u, axis=0))
    return eta, deriv


def _forward_tape(pv, y, A, depth, start=0, b_const=False):
    """Taped forward pass of the first `depth` layers; returns the Tape.

    Layers before `start` run on the plain path (valid only when neither B nor
    those layers need gradients); with b_const=True B stays out of the tape.
    """
    y = np.asarray(y, dtype=float)
    m, K = y.shape
    N, L = pv.N, pv.L
    if depth < 1 or depth > pv.n_layers:
        raise ValueError("depth must be in [1, %d]" % pv.n_layers)
    if not 0 <= start < depth:
        raise ValueError("start must be in [0, depth)")
    tiny = np.finfo(float).tiny
    B0 = pv.b_matrix()
    estimates = []

    x_prev = None
    z_prev = y
    s2_flat = np.maximum((y * y).sum(axis=0) * (1.0 / m), tiny)
    for t in range(start):
        apply = gm_layer_denoiser(*pv.decode_layer(t))
        r = B0 @ z_prev if x_prev is None else x_prev + B0 @ z_prev
        eta, deriv = apply(r, np.maximum(s2_flat, tiny))
        if not np.all(np.isfinite(eta)):
            raise DivergenceError(
                "forward produced non-finite estimate at layer %d" % (t + 1), iteration=t + 1
            )
        b = deriv.sum(axis=0) * (1.0 / m)
        z_prev = y - A @ eta + b[None, :] * z_prev
        x_prev = eta
        s2_flat = (z_prev * z_prev).sum(axis=0) * (1.0 / m)
        estimates.append(eta)

    b_leaf = None if b_const else Var(B0.copy())
    B_op = B0 if b_const else b_leaf
    layer_leaves = []
    for t in range(start, depth):
        logits, means, log_vars = pv.layer_raw(t)
        layer_leaves.append((Var(logits.copy()), Var(means.copy()), Var(log_vars.copy())))

    s2 = s2_flat.reshape(1, 1, K)
    for t in range(start, depth):
        Bz = matmul(B_op, z_prev) if isinstance(B_op, Var) or isinstance(z_prev, Var) else B_op @ z_prev
        r = Bz if x_prev is None else x_prev + Bz
        eta, deriv = _gm_graph(r, s2, *layer_leaves[t - start], L)
        if not np.all(np.isfinite(eta.value)):
            raise DivergenceError(
                "taped forward produced non-finite estimate at layer %d" % (t + 1),
                iteration=t + 1,
            )
        estimates.append(eta.value)
        if t + 1 < depth:
            b = vsum(deriv, axis=0, keepdims=True) * (1.0 / m)
            z_prev = (y - matmul(A, eta)) + b * z_prev
            s2 = (vsum(z_prev * z_prev, axis=0, keepdims=True) * (1.0 / m)).reshape((1, 1, K))
        x_prev = eta
    return Tape(
        output=x_prev,
        b_leaf=b_leaf,
        layer_leaves=layer_leaves,
        estimates=estimates,
        N=N,
        m=m,
        L=L,
        n_layers=pv.n_layers,
        depth=depth,
        start=start,
    )


@dataclass(frozen=True)
class ForwardResult:
    estimates: list
    sigmas: np.ndarray
    diverged: np.ndarray
    tape: object


def forward(model, y, A, depth=None, want_tape=False, on_divergence="raise"):
    """Run the network on observations y (shape (m,) or (m, K)).

    Returns a ForwardResult with per-layer estimates up to `depth` (default all
    layers).  With want_tape=True the taped path is used and the result carries
    the Tape for backward(); taped mode always raises on divergence.
    """
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    if single:
        y = y[:, None]
    if depth is None:
        depth = model.n_layers
    if not 1 <= depth <= model.n_layers:
        raise ValueError("depth must be in [1, %d]" % model.n_layers)
    if want_tape:
        pv = ParamVector.from_model(model)
        tape = _forward_tape(pv, y, A, depth)
        estimates = tape.estimates
        sigmas = np.empty((0, y.shape[1]))
        diverged = np.zeros(y.shape[1], dtype=bool)
    else:
        estimates, sigmas, diverged = forward_batch(
            model.B, _model_denoisers(model, depth), y, A, on_divergence=on_divergence
        )
        tape = None
    if single:
        estimates = [e[:, 0] for e in estimates]
    return ForwardResult(estimates=estimates, sigmas=sigmas, diverged=diverged, tape=tape)


# ----------------------------------------------------------------------------
# loss and gradients


def nmse_loss(x_hat, x, with_grad=False):
    """Mean over columns of ||x_hat - x||^2 / ||x||^2.

    Zero-norm truth columns are excluded with a warning.  With with_grad=True
    also returns d(loss)/d(x_hat), zero on excluded columns.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    x = np.asarray(x, dtype=float)
    if x_hat.shape != x.shape:
        raise ValueError("x_hat and x must have matching shapes")
    if x_hat.ndim == 1:
        x_hat = x_hat[:, None]
        x = x[:, None]
    err = x_hat - x
    num = (err * err).sum(axis=0)
    den = (x * x).sum(axis=0)
    include = den > 0.0
    if not include.any():
        raise ValueError("all truth columns have zero norm")
    if not include.all():
        warnings.warn("excluding %d zero-norm truth columns from NMSE" % int((~include).sum()))
    loss = float(np.mean(num[include] / den[include]))
    if not with_grad:
        return loss
    grad = np.zeros_like(err)
    k_inc = int(include.sum())
    grad[:, include] = 2.0 * err[:, include] / (den[include] * k_inc)
    return loss, grad


_GRAD_CHUNK = 256
_EVAL_CHUNK = 2048


def _tape_plan(pv, trainable, depth):
    """(start, b_const) so the tape covers only layers that need gradients."""
    if trainable is None:
        return 0, False
    trainable = np.asarray(trainable, dtype=bool)
    if trainable[: pv._b_end].any():
        return 0, False
    for t in range(depth):
        off = pv.layer_offset(t)
        if trainable[off : off + 3 * pv.L].any():
            return t, True
    raise ValueError("no trainable parameters within the taped depth")


def loss_and_grad(pv, x, y, A, depth, trainable=None, chunk=None):
    """Minibatch NMSE loss and its flat parameter gradient.

    Columns are processed in chunks so the tape for a large batch never has to
    live in memory all at once; the chunked result equals the full-batch one
    because the loss is a mean over columns.  Frozen prefix layers run on the
    plain path, which changes nothing mathematically since no gradient flows
    through them.
    """
    if chunk is None:
        chunk = _GRAD_CHUNK
    start, b_const = _tape_plan(pv, trainable, depth)
    K = y.shape[1]
    total = np.zeros(pv.n_params)
    loss_sum = 0.0
    n_inc = 0
    for lo in range(0, K, chunk):
        hi = min(lo + chunk, K)
        tape = _forward_tape(pv, y[:, lo:hi], A, depth, start=start, b_const=b_const)
        loss_c, seed_c = nmse_loss(tape.output.value, x[:, lo:hi], with_grad=True)
        inc = int(((x[:, lo:hi] ** 2).sum(axis=0) > 0).sum())
        total += inc * backward(tape, seed_c, trainable)
        loss_sum += inc * loss_c
        n_inc += inc
    if n_inc == 0:
        raise ValueError("all truth columns have zero norm")
    return loss_sum / n_inc, total / n_inc


def backward(tape, grad_output, trainable=None):
    """Gradient of (output . grad_output) with respect to the flat parameters.

    Returns a flat array laid out like ParamVector.data; entries outside the
    boolean `trainable` mask (all trainable when None) are exactly zero, as are
    layers beyond the taped depth.
    """
    ad.backward(tape.output, grad_output)
    n = tape.N * tape.m + 3 * tape.L * tape.n_layers
    grad = np.zeros(n)
    if tape.b_leaf is not None and tape.b_leaf.grad is not None:
        grad[: tape.N * tape.m] = tape.b_leaf.grad.ravel()
    for t, (lg, mu, lv) in enumerate(tape.layer_leaves):
        off = tape.N * tape.m + 3 * tape.L * (t + tape.start)
        for j, leaf in enumerate((lg, mu, lv)):
            if leaf.grad is not None:
                grad[off + j * tape.L : off + (j + 1) * tape.L] = leaf.grad
    if trainable is not None:
        grad[~np.asarray(trainable, dtype=bool)] = 0.0
    return grad


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int
    m1: np.ndarray
    m2: np.ndarray

    @classmethod
    def zeros(cls, n):
        return cls(0, np.zeros(n), np.zeros(n))


def adam_update(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step on a flat parameter array; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m1.shape:
        raise ValueError("params, grads and optimizer state must share one shape")
    if not np.all(np.isfinite(grads)):
        raise ValueError(
            "non-finite gradient in %d coordinates; aborting update"
            % int((~np.isfinite(grads)).sum())
        )
    step = state.step + 1
    m1 = beta1 * state.m1 + (1.0 - beta1) * grads
    m2 = beta2 * state.m2 + (1.0 - beta2) * grads * grads
    m1_hat = m1 / (1.0 - beta1**step)
    m2_hat = m2 / (1.0 - beta2**step)
    new = params - lr * m1_hat / (np.sqrt(m2_hat) + eps)
    return new, AdamState(step, m1, m2)


# ----------------------------------------------------------------------------
# layer-wise training


@dataclass
class TrainResult:
    model: UnfoldedModel
    stages: list
    log_rows: list = field(default_factory=list)


def _val_nmse_db(pv, depth, x_val, y_val, A):
    model = pv.to_model()
    dens = _model_denoisers(model, depth)
    B = pv.b_matrix()
    ratios = []
    for lo in range(0, y_val.shape[1], _EVAL_CHUNK):
        hi = min(lo + _EVAL_CHUNK, y_val.shape[1])
        ests, _, div = forward_batch(B, dens, y_val[:, lo:hi], A, on_divergence="mask")
        x_c = x_val[:, lo:hi]
        den = (x_c * x_c).sum(axis=0)
        keep = ~div & (den > 0)
        if keep.any():
            diff = ests[-1][:, keep] - x_c[:, keep]
            ratios.append((diff * diff).sum(axis=0) / den[keep])
    if not ratios:
        return float("inf")
    loss = float(np.concatenate(ratios).mean())
    return 10.0 * math.log10(max(loss, 1e-32))


def _run_stage(pv, depth, mask, lr, name, cfg, stream, x_val, y_val, A, log_rows):
    """Adam on the masked parameters until validation NMSE stalls.

    Keeps the best-validation parameters seen, so a stage can never end worse
    than it started.  Returns (pv, stage_record).
    """
    state = AdamState.zeros(pv.n_params)
    best_db = _val_nmse_db(pv, depth, x_val, y_val, A)
    start_db = best_db
    best_data = pv.data.copy()
    log_rows.append((name, depth, 0, float("nan"), best_db, lr))
    stall = 0
    steps = 0
    stopped = "max_steps"
    for step in range(1, cfg.max_steps + 1):
        x_b, y_b = next(stream)
        try:
            loss, grad = loss_and_grad(pv, x_b, y_b, A, depth, trainable=mask)
            new_data, state = adam_update(pv.data, grad, state, lr)
        except (DivergenceError, ValueError):
            stopped = "diverged"
            break
        pv = ParamVector(new_data, pv.N, pv.m, pv.L, pv.n_layers)
        pv.clamp_variances()
        steps = step
        if step % cfg.eval_every == 0:
            val_db = _val_nmse_db(pv, depth, x_val, y_val, A)
            log_rows.append(
                (name, depth, step, 10.0 * math.log10(max(loss, 1e-32)), val_db, lr)
            )
            meaningful = val_db < best_db - cfg.min_delta_db
            if val_db < best_db:
                best_db = val_db
                best_data = pv.data.copy()
            stall = 0 if meaningful else stall + 1
            if stall >= cfg.patience:
                stopped = "patience"
                break
    pv = ParamVector(best_data, pv.N, pv.m, pv.L, pv.n_layers)
    record = {
        "stage": name,
        "depth": depth,
        "lr": lr,
        "steps": steps,
        "val_nmse_db_start": start_db,
        "val_nmse_db_best": best_db,
        "stopped": stopped,
    }
    return pv, record


def train(config, data=None, val=None):
    """Layer-wise training schedule.

    Builds the problem instance from `config` (an ExperimentConfig), then:
    learns B through a one-layer network with the denoiser fixed at its init;
    then for each added layer, learns that layer's mixture parameters with
    everything else frozen, and refines all parameters learned so far at each
    of the configured refinement rates.  The "matched" variant keeps every
    layer fixed at the prior and trains only B.

    `data` may supply the training batch iterator (yielding (X, Y) pairs) and
    `val` the held-out (X, Y) pair; both default to streams derived from the
    config seeds.  Returns a TrainResult.
    """
    from . import simulate as sim

    A = sim.design_matrix(config)
    if data is None:
        data = sim.sample_stream(config, role="train")
    if val is None:
        val = sim.sample_batch(config, config.batch_val, role="val")
    x_val, y_val = val

    prior = config.prior.to_mixture()
    if config.variant == "matched":
        theta0 = prior
    elif config.variant == "learned":
        hint = prior if config.theta_init == "prior" else None
        theta0 = init_theta(config.L, prior_hint=hint)
    else:
        raise ValueError("variant must be 'learned' or 'matched'")
    model0 = UnfoldedModel(A.T.copy(), [theta0])
    pv = ParamVector.from_model(model0)

    stages = []
    log_rows = []

    def run(pv, depth, mask, lr, name):
        pv, rec = _run_stage(pv, depth, mask, lr, name, config, data, x_val, y_val, A, log_rows)
        stages.append(rec)
        return pv

    pv = run(pv, 1, pv.mask(b=True), config.lr_new, "learn_B")
    for t in range(1, config.T_max + 1):
        if t > 1:
            pv = pv.with_appended_layer()
        if config.variant == "learned":
            pv = run(pv, t, pv.mask(layers=[t - 1]), config.lr_new, "layer_%d" % t)
            refine_mask = pv.mask(b=True, layers=range(t))
        else:
            refine_mask = pv.mask(b=True)
            if t > 1:
                pv = run(pv, t, refine_mask, config.lr_new, "layer_%d" % t)
        for lr in config.refine_lrs:
            pv = run(pv, t, refine_mask, lr, "refine_%d" % t)
    return TrainResult(model=pv.to_model(), stages=stages, log_rows=log_rows)
