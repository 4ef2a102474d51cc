"""Estimator facade with the familiar fit/predict surface.

These wrap the column-major numerical core in row-major, scikit-learn style
classes: observations are rows of shape (n_samples, m) and recovered signals
come back as rows of shape (n_samples, N).  All three estimators support
get_params/set_params/clone and validate their inputs up front.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import network, simulate
from .mixtures import GaussianMixture
from .validation import check_matrix, check_observations, check_paired


class _RecoveryMixin:
    """Shared predict path: run the fitted network on row-major observations."""

    def predict(self, X, depth=None):
        check_is_fitted(self, "model_")
        Y = check_observations(X, self.model_.m)
        model = self.model_ if depth is None else self.model_.truncated(depth)
        res = network.forward(model, Y.T, self.A_, on_divergence="mask")
        return res.estimates[-1].T

    def transform(self, X):
        return self.predict(X)


class GmAmpRecovery(_RecoveryMixin, BaseEstimator):
    """Classical iterative recovery with the mixture posterior-mean denoiser.

    Parameters: the measurement matrix A (m, N), the signal prior (a PriorSpec
    or GaussianMixture), and the iteration count.  fit() has no data to learn
    from; it validates the setup and freezes the iteration into a model.
    """

    def __init__(self, A=None, prior=None, n_layers=10):
        self.A = A
        self.prior = prior
        self.n_layers = n_layers

    def _mixture(self):
        if isinstance(self.prior, GaussianMixture):
            return self.prior
        if isinstance(self.prior, simulate.PriorSpec):
            return self.prior.to_mixture()
        raise ValueError("prior must be a PriorSpec or GaussianMixture")

    def fit(self, X=None, y=None):
        if self.A is None:
            raise ValueError("A must be set before fit")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")
        A = check_matrix(self.A)
        if A.shape[0] >= A.shape[1]:
            raise ValueError("A must be wide: more columns than rows")
        gm = self._mixture()
        self.A_ = A
        self.model_ = network.UnfoldedModel(A.T.copy(), [gm] * self.n_layers)
        return self

    def fit_transform(self, X, y=None):
        return self.fit().transform(X)


class L1AmpRecovery(_RecoveryMixin, BaseEstimator):
    """Iterative recovery with a soft-threshold denoiser.

    If `threshold` is None, fit(X, y) grid-searches the threshold scale on the
    provided (observations, signals) pairs, minimizing final-layer NMSE.
    """

    def __init__(self, A=None, n_layers=10, threshold=None):
        self.A = A
        self.n_layers = n_layers
        self.threshold = threshold

    def fit(self, X=None, y=None):
        if self.A is None:
            raise ValueError("A must be set before fit")
        if self.n_layers < 1:
            raise ValueError("n_layers must be positive")
        A = check_matrix(self.A)
        if A.shape[0] >= A.shape[1]:
            raise ValueError("A must be wide: more columns than rows")
        self.A_ = A
        if self.threshold is not None:
            self.threshold_ = float(self.threshold)
        else:
            if X is None or y is None:
                raise ValueError("tuning the threshold needs (observations, signals) data")
            Y, S = check_paired(X, y, A.shape[0], A.shape[1])
            self.threshold_ = self._tune(Y.T, S.T)
        self.model_ = _SoftModel(A, self.threshold_, self.n_layers)
        return self

    def _tune(self, Ycols, Scols):
        den = (Scols * Scols).sum(axis=0)
        ok = den > 0.0
        if not ok.any():
            raise ValueError("all training signals have zero norm")
        best_lam, best_score = None, np.inf
        for lam in np.round(np.arange(1, 31) * 0.1, 10):
            dens = [network.soft_threshold_layer_denoiser(float(lam))] * self.n_layers
            ests, _, div = network.forward_batch(
                self.A_.T, dens, Ycols, self.A_, on_divergence="mask"
            )
            keep = ok & ~div
            if not keep.any():
                continue
            diff = ests[-1] - Scols
            score = float(((diff * diff).sum(axis=0)[keep] / den[keep]).mean())
            if score < best_score:
                best_lam, best_score = float(lam), score
        if best_lam is None:
            raise RuntimeError("threshold tuning failed: every candidate diverged")
        return best_lam

    def predict(self, X, depth=None):
        check_is_fitted(self, "model_")
        Y = check_observations(X, self.A_.shape[0])
        d = self.n_layers if depth is None else depth
        dens = [network.soft_threshold_layer_denoiser(self.threshold_)] * d
        ests, _, _ = network.forward_batch(self.A_.T, dens, Y.T, self.A_, on_divergence="mask")
        return ests[-1].T


class _SoftModel:
    """Minimal stand-in so check_is_fitted sees a fitted attribute."""

    def __init__(self, A, threshold, n_layers):
        self.m, self.N = A.shape
        self.threshold = threshold
        self.n_layers = n_layers


class LearnedGmAmpRecovery(_RecoveryMixin, BaseEstimator):
    """Unfolded network trained with the layer-wise schedule.

    The single `config` parameter (an ExperimentConfig) fixes the problem
    instance, the architecture, and the training budget.  fit() with no data
    trains on synthetic streams drawn from the config's prior and seeds;
    fit(X, y) instead resamples minibatches from the provided (observations,
    signals) rows, holding out a validation slice.  Observations must come
    from the config's design matrix for the learned filter to make sense.
    """

    def __init__(self, config=None):
        self.config = config

    def fit(self, X=None, y=None):
        if self.config is None:
            raise ValueError("config must be set before fit")
        cfg = self.config
        self.A_ = simulate.design_matrix(cfg)
        if X is None and y is None:
            result = network.train(cfg)
        elif X is None or y is None:
            raise ValueError("provide both observations and signals, or neither")
        else:
            Y, S = check_paired(X, y, cfg.m, cfg.N)
            data, val = self._streams(cfg, Y.T, S.T)
            result = network.train(cfg, data=data, val=val)
        self.model_ = result.model
        self.stages_ = result.stages
        self.log_rows_ = result.log_rows
        return self

    @staticmethod
    def _streams(cfg, Ycols, Scols):
        n = Ycols.shape[1]
        n_val = min(cfg.batch_val, max(1, n // 5))
        if n - n_val < 1:
            raise ValueError("not enough samples to split off a validation slice")
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(101,)))
        perm = rng.permutation(n)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        val = (Scols[:, val_idx], Ycols[:, val_idx])

        def stream():
            while True:
                pick = rng.choice(train_idx.size, size=cfg.batch_train, replace=True)
                idx = train_idx[pick]
                yield Scols[:, idx], Ycols[:, idx]

        return stream(), val

    def score(self, X, y):
        """Negative NMSE in dB at the deepest layer (higher is better)."""
        check_is_fitted(self, "model_")
        Y, S = check_paired(X, y, self.model_.m, self.model_.N)
        est = self.predict(Y)
        return -simulate.nmse_db(network.nmse_loss(est.T, S.T))
