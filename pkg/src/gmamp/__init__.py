"""Sparse-signal recovery with Gaussian-mixture denoisers.

Classical iterative recovery, a trainable unfolded network with per-layer
mixture denoisers, a scalar performance recursion, Monte-Carlo evaluation
tools, and estimator wrappers with a fit/predict surface.

Submodules are imported lazily so the CLI can pin BLAS thread pools through
environment variables before numpy loads.
"""

__version__ = "0.1.0"

_EXPORTS = {
    "GaussianMixture": ("mixtures", "GaussianMixture"),
    "gm_pdf": ("mixtures", "gm_pdf"),
    "posterior_terms": ("mixtures", "posterior_terms"),
    "denoise": ("mixtures", "denoise"),
    "gm_from_discrete": ("mixtures", "gm_from_discrete"),
    "gm_sample": ("mixtures", "gm_sample"),
    "LinearModel": ("amp", "LinearModel"),
    "AmpState": ("amp", "AmpState"),
    "amp_step": ("amp", "amp_step"),
    "run_amp": ("amp", "run_amp"),
    "state_evolution": ("amp", "state_evolution"),
    "se_nmse_db": ("amp", "se_nmse_db"),
    "soft_threshold_denoiser": ("amp", "soft_threshold_denoiser"),
    "matched_denoiser": ("amp", "matched_denoiser"),
    "l1_denoiser": ("amp", "l1_denoiser"),
    "UnfoldedModel": ("network", "UnfoldedModel"),
    "ParamVector": ("network", "ParamVector"),
    "init_theta": ("network", "init_theta"),
    "forward": ("network", "forward"),
    "nmse_loss": ("network", "nmse_loss"),
    "backward": ("network", "backward"),
    "adam_update": ("network", "adam_update"),
    "train": ("network", "train"),
    "PriorSpec": ("simulate", "PriorSpec"),
    "bernoulli_gauss": ("simulate", "bernoulli_gauss"),
    "discrete_prior": ("simulate", "discrete_prior"),
    "ExperimentConfig": ("simulate", "ExperimentConfig"),
    "gen_matrix": ("simulate", "gen_matrix"),
    "design_matrix": ("simulate", "design_matrix"),
    "gen_signal": ("simulate", "gen_signal"),
    "noise_variance": ("simulate", "noise_variance"),
    "nmse": ("simulate", "nmse"),
    "nmse_db": ("simulate", "nmse_db"),
    "monte_carlo": ("simulate", "monte_carlo"),
    "se_prediction": ("simulate", "se_prediction"),
    "GmAmpRecovery": ("estimators", "GmAmpRecovery"),
    "L1AmpRecovery": ("estimators", "L1AmpRecovery"),
    "LearnedGmAmpRecovery": ("estimators", "LearnedGmAmpRecovery"),
    "DivergenceError": ("errors", "DivergenceError"),
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    try:
        module_name, attr = _EXPORTS[name]
    except KeyError:
        raise AttributeError("module %r has no attribute %r" % (__name__, name))
    import importlib

    module = importlib.import_module("." + module_name, __name__)
    value = getattr(module, attr)
    globals()[name] = value
    return value


def __dir__():
    return __all__
