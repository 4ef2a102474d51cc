"""Input validation helpers shared by the estimator facade."""

import numpy as np
from sklearn.utils import check_array


def check_matrix(A, name="A"):
    """Validate a dense 2-D float matrix with finite entries."""
    A = check_array(A, dtype=np.float64, ensure_2d=True, input_name=name)
    if not np.all(np.isfinite(A)):
        raise ValueError("%s contains non-finite entries" % name)
    return A


def check_observations(Y, n_features, name="X"):
    """Validate row-major observations with the expected feature count."""
    Y = check_array(Y, dtype=np.float64, ensure_2d=True, input_name=name)
    if Y.shape[1] != n_features:
        raise ValueError(
            "%s has %d features, expected %d" % (name, Y.shape[1], n_features)
        )
    return Y


def check_paired(Y, X, m, N):
    """Validate an (observations, signals) training pair with matching rows."""
    Y = check_observations(Y, m, name="X")
    X = check_observations(X, N, name="y")
    if Y.shape[0] != X.shape[0]:
        raise ValueError(
            "observations and signals disagree on sample count: %d vs %d"
            % (Y.shape[0], X.shape[0])
        )
    return Y, X
