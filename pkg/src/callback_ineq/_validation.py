"""Input validation helpers for the estimator API."""
import numpy as np
from sklearn.utils import check_array, column_or_1d

from .exceptions import DataError
from .model import CallbackDataset


def check_callback_arrays(X, d, m=None) -> CallbackDataset:
    """Validate outcomes ``X`` (NaN = not observed) and attempt indices ``d``."""
    X = check_array(X, ensure_2d=False, ensure_all_finite="allow-nan", dtype=float)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise DataError(f"X must hold a single outcome column, got shape {X.shape}")
        X = X[:, 0]
    d = column_or_1d(np.asarray(d), warn=True)
    if d.shape[0] != X.shape[0]:
        raise DataError(f"X has {X.shape[0]} rows but d has {d.shape[0]}")
    if m is None:
        if not np.any(np.isnan(X)):
            raise DataError("cannot infer m without nonrespondents; pass m explicitly")
        m = int(np.max(d)) - 1
    return CallbackDataset(X, d, int(m))
