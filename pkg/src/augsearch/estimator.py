"""scikit-learn style front end: ``fit`` searches a policy, ``transform`` applies it."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import DatasetBundle
from .operations import OP_NAMES
from .policy import augment
from .search import SearchConfig, run_search


def _images(X, name: str = "X") -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1, input_name=name)
    if X.ndim != 4:
        raise ValueError(f"{name} must be a batch of images [N, C, H, W], got shape {X.shape}")
    return X


class AugmentPolicySearch(TransformerMixin, BaseEstimator):
    """Differentiable augmentation policy search.

    ``fit(X, y)`` learns a policy whose augmented copies of ``X`` match the
    distribution of ``target`` (``X`` itself by default) under a Wasserstein
    critic.  ``transform(X)`` applies the learned policy in inference mode,
    ``eval_chunk_size`` images at a time.  Hyperparameter names follow
    :class:`~augsearch.search.SearchConfig`.

    Fitted attributes: ``policy_``, ``history_``, ``config_``, ``n_classes_``
    and ``image_shape_``.
    """

    def __init__(self, epochs=20, L=10, K=2, lam=0.05, eta=0.05, lr=1e-3, betas=(0.0, 0.999), eps_cls=0.1,
                 gp_coef=10.0, chunk_size=8, batch_size=64, critic_steps=1, max_steps=None, op_names=None,
                 eval_chunk_size=16, random_state=0):
        self.epochs = epochs
        self.L = L
        self.K = K
        self.lam = lam
        self.eta = eta
        self.lr = lr
        self.betas = betas
        self.eps_cls = eps_cls
        self.gp_coef = gp_coef
        self.chunk_size = chunk_size
        self.batch_size = batch_size
        self.critic_steps = critic_steps
        self.max_steps = max_steps
        self.op_names = op_names
        self.eval_chunk_size = eval_chunk_size
        self.random_state = random_state

    def _config(self) -> SearchConfig:
        return SearchConfig(
            epochs=self.epochs, L=self.L, K=self.K, lam=self.lam, eta=self.eta, lr=self.lr,
            betas=tuple(self.betas), eps_cls=self.eps_cls, gp_coef=self.gp_coef,
            chunk_size=self.chunk_size, batch_size=self.batch_size, seed=int(self.random_state),
            critic_steps=self.critic_steps, max_steps=self.max_steps,
            op_names=OP_NAMES if self.op_names is None else tuple(self.op_names))

    def fit(self, X, y=None, target=None, target_y=None):
        """Search a policy on images ``X`` with integer labels ``y`` (all zero if omitted).

        ``target``/``target_y`` give the distribution to match; labels of the
        target default to ``y`` when the sizes agree, else to zeros.
        """
        config = self._config()
        X = _images(X)
        y = np.zeros(len(X), dtype=np.int64) if y is None else np.asarray(y).astype(np.int64)
        if target is None:
            target_set = None
            t_labels = y
        else:
            target = _images(target, "target")
            if target.shape[1:] != X.shape[1:]:
                raise ValueError(f"target images {target.shape[1:]} differ from X images {X.shape[1:]}")
            if target_y is not None:
                t_labels = np.asarray(target_y).astype(np.int64)
            else:
                t_labels = y if len(target) == len(y) else np.zeros(len(target), dtype=np.int64)
        n_classes = int(max(y.max(initial=0), t_labels.max(initial=0))) + 1
        source = DatasetBundle(X, y, n_classes, "X")
        if target is not None:
            target_set = DatasetBundle(target, t_labels, n_classes, "target")

        self.policy_, self.history_ = run_search(config, source, target_set)
        self.config_ = config
        self.n_classes_ = n_classes
        self.image_shape_ = X.shape[1:]
        return self

    def transform(self, X, seed=None):
        """Augmented copy of ``X``; ``seed`` defaults to ``random_state``."""
        check_is_fitted(self, "policy_")
        X = _images(X)
        if X.shape[1:] != self.image_shape_:
            raise ValueError(f"expected images of shape {self.image_shape_}, got {X.shape[1:]}")
        seed = self.random_state if seed is None else seed
        return augment(self.policy_, X, self.eval_chunk_size, seed)
