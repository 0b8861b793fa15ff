"""scikit-learn style front end.

``PSFedPalm`` fits a federated model from a pooled array plus per-sample
band tags (each band becomes one client; pooling is only a convenience of
the API, clients never see each other's rows) and transforms images into
unit-norm matching templates.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from ._validation import check_bands, check_images
from .evaluation import cosine_distance, cross_spectrum_matrix, extract_template
from .federation import GLOBAL_METHODS, ClientState, MethodConfig, run_training
from .losses import LossHyperparams
from .model import ArchitectureDescriptor
from .specdata import BANDS, SpectrumBand


class PSFedPalm(TransformerMixin, BaseEstimator):
    """Federated palmprint embedder.

    Parameters mirror :class:`~psfedpalm.federation.MethodConfig` and
    :class:`~psfedpalm.losses.LossHyperparams`; ``method`` selects the
    grouped-anchor protocol (``"psfed"``) or one of the baselines.
    """

    def __init__(self, method="psfed", rounds=30, local_epochs=3, batch_size=64, lr=0.01,
                 mu=0.01, tau=1000.0, gamma=0.07, w_ce=0.8, w_con=0.2,
                 use_global_prox=True, use_anchor_prox=True, use_mse=True,
                 embedding_dim=64, random_state=0):
        self.method = method
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.mu = mu
        self.tau = tau
        self.gamma = gamma
        self.w_ce = w_ce
        self.w_con = w_con
        self.use_global_prox = use_global_prox
        self.use_anchor_prox = use_anchor_prox
        self.use_mse = use_mse
        self.embedding_dim = embedding_dim
        self.random_state = random_state

    def _config(self) -> MethodConfig:
        hp = LossHyperparams(self.mu, self.tau, self.gamma, self.w_ce, self.w_con,
                             self.use_global_prox, self.use_anchor_prox, self.use_mse)
        return MethodConfig(method=self.method, rounds=self.rounds, local_epochs=self.local_epochs,
                            batch_size=self.batch_size, lr=self.lr, hp=hp, seed=int(self.random_state))

    def fit(self, X, y, bands=None):
        X = check_images(X)
        bands = check_bands(bands, len(X))
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
        cfg = self._config()
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        labels = self.label_encoder_.transform(y)
        clients = []
        for band in BANDS:
            rows = np.flatnonzero(bands == band.value)
            if len(rows):
                clients.append(ClientState(len(clients), band, X[rows], labels[rows]))
        if cfg.method == "psfed" and len(clients) != len(BANDS):
            raise ValueError("the grouped protocol needs samples from all four bands")
        self.arch_ = ArchitectureDescriptor(num_classes=max(len(self.classes_), 2),
                                            embedding_dim=self.embedding_dim)
        self.result_ = run_training(cfg, None, clients=clients, arch=self.arch_)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def _model_for(self, band):
        models = self.result_.eval_models()
        if self.result_.method in GLOBAL_METHODS:
            return models
        band = SpectrumBand.parse(band)
        if band not in models:
            raise ValueError(f"no client model was trained for band {band.value}")
        return models[band]

    def transform(self, X, bands=None, model_band=None):
        """Unit templates. Per-client methods need ``bands`` (each row uses its
        band's model) or ``model_band`` (one client model for every row)."""
        check_is_fitted(self, "result_")
        X = check_images(X)
        if self.result_.method in GLOBAL_METHODS:
            return extract_template(self.result_.theta_global, X)
        if model_band is not None:
            return extract_template(self._model_for(model_band), X)
        bands = check_bands(bands, len(X))
        out = np.zeros((len(X), self.arch_.embedding_dim))
        for band in set(bands):
            rows = np.flatnonzero(bands == band)
            out[rows] = extract_template(self._model_for(band), X[rows])
        return out

    def decision_function(self, X_a, X_b, bands_a=None, bands_b=None):
        """Angular distance between paired rows of X_a and X_b (lower = same palm)."""
        return cosine_distance(self.transform(X_a, bands_a), self.transform(X_b, bands_b))

    def eer_matrix(self, dataset):
        check_is_fitted(self, "result_")
        return cross_spectrum_matrix(self.result_.eval_models(), dataset)
