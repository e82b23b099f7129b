"""scikit-learn style wrapper around pretraining plus adaptation."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted, check_X_y

from ._validation import check_matrix
from .datagen import Dataset
from .pipeline import TrainConfig, adapt, init_network, pretrain_source


class OTAlignClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained on labeled source rows and adapted to target rows.

    Parameters
    ----------
    method : str
        One of ``none, npot, not, mmd, cmd, dann, wdgrl``.
    lambda_align : float or None
        Alignment weight; ``None`` picks the method default.
    alpha, beta, tau : float
        Label-cost weight, sigmoid scale and cost threshold of the
        coupling weights.
    random_state : int
        Seed for initialization, splits and batch order.

    Attributes
    ----------
    classes_ : ndarray
    network_ : AdaptationNetwork
    pretrain_history_, history_ : RunHistory
    """

    def __init__(
        self,
        method="npot",
        latent_dim=32,
        lambda_align=None,
        entropy_weight=0.05,
        alpha=0.001,
        beta=5.0,
        tau=1.0,
        batch_size=128,
        pretrain_epochs=200,
        max_epochs=100,
        patience=10,
        learning_rate=0.001,
        val_fraction=0.1,
        random_state=0,
    ):
        self.method = method
        self.latent_dim = latent_dim
        self.lambda_align = lambda_align
        self.entropy_weight = entropy_weight
        self.alpha = alpha
        self.beta = beta
        self.tau = tau
        self.batch_size = batch_size
        self.pretrain_epochs = pretrain_epochs
        self.max_epochs = max_epochs
        self.patience = patience
        self.learning_rate = learning_rate
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            method=self.method,
            lambda_align=self.lambda_align,
            entropy_weight=self.entropy_weight,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            pretrain_epochs=self.pretrain_epochs,
            patience=self.patience,
            latent_dim=self.latent_dim,
            align={"alpha": self.alpha, "beta": self.beta, "tau": self.tau},
            optimizer={"learning_rate": self.learning_rate},
            val_fraction=self.val_fraction,
            seed=self.random_state,
        )

    def fit(self, X, y, X_target=None):
        """Pretrain on ``(X, y)``; adapt to ``X_target`` when it is given."""
        X, y = check_X_y(X, y, ensure_all_finite=True)
        cfg = self._train_config()
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        codes = self._encoder.transform(y)
        self.n_features_in_ = X.shape[1]
        source = Dataset(X, codes, "source")
        net = init_network(X.shape[1], len(self.classes_), cfg)
        net, self.pretrain_history_ = pretrain_source(net, source, cfg)
        if X_target is not None and cfg.method != "none":
            Xt = check_matrix(X_target, "X_target")
            if Xt.shape[1] != X.shape[1]:
                raise ValueError("X_target must have as many columns as X")
            net, self.history_ = adapt(net, source, Dataset(Xt, None, "target"), cfg)
        else:
            self.history_ = None
        self.network_ = net
        return self

    def _check(self, X):
        check_is_fitted(self, "network_")
        X = check_matrix(X, "X")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        return self.network_.forward(X).Yhat

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Length-normalized latent embedding of every row."""
        X = self._check(X)
        return self.network_.forward(X).Z
