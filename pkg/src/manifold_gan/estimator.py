"""scikit-learn style wrapper around the semi-supervised GAN on flat feature vectors."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import Tensor
from .config import RunConfig
from .data import SplitDataset
from .errors import ContractViolation
from .training import GANTrainer, build_from_config

UNLABELED = -1


class ManifoldGANClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Semi-supervised classifier trained as the discriminator of a GAN.

    ``fit`` takes every row of ``X`` as unlabeled data and the rows whose
    target is not ``-1`` as labeled data.  Inputs should already lie in
    [-1, 1], the range of the generator's tanh output.

    ``predict_proba`` returns class probabilities conditioned on the input
    being real; ``transform`` returns the discriminator's feature layer.
    """

    def __init__(self, hidden=64, depth=2, latent_dim=2, lam=1e-3, epsilon=1e-5,
                 batch_size=50, epochs=50, lr=3e-4, ema_decay=0.99, dropout=0.0,
                 random_state=0):
        self.hidden = hidden
        self.depth = depth
        self.latent_dim = latent_dim
        self.lam = lam
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.lr = lr
        self.ema_decay = ema_decay
        self.dropout = dropout
        self.random_state = random_state

    def _run_config(self, n_classes: int) -> RunConfig:
        return RunConfig().replace(**{
            "model.profile": "mlp", "model.num_classes": n_classes,
            "model.hidden": self.hidden, "model.depth": self.depth,
            "model.latent_dim": self.latent_dim, "model.mlp_dropout": self.dropout,
            "loss.lambda": self.lam, "loss.epsilon": self.epsilon,
            "train.batch_size": self.batch_size, "train.epochs": self.epochs,
            "train.decay_start": self.epochs // 2, "train.ema_decay": self.ema_decay,
            "optim.lr": self.lr, "train.early_stopping": False,
            "run.seeds": (int(self.random_state),),
        })

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        labeled = y != UNLABELED
        if not labeled.any():
            raise ContractViolation("fit needs at least one labeled row (target != -1)")
        self.classes_, codes = np.unique(y[labeled], return_inverse=True)
        if len(self.classes_) < 2:
            raise ContractViolation("fit needs labeled rows from at least two classes")
        if len(X) < self.batch_size:
            raise ContractViolation(f"{len(X)} rows cannot fill one batch of {self.batch_size}")
        self.n_features_in_ = X.shape[1]
        cfg = self._run_config(len(self.classes_))
        empty = X[:0]
        split = SplitDataset(X[labeled], codes.astype(np.int64), X, empty,
                             np.zeros(0, dtype=np.int64), empty, np.zeros(0, dtype=np.int64),
                             source="array")
        seed = int(self.random_state)
        self.trainer_ = GANTrainer(cfg, build_from_config(cfg, (X.shape[1],), seed), seed)
        self.trainer_.fit(split, self.epochs)
        self.history_ = self.trainer_.history
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted on "
                             f"{self.n_features_in_}")
        return X

    def decision_function(self, X) -> np.ndarray:
        """Real-class logits ``[n, K]`` from the averaged discriminator weights."""
        X = self._check(X)
        return self.trainer_.logits(X)

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X) -> np.ndarray:
        X = self._check(X)
        disc = self.trainer_.discriminator
        _, feats = disc.forward(Tensor(X), self.trainer_.ema.shadow.constants(), train=False)
        return feats.values

    def sample(self, n: int, random_state=None) -> np.ndarray:
        """Draw ``n`` points from the trained generator."""
        check_is_fitted(self, "trainer_")
        rng = np.random.default_rng(self.random_state if random_state is None else random_state)
        gen = self.trainer_.generator
        return gen.generate(rng.uniform(-1.0, 1.0, size=(n, gen.latent_dim)))
