"""scikit-learn style wrapper around model construction, training and inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import IGNORE_LABEL, check_images, check_labels, check_positive_int
from .model import DEFAULT_DILATIONS, ModelConfig, build, save_weights
from .nn import softmax_channels
from .tensor import Tensor, no_grad
from .training import ConfusionMatrix, TrainConfig, miou, recalibrate_bn, train_loop

_DILATIONS = tuple(tuple(stage) for stage in DEFAULT_DILATIONS)


class FBSNetSegmenter(BaseEstimator):
    """Per-pixel classifier over (N, 3, H, W) images with values in [0, 1].

    ``fit`` trains from scratch on ``(X, y)`` with OHEM cross-entropy and a
    poly learning-rate schedule; ``y`` holds class ids with 255 as ignore.
    ``num_classes=None`` takes the class count from the largest id in ``y``.
    """

    def __init__(self, num_classes=None, widths=(16, 64, 128), dilations=_DILATIONS,
                 spatial_branch=True, optimizer="sgd", iterations=300, batch_size=4, lr=None,
                 weight_decay=None, momentum=0.9, ohem_thresh=0.7, normalize=False,
                 recalibrate_bn=True, eval_every=50, random_state=0):
        self.num_classes = num_classes
        self.widths = widths
        self.dilations = dilations
        self.spatial_branch = spatial_branch
        self.optimizer = optimizer
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.ohem_thresh = ohem_thresh
        self.normalize = normalize
        self.recalibrate_bn = recalibrate_bn
        self.eval_every = eval_every
        self.random_state = random_state

    def _seed(self):
        rs = self.random_state
        if rs is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(rs, np.random.Generator):
            return int(rs.integers(2**31))
        return int(rs)

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, X, self.num_classes)
        k = self.num_classes or int(y[y != IGNORE_LABEL].max()) + 1
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        iterations = check_positive_int(self.iterations, "iterations")
        batch_size = check_positive_int(self.batch_size, "batch_size")
        seed = self._seed()
        self.config_ = ModelConfig(num_classes=k, input_size=X.shape[2:], widths=tuple(self.widths),
                                   dilations=self.dilations, seed=seed,
                                   spatial_branch=self.spatial_branch).validate()
        self.graph_ = build(self.config_)
        dataset = [(img, lab.astype(np.uint8)) for img, lab in zip(X, y)]
        cfg = TrainConfig(iterations=iterations, batch_size=min(batch_size, len(dataset)),
                          optimizer=self.optimizer, lr=self.lr, weight_decay=self.weight_decay,
                          momentum=self.momentum, ohem_thresh=self.ohem_thresh,
                          eval_every=check_positive_int(self.eval_every, "eval_every"),
                          normalize=self.normalize, recalibrate_bn=self.recalibrate_bn, seed=seed)
        self.history_ = train_loop(self.graph_, dataset, cfg)
        self.classes_ = np.arange(k)
        self.n_classes_ = k
        return self

    def _logits(self, X, batch_size=4):
        X = check_images(X)
        if self.normalize:
            X = (X - np.float32(0.5)) / np.float32(0.5)
        out = []
        with no_grad():
            for start in range(0, len(X), batch_size):
                out.append(self.graph_.forward(Tensor(X[start:start + batch_size]), training=False,
                                               check_shape=False).data)
        return np.concatenate(out)

    def predict(self, X):
        """(N, H, W) class ids."""
        check_is_fitted(self, "graph_")
        return self._logits(X).argmax(axis=1).astype(np.int64)

    def predict_proba(self, X):
        """(N, K, H, W) per-pixel class probabilities."""
        check_is_fitted(self, "graph_")
        with no_grad():
            return softmax_channels(Tensor(self._logits(X))).data

    def score(self, X, y):
        """Mean IoU over classes that occur in ``y`` or the prediction."""
        check_is_fitted(self, "graph_")
        X = check_images(X)
        y = check_labels(y, X, self.n_classes_)
        cm = ConfusionMatrix(self.n_classes_).accumulate(self.predict(X), y)
        return miou(cm)[1]

    def recalibrate(self, X):
        """Recompute batch-norm running statistics on ``X`` (for example after loading weights)."""
        check_is_fitted(self, "graph_")
        X = check_images(X)
        dataset = [(img, np.zeros(img.shape[1:], np.uint8)) for img in X]
        recalibrate_bn(self.graph_, dataset, None, self.normalize)
        return self

    def save_weights(self, path):
        check_is_fitted(self, "graph_")
        save_weights(self.graph_, path)
