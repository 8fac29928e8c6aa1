"""scikit-learn style estimators over the training pipeline.

Images are ``N x 1 x spatial`` (a missing channel axis is added) and labels
are integer maps ``N x spatial`` with values in ``0..n_classes``.

    >>> teacher = TeacherSegmenter(n_classes=4, epochs=30).fit(vols, vol_labels)
    >>> proto = PrototypeExtractor(teacher).fit(vols, vol_labels).prototype_
    >>> base = StudentSegmenter(n_classes=4).fit(slices, slice_labels)
    >>> model = DistilledStudent(proto, init=base).fit(slices, slice_labels)
    >>> model.score(test_slices, test_labels)    # mean DSC
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .evaluation import score_labels
from .exceptions import ShapeError
from .losses import INTER_MODES, LossWeights
from .models import ARCHS, infer, init_params, predict_labels
from .prototype import DEFAULT_WINDOW, dataset_prototype
from .synthdata import LabeledItem
from .trainer import TrainConfig, distill, pretrain_student, train_teacher


def check_images(X, dims):
    """Validate images for a ``dims``-D network; returns float64 ``N x 1 x spatial``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == dims + 1:
        X = X[:, None]
    if X.ndim != dims + 2 or X.shape[1] != 1:
        raise ShapeError(f"expected images of shape N x 1 x {dims} spatial dims, got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinity")
    return X


def check_labels(y, X, n_classes):
    """Validate an integer label map matching images ``X`` (already checked)."""
    y = np.asarray(y)
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ShapeError(f"labels {y.shape} do not match images {X.shape}")
    if y.dtype.kind == "f":
        if not np.all(y == np.round(y)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    elif y.dtype.kind not in "iub":
        raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() > n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes}")
    return y.astype(np.int64)


def _items(X, y):
    return [LabeledItem(x, lab, {"seed": i}) for i, (x, lab) in enumerate(zip(X, y))]


class _Segmenter(BaseEstimator):
    _arch = None

    def __init__(self, n_classes=4, epochs=60, batch_size=4, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8, lambda_dice=1.0, lambda_ce=1.0, random_state=0):
        self.n_classes = n_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lambda_dice = lambda_dice
        self.lambda_ce = lambda_ce
        self.random_state = random_state

    @property
    def _dims(self):
        return ARCHS[self._arch]

    def _train_config(self, beta=0.0, inter_mode="channel"):
        seed = 0 if self.random_state is None else int(self.random_state)
        weights = LossWeights(beta, self.lambda_dice, self.lambda_ce)
        return TrainConfig(self.epochs, self.epochs, self.epochs, self.batch_size, self.lr,
                           self.beta1, self.beta2, self.eps, seed, weights, inter_mode)

    def _prepare(self, X, y, X_val, y_val):
        X = check_images(X, self._dims)
        train = _items(X, check_labels(y, X, self.n_classes))
        val = []
        if X_val is not None:
            Xv = check_images(X_val, self._dims)
            val = _items(Xv, check_labels(y_val, Xv, self.n_classes))
        return train, val

    def _store(self, result):
        self.params_ = result.params
        self.best_epoch_ = result.best_epoch
        self.history_ = result.history
        self.n_classes_ = result.params.n_classes
        return self

    def decision_function(self, X):
        """Per-pixel logits, ``N x (C + 1) x spatial``."""
        check_is_fitted(self, "params_")
        X = check_images(X, self._dims)
        return infer(self.params_, X, batch_size=8 if self._dims == 2 else 1)

    def predict_proba(self, X):
        return ad.softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return predict_labels(self.decision_function(X))

    def score(self, X, y):
        """Mean DSC over items (absent classes excluded per item)."""
        X = check_images(X, self._dims)
        y = check_labels(y, X, self.n_classes)
        return score_labels(self.predict(X), y, self.n_classes_).mean_dsc()


class TeacherSegmenter(_Segmenter):
    """3D teacher network trained on whole volumes."""

    _arch = "teacher3d"

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._prepare(X, y, X_val, y_val)
        return self._store(train_teacher(self._train_config(), train, val, self.n_classes))


class StudentSegmenter(_Segmenter):
    """2D student trained with the segmentation loss only."""

    _arch = "student2d"

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._prepare(X, y, X_val, y_val)
        return self._store(pretrain_student(self._train_config(), train, val, self.n_classes))


class DistilledStudent(_Segmenter):
    """2D student fine-tuned against a fixed teacher prototype.

    ``init`` is a fitted :class:`StudentSegmenter` to start from; without it
    the student is first pretrained on the same data for ``pretrain_epochs``.
    """

    _arch = "student2d"

    def __init__(self, prototype=None, init=None, beta=0.5, inter_mode="channel", pretrain_epochs=60,
                 n_classes=4, epochs=100, batch_size=4, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                 lambda_dice=1.0, lambda_ce=1.0, random_state=0):
        super().__init__(n_classes, epochs, batch_size, lr, beta1, beta2, eps, lambda_dice, lambda_ce,
                         random_state)
        self.prototype = prototype
        self.init = init
        self.beta = beta
        self.inter_mode = inter_mode
        self.pretrain_epochs = pretrain_epochs

    def fit(self, X, y, X_val=None, y_val=None):
        if self.prototype is None:
            raise ValueError("a teacher prototype is required")
        if self.inter_mode not in INTER_MODES:
            raise ValueError(f"inter_mode must be one of {INTER_MODES}")
        train, val = self._prepare(X, y, X_val, y_val)
        config = self._train_config(self.beta, self.inter_mode)
        if self.init is not None:
            check_is_fitted(self.init, "params_")
            start = self.init.params_
        else:
            seed = config.seed
            start = init_params("student2d", self.n_classes, seed)
            pre = TrainConfig(student_epochs=self.pretrain_epochs, batch_size=config.batch_size,
                              lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                              seed=seed, weights=config.weights)
            start = pretrain_student(pre, train, val, init=start).params
        return self._store(distill(config, start, self.prototype, train, val))


class PrototypeExtractor(BaseEstimator):
    """Class prototype of a fitted teacher over the central window of volumes."""

    def __init__(self, teacher=None, window=DEFAULT_WINDOW, source="teacher3d"):
        self.teacher = teacher
        self.window = window
        self.source = source

    def fit(self, X, y):
        if self.teacher is None:
            raise ValueError("a fitted TeacherSegmenter is required")
        check_is_fitted(self.teacher, "params_")
        n_classes = self.teacher.params_.n_classes
        X = check_images(X, 3)
        y = check_labels(y, X, n_classes)
        self.prototype_ = dataset_prototype(self.teacher.params_, _items(X, y), tuple(self.window), self.source)
        return self

    def transform(self, X=None):
        """The prototype matrix (``C x (C + 1)``); inputs are ignored."""
        check_is_fitted(self, "prototype_")
        return self.prototype_.matrix.copy()
