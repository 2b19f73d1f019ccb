"""scikit-learn compatible wrappers around the ground-truth and training code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import make_sample, pad_to_multiple
from .groundtruth import CountRange, HeadAnnotation, KernelConfig, count_group_label, downsample_sum, render_density_map
from .train import TrainConfig, mae, predict, train
from .validation import check_annotations, check_counts, check_image_batch


class DensityMapTransformer(TransformerMixin, BaseEstimator):
    """Turn head annotations into Gaussian density maps.

    ``transform`` takes a sequence of :class:`HeadAnnotation` (or ``(n, 2)``
    point arrays together with ``image_size``) and returns an array of shape
    ``(n_images, H / downsample, W / downsample)``.
    """

    def __init__(self, mode="adaptive", beta=0.3, k_neighbors=3, fixed_sigma=3.0,
                 truncation_radius_sigmas=4.0, image_size=None, downsample=1):
        self.mode = mode
        self.beta = beta
        self.k_neighbors = k_neighbors
        self.fixed_sigma = fixed_sigma
        self.truncation_radius_sigmas = truncation_radius_sigmas
        self.image_size = image_size
        self.downsample = downsample

    def fit(self, X=None, y=None):
        self.kernel_config_ = KernelConfig(self.mode, self.beta, self.k_neighbors,
                                           self.fixed_sigma, self.truncation_radius_sigmas)
        return self

    def transform(self, X):
        check_is_fitted(self, "kernel_config_")
        annotations = []
        for item in X:
            if isinstance(item, HeadAnnotation):
                annotations.append(item)
            elif self.image_size is None:
                raise ValueError("point arrays need image_size to be set")
            else:
                annotations.append(HeadAnnotation(item, self.image_size))
        maps = []
        for ann in annotations:
            grid = render_density_map(ann, self.kernel_config_).grid
            if self.downsample > 1:
                grid = downsample_sum(grid, self.downsample)
            maps.append(grid)
        if len({m.shape for m in maps}) > 1:
            return maps
        return np.stack(maps) if maps else np.zeros((0, 0, 0))


class CountGroupEncoder(TransformerMixin, BaseEstimator):
    """Learn the training count range and map counts to one of ten groups."""

    def fit(self, X, y=None):
        counts = check_counts(X)
        self.count_range_ = CountRange(float(counts.min()), float(counts.max()))
        return self

    def transform(self, X):
        check_is_fitted(self, "count_range_")
        counts = check_counts(X)
        return np.array([count_group_label(c, self.count_range_) for c in counts], dtype=np.int64)


class MTCNetRegressor(RegressorMixin, BaseEstimator):
    """Crowd counter trained jointly on density maps and count groups.

    ``X`` is an image batch ``(N, 3, H, W)`` (already standardized); ``y``
    is a sequence of head annotations, one ``(n_i, 2)`` array of ``(x, y)``
    pixel positions per image.  Images are zero-padded to multiples of 8.
    ``predict`` returns estimated counts.
    """

    def __init__(self, preset="desk", learning_rate=2e-4, lam=1e-3, epochs=50, batch_size=1,
                 seed=0, init=None, kernel_mode="adaptive", ce_reduction="sum"):
        self.preset = preset
        self.learning_rate = learning_rate
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.init = init
        self.kernel_mode = kernel_mode
        self.ce_reduction = ce_reduction

    def _config(self):
        return TrainConfig(learning_rate=self.learning_rate, lam=self.lam, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed, preset=self.preset,
                           init=self.init, ce_reduction=self.ce_reduction,
                           kernel_mode=self.kernel_mode)

    def _samples(self, images, y, kernel):
        annotations = check_annotations(y, images.shape[2:])
        if len(annotations) != len(images):
            raise ValueError(f"got {len(images)} images but {len(annotations)} annotations")
        return [make_sample(im, ann.points, kernel) for im, ann in zip(images, annotations)]

    def fit(self, X, y):
        images = check_image_batch(X)
        cfg = self._config()
        samples = self._samples(images, y, cfg.kernel)
        result = train(samples, cfg)
        self.params_ = result.params
        self.count_range_ = result.count_range
        self.history_ = result.history
        self.train_report_ = result.report
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        images = pad_to_multiple(check_image_batch(X))
        return predict(self.params_, images)

    def predict_density(self, X):
        return self._forward(X)[0]

    def predict_proba(self, X):
        """Count-group probabilities ``(N, 10)``."""
        return self._forward(X)[1]

    def predict_count_group(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def predict(self, X):
        density = self.predict_density(X)
        return density.reshape(len(density), -1).sum(axis=1)

    def score(self, X, y, sample_weight=None):
        """Negative mean absolute count error (higher is better).

        ``y`` may hold annotations or plain counts.
        """
        est = self.predict(X)
        truth = np.array([_true_count(v) for v in y], dtype=np.float64)
        return -mae(np.stack([est, truth], axis=1))


def _true_count(v):
    if isinstance(v, HeadAnnotation):
        return v.count
    if np.ndim(v) == 0:
        return float(v)
    return len(np.asarray(v).reshape(-1, 2))
