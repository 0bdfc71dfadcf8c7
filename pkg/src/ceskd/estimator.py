"""scikit-learn compatible wrappers around the engine.

``NeuralNetClassifier`` trains one network with cross-entropy.
``DifficultyScorer`` ranks a training set by a reference model's loss, and
``DistilledClassifier`` trains a student from already fitted experts. All
of them can be cloned and placed in pipelines.
"""
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .curriculum import rank, score_dataset
from .data import Dataset
from .engine import RunConfig, distill_step, make_spec, train_scratch
from .exceptions import ConfigurationError
from .losses import KDHyperparams, tempered_softmax
from .nn import LRSchedule, predict_logits


def _hidden(layers):
    if isinstance(layers, str):
        return [t for t in layers.replace(",", " ").split() if t]
    return [str(t) for t in layers]


class _NetParams:
    """Optimiser hyperparameters shared by the estimators."""

    def _run_config(self, seed_default=0):
        milestones = self.milestones
        if milestones is None:
            e = self.epochs
            milestones = (e // 5, 3 * e // 5, 4 * e // 5)
        return RunConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            hp=KDHyperparams(getattr(self, "temperature", 10.0), getattr(self, "alpha", 0.9)),
            schedule=LRSchedule(self.lr, tuple(sorted(set(m for m in milestones if m > 0))), 0.1),
            momentum=self.momentum, weight_decay=self.weight_decay, nesterov=True,
            seed=seed_default if self.random_state is None else int(self.random_state),
            class_balanced=getattr(self, "class_balanced", True),
            policy=getattr(self, "policy", "baseline"))

    def _encode(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float32, allow_nd=True)
        check_classification_targets(y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return X, y_enc

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float32, allow_nd=True)
        if X.shape[1:] != self.model_.input_shape:
            raise ValueError(f"X has shape {X.shape[1:]} per sample, model expects {self.model_.input_shape}")
        return X

    def decision_function(self, X):
        X = self._check(X)
        return predict_logits(self.model_, X)

    def predict_proba(self, X):
        return tempered_softmax(self.decision_function(X).astype(np.float64), 1.0)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]


class NeuralNetClassifier(_NetParams, ClassifierMixin, BaseEstimator):
    """Dense (or conv, via ``c16`` / ``p`` tokens) network trained with Nesterov SGD.

    Parameters
    ----------
    layers : str or list of str, default="64 64"
        Hidden architecture tokens: integers are dense widths, ``cN`` a 3x3
        convolution with N channels, ``p`` a 2x2 max-pool.
    depth_tag : int, default=0
        Capacity label; orders experts when several classifiers are
        combined in a :class:`DistilledClassifier`.
    epochs, batch_size, lr, momentum, weight_decay : training constants.
    milestones : tuple of int or None
        Epochs at which the learning rate is divided by 10. ``None`` scales
        the standard 30/90/120-of-150 schedule to ``epochs``.
    random_state : int or None
    """

    def __init__(self, layers="64 64", depth_tag=0, epochs=30, batch_size=128, lr=0.02,
                 milestones=None, momentum=0.9, weight_decay=1e-4, random_state=None):
        self.layers = layers
        self.depth_tag = depth_tag
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y_enc = self._encode(X, y)
        spec = make_spec("net", _hidden(self.layers), self.depth_tag, X.shape[1:], len(self.classes_))
        data = Dataset(X, y_enc, len(self.classes_), "train")
        self.model_, self.metrics_ = train_scratch(spec, data, data, self._run_config())
        if self.metrics_.failed:
            raise FloatingPointError(f"training diverged: {self.metrics_.failure}")
        return self


class DifficultyScorer(BaseEstimator):
    """Rank training samples from easy to hard by a reference model's loss.

    ``reference`` is a :class:`NeuralNetClassifier` (cloned and fitted on the
    data unless ``prefit=True``). After ``fit``, ``scores_`` holds each
    sample's loss and ``ranking_`` the stable ascending order.
    """

    def __init__(self, reference=None, prefit=False):
        self.reference = reference
        self.prefit = prefit

    def fit(self, X, y):
        from sklearn.base import clone
        X, y = check_X_y(X, y, dtype=np.float32, allow_nd=True)
        if self.prefit:
            if self.reference is None:
                raise ValueError("prefit=True requires a fitted reference")
            self.reference_ = self.reference
        else:
            ref = NeuralNetClassifier(epochs=5) if self.reference is None else clone(self.reference)
            self.reference_ = ref.fit(X, y)
        check_is_fitted(self.reference_, "model_")
        self.ranked_ = rank(score_dataset(self.reference_.model_, X, self._encode(y)))
        self.scores_ = np.empty(len(y))
        self.scores_[self.ranked_.order] = self.ranked_.scores
        self.ranking_ = self.ranked_.order
        return self

    def _encode(self, y):
        classes = self.reference_.classes_
        pos = np.searchsorted(classes, y)
        if np.any(pos >= len(classes)) or np.any(classes[np.minimum(pos, len(classes) - 1)] != y):
            raise ValueError("y contains labels unknown to the reference model")
        return pos

    def score_samples(self, X, y):
        """Per-sample difficulty (cross-entropy of the reference model)."""
        check_is_fitted(self, "ranked_")
        X, y = check_X_y(X, y, dtype=np.float32, allow_nd=True)
        return np.array([s.score for s in score_dataset(self.reference_.model_, X, self._encode(y))])


class DistilledClassifier(_NetParams, ClassifierMixin, BaseEstimator):
    """Student network distilled from fitted expert classifiers.

    Parameters
    ----------
    experts : list of fitted NeuralNetClassifier
        Distinct ``depth_tag`` values; order does not matter.
    method : {"ceskd", "dgkd", "blkd"}, default="ceskd"
        ``blkd`` uses the single (or largest) expert, ``dgkd`` the mean over
        all experts, ``ceskd`` one expert per difficulty bucket.
    scorer : DifficultyScorer or None
        Curriculum source for ``ceskd``; ``None`` fits one whose reference
        copies the largest expert's settings.
    alpha, temperature : distillation weight and softmax temperature.
    policy : {"baseline", "anti", "random"}
    class_balanced : bool
    """

    def __init__(self, experts=(), layers="32", depth_tag=0, method="ceskd", scorer=None,
                 alpha=0.9, temperature=10.0, policy="baseline", class_balanced=True,
                 epochs=30, batch_size=128, lr=0.02, milestones=None, momentum=0.9,
                 weight_decay=1e-4, random_state=None):
        self.experts = experts
        self.layers = layers
        self.depth_tag = depth_tag
        self.method = method
        self.scorer = scorer
        self.alpha = alpha
        self.temperature = temperature
        self.policy = policy
        self.class_balanced = class_balanced
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        from sklearn.base import clone
        if not self.experts:
            raise ValueError("at least one fitted expert is required")
        for e in self.experts:
            check_is_fitted(e, "model_")
        X, y_enc = self._encode(X, y)
        for e in self.experts:
            if not np.array_equal(e.classes_, self.classes_):
                raise ValueError("every expert must be fitted on the same classes as the student")
        experts = sorted(self.experts, key=lambda e: e.depth_tag)
        pool = [e.model_ for e in experts]
        method = self.method
        if method not in ("ceskd", "dgkd", "blkd"):
            raise ConfigurationError(f"unknown method {method!r}")
        if method == "blkd":
            pool = pool[-1:]
        ranked = None
        if method == "ceskd":
            scorer = self.scorer
            if scorer is None:
                scorer = DifficultyScorer(clone(experts[-1]).set_params(epochs=5))
            if not hasattr(scorer, "ranked_"):
                scorer = clone(scorer).fit(X, y)
            self.scorer_ = scorer
            ranked = scorer.ranked_
        spec = make_spec("student", _hidden(self.layers), self.depth_tag, X.shape[1:], len(self.classes_))
        data = Dataset(X, y_enc, len(self.classes_), "train")
        self.model_, self.metrics_ = distill_step(spec, pool, data, data, self._run_config(),
                                                  method, ranked=ranked)
        if self.metrics_.failed:
            raise FloatingPointError(f"training diverged: {self.metrics_.failure}")
        return self
