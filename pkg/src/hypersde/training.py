"""Training loop, stratified cross-validation, and the classifier estimator.

One optimizer step accumulates per-subject gradients over a mini-batch.
Cross-validation rotates stratified 6:2:2 train/val/test chunks; folds are
independent and can run in separate processes.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import losses, nn, validation
from .autodiff import Tape
from .losses import LossWeights
from .model import Model, ModelConfig, forward_subject, prepare_subject
from .sde import derive_seed
from .stats import Metrics, compute_metrics

METRIC_NAMES = ("auc", "accuracy", "sensitivity", "specificity")


class TrainingDivergence(RuntimeError):
    """The training loss became non-finite."""


@dataclass
class FoldSplit:
    fold_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def stratified_folds(labels, n_folds: int = 5, seed: int = 0) -> list[FoldSplit]:
    """Rotating stratified partition: per fold one chunk tests, the next
    validates, the remaining three train (6:2:2 for five folds)."""
    labels = validation.check_binary_labels(labels)
    rng = np.random.default_rng(derive_seed(seed, "folds"))
    chunks_by_class = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < n_folds:
            raise ValueError(
                f"class {cls} has {len(idx)} subjects; need at least {n_folds} to stratify")
        rng.shuffle(idx)
        chunks_by_class.append(np.array_split(idx, n_folds))
    folds = []
    for f in range(n_folds):
        test, val, train = [], [], []
        for chunks in chunks_by_class:
            for c, chunk in enumerate(chunks):
                if c == f:
                    test.append(chunk)
                elif c == (f + 1) % n_folds:
                    val.append(chunk)
                else:
                    train.append(chunk)
        folds.append(FoldSplit(
            fold_id=f,
            train_idx=np.sort(np.concatenate(train)),
            val_idx=np.sort(np.concatenate(val)),
            test_idx=np.sort(np.concatenate(test)),
        ))
    return folds


class ProgressionClassifier(BaseEstimator, ClassifierMixin):
    """Binary classifier over per-subject visit-feature sequences.

    ``X`` is a list of subjects, each a time-ordered list of VisitFeatures;
    ``y`` holds 0/1 labels.  Scores come from the masked (interpretable)
    path when sparsity is on.  Training is bit-reproducible per seed.
    """

    def __init__(self, embed_dim=4, n_neighbors=10, scale=1.0, temporal_mode="sde",
                 sparsity=True, solver_steps=10, drift_hidden=32, mlp_hidden=16,
                 self_in_k=False, ce_path="dense", lambda1=2.0, lambda2=0.1,
                 lambda3=0.1, learning_rate=1e-3, epochs=200, batch_size=8, seed=0):
        self.embed_dim = embed_dim
        self.n_neighbors = n_neighbors
        self.scale = scale
        self.temporal_mode = temporal_mode
        self.sparsity = sparsity
        self.solver_steps = solver_steps
        self.drift_hidden = drift_hidden
        self.mlp_hidden = mlp_hidden
        self.self_in_k = self_in_k
        self.ce_path = ce_path
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed

    # -- core hooks --------------------------------------------------------

    def _config(self, n_rois: int) -> ModelConfig:
        return ModelConfig(
            n_rois=n_rois, embed_dim=self.embed_dim, n_neighbors=self.n_neighbors,
            scale=self.scale, temporal_mode=self.temporal_mode, sparsity=self.sparsity,
            solver_steps=self.solver_steps, drift_hidden=self.drift_hidden,
            mlp_hidden=self.mlp_hidden, self_in_k=self.self_in_k,
            ce_path=self.ce_path, seed=self.seed)

    def _prepare(self, X, subject_ids=None):
        sequences, n_rois = validation.check_visit_sequences(X)
        if hasattr(self, "model_") and n_rois != self.model_.config.n_rois:
            raise ValueError(
                f"input has {n_rois} nodes but the model was fitted with "
                f"{self.model_.config.n_rois}")
        config = self.model_.config if hasattr(self, "model_") else self._config(n_rois)
        if subject_ids is None:
            subject_ids = [f"s{i:04d}" for i in range(len(sequences))]
        return [prepare_subject(sid, visits, config)
                for sid, visits in zip(subject_ids, sequences)], n_rois

    def _subject_loss(self, p, result, y: int):
        cfg = self.model_.config
        if not cfg.sparsity:
            return losses.bce_with_logit(result.dense_logit, y)
        ce_logit = result.dense_logit if cfg.ce_path == "dense" else result.masked_logit
        ce = losses.bce_with_logit(ce_logit, y)
        mi = losses.bce_with_logit(result.masked_logit, y)
        sp = losses.loss_sparsity(p["mask.logits_x"].sigmoid(), result.edge_probs)
        en = losses.loss_entropy_from_logits(p["mask.logits_x"], result.edge_logits)
        return losses.total_loss(ce, mi, sp, en, self._weights)

    def fit(self, X, y, validation_set=None, subject_ids=None, val_subject_ids=None):
        y = validation.check_binary_labels(y, n_expected=len(list(X)))
        validation.check_both_classes(y, "training split")
        self._weights = LossWeights(self.lambda1, self.lambda2, self.lambda3)
        self._weights.validate()

        sequences, n_rois = validation.check_visit_sequences(X)
        self.model_ = Model(self._config(n_rois))
        self.classes_ = np.array([0, 1])
        prepared, _ = self._prepare(sequences, subject_ids)

        val_pack = None
        if validation_set is not None:
            Xv, yv = validation_set
            yv = validation.check_binary_labels(yv, n_expected=len(list(Xv)))
            validation.check_both_classes(yv, "validation split")
            val_prepared, _ = self._prepare(Xv, val_subject_ids)
            val_pack = (val_prepared, yv)

        optimizer = nn.Adam(self.model_.store, lr=self.learning_rate)
        order_rng = np.random.default_rng(derive_seed(self.seed, "train-order"))
        self.history_ = []
        best = None  # (auc, state)
        for epoch in range(self.epochs):
            order = order_rng.permutation(len(prepared))
            epoch_loss = 0.0
            for start in range(0, len(order), self.batch_size):
                batch = order[start:start + self.batch_size]
                grads: dict[str, np.ndarray] = {}
                for i in batch:
                    tape = Tape()
                    p = self.model_.store.bind(tape)
                    result = forward_subject(p, self.model_, prepared[i])
                    loss = self._subject_loss(p, result, int(y[i]))
                    value = loss.item()
                    if not np.isfinite(value):
                        raise TrainingDivergence(
                            f"non-finite loss at epoch {epoch}, subject {prepared[i].subject_id}")
                    epoch_loss += value
                    tape.backward(loss)
                    nn.accumulate_grads(grads, p)
                for name in grads:
                    grads[name] /= len(batch)
                optimizer.step(grads)
            row = {"epoch": epoch, "train_loss": epoch_loss / len(prepared)}
            if val_pack is not None:
                metrics = self._evaluate(val_pack[0], val_pack[1])
                row.update(val_auc=metrics.auc, val_acc=metrics.accuracy,
                           val_sens=metrics.sensitivity, val_spec=metrics.specificity)
                if best is None or metrics.auc > best[0]:
                    best = (metrics.auc, self.model_.store.state())
            self.history_.append(row)
        if best is not None:
            self.model_.store.load_state(best[1])
        return self

    def _scores(self, prepared) -> np.ndarray:
        out = np.empty(len(prepared))
        for i, subject in enumerate(prepared):
            tape = Tape()
            p = self.model_.store.bind(tape)
            result = forward_subject(p, self.model_, subject)
            out[i] = result.logit.item()
        return out

    def _evaluate(self, prepared, y) -> Metrics:
        probs = 1.0 / (1.0 + np.exp(-self._scores(prepared)))
        return compute_metrics(probs, y)

    # -- estimator surface ---------------------------------------------------

    def decision_function(self, X, subject_ids=None) -> np.ndarray:
        self._check_fitted()
        prepared, _ = self._prepare(X, subject_ids)
        return self._scores(prepared)

    def predict_proba(self, X, subject_ids=None) -> np.ndarray:
        logits = self.decision_function(X, subject_ids)
        p = 1.0 / (1.0 + np.exp(-logits))
        return np.column_stack([1.0 - p, p])

    def predict(self, X, subject_ids=None) -> np.ndarray:
        return (self.predict_proba(X, subject_ids)[:, 1] >= 0.5).astype(int)

    def evaluate(self, X, y, subject_ids=None) -> Metrics:
        self._check_fitted()
        prepared, _ = self._prepare(X, subject_ids)
        return self._evaluate(prepared, validation.check_binary_labels(y))

    def mask_snapshots(self, X, subject_ids=None):
        """Feature-mask probabilities and per-visit edge probabilities.

        Returns (P_X array, per-subject list of per-visit P_E arrays)."""
        self._check_fitted()
        if not self.model_.config.sparsity:
            raise ValueError("mask snapshots need a sparsity-enabled model")
        prepared, _ = self._prepare(X, subject_ids)
        tape = Tape()
        p = self.model_.store.bind(tape)
        p_x = p["mask.logits_x"].sigmoid().data.copy()
        per_subject = []
        for subject in prepared:
            tape = Tape()
            p = self.model_.store.bind(tape)
            result = forward_subject(p, self.model_, subject)
            per_subject.append([pe.data.copy() for pe in result.edge_probs])
        return p_x, per_subject

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("ProgressionClassifier is not fitted")


# -- cross-validation ---------------------------------------------------------


@dataclass
class FoldResult:
    fold_id: int
    metrics: Metrics
    state: dict
    config: ModelConfig
    history: list


@dataclass
class CrossvalResult:
    folds: list
    mean: dict
    std: dict


def _run_fold(payload):
    (fold_id, features, labels, ids, params, train_idx, val_idx, test_idx) = payload
    clf = ProgressionClassifier(**params)
    pick = lambda idx: [features[i] for i in idx]
    clf.fit(pick(train_idx), labels[train_idx],
            validation_set=(pick(val_idx), labels[val_idx]),
            subject_ids=[ids[i] for i in train_idx],
            val_subject_ids=[ids[i] for i in val_idx])
    metrics = clf.evaluate(pick(test_idx), labels[test_idx],
                           subject_ids=[ids[i] for i in test_idx])
    return FoldResult(fold_id=fold_id, metrics=metrics, state=clf.model_.store.state(),
                      config=clf.model_.config, history=clf.history_)


def crossval(features, labels, subject_ids=None, params=None, n_folds: int = 5,
             seed: int = 0, jobs: int = 1) -> CrossvalResult:
    """Stratified rotating-split cross-validation of the classifier."""
    labels = validation.check_binary_labels(labels, n_expected=len(list(features)))
    if subject_ids is None:
        subject_ids = [f"s{i:04d}" for i in range(len(features))]
    params = dict(params or {})
    params.setdefault("seed", seed)
    folds = stratified_folds(labels, n_folds=n_folds, seed=seed)
    payloads = [(f.fold_id, features, labels, subject_ids, params,
                 f.train_idx, f.val_idx, f.test_idx) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, payloads))
    else:
        results = [_run_fold(p) for p in payloads]
    results.sort(key=lambda r: r.fold_id)
    values = {name: np.array([getattr(r.metrics, name) for r in results])
              for name in METRIC_NAMES}
    return CrossvalResult(
        folds=results,
        mean={k: float(v.mean()) for k, v in values.items()},
        std={k: float(v.std(ddof=0)) for k, v in values.items()},
    )
