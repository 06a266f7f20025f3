"""scikit-learn compatible front ends.

:class:`ConformalTrainer` fits a small neural classifier with any of the
training objectives (plain cross-entropy, focal loss, ConfTr, CUT, or the
class-adaptive objective with ALM or heuristic multiplier updates).
:class:`ConformalClassifier` wraps any fitted probabilistic classifier and
turns its outputs into calibrated prediction sets.
"""

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import alm as alm_mod
from . import model as model_mod
from .calibration import calibrate, predict_sets, true_label_scores
from .exceptions import ConfigError, DivergenceError
from .objectives import ObjectiveConfig, SizeLossConfig, total_training_loss, OBJECTIVES
from .scores import SmoothingConfig, compute_scores
from .smoothsort import hard_quantile


class ConformalTrainer(ClassifierMixin, BaseEstimator):
    """Neural classifier trained with a conformal objective.

    Parameters
    ----------
    objective : {"ce", "fl", "conftr", "cut", "cact", "cact_hr"}
        Training objective. ``"cact"`` enforces one set-size constraint per
        class with multipliers learned by the augmented Lagrangian method;
        ``"cact_hr"`` adapts class weights with the multiplicative heuristic.
    hidden_layer_sizes : tuple of int
        Widths of the ReLU hidden layers; ``()`` gives a linear model.
    learning_rate, momentum, nesterov, milestones, decay
        SGD settings; the rate is multiplied by ``decay`` at each milestone
        (fractions of ``epochs``).
    epochs, batch_size : int
    eta : float
        Target set size.
    alpha_train : float
        Mis-coverage level of the in-batch quantile.
    temperature, steepness : float
        Sigmoid temperature of the soft set size and steepness of the relaxed
        sort behind the smooth quantile.
    cal_fraction : float
        Share of each mini-batch used as the in-batch calibration half.
    cls_on_pred_only : bool
        Compute the classification term of conformal objectives on the
        prediction half only.
    reg_weight : float
        Fixed weight of the ConfTr/CUT regulariser.
    focal_gamma : float
    penalty : {"phr", "p2", "p3"}
    lambda_init, rho_init, beta, rho_update_period
        ALM initial multipliers and penalty parameters, growth factor and the
        number of epochs between penalty-parameter updates.
    hr_lambda_init, hr_mu, hr_tau
        Heuristic-rule settings.
    threshold_source : {"validation", "frozen_batch"}
        Threshold used to measure per-class set sizes on the validation set:
        recomputed on the validation scores, or the last training batch's.
    update_multipliers : bool
        Set False to freeze the multipliers at their initial values.
    finetune : bool
        Train ``base_epochs`` of cross-entropy first, reinitialise the logit
        layer, then train with ``objective``.
    random_state : int

    Attributes
    ----------
    params_ : ClassifierParams
    classes_ : ndarray
    history_ : list of dict
        One entry per epoch with losses, multipliers, penalty parameters and
        per-class validation set sizes.
    alm_state_ : AlmState or None
    hr_state_ : HrState or None
    """

    def __init__(self, objective="cact", hidden_layer_sizes=(64,), learning_rate=0.01,
                 momentum=0.9, nesterov=True, milestones=(0.4, 0.6, 0.8), decay=0.1,
                 epochs=50, batch_size=500, eta=1.0, alpha_train=0.01, temperature=0.1,
                 steepness=10.0, cal_fraction=0.5, cls_on_pred_only=True, reg_weight=0.05,
                 focal_gamma=3.0, penalty="phr", lambda_init=1e-6, rho_init=1.0, beta=1.2,
                 rho_update_period=10, hr_lambda_init=0.1, hr_mu=1.1, hr_tau=1.1,
                 threshold_source="validation", update_multipliers=True, finetune=False,
                 base_epochs=0, random_state=0):
        self.objective = objective
        self.hidden_layer_sizes = hidden_layer_sizes
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.nesterov = nesterov
        self.milestones = milestones
        self.decay = decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta = eta
        self.alpha_train = alpha_train
        self.temperature = temperature
        self.steepness = steepness
        self.cal_fraction = cal_fraction
        self.cls_on_pred_only = cls_on_pred_only
        self.reg_weight = reg_weight
        self.focal_gamma = focal_gamma
        self.penalty = penalty
        self.lambda_init = lambda_init
        self.rho_init = rho_init
        self.beta = beta
        self.rho_update_period = rho_update_period
        self.hr_lambda_init = hr_lambda_init
        self.hr_mu = hr_mu
        self.hr_tau = hr_tau
        self.threshold_source = threshold_source
        self.update_multipliers = update_multipliers
        self.finetune = finetune
        self.base_epochs = base_epochs
        self.random_state = random_state

    # -- setup -------------------------------------------------------------

    def _validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.threshold_source not in ("validation", "frozen_batch"):
            raise ConfigError(f"unknown threshold_source {self.threshold_source!r}")
        if int(self.epochs) < 1 or int(self.batch_size) < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")

    def _optimizer(self):
        return model_mod.OptimizerConfig(
            learning_rate=self.learning_rate, momentum=self.momentum,
            nesterov=self.nesterov, milestones=tuple(self.milestones), decay=self.decay,
        )

    def _size_config(self):
        return SizeLossConfig(
            eta=self.eta, alpha_train=self.alpha_train,
            smoothing=SmoothingConfig(self.temperature, self.steepness),
        )

    def _objective_config(self, kind):
        return ObjectiveConfig(
            kind=kind, size=self._size_config(), reg_weight=self.reg_weight,
            focal_gamma=self.focal_gamma, penalty=self.penalty,
            cal_fraction=self.cal_fraction, cls_on_pred_only=self.cls_on_pred_only,
            alm=self.alm_state_, hr=self.hr_state_,
        )

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= self.classes_.size) or np.any(self.classes_[np.minimum(idx, self.classes_.size - 1)] != y):
            raise ConfigError("labels not seen while fitting")
        return idx

    # -- training ----------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        """Train on ``(X, y)``; ``(X_val, y_val)`` drives the multiplier updates."""
        self._validate()
        X, y = check_X_y(X, y, dtype=np.float64)
        has_val = X_val is not None and y_val is not None and len(y_val) > 0
        if has_val:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
            self.classes_ = np.unique(np.concatenate([y, y_val]))
        else:
            self.classes_ = np.unique(y)
        if self.objective in ("cact", "cact_hr") and not has_val:
            raise ConfigError(f"objective {self.objective!r} needs a non-empty validation set")
        yk = self._encode(y)
        yv = self._encode(y_val) if has_val else None
        k = self.classes_.size
        self.n_features_in_ = X.shape[1]

        seed = int(self.random_state)
        self.params_ = model_mod.init_params(X.shape[1], k, tuple(self.hidden_layer_sizes), seed)
        self.alm_state_ = alm_mod.AlmState.initial(
            k, self.lambda_init, self.rho_init, eta=self.eta, beta=self.beta,
            update_period=self.rho_update_period,
        ) if self.objective == "cact" else None
        self.hr_state_ = alm_mod.HrState.initial(
            k, self.hr_lambda_init, mu=self.hr_mu, tau=self.hr_tau,
        ) if self.objective == "cact_hr" else None
        self.history_ = []
        rng = np.random.default_rng([seed, 7])
        opt = self._optimizer()

        if self.finetune and int(self.base_epochs) > 0:
            base = self._objective_config("ce")
            for epoch in range(int(self.base_epochs)):
                self._run_epoch(X, yk, base, opt, epoch, int(self.base_epochs), rng, phase="base")
            self.params_ = model_mod.reinit_final_layer(self.params_, seed + 1)

        total = int(self.epochs)
        for epoch in range(total):
            cfg = self._objective_config(self.objective)
            record = self._run_epoch(X, yk, cfg, opt, epoch, total, rng, phase="main")
            if has_val:
                self._outer_step(X_val, yv, epoch + 1, record)
            self.history_.append(record)
        return self

    def _batches(self, n, rng):
        bs = min(int(self.batch_size), n)
        perm = rng.permutation(n)
        n_full = n // bs
        return [perm[i * bs:(i + 1) * bs] for i in range(n_full)]

    def _run_epoch(self, X, y, cfg, opt, epoch, total, rng, phase):
        losses, conf_losses = [], []
        q_last = np.nan
        for b, idx in enumerate(self._batches(X.shape[0], rng)):
            loss, grads, info = total_training_loss(self.params_, X[idx], y[idx], cfg, rng=rng)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {b}",
                    state={
                        "phase": phase, "epoch": epoch, "batch": b,
                        "params": self.params_.flat(),
                        "lam": None if cfg.alm is None else cfg.alm.lam,
                        "rho": None if cfg.alm is None else cfg.alm.rho,
                    },
                )
            self.params_ = model_mod.sgd_step(self.params_, grads, opt, epoch, total)
            losses.append(loss)
            conf_losses.append(info.get("conf_loss", 0.0))
            q_last = info.get("q", q_last)
        return {
            "phase": phase,
            "epoch": epoch + 1,
            "lr": opt.lr_at(epoch, total),
            "loss": float(np.mean(losses)),
            "conf_loss": float(np.mean(conf_losses)),
            "q_last_batch": float(q_last),
        }

    def validation_set_sizes(self, X_val, y_val_encoded, q=None):
        """Per-class mean hard set size on validation data, in training score units."""
        logits = model_mod.forward(self.params_, X_val)
        scores = -log_softmax(logits, axis=1)
        if q is None:
            q = hard_quantile(scores[np.arange(len(y_val_encoded)), y_val_encoded], self.alpha_train)
        sizes = (scores <= q).sum(axis=1).astype(np.float64)
        k = self.classes_.size
        counts = np.bincount(y_val_encoded, minlength=k)
        sums = np.bincount(y_val_encoded, weights=sizes, minlength=k)
        with np.errstate(invalid="ignore", divide="ignore"):
            d_hat = np.where(counts > 0, sums / counts, np.nan)
        return d_hat, sizes, q

    def _outer_step(self, X_val, y_val, epoch, record):
        q = None
        if self.threshold_source == "frozen_batch" and np.isfinite(record["q_last_batch"]):
            q = record["q_last_batch"]
        d_hat, sizes, q_used = self.validation_set_sizes(X_val, y_val, q)
        if not np.isfinite(q_used) and np.isfinite(record["q_last_batch"]):
            d_hat, sizes, q_used = self.validation_set_sizes(X_val, y_val, record["q_last_batch"])
        record["q_val"] = float(q_used)
        record["d_hat"] = d_hat.tolist()

        if self.alm_state_ is not None and self.update_multipliers:
            state = alm_mod.update_multipliers(self.alm_state_, self.penalty, d_hat)
            self.alm_state_ = alm_mod.update_rho(state, d_hat, epoch)
        if self.hr_state_ is not None and self.update_multipliers:
            k = self.classes_.size
            hinge = np.maximum(sizes - self.eta, 0.0)
            counts = np.bincount(y_val, minlength=k)
            with np.errstate(invalid="ignore", divide="ignore"):
                per_class = np.where(counts > 0, np.bincount(y_val, weights=hinge, minlength=k) / counts, np.nan)
            self.hr_state_ = alm_mod.update_multipliers_hr(self.hr_state_, per_class)

        if self.alm_state_ is not None:
            record["lam"] = self.alm_state_.lam.tolist()
            record["rho"] = self.alm_state_.rho.tolist()
        elif self.hr_state_ is not None:
            record["lam"] = self.hr_state_.lam.tolist()
            record["rho"] = [float("nan")] * self.classes_.size
        else:
            lam = self.reg_weight if self.objective in ("conftr", "cut") else 0.0
            record["lam"] = [float(lam)] * self.classes_.size
            record["rho"] = [float("nan")] * self.classes_.size

    # -- inference ---------------------------------------------------------

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return model_mod.forward(self.params_, X)

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class ConformalClassifier(BaseEstimator):
    """Prediction sets from a fitted probabilistic classifier.

    Parameters
    ----------
    estimator : fitted classifier with ``predict_proba`` and ``classes_``
    score : {"thr", "aps", "raps"}
    mode : {"split", "label", "cluster"}
    alpha : float
        Target mis-coverage.
    raps_lambda, raps_k : float, int
        RAPS regularisation strength and rank.
    randomized : bool
        Draw the APS/RAPS uniform term (one draw per example) instead of
        using ``u = 1``.
    n_clusters, min_count : int or None
        Cluster-conditional settings; ``None`` uses the defaults
        ``max(1, K // 10)`` and ``ceil(1 / alpha)``.
    random_state : int
    """

    def __init__(self, estimator=None, score="thr", mode="split", alpha=0.1, raps_lambda=0.01,
                 raps_k=5, randomized=False, n_clusters=None, min_count=None, random_state=0):
        self.estimator = estimator
        self.score = score
        self.mode = mode
        self.alpha = alpha
        self.raps_lambda = raps_lambda
        self.raps_k = raps_k
        self.randomized = randomized
        self.n_clusters = n_clusters
        self.min_count = min_count
        self.random_state = random_state

    def _scores(self, probs, rng):
        u = rng.uniform(size=probs.shape[0]) if self.randomized else 1.0
        return compute_scores(probs, self.score, u, self.raps_lambda, self.raps_k)

    def fit(self, X, y):
        """Calibrate on ``(X, y)``, which must not overlap the training data."""
        if self.estimator is None:
            raise ConfigError("ConformalClassifier needs a fitted estimator")
        check_is_fitted(self.estimator)
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.asarray(self.estimator.classes_)
        yk = np.searchsorted(self.classes_, y)
        self._rng = np.random.default_rng(self.random_state)
        probs = self.estimator.predict_proba(X)
        cal_true = true_label_scores(self._scores(probs, self._rng), yk)
        self.thresholds_ = calibrate(
            cal_true, yk, self.mode, self.alpha, self.classes_.size,
            self.n_clusters, self.min_count, self.random_state,
        )
        return self

    def predict_sets(self, X):
        """Boolean ``(n, K)`` membership matrix, columns ordered as ``classes_``."""
        check_is_fitted(self, "thresholds_")
        X = check_array(X, dtype=np.float64)
        probs = self.estimator.predict_proba(X)
        return predict_sets(self._scores(probs, self._rng), self.thresholds_)

    def predict(self, X):
        return self.estimator.predict(X)
