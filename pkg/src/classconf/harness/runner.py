"""Experiment orchestration: data, training, resampled evaluation, ablations.

Everything here is a deterministic function of an :class:`ExperimentConfig`
and a seed, so re-running a command reproduces its output files exactly.
"""

import csv
import json
import os
import warnings
import zipfile

import numpy as np

from ..calibration import calibrate, predict_sets, true_label_scores
from ..data import generate_benchmark, load_csv, split_protocol
from ..estimators import ConformalTrainer
from ..exceptions import ConfigError
from ..metrics import evaluate, summarize
from ..model import ClassifierParams
from ..scores import compute_scores
from .config import ABLATION_AXES, coerce

METRIC_COLUMNS = ["method", "score", "mode", "alpha", "gamma", "seed",
                  "coverage", "size", "cov_gap", "top1", "top3"]
TRAJECTORY_COLUMNS = ["epoch", "class", "lam", "rho", "d_hat"]


# -- data --------------------------------------------------------------------

def load_data(cfg, seed):
    """Return ``(train, val, cal, test)`` for one seed."""
    if cfg.train_csv is not None:
        train = load_csv(cfg.train_csv, cfg.label_column)
        pool = load_csv(cfg.pool_csv, cfg.label_column, label_names=train.label_names)
        if pool.n_classes != train.n_classes:
            warnings.warn("the pool has labels never seen in training", RuntimeWarning, stacklevel=2)
            train.n_classes = pool.n_classes
    else:
        train, pool = generate_benchmark(
            cfg.n_classes, cfg.n_features, cfg.gamma, cfg.base_count, cfg.pool_per_class,
            cfg.class_separation, seed,
        )
    val, cal, test = split_protocol(pool, seed)
    return train, val, cal, test


# -- training ----------------------------------------------------------------

def make_trainer(cfg, objective, seed):
    return ConformalTrainer(
        objective=objective, hidden_layer_sizes=tuple(cfg.hidden_layer_sizes),
        learning_rate=cfg.learning_rate, momentum=cfg.momentum, nesterov=cfg.nesterov,
        milestones=tuple(cfg.milestones), decay=cfg.decay, epochs=cfg.epochs,
        batch_size=cfg.batch_size, eta=cfg.eta, alpha_train=cfg.alpha_train,
        temperature=cfg.temperature, steepness=cfg.steepness, cal_fraction=cfg.cal_fraction,
        cls_on_pred_only=cfg.cls_on_pred_only, reg_weight=cfg.reg_weight,
        focal_gamma=cfg.focal_gamma, penalty=cfg.penalty, lambda_init=cfg.lambda_init,
        rho_init=cfg.rho_init, beta=cfg.beta, rho_update_period=cfg.rho_update_period,
        hr_lambda_init=cfg.hr_lambda_init, hr_mu=cfg.hr_mu, hr_tau=cfg.hr_tau,
        threshold_source=cfg.threshold_source, finetune=cfg.finetune,
        base_epochs=cfg.base_epochs, random_state=seed,
    )


def run_training(cfg, objective, seed, data=None):
    """Fit one model; returns ``(estimator, history)``.

    The validation split drives the multiplier updates; it is disjoint from
    the calibration data used later.
    """
    train, val, _, _ = load_data(cfg, seed) if data is None else data
    est = make_trainer(cfg, objective, seed)
    est.fit(train.features, train.labels, val.features, val.labels)
    return est, est.history_


def save_model(est, path):
    """Write an ``.npz`` archive readable by ``np.load``.

    Entries carry a fixed timestamp so identical models give identical bytes.
    """
    arrays = {"classes": est.classes_}
    for i, (w, b) in enumerate(est.params_.layers):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    with zipfile.ZipFile(path, "w") as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, np.asarray(arr), allow_pickle=False)


def load_model(path, cfg, objective, seed):
    """Rebuild a fitted :class:`ConformalTrainer` from :func:`save_model` output."""
    with np.load(path) as z:
        n_layers = sum(1 for k in z.files if k.startswith("W"))
        layers = [(z[f"W{i}"], z[f"b{i}"]) for i in range(n_layers)]
        classes = z["classes"]
    est = make_trainer(cfg, objective, seed)
    est.params_ = ClassifierParams(layers)
    est.classes_ = classes
    est.n_features_in_ = layers[0][0].shape[1]
    est.history_ = []
    return est


# -- evaluation --------------------------------------------------------------

def run_eval(est, cal, test, cfg, seed):
    """Resampled conformal evaluation of one fitted model.

    Calibration and test examples are pooled and re-split ``n_resamples``
    times (same sizes as the original split). Returns a dict mapping
    ``(score, mode, alpha)`` to the list of per-resample reports.
    """
    probs = np.vstack([est.predict_proba(cal.features), est.predict_proba(test.features)])
    labels = np.concatenate([cal.labels, test.labels])
    k = probs.shape[1]
    n_cal = len(cal)
    out = {}
    for r in range(cfg.n_resamples):
        rng = np.random.default_rng([seed, 11, r])
        perm = rng.permutation(labels.shape[0])
        ci, ti = perm[:n_cal], perm[n_cal:]
        u = rng.uniform(size=labels.shape[0]) if cfg.randomized else 1.0
        for score in cfg.eval_scores:
            s = compute_scores(probs, score, u, cfg.raps_lambda, cfg.raps_k)
            cal_true = true_label_scores(s[ci], labels[ci])
            for mode in cfg.cp_modes:
                for alpha in cfg.eval_alphas:
                    th = calibrate(cal_true, labels[ci], mode, alpha, k, seed=seed)
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", RuntimeWarning)
                        rep = evaluate(predict_sets(s[ti], th), labels[ti], probs[ti], alpha,
                                       ks=(1, 3), n_classes=k)
                    out.setdefault((score, mode, alpha), []).append(rep)
    return out


def metric_rows(method, gamma, seed, reports):
    rows = []
    for (score, mode, alpha), reps in reports.items():
        agg = summarize(reps)
        rows.append({
            "method": method, "score": score, "mode": mode, "alpha": alpha,
            "gamma": gamma, "seed": seed, "coverage": agg["coverage"],
            "size": agg["avg_size"], "cov_gap": agg["cov_gap"],
            "top1": agg.get("top1", float("nan")), "top3": agg.get("top3", float("nan")),
        })
    return rows


def run_benchmark(cfg, models_dir=None, load_dir=None):
    """Train (or load) every method for every seed and evaluate it.

    Returns ``(rows, logs, per_class)``: metric rows, training histories keyed
    by ``(method, seed)`` and per-class breakdowns keyed the same way.
    """
    rows, logs, per_class = [], {}, {}
    for seed in cfg.seeds:
        data = load_data(cfg, seed)
        train, _, cal, test = data
        for method in cfg.methods:
            name = f"{method}_seed{seed}"
            if load_dir is not None:
                est = load_model(os.path.join(load_dir, name + ".npz"), cfg, method, seed)
                hist_path = os.path.join(load_dir, name + "_history.json")
                if os.path.exists(hist_path):
                    with open(hist_path) as fh:
                        est.history_ = json.load(fh)
            else:
                est, _ = run_training(cfg, method, seed, data)
            if models_dir is not None:
                save_model(est, os.path.join(models_dir, name + ".npz"))
                with open(os.path.join(models_dir, name + "_history.json"), "w") as fh:
                    json.dump(est.history_, fh, indent=1)
            reports = run_eval(est, cal, test, cfg, seed)
            rows.extend(metric_rows(method, cfg.gamma, seed, reports))
            logs[(method, seed)] = est.history_
            per_class[(method, seed)] = (train.class_counts, reports)
    return rows, logs, per_class


def aggregate_rows(rows, keys=("method", "score", "mode", "alpha", "gamma")):
    """Mean and sample standard deviation over seeds."""
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in keys), []).append(row)
    out = []
    for key, members in groups.items():
        agg = dict(zip(keys, key))
        agg["n_seeds"] = len(members)
        for col in ("coverage", "size", "cov_gap", "top1", "top3"):
            vals = np.array([m[col] for m in members], dtype=np.float64)
            agg[col] = float(vals.mean())
            agg[col + "_sd"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        out.append(agg)
    return out


# -- ablations ---------------------------------------------------------------

_AXIS_FIELD = {"eta": "eta", "gamma": "gamma", "penalty_kind": "penalty",
               "temperature": "temperature"}


def run_ablation(cfg, axis, values):
    """One full train/eval per value (eval only for ``alpha_test``).

    Returns long-format rows with ``axis`` and ``value`` columns in front of
    the metric columns.
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    if not values:
        raise ConfigError("an ablation needs at least one value")
    rows = []
    if axis == "alpha_test":
        probe = cfg.replace(eval_alphas=coerce("eval_alphas", list(values)))
        rows_all, _, _ = run_benchmark(probe)
        for row in rows_all:
            rows.append({"axis": axis, "value": row["alpha"], **row})
        return rows
    field = _AXIS_FIELD[axis]
    for v in values:
        sub = cfg.replace(**{field: v})
        sub_rows, _, _ = run_benchmark(sub)
        for row in sub_rows:
            rows.append({"axis": axis, "value": getattr(sub, field), **row})
    return rows


# -- files -------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_rows(path, rows, columns=None):
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def trajectory_rows(history):
    """``epochs x K`` rows of multipliers, penalty parameters and validation sizes."""
    rows = []
    for rec in history:
        if rec.get("phase") != "main" or "lam" not in rec:
            continue
        for y, (lam, rho, d) in enumerate(zip(rec["lam"], rec["rho"], rec["d_hat"])):
            rows.append({"epoch": rec["epoch"], "class": y, "lam": lam, "rho": rho, "d_hat": d})
    return rows


def emit_plot_data(logs, per_class, rows, outdir, alpha=None, mode=None):
    """Write the CSVs behind the per-class, trajectory and scatter figures.

    * ``per_class.csv``: per method and class, mean size and coverage (THR,
      first mode and alpha unless given) with classes sorted by descending
      training frequency;
    * ``trajectory_<method>_seed<s>.csv``: one row per epoch and class;
    * ``scatter.csv``: one row per (method, score) with mean size and
      coverage gap over seeds.
    """
    os.makedirs(outdir, exist_ok=True)
    written = []

    for (method, seed), hist in sorted(logs.items()):
        path = os.path.join(outdir, f"trajectory_{method}_seed{seed}.csv")
        write_rows(path, trajectory_rows(hist), TRAJECTORY_COLUMNS)
        written.append(path)

    pc_rows = []
    by_method = {}
    for (method, seed), (counts, reports) in per_class.items():
        keys = [k for k in reports if k[0] == "thr"] or list(reports)
        key = keys[0]
        if alpha is not None or mode is not None:
            keys = [k for k in reports
                    if (alpha is None or k[2] == alpha) and (mode is None or k[1] == mode)]
            if not keys:
                continue
            key = keys[0]
        by_method.setdefault(method, []).append((counts, reports[key]))
    for method, entries in sorted(by_method.items()):
        counts = np.mean([c for c, _ in entries], axis=0)
        k = counts.shape[0]
        size = np.zeros(k)
        cov = np.zeros(k)
        seen = np.zeros(k)
        for _, reps in entries:
            for rep in reps:
                for cb in rep.per_class:
                    size[cb.label] += cb.avg_size
                    cov[cb.label] += cb.coverage
                    seen[cb.label] += 1
        with np.errstate(invalid="ignore"):
            size, cov = size / seen, cov / seen
        order = np.argsort(-counts, kind="stable")
        for rank, y in enumerate(order):
            pc_rows.append({"method": method, "rank": rank, "class": int(y),
                            "train_count": float(counts[y]), "size": size[y], "coverage": cov[y]})
    path = os.path.join(outdir, "per_class.csv")
    write_rows(path, pc_rows, ["method", "rank", "class", "train_count", "size", "coverage"])
    written.append(path)

    first_alpha = rows[0]["alpha"] if rows else None
    first_mode = rows[0]["mode"] if rows else None
    pick = [r for r in rows
            if r["alpha"] == (alpha if alpha is not None else first_alpha)
            and r["mode"] == (mode if mode is not None else first_mode)]
    scatter = aggregate_rows(pick, keys=("method", "score"))
    path = os.path.join(outdir, "scatter.csv")
    write_rows(path, scatter, ["method", "score", "size", "cov_gap", "coverage", "n_seeds"])
    written.append(path)
    return written
