"""Representation probes: kernel SVMs over frozen activations.

Activations are tapped at pool1/pool2/fc1, standardized, and fed to RBF
SVMs trained with an SMO solver (maximal-violating-pair working set
selection). A 3-fold cross-validated grid search picks (C, gamma) for the
even-vs-odd and 10-digit tasks; the superclass statistic measures how much
of the digit confusion stays within one parity class.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import nn, seeds
from .errors import DegenerateDataError, ShapeError, StratificationError, TapError


# ---------------------------------------------------------------------------
# kernels


def kernel_matrix(a, b, kernel="rbf", gamma=None):
    """K[i,j] = k(a_i, b_j) for rbf (gamma = 1/sigma^2) or linear kernels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        if gamma is None:
            raise ValueError("rbf kernel needs gamma")
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-gamma * sq)
    raise ValueError(f"unknown kernel {kernel!r}")


# ---------------------------------------------------------------------------
# SMO solver


@dataclass
class SvmModel:
    support_vectors: np.ndarray      # (n_sv, d)
    dual_coef: np.ndarray            # alpha_i * y_i for the support vectors
    bias: float
    kernel: str
    gamma: float | None
    C: float
    # full solution, kept for KKT/box diagnostics
    alphas: np.ndarray = None
    labels: np.ndarray = None
    n_iter: int = 0


def _smo(K, y, C, tol=1e-3, max_iter=None):
    """Solve the soft-margin dual on a precomputed kernel.

    Working set: maximal violating pair (i from the 'up' set with largest
    -y*grad, j from the 'low' set with smallest). Returns (alpha, bias,
    iterations, final KKT gap).
    """
    n = len(y)
    y = np.asarray(y, dtype=np.float64)
    alpha = np.zeros(n)
    F = np.zeros(n)                   # F_i = sum_k alpha_k y_k K_ik
    if max_iter is None:
        max_iter = max(20000, 60 * n)
    diag = np.diagonal(K).copy()
    it = 0
    gap = np.inf
    while it < max_iter:
        E = F - y
        bound = 1e-8 * C
        up = ((y > 0) & (alpha < C - bound)) | ((y < 0) & (alpha > bound))
        low = ((y > 0) & (alpha > bound)) | ((y < 0) & (alpha < C - bound))
        if not up.any() or not low.any():
            gap = 0.0
            break
        neg_e = -E
        i = int(np.flatnonzero(up)[np.argmax(neg_e[up])])
        j = int(np.flatnonzero(low)[np.argmin(neg_e[low])])
        gap = neg_e[i] - neg_e[j]
        if gap <= tol:
            break
        eta = diag[i] + diag[j] - 2.0 * K[i, j]
        eta = max(eta, 1e-12)
        if y[i] != y[j]:
            L = max(0.0, alpha[j] - alpha[i])
            H = min(C, C + alpha[j] - alpha[i])
        else:
            L = max(0.0, alpha[i] + alpha[j] - C)
            H = min(C, alpha[i] + alpha[j])
        aj_new = np.clip(alpha[j] + y[j] * (E[i] - E[j]) / eta, L, H)
        dj = aj_new - alpha[j]
        if abs(dj) < 1e-14:
            break  # numerically stuck at a box corner
        ai_new = alpha[i] + y[i] * y[j] * (alpha[j] - aj_new)
        di = ai_new - alpha[i]
        F += di * y[i] * K[i] + dj * y[j] * K[j]
        alpha[i] = ai_new
        alpha[j] = aj_new
        it += 1
    # bias from interior points when available, else midpoint of the bounds
    E = F - y
    interior = (alpha > 1e-8) & (alpha < C - 1e-8)
    if interior.any():
        b = float((-E[interior]).mean())
    else:
        up = ((y > 0) & (alpha < C - 1e-12)) | ((y < 0) & (alpha > 1e-12))
        low = ((y > 0) & (alpha > 1e-12)) | ((y < 0) & (alpha < C - 1e-12))
        hi = (-E[up]).max() if up.any() else 0.0
        lo = (-E[low]).min() if low.any() else 0.0
        b = float((hi + lo) / 2.0)
    return alpha, b, it, gap


def svm_train(X, y, kernel="rbf", C=1.0, gamma=None, tol=1e-3,
              precomputed_kernel=None) -> SvmModel:
    """Binary soft-margin SVM; y must be in {-1,+1} with both classes present."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if C <= 0:
        raise ValueError("C must be > 0")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("svm_train needs both classes present")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise DegenerateDataError("labels must be -1/+1")
    K = precomputed_kernel if precomputed_kernel is not None \
        else kernel_matrix(X, X, kernel, gamma)
    alpha, b, it, _ = _smo(K, y, C, tol)
    sv = alpha > 1e-10
    return SvmModel(
        support_vectors=X[sv].copy(),
        dual_coef=(alpha * y)[sv],
        bias=b, kernel=kernel, gamma=gamma, C=C,
        alphas=alpha, labels=y, n_iter=it)


def svm_margin(model: SvmModel, X):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if model.support_vectors.shape[0] == 0:
        return np.full(len(X), model.bias)
    if X.shape[1] != model.support_vectors.shape[1]:
        raise ShapeError("query dimensionality differs from training data")
    K = kernel_matrix(X, model.support_vectors, model.kernel, model.gamma)
    return K @ model.dual_coef + model.bias


def svm_predict(model: SvmModel, x):
    """Class in {-1,+1} and margin value; margin 0 resolves to +1."""
    margin = svm_margin(model, x)
    pred = np.where(margin >= 0, 1, -1)
    if np.ndim(x) == 1:
        return int(pred[0]), float(margin[0])
    return pred, margin


def dual_objective(K, y, alpha):
    """Maximization-form dual value sum(alpha) - 0.5 * a'Qa."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def kkt_violation(K, y, alpha, C):
    """Largest m(alpha) - M(alpha) optimality gap of a dual solution."""
    F = K @ (alpha * y)
    neg_e = -(F - y)
    bound = 1e-8 * C
    up = ((y > 0) & (alpha < C - bound)) | ((y < 0) & (alpha > bound))
    low = ((y > 0) & (alpha > bound)) | ((y < 0) & (alpha < C - bound))
    if not up.any() or not low.any():
        return 0.0
    return float(max(0.0, neg_e[up].max() - neg_e[low].min()))


# ---------------------------------------------------------------------------
# one-vs-rest multiclass


@dataclass
class OvrModel:
    classes: np.ndarray
    models: list


def multiclass_train(X, y, kernel="rbf", C=1.0, gamma=None,
                     precomputed_kernel=None) -> OvrModel:
    classes = np.unique(np.asarray(y))
    if len(classes) < 2:
        raise DegenerateDataError("multiclass_train needs >= 2 classes")
    models = []
    for c in classes:
        yy = np.where(np.asarray(y) == c, 1.0, -1.0)
        models.append(svm_train(X, yy, kernel, C, gamma,
                                precomputed_kernel=precomputed_kernel))
    return OvrModel(classes, models)


def multiclass_margins(model: OvrModel, X):
    return np.stack([svm_margin(m, X) for m in model.models], axis=1)


def multiclass_predict(model: OvrModel, X):
    """argmax of the per-class margins; ties go to the lowest class index."""
    margins = multiclass_margins(model, X)
    return model.classes[np.argmax(margins, axis=1)]


# ---------------------------------------------------------------------------
# activation extraction and standardization


@dataclass
class ActivationSet:
    features: np.ndarray             # (n, d)
    labels: np.ndarray


def extract_activations(net, images_f32, tap, taps=None, batch_size=64,
                        labels=None) -> ActivationSet:
    """Flattened activations at a named tap, one row per sample."""
    from .model import tap_indices
    taps = taps or tap_indices(net)
    if tap not in taps:
        raise TapError(f"unknown tap {tap!r}; have {sorted(taps)}")
    idx = taps[tap]
    rows = []
    for start in range(0, len(images_f32), batch_size):
        cache = nn.forward(net, images_f32[start:start + batch_size])
        act = cache.layers[idx].outputs
        rows.append(act.reshape(act.shape[0], -1).copy())
    features = np.concatenate(rows) if rows else np.zeros((0, 0), dtype=np.float32)
    return ActivationSet(features, None if labels is None else np.asarray(labels))


def standardize(train_features, *other):
    """Per-dimension zero mean / unit variance from the training split.

    Variance is floored at 1e-8, so constant dimensions map to 0.
    """
    mu = train_features.mean(axis=0)
    sd = np.sqrt(np.maximum(train_features.var(axis=0), 1e-8))
    out = [((f - mu) / sd).astype(np.float32) for f in (train_features, *other)]
    return out[0] if not other else out


def subsample_dims(d, max_dims, seed):
    """Seeded coordinate selection used to bound kernel cost on wide taps."""
    if d <= max_dims:
        return np.arange(d)
    rng = seeds.substream(seed, "probe-dims")
    return np.sort(rng.choice(d, size=max_dims, replace=False))


# ---------------------------------------------------------------------------
# cross-validated grid search


@dataclass
class ProbeConfig:
    c_grid: tuple = (1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3)
    gamma_grid: tuple = (1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)
    folds: int = 3
    kernel: str = "rbf"


def stratified_folds(y, folds, seed):
    """Seeded per-class assignment; every fold must contain every class."""
    y = np.asarray(y)
    assignment = np.zeros(len(y), dtype=np.int64)
    rng = seeds.substream(seed, seeds.PROBE_FOLDS)
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        if len(idx) < folds:
            raise StratificationError(
                f"class {c} has {len(idx)} samples for {folds} folds")
        assignment[idx] = np.arange(len(idx)) % folds
    return assignment


def cv_grid_search(X, y, cfg: ProbeConfig, seed=0, multiclass=False):
    """Exhaustive (C, gamma) grid with stratified k-fold accuracy.

    Ties break toward smaller C, then smaller gamma. Returns
    (best_C, best_gamma, best mean fold accuracy).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) < cfg.folds:
        raise StratificationError("fewer samples than folds")
    assignment = stratified_folds(y, cfg.folds, seed)
    gammas = [None] if cfg.kernel == "linear" else sorted(cfg.gamma_grid)
    best = (None, None, -1.0)
    for gamma in gammas:
        K = kernel_matrix(X, X, cfg.kernel, gamma)
        for C in sorted(cfg.c_grid):
            accs = []
            for f in range(cfg.folds):
                tr = assignment != f
                te = ~tr
                Ktr = K[np.ix_(tr, tr)]
                if multiclass:
                    m = multiclass_train(X[tr], y[tr], cfg.kernel, C, gamma,
                                         precomputed_kernel=Ktr)
                    pred = _predict_from_kernel_ovr(m, K[np.ix_(te, tr)], y[tr])
                    accs.append(float((pred == y[te]).mean()))
                else:
                    m = svm_train(X[tr], y[tr], cfg.kernel, C, gamma,
                                  precomputed_kernel=Ktr)
                    margin = _margin_from_kernel(m, K[np.ix_(te, tr)])
                    pred = np.where(margin >= 0, 1, -1)
                    accs.append(float((pred == y[te]).mean()))
            mean_acc = float(np.mean(accs))
            if mean_acc > best[2]:
                best = (C, gamma, mean_acc)
    return best


def _margin_from_kernel(model: SvmModel, K_query_train):
    av = model.alphas * model.labels
    return K_query_train @ av + model.bias


def _predict_from_kernel_ovr(model: OvrModel, K_query_train, y_train):
    margins = np.stack([_margin_from_kernel(m, K_query_train)
                        for m in model.models], axis=1)
    return model.classes[np.argmax(margins, axis=1)]


# ---------------------------------------------------------------------------
# probe report


@dataclass
class ProbeResult:
    task: str
    tap: str
    best_C: float
    best_gamma: float
    cv_accuracy: float
    test_accuracy: float
    confusion: np.ndarray = None


def probe_report(net, train_images, train_digits, test_images, test_digits,
                 taps=("pool1", "pool2", "fc1"), cfg: ProbeConfig = None,
                 seed=0, max_dims=4000, log=None) -> list:
    """Table 3-style experiment over {parity, digits} x taps."""
    from .data_digits import parity_labels

    cfg = cfg or ProbeConfig()
    results = []
    for tap in taps:
        ftr = extract_activations(net, train_images, tap).features
        fte = extract_activations(net, test_images, tap).features
        keep = subsample_dims(ftr.shape[1], max_dims, seed)
        ftr, fte = ftr[:, keep], fte[:, keep]
        ftr, fte = standardize(ftr, fte)
        for task in ("parity", "digits"):
            if task == "parity":
                ytr = parity_labels(train_digits)
                yte = parity_labels(test_digits)
                multi = False
            else:
                ytr = np.asarray(train_digits, dtype=np.int64)
                yte = np.asarray(test_digits, dtype=np.int64)
                multi = True
            C, gamma, cv_acc = cv_grid_search(ftr, ytr, cfg, seed, multiclass=multi)
            K = kernel_matrix(ftr, ftr, cfg.kernel, gamma)
            if multi:
                m = multiclass_train(ftr, ytr, cfg.kernel, C, gamma,
                                     precomputed_kernel=K)
                pred = multiclass_predict(m, fte)
                conf = np.zeros((10, 10), dtype=np.int64)
                np.add.at(conf, (yte, pred), 1)
            else:
                m = svm_train(ftr, ytr, cfg.kernel, C, gamma, precomputed_kernel=K)
                pred, _ = svm_predict(m, fte)
                conf = None
            acc = float((pred == yte).mean())
            results.append(ProbeResult(task, tap, C, gamma, cv_acc, acc, conf))
            if log:
                log(f"probe {task:>6s} @ {tap}: C={C:g} gamma={gamma:g} "
                    f"cv={cv_acc:.3f} test={acc:.3f}")
    return results


def write_probe_table(results, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["task", "tap", "best_C", "best_gamma",
                         "cv_accuracy", "test_accuracy"])
        for r in results:
            writer.writerow([r.task, r.tap, f"{r.best_C:g}", f"{r.best_gamma:g}",
                             f"{r.cv_accuracy:.6f}", f"{r.test_accuracy:.6f}"])


def superclass_confusion_fraction(confusion10):
    """Share of off-diagonal confusion mass whose true/predicted digits have
    the same parity. Returns None when there is no off-diagonal mass."""
    conf = np.asarray(confusion10, dtype=np.float64)
    if conf.shape != (10, 10):
        raise ShapeError("expected a 10x10 confusion matrix")
    same = 0.0
    total = 0.0
    for t in range(10):
        for p in range(10):
            if t == p:
                continue
            total += conf[t, p]
            if t % 2 == p % 2:
                same += conf[t, p]
    if total == 0:
        return None
    return same / total
