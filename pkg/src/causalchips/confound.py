"""Image-adjusted average treatment effects.

The propensity model is a ridge-penalised logistic regression on
``[1, x, phi]`` (tabular covariates plus image embeddings), fit by Newton's
method. The effect estimate is the self-normalised (Hajek) IPW contrast;
its standard error comes from a bootstrap that resamples whole images.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .embed import EmbeddingConfig, embed_corpus, open_source
from .errors import (
    DegenerateFeatures,
    DegenerateResample,
    NoControl,
    NoTreated,
    Separation,
    TooFewUnits,
)
from .frame import CausalFrame
from .salience import SalienceGrid, occlusion_salience

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    l2_lambda: float = 1.0
    clip_eps: float = 0.01
    folds: int = 5
    n_boot: int = 200
    cluster_bootstrap: bool = True
    max_iter: int = 100
    grad_tol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.clip_eps < 0.5:
            raise ValueError("clip_eps must lie in (0, 0.5)")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.n_boot < 2:
            raise ValueError("n_boot must be >= 2")


@dataclass
class PropensityModel:
    """Logistic coefficients on standardised features.

    ``center``/``scale`` standardise the raw feature columns; column 0 is the
    intercept and is left untouched.
    """

    coefficients: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    l2_lambda: float
    clip_eps: float = 0.01
    n_iter: int = 0
    grad_norm: float = 0.0

    def linear_score(self, features):
        z = (np.asarray(features, dtype=np.float64) - self.center) / self.scale
        return z @ self.coefficients

    def prob(self, features):
        """Unclipped probabilities."""
        return expit(self.linear_score(features))


def design_matrix(x, phi):
    """Stack ``[1, x, phi]`` row-wise."""
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    x = np.empty((n, 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(n, -1)
    return np.column_stack([np.ones(n), x, phi])


def _standardizer(features):
    center = features.mean(axis=0)
    scale = features.std(axis=0)
    center[0], scale[0] = 0.0, 1.0
    scale[scale == 0] = 1.0
    return center, scale


def penalized_nll(beta, z, w, l2_lambda):
    s = z @ beta
    # log(1 + e^s) - w s, stable for large |s|
    nll = np.sum(np.logaddexp(0.0, s) - w * s)
    return nll + 0.5 * l2_lambda * np.sum(beta[1:] ** 2)


def fit_propensity(features, w, l2_lambda=1.0, clip_eps=0.01, max_iter=100, grad_tol=1e-8) -> PropensityModel:
    """Ridge logistic regression by Newton's method with step halving.

    ``features`` is N x (1+P+D) with a leading column of ones. Non-intercept
    columns are z-scored first; the intercept is not penalised. Converges
    when the gradient norm of the penalised NLL (sum scale) is at most
    ``grad_tol``.
    """
    features = np.asarray(features, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(w):
        raise DegenerateFeatures("features must be an N x p matrix aligned with w")
    if not np.all(np.isfinite(features)):
        raise DegenerateFeatures("features contain NaN or Inf")
    if not np.all(features[:, 0] == 1.0):
        raise DegenerateFeatures("first feature column must be the intercept (all ones)")
    if len(w) < 2 or not (np.any(w == 1) and np.any(w == 0)):
        raise DegenerateFeatures("both treatment classes are needed to fit a propensity model")

    center, scale = _standardizer(features)
    z = (features - center) / scale
    p_dim = z.shape[1]
    penalty = np.full(p_dim, float(l2_lambda))
    penalty[0] = 0.0

    beta = np.zeros(p_dim)
    obj = penalized_nll(beta, z, w, l2_lambda)
    grad_norm = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(z @ beta)
        grad = z.T @ (p - w) + penalty * beta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= grad_tol:
            converged = True
            break
        hess = (z.T * (p * (1.0 - p))) @ z + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        # objective differences below roundoff are not evidence against a step
        slack = 1e-12 * max(1.0, abs(obj))
        t = 1.0
        while True:
            cand = beta - t * step
            cand_obj = penalized_nll(cand, z, w, l2_lambda)
            if cand_obj <= obj + slack or t < 1e-10:
                break
            t *= 0.5
        if cand_obj > obj + slack:
            # no decrease even for tiny steps: numerically at the optimum
            converged = grad_norm < 1e-6 * max(1.0, len(w))
            break
        beta, obj = cand, cand_obj
        if not np.all(np.isfinite(beta)):
            break

    scores = z @ beta
    if not np.all(np.isfinite(beta)):
        raise Separation("Newton iterates diverged; try a larger l2_lambda")
    # a strictly separating fitted rule means the unpenalised MLE cannot exist
    if l2_lambda == 0 and (np.all((scores > 0) == (w == 1)) or np.max(np.abs(scores)) > 25):
        raise Separation(
            "classes are (quasi-)separable and the unpenalised MLE does not exist; use l2_lambda > 0"
        )
    if not converged:
        raise Separation(f"no convergence after {max_iter} Newton steps (|grad|={grad_norm:.3g})")
    return PropensityModel(beta, center, scale, float(l2_lambda), clip_eps, it, grad_norm)


def predict_propensity(model: PropensityModel, features, clip_eps=None):
    eps = model.clip_eps if clip_eps is None else clip_eps
    return np.clip(model.prob(features), eps, 1.0 - eps)


def auc_score(w, p):
    """Mann-Whitney AUC with average ranks for ties."""
    w = np.asarray(w)
    n1 = int(np.sum(w == 1))
    n0 = len(w) - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    ranks = rankdata(p)
    return float((ranks[w == 1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def propensity_metrics(w, p):
    """Mean NLL, accuracy at 0.5 and AUC of probabilities ``p``."""
    w = np.asarray(w, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    nll = -np.mean(w * np.log(p) + (1 - w) * np.log1p(-p))
    acc = np.mean((p >= 0.5) == (w == 1))
    return {"nll": float(nll), "acc": float(acc), "auc": auc_score(w, p)}


def stratified_folds(w, k, seed):
    """Fold id per unit; each class is shuffled and dealt round-robin."""
    rng = np.random.default_rng(seed)
    folds = np.empty(len(w), dtype=int)
    for cls in (0, 1):
        idx = np.flatnonzero(np.asarray(w) == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = np.arange(len(idx)) % k
    return folds


def evaluate_propensity(features, w, folds=5, seed=0, l2_lambda=1.0, clip_eps=0.01):
    """k-fold cross-validated NLL, accuracy and AUC.

    Each metric is computed on every held-out fold and averaged over folds.
    Stratification keeps both classes in every fold when each class has at
    least ``folds`` units; a fold missing a class contributes no AUC.
    """
    features = np.asarray(features, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n = len(w)
    if folds < 2 or n < 2 * folds:
        raise TooFewUnits(f"{n} units cannot support {folds}-fold evaluation")
    fold_id = stratified_folds(w, folds, seed)
    per_fold = []
    for f in range(folds):
        test = fold_id == f
        model = fit_propensity(features[~test], w[~test], l2_lambda, clip_eps)
        per_fold.append(propensity_metrics(w[test], predict_propensity(model, features[test])))
    metrics = {m: float(np.nanmean([pf[m] for pf in per_fold])) for m in ("nll", "acc", "auc")}
    metrics["folds"] = folds
    return metrics


def hajek_ate(w, y, ehat):
    """Self-normalised IPW difference of treated and control means."""
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    e = np.asarray(ehat, dtype=np.float64)
    if not np.any(w == 1):
        raise NoTreated("no treated units")
    if not np.any(w == 0):
        raise NoControl("no control units")
    if np.any(e <= 0) or np.any(e >= 1):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    wt = w / e
    wc = (1 - w) / (1 - e)
    return float(np.sum(wt * y) / np.sum(wt) - np.sum(wc * y) / np.sum(wc))


def hajek_weights(w, ehat):
    """Normalised weights; each arm sums to one."""
    w = np.asarray(w, dtype=np.float64)
    e = np.asarray(ehat, dtype=np.float64)
    wt = w / e
    wc = (1 - w) / (1 - e)
    return wt / wt.sum(), wc / wc.sum()


def _fit_and_estimate(features, w, y, config: ModelConfig):
    model = fit_propensity(features, w, config.l2_lambda, config.clip_eps, config.max_iter, config.grad_tol)
    ehat = predict_propensity(model, features)
    return hajek_ate(w, y, ehat), model, ehat


def _resample(rng, groups, w, max_attempts=100):
    """Unit indices for one cluster-bootstrap draw holding both arms."""
    for _ in range(max_attempts):
        picks = rng.integers(0, len(groups), size=len(groups))
        idx = np.concatenate([groups[g] for g in picks])
        ws = w[idx]
        if np.any(ws == 1) and np.any(ws == 0):
            return idx
    raise DegenerateResample(f"no resample with both arms after {max_attempts} attempts")


def cluster_groups(keys, cluster=True):
    """Unit index arrays grouped by image key (first-appearance order)."""
    if not cluster:
        return [np.array([i]) for i in range(len(keys))]
    groups = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    return [np.array(v) for v in groups.values()]


def bootstrap_ate(features, frame: CausalFrame, config: ModelConfig, n_boot=200, seed=0, threads=None):
    """Point estimate on the full sample plus bootstrap standard error.

    Units sharing an image key are resampled together unless
    ``config.cluster_bootstrap`` is off. Replicate ``b`` draws from
    ``default_rng(seed + b)``, so results do not depend on ``threads``.
    Returns ``(tau, se, replicates)``.
    """
    if n_boot < 2:
        raise ValueError("n_boot must be >= 2")
    w, y = frame.w, frame.y
    tau, _, _ = _fit_and_estimate(features, w, y, config)
    groups = cluster_groups(frame.keys, config.cluster_bootstrap)

    def replicate(b):
        rng = np.random.default_rng(seed + b)
        idx = _resample(rng, groups, w)
        return _fit_and_estimate(features[idx], w[idx], y[idx], config)[0]

    workers = threads or os.cpu_count() or 1
    if workers == 1:
        reps = [replicate(b) for b in range(n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reps = list(ex.map(replicate, range(n_boot)))
    reps = np.asarray(reps)
    return tau, float(np.std(reps, ddof=1)), reps


def salience_map(img, bank, model: PropensityModel, patch=8, stride=4, fill=None, x_row=None) -> SalienceGrid:
    """Occlusion grid of |change in predicted treatment probability|.

    ``x_row`` holds the unit's tabular covariates when the model uses them.
    Probabilities are unclipped so saturated units still show structure.
    """
    x_row = np.empty(0) if x_row is None else np.asarray(x_row, dtype=np.float64).ravel()

    def prob(phi):
        feats = np.concatenate([[1.0], x_row, phi])[None, :]
        return model.prob(feats)[0]

    return occlusion_salience(img, bank, prob, patch, stride, fill)


@dataclass
class SalienceOptions:
    patch: int = 8
    stride: int = 4
    n_units: int = 6

    def __post_init__(self):
        if self.patch < 1 or self.stride < 1:
            raise ValueError("salience patch and stride must be >= 1")
        if self.n_units < 1:
            raise ValueError("salience n_units must be >= 1")


@dataclass
class ConfoundingResult:
    tau_hajek: float
    tau_hajek_se: float
    metrics: Dict[str, float]
    ehat: np.ndarray
    tau_naive: float
    n_units: int
    model: PropensityModel = field(repr=False, default=None)
    replicates: np.ndarray = field(repr=False, default=None)
    salience: Dict[str, SalienceGrid] = field(default_factory=dict, repr=False)
    x_dropped: list = field(default_factory=list)

    def to_dict(self):
        return {
            "tauHat_propensityHajek": self.tau_hajek,
            "tauHat_propensityHajek_se": self.tau_hajek_se,
            "tauHat_diffInMeans": self.tau_naive,
            "metrics": {k: self.metrics[k] for k in ("nll", "acc", "auc")},
            "nObs": self.n_units,
            "xDropped": list(self.x_dropped),
            "ehat": [float(v) for v in self.ehat],
            "salienceUnits": list(self.salience),
        }


def pick_salience_units(w, ehat, n_units):
    """Most confidently predicted treated and control units, half each."""
    treated = np.flatnonzero(w == 1)
    control = np.flatnonzero(w == 0)
    n_t = (n_units + 1) // 2
    top_t = treated[np.argsort(-ehat[treated], kind="stable")[:n_t]]
    top_c = control[np.argsort(ehat[control], kind="stable")[: n_units - len(top_t)]]
    return list(top_t) + list(top_c)


def analyze_image_confounding(
    frame: CausalFrame,
    source,
    embed_config: EmbeddingConfig = EmbeddingConfig(),
    model_config: ModelConfig = ModelConfig(),
    seed: int = 0,
    salience: Optional[SalienceOptions] = None,
    threads: int = None,
    batch_size: int = 32,
) -> ConfoundingResult:
    """Embed, fit the propensity model, evaluate it, and estimate the ATE."""
    frame, x_dropped = frame.check().varying_x()
    if x_dropped:
        log.info("dropping zero-variance covariates %s", x_dropped)
    source = open_source(source)
    emb = embed_corpus(source, frame.keys, embed_config, batch_size=batch_size, threads=threads)
    features = design_matrix(frame.x, emb.values)

    metrics = evaluate_propensity(
        features, frame.w, model_config.folds, seed, model_config.l2_lambda, model_config.clip_eps
    )
    log.info("propensity CV: nll=%.4f acc=%.3f auc=%.3f", metrics["nll"], metrics["acc"], metrics["auc"])
    tau, model, ehat = _fit_and_estimate(features, frame.w, frame.y, model_config)
    _, se, reps = bootstrap_ate(features, frame, model_config, model_config.n_boot, seed, threads)
    naive = float(frame.y[frame.w == 1].mean() - frame.y[frame.w == 0].mean())
    log.info("tau_hajek=%.4f (se %.4f), naive=%.4f", tau, se, naive)

    grids = {}
    if salience is not None and salience.n_units > 0:
        for i in pick_salience_units(frame.w, ehat, salience.n_units):
            img = source([frame.keys[i]])[0]
            grids[frame.keys[i]] = salience_map(
                img, emb.bank, model, salience.patch, salience.stride, x_row=frame.x[i]
            )
    return ConfoundingResult(
        tau, se, metrics, ehat, naive, len(frame), model, reps, grids, x_dropped
    )
