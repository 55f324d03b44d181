"""Image-driven effect clusters.

Outcome model, for unit i with latent cluster c_i::

    y_i = alpha + x_i' beta + w_i * tau[c_i] + eps_i,   eps_i ~ N(0, sigma2)
    P(c_i = k | phi_i) = softmax_k(theta_k' [1, phi_i]),  theta_K = 0

fit by (generalised) EM. The outcome M-step is an exact weighted least
squares solve; the gate M-step takes ridge-penalised multinomial Newton
steps with step halving, so the penalised observed-data log-likelihood
never decreases.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import log_softmax, logsumexp, softmax

from .confound import cluster_groups
from .embed import EmbeddingConfig, embed_corpus, open_source
from .errors import (
    DegenerateResample,
    DimMismatch,
    EmptyCluster,
    NoControl,
    NoTreated,
    NonConvergence,
    TooFewUnits,
)
from .frame import CausalFrame, drop_na
from .salience import SalienceGrid, occlusion_salience

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2 * np.pi)


@dataclass
class HeterogeneityConfig:
    k_clusters: int = 2
    max_em_iters: int = 500
    tol: float = 1e-8
    n_boot: int = 200
    seed: int = 0
    gate_lambda: float = 1.0
    gate_newton_steps: int = 3
    conf_level: float = 0.05
    max_restarts: int = 5
    strict: bool = True

    def __post_init__(self):
        if self.k_clusters < 1:
            raise ValueError("k_clusters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if not 0 < self.conf_level < 1:
            raise ValueError("conf_level must lie in (0, 1)")
        if self.gate_lambda < 0:
            raise ValueError("gate_lambda must be >= 0")
        if self.n_boot < 0 or self.max_em_iters < 1:
            raise ValueError("n_boot must be >= 0 and max_em_iters >= 1")


@dataclass
class HeterogeneityFit:
    tau_k: np.ndarray
    alpha: float
    beta: np.ndarray
    sigma2: float
    theta: np.ndarray  # (K, 1+D), last row zero
    gate_center: np.ndarray
    gate_scale: np.ndarray
    resp: np.ndarray
    gate: np.ndarray
    objective_trace: List[float]
    loglik_trace: List[float]
    converged: bool
    n_iter: int
    restarts: int = 0
    gate_lambda: float = 1.0
    tau_k_sd: Optional[np.ndarray] = None
    pi_sd: Optional[np.ndarray] = None
    pi_lower: Optional[np.ndarray] = None
    n_boot_used: int = 0
    dropped: List[int] = field(default_factory=list)

    @property
    def k(self):
        return len(self.tau_k)

    @property
    def pi_mean(self):
        return self.gate.mean(axis=0)

    @property
    def individual_tau(self):
        return self.resp @ self.tau_k

    @property
    def implied_ate(self):
        return float(np.mean(self.individual_tau))

    @property
    def modal_cluster(self):
        return np.argmax(self.resp, axis=1)

    def gate_probs(self, phi):
        phi = np.asarray(phi, dtype=np.float64)
        if phi.ndim != 2 or phi.shape[1] != len(self.gate_center):
            raise DimMismatch(f"expected {len(self.gate_center)} embedding columns, got shape {phi.shape}")
        g = np.column_stack([np.ones(len(phi)), (phi - self.gate_center) / self.gate_scale])
        return softmax(g @ self.theta.T, axis=1)


def implied_ate(fit: HeterogeneityFit) -> float:
    return fit.implied_ate


def transportability(fit: HeterogeneityFit, new_phi) -> np.ndarray:
    """Gate (prior) cluster probabilities for units outside the sample."""
    return fit.gate_probs(new_phi)


# -- EM internals ------------------------------------------------------------

def _gate_design(phi):
    phi = np.asarray(phi, dtype=np.float64)
    center = phi.mean(axis=0)
    scale = phi.std(axis=0)
    scale[scale == 0] = 1.0
    return np.column_stack([np.ones(len(phi)), (phi - center) / scale]), center, scale


def _outcome_mstep(base, w, y, resp):
    """Weighted least squares for (alpha, beta, tau_1..K), then sigma2."""
    n, q = base.shape
    k = resp.shape[1]
    a = np.zeros((n * k, q + k))
    rhs = np.empty(n * k)
    for c in range(k):
        s = np.sqrt(resp[:, c])
        rows = slice(c * n, (c + 1) * n)
        a[rows, :q] = base * s[:, None]
        a[rows, q + c] = w * s
        rhs[rows] = y * s
    coef = np.linalg.lstsq(a, rhs, rcond=None)[0]
    return coef[:q], coef[q:]


def _means(base, w, coef_base, tau):
    return (base @ coef_base)[:, None] + w[:, None] * tau[None, :]


def _sigma2(y, means, resp, floor):
    return max(float(np.sum(resp * (y[:, None] - means) ** 2) / len(y)), floor)


def _estep(gdesign, theta, y, means, sigma2):
    log_gate = log_softmax(gdesign @ theta.T, axis=1)
    log_lik = -0.5 * (_LOG_2PI + np.log(sigma2)) - (y[:, None] - means) ** 2 / (2 * sigma2)
    joint = log_gate + log_lik
    ll_i = logsumexp(joint, axis=1)
    resp = np.exp(joint - ll_i[:, None])
    return resp, np.exp(log_gate), float(ll_i.sum())


def _penalty(theta, lam):
    return 0.5 * lam * float(np.sum(theta[:, 1:] ** 2))


def _gate_q(gdesign, theta, resp, lam):
    return float(np.sum(resp * log_softmax(gdesign @ theta.T, axis=1))) - _penalty(theta, lam)


def _gate_mstep(gdesign, theta, resp, lam, steps):
    """Newton ascent on the responsibility-weighted softmax objective."""
    k = theta.shape[0]
    if k == 1:
        return theta
    n, p = gdesign.shape
    m = k - 1
    pen = np.full(p, lam)
    pen[0] = 0.0
    q_old = _gate_q(gdesign, theta, resp, lam)
    for _ in range(steps):
        g = softmax(gdesign @ theta.T, axis=1)
        grad = np.concatenate([gdesign.T @ (resp[:, c] - g[:, c]) - pen * theta[c] for c in range(m)])
        if np.linalg.norm(grad) < 1e-10:
            break
        hess = np.empty((m * p, m * p))
        for a in range(m):
            for b in range(a, m):
                wts = g[:, a] * ((a == b) - g[:, b])
                blk = -(gdesign.T * wts) @ gdesign
                if a == b:
                    blk -= np.diag(pen)
                hess[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
                hess[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        step = step.reshape(m, p)
        t = 1.0
        improved = False
        while t > 1e-8:
            cand = theta.copy()
            cand[:m] -= t * step
            q_new = _gate_q(gdesign, cand, resp, lam)
            if q_new >= q_old:
                improved = True
                break
            t *= 0.5
        if not improved:
            break
        gain = q_new - q_old
        theta, q_old = cand, q_new
        if gain <= 1e-12 * max(1.0, abs(q_old)):
            break
    return theta


def _run_em(gdesign, base, w, y, tau0, theta0, config):
    k = len(tau0)
    lam = config.gate_lambda
    floor = 1e-10 * max(float(np.var(y)), 1e-300)
    theta = theta0.copy()
    tau = np.asarray(tau0, dtype=np.float64).copy()
    # first outcome fit with the gate prior as weights
    resp = softmax(gdesign @ theta.T, axis=1)
    coef_base = np.linalg.lstsq(base, y - w * (resp @ tau), rcond=None)[0]
    means = _means(base, w, coef_base, tau)
    sigma2 = _sigma2(y, means, resp, floor)
    resp, gate, ll = _estep(gdesign, theta, y, means, sigma2)
    objective = [ll - _penalty(theta, lam)]
    loglik = [ll]
    converged = False
    it = 0
    for it in range(1, config.max_em_iters + 1):
        coef_base, tau = _outcome_mstep(base, w, y, resp)
        means = _means(base, w, coef_base, tau)
        sigma2 = _sigma2(y, means, resp, floor)
        theta = _gate_mstep(gdesign, theta, resp, lam, config.gate_newton_steps)
        resp, gate, ll = _estep(gdesign, theta, y, means, sigma2)
        obj = ll - _penalty(theta, lam)
        prev = objective[-1]
        objective.append(obj)
        loglik.append(ll)
        if abs(obj - prev) < config.tol * max(abs(prev), 1.0):
            converged = True
            break
        if k == 1:
            converged = True
            break
    return dict(
        tau=tau, coef_base=coef_base, sigma2=sigma2, theta=theta, resp=resp, gate=gate,
        objective=objective, loglik=loglik, converged=converged, n_iter=it,
    )


def _initial_taus(base, w, y, k, levels):
    design = np.column_stack([base, w])
    coef = np.linalg.lstsq(design, y, rcond=None)[0]
    if k == 1:
        return np.array([coef[-1]])
    treated = w == 1
    effect = y[treated] - base[treated] @ coef[:-1]
    return np.quantile(effect, levels)


def _canonical(state, center, scale):
    order = np.argsort(state["tau"], kind="stable")
    theta = state["theta"][order]
    theta = theta - theta[-1]
    return HeterogeneityFit(
        tau_k=state["tau"][order],
        alpha=float(state["coef_base"][0]),
        beta=state["coef_base"][1:].copy(),
        sigma2=state["sigma2"],
        theta=theta,
        gate_center=center,
        gate_scale=scale,
        resp=state["resp"][:, order],
        gate=state["gate"][:, order],
        objective_trace=state["objective"],
        loglik_trace=state["loglik"],
        converged=state["converged"],
        n_iter=state["n_iter"],
    )


def fit_effect_clusters(phi, x, w, y, config: HeterogeneityConfig = HeterogeneityConfig(), init=None):
    """Fit the K-cluster effect mixture; clusters are reported in ascending tau.

    ``init`` may be a previous HeterogeneityFit used as a warm start (tau
    and gate coefficients); it is how bootstrap replicates start.
    """
    phi = np.asarray(phi, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if phi.ndim != 2 or phi.shape[0] != n or len(w) != n:
        raise DimMismatch("phi, w and y must share the unit axis")
    x = np.empty((n, 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(n, -1)
    k = config.k_clusters
    if n <= k:
        raise TooFewUnits(f"{n} units for {k} clusters")
    if not np.any(w == 1):
        raise NoTreated("no treated units")
    if not np.any(w == 0):
        raise NoControl("no control units")

    gdesign, center, scale = _gate_design(phi)
    base = np.column_stack([np.ones(n), x])
    p = gdesign.shape[1]

    for attempt in range(config.max_restarts + 1):
        if init is not None and attempt == 0:
            tau0 = np.asarray(init.tau_k, dtype=np.float64)
            theta0 = np.asarray(init.theta, dtype=np.float64)
        else:
            if attempt == 0:
                levels = (np.arange(k) + 0.5) / k
            else:
                levels = np.sort(np.random.default_rng(config.seed + attempt).uniform(0.02, 0.98, size=k))
            tau0 = _initial_taus(base, w, y, k, levels)
            theta0 = np.zeros((k, p))
        state = _run_em(gdesign, base, w, y, tau0, theta0, config)
        mass = state["resp"].sum(axis=0)
        if np.all(mass >= 1e-6 * n):
            break
        log.info("cluster collapsed (mass %s); restart %d", np.round(mass, 3), attempt + 1)
    else:
        raise EmptyCluster(f"a cluster kept collapsing after {config.max_restarts} restarts")

    fit = _canonical(state, center, scale)
    fit.restarts = attempt
    fit.gate_lambda = config.gate_lambda
    if not fit.converged and config.strict:
        raise NonConvergence(
            f"EM did not converge in {config.max_em_iters} iterations; "
            f"last objective change {fit.objective_trace[-1] - fit.objective_trace[-2]:.3g}"
        )
    return fit


def bootstrap_clusters(phi, x, w, y, keys, full: HeterogeneityFit, config: HeterogeneityConfig, threads=None):
    """Cluster-bootstrap replicates aligned to ``full`` by nearest tau.

    Fills ``tau_k_sd``, ``pi_sd`` and ``pi_lower`` on ``full`` and returns
    the replicate arrays ``(taus, pis)``.
    """
    n_boot = config.n_boot
    if n_boot < 2:
        return None, None
    phi = np.asarray(phi, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x = np.empty((len(y), 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(len(y), -1)
    groups = cluster_groups(keys)
    rep_config = replace(config, strict=False)

    def replicate(b):
        rng = np.random.default_rng(config.seed + 1_000_003 + b)
        for _ in range(100):
            picks = rng.integers(0, len(groups), size=len(groups))
            idx = np.concatenate([groups[g] for g in picks])
            if np.any(w[idx] == 1) and np.any(w[idx] == 0):
                break
        else:
            raise DegenerateResample("no resample with both arms")
        try:
            fit = fit_effect_clusters(phi[idx], x[idx], w[idx], y[idx], rep_config, init=full)
        except EmptyCluster:
            return None
        rows, cols = linear_sum_assignment(np.abs(fit.tau_k[:, None] - full.tau_k[None, :]))
        tau = np.empty(full.k)
        pi = np.empty(full.k)
        tau[cols] = fit.tau_k[rows]
        pi[cols] = fit.pi_mean[rows]
        return tau, pi

    workers = threads or os.cpu_count() or 1
    if workers == 1:
        reps = [replicate(b) for b in range(n_boot)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            reps = list(ex.map(replicate, range(n_boot)))
    good = [r for r in reps if r is not None]
    if len(good) < n_boot:
        log.warning("%d of %d bootstrap replicates collapsed and were skipped", n_boot - len(good), n_boot)
    if len(good) < 2:
        return None, None
    taus = np.array([r[0] for r in good])
    pis = np.array([r[1] for r in good])
    full.tau_k_sd = taus.std(axis=0, ddof=1)
    full.pi_sd = pis.std(axis=0, ddof=1)
    full.pi_lower = np.percentile(pis, 100 * config.conf_level, axis=0)
    full.n_boot_used = len(good)
    return taus, pis


# -- end-to-end --------------------------------------------------------------

@dataclass
class HeterogeneityResult:
    fit: HeterogeneityFit
    keys: List[str]
    phi: np.ndarray = field(repr=False)
    exemplars: Dict[int, list] = field(default_factory=dict)
    salience: Dict[str, SalienceGrid] = field(default_factory=dict, repr=False)
    transport_keys: Optional[List[str]] = None
    transport: Optional[np.ndarray] = None

    def to_dict(self):
        f = self.fit
        out = {
            "clusterTaus_mean": f.tau_k.tolist(),
            "clusterTaus_sd": None if f.tau_k_sd is None else f.tau_k_sd.tolist(),
            "clusterProbs_mean": f.pi_mean.tolist(),
            "clusterProbs_sd": None if f.pi_sd is None else f.pi_sd.tolist(),
            "clusterProbs_lowerConf": None if f.pi_lower is None else f.pi_lower.tolist(),
            "impliedATE": f.implied_ate,
            "individualTau_est": f.individual_tau.tolist(),
            "whichNA_dropped": list(f.dropped),
            "keys": list(self.keys),
            "modalCluster": (f.modal_cluster + 1).tolist(),
            "sigma2": f.sigma2,
            "converged": f.converged,
            "emIterations": f.n_iter,
            "bootReplicates": f.n_boot_used,
        }
        if self.transport is not None:
            out["transportability"] = {
                "keys": list(self.transport_keys),
                "probs": self.transport.tolist(),
            }
        return out


def cluster_exemplars(fit: HeterogeneityFit, keys, top=10):
    """Per cluster (1-based), the ``top`` units by gate probability, descending."""
    out = {}
    for c in range(fit.k):
        order = np.argsort(-fit.gate[:, c], kind="stable")[:top]
        out[c + 1] = [(keys[i], float(fit.gate[i, c])) for i in order]
    return out


def analyze_image_heterogeneity(
    frame: CausalFrame,
    source,
    embed_config: EmbeddingConfig = EmbeddingConfig(),
    config: HeterogeneityConfig = HeterogeneityConfig(),
    transport_keys=None,
    transport_source=None,
    salience_patch: Optional[int] = None,
    salience_stride: int = 4,
    salience_units: int = 1,
    threads: int = None,
    batch_size: int = 32,
) -> HeterogeneityResult:
    """Drop incomplete units, embed, fit clusters, bootstrap, and summarise.

    Salience grids (when ``salience_patch`` is set) score the gate
    probability of the modal cluster for the top ``salience_units``
    exemplars of each cluster.
    """
    source = open_source(source)
    available = source if hasattr(source, "__contains__") else None
    clean, dropped = drop_na(frame, available)
    clean.check()
    emb = embed_corpus(source, clean.keys, embed_config, batch_size=batch_size, threads=threads)
    fit = fit_effect_clusters(emb.values, clean.x, clean.w, clean.y, config)
    fit.dropped = dropped
    bootstrap_clusters(emb.values, clean.x, clean.w, clean.y, clean.keys, fit, config, threads)
    result = HeterogeneityResult(fit, clean.keys, emb.values, cluster_exemplars(fit, clean.keys))

    if transport_keys is not None:
        tsource = open_source(transport_source) if transport_source is not None else source
        temb = embed_corpus(tsource, transport_keys, embed_config, batch_size, threads, bank=emb.bank)
        result.transport_keys = list(transport_keys)
        result.transport = transportability(fit, temb.values)

    if salience_patch:
        position = {k: i for i, k in enumerate(clean.keys)}
        modal = fit.modal_cluster
        for c in range(fit.k):
            for key, _ in result.exemplars[c + 1][:salience_units]:
                if key in result.salience:
                    continue
                img = source([key])[0]
                target = modal[position[key]]

                def prob(phi_vec, target=target):
                    return fit.gate_probs(phi_vec[None, :])[0, target]

                result.salience[key] = occlusion_salience(img, emb.bank, prob, salience_patch, salience_stride)
    return result
