"""Exact inference on the fragmentation chain F_0 .. F_d.

The chain starts at the root, and every step applies the transition operator
of its energy block. Observation evidence (a peak mass) attaches to the last
state, so posteriors come from a forward pass of prior marginals and a
backward pass of observation likelihoods.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NonConvergence
from .model import log_observe_density

log = logging.getLogger(__name__)

LOG_TINY = float(np.log(np.finfo(float).tiny))
LOG_FLOOR = -600.0


@dataclass
class ChainBelief:
    """Posterior (or prior) over the chain.

    ``marginals[t]`` is the distribution of F_t. ``edge_joint[t - 1]`` and
    ``self_joint[t - 1]`` hold Pr(F_{t-1}=i, F_t=j) for graph edges i -> j
    and for self-loops i -> i.
    """

    marginals: np.ndarray
    edge_joint: list = field(default_factory=list)
    self_joint: list = field(default_factory=list)
    no_support: bool = False
    log_likelihood: float = 0.0
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PeakEvidence:
    mass: float
    height: float = 1.0
    energy: int = 0

    def __post_init__(self):
        if not self.height > 0:
            raise ValueError("peak height must be positive")


def _step_tables(tables, d):
    if isinstance(tables, (list, tuple)):
        if len(tables) != d:
            raise ValueError(f"need one table per step ({d}), got {len(tables)}")
        return list(tables)
    return [tables] * d


def forward_marginals(table, d: int, root: int = 0) -> np.ndarray:
    """Prior marginals of F_0 .. F_d, shape (d + 1, n)."""
    steps = _step_tables(table, d)
    n = steps[0].n_fragments
    mu = np.zeros((d + 1, n))
    mu[0, root] = 1.0
    for t, tab in enumerate(steps, start=1):
        mu[t] = tab.matrix_t() @ mu[t - 1]
    return mu


def forward_marginal(graph, table, d: int) -> np.ndarray:
    """Distribution of F_d given F_0 = root."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return forward_marginals(table, d, graph.root_id if graph is not None else 0)[d]


def log_likelihoods(masses: np.ndarray, peak_masses, sigma) -> np.ndarray:
    """log g(m_p; fragment j) as an (n, P) array; `sigma` is per fragment."""
    pm = np.atleast_1d(np.asarray(peak_masses, float))
    return log_observe_density(pm[None, :], masses[:, None], np.asarray(sigma, float).reshape(-1, 1))


def _pairwise(steps, mu, back):
    """Joint of (F_{t-1}, F_t) given forward `mu` and backward `back` vectors."""
    edge_joint, self_joint = [], []
    for t, tab in enumerate(steps, start=1):
        a = mu[t - 1]
        b = back[t]
        edge_joint.append(a[tab.parent] * tab.prob * b[tab.child])
        self_joint.append(a * tab.self_prob * b)
    return edge_joint, self_joint


def pairwise_posteriors(graph, table, d: int, evidence: PeakEvidence, sigma) -> ChainBelief:
    """Posterior of the chain given F_0 = root and one observed peak at F_d.

    `sigma` is a scalar or a per-fragment array. If the evidence has no
    likelihood mass anywhere (it would underflow to 0 in linear space), the
    returned belief has ``no_support`` set and carries the prior.
    """
    steps = _step_tables(table, d)
    masses = np.array(graph.masses())
    sig = np.broadcast_to(np.asarray(sigma, float), masses.shape)
    logg = log_likelihoods(masses, [evidence.mass], sig)[:, 0]
    mu = forward_marginals(steps, d, graph.root_id)
    top = logg.max()
    g = np.exp(logg - top)
    z = float(mu[d] @ g)
    loglik = float(np.log(z) + top) if z > 0 else -np.inf
    if loglik < LOG_TINY:
        return ChainBelief(mu, no_support=True, log_likelihood=loglik)
    back = _backward(steps, g / z)
    edge_joint, self_joint = _pairwise(steps, mu, back)
    post = mu * back
    return ChainBelief(post, edge_joint, self_joint, False, loglik)


def _backward(steps, last: np.ndarray) -> list:
    d = len(steps)
    back = [None] * (d + 1)
    back[d] = last
    for t in range(d, 0, -1):
        back[t - 1] = steps[t - 1].matrix() @ back[t]
    return back


@dataclass
class PeakBatchResult:
    """h-weighted expected transition counts accumulated over a batch of peaks."""

    edge_counts: list
    self_counts: list
    log_likelihood: float  # sum of h * log Pr(P = m) over supported peaks
    n_no_support: int


def expected_counts(graph, table, d: int, peak_masses, heights, sigma) -> PeakBatchResult:
    """Sum over peaks of h * Pr(F_{t-1}, F_t | root, P = m) for every step t.

    Equivalent to calling :func:`pairwise_posteriors` per peak and adding the
    joints with weight h, but shares the backward pass across peaks.
    """
    steps = _step_tables(table, d)
    masses = np.array(graph.masses())
    n = len(masses)
    sig = np.broadcast_to(np.asarray(sigma, float), masses.shape)
    heights = np.asarray(heights, float)
    mu = forward_marginals(steps, d, graph.root_id)
    logg = log_likelihoods(masses, peak_masses, sig)
    top = logg.max(axis=0)
    G = np.exp(logg - top)
    z = mu[d] @ G
    with np.errstate(divide="ignore"):
        loglik = np.log(z) + top
    ok = loglik >= LOG_TINY
    if not ok.any():
        zeros = [np.zeros(len(s.prob)) for s in steps]
        return PeakBatchResult(zeros, [np.zeros(n) for _ in steps], 0.0, int(len(ok)))
    last = G[:, ok] @ (heights[ok] / z[ok])
    back = _backward(steps, last)
    edge_joint, self_joint = _pairwise(steps, mu, back)
    return PeakBatchResult(edge_joint, self_joint, float(heights[ok] @ loglik[ok]), int((~ok).sum()))


# ---------------------------------------------------------------------------
# IPFP for marginal-spectrum evidence at several depths


def mass_bins(masses: np.ndarray, tol_ppm: float, tol_abs: float) -> np.ndarray:
    """Cluster fragment masses: consecutive sorted masses within tolerance share a bin."""
    order = np.argsort(masses, kind="stable")
    bins = np.empty(len(masses), dtype=np.int64)
    current = -1
    prev = None
    for j in order:
        m = masses[j]
        if prev is None or m - prev > max(tol_ppm * 1e-6 * m, tol_abs):
            current += 1
        bins[j] = current
        prev = m
    return bins


def bin_targets(spectrum, masses, bins, tol_ppm, tol_abs):
    """Assign each peak to the bin of its nearest fragment within tolerance.

    Returns (target per bin as probabilities, fraction of intensity dropped).
    """
    n_bins = int(bins.max()) + 1
    target = np.zeros(n_bins)
    total = 0.0
    for peak in spectrum.peaks:
        total += peak.intensity
        diff = np.abs(masses - peak.mass)
        j = int(np.argmin(diff))
        if diff[j] <= max(tol_ppm * 1e-6 * peak.mass, tol_abs):
            target[bins[j]] += peak.intensity
    kept = target.sum()
    if kept <= 0:
        return None, 1.0
    return target / kept, 1.0 - kept / total


class _PotentialChain:
    """Prior chain with bin potentials exp(lam_t[bin]) attached at a few depths.

    ``mask[t]`` zeroes bins whose target is 0; ``lam[t]`` holds the log
    potential of every bin.
    """

    def __init__(self, steps, root, depths, bins, n_bins, masks):
        self.steps = steps
        self.root = root
        self.depths = tuple(depths)
        self.bins = bins
        self.n_bins = n_bins
        self.n = steps[0].n_fragments
        self.masks = masks
        self.lam = {t: np.zeros(n_bins) for t in self.depths}

    def _phi(self, t):
        lam = self.lam[t]
        top = lam[self.masks[t]].max() if self.masks[t].any() else 0.0
        # floor keeps diverging potentials (inconsistent targets) from underflowing to 0
        return np.where(self.masks[t], np.exp(np.maximum(lam - top, LOG_FLOOR)), 0.0)[self.bins], top

    def belief(self, with_joints: bool = True) -> ChainBelief:
        d = len(self.steps)
        phi = {t: self._phi(t) for t in self.depths}
        alpha = np.zeros((d + 1, self.n))
        alpha[0, self.root] = 1.0
        log_z = 0.0
        for t in range(1, d + 1):
            a = self.steps[t - 1].matrix_t() @ alpha[t - 1]
            if t in phi:
                a = a * phi[t][0]
                log_z += phi[t][1]
            s = a.sum()
            if not s > 0:
                return ChainBelief(alpha, log_likelihood=-np.inf)
            log_z += np.log(s)
            alpha[t] = a / s
        beta = [None] * (d + 1)
        beta[d] = np.ones(self.n)
        for t in range(d, 0, -1):
            b = beta[t] * phi[t][0] if t in phi else beta[t]
            b = self.steps[t - 1].matrix() @ b
            beta[t - 1] = b / b.max()
        post = alpha * np.array(beta)
        post /= post.sum(axis=1, keepdims=True)
        edge_joint, self_joint = [], []
        if with_joints:
            for t, tab in enumerate(self.steps, start=1):
                b = beta[t] * phi[t][0] if t in phi else beta[t]
                e = alpha[t - 1][tab.parent] * tab.prob * b[tab.child]
                s = alpha[t - 1] * tab.self_prob * b
                z = e.sum() + s.sum()
                edge_joint.append(e / z)
                self_joint.append(s / z)
        return ChainBelief(post, edge_joint, self_joint, log_likelihood=log_z)

    def binned(self, belief) -> list[np.ndarray]:
        return [_bin_sum(belief.marginals[t], self.bins, self.n_bins) for t in self.depths]


def _bin_sum(p, bins, n_bins):
    return np.bincount(bins, weights=p, minlength=n_bins)


def ipfp_marginal_fit(graph, tables, depths, spectra, config, max_iters: int = 100,
                      tol: float = 1e-6, max_restarts: int = 3) -> ChainBelief:
    """Fit potentials at F_{d_L}, F_{d_M}, F_{d_H} so binned marginals match the spectra.

    `tables` holds one transition table per energy block, applied to steps
    1..d_L, d_L+1..d_M and d_M+1..d_H. Spectrum intensity that no fragment
    can explain, or that sits on a bin the prior cannot reach at that depth,
    is dropped before fitting (reported in ``diagnostics``).

    Constraints are fitted in turn by proportional rescaling. When the
    largest residual stops decreasing over two full cycles the constraints
    are treated as inconsistent: the targets become the average of the binned
    marginals visited in those cycles and the fit restarts from the prior.
    If the cycles are still converging at the cycle cap, the same fixed point
    is reached by quasi-Newton minimisation of the dual (log Z minus the
    target-weighted log potentials), whose coordinate-wise minimisation is
    exactly the proportional update.
    """
    d_l, d_m, d_h = depths
    steps = [tables[0]] * d_l + [tables[1]] * (d_m - d_l) + [tables[2]] * (d_h - d_m)
    masses = np.array(graph.masses())
    bins = mass_bins(masses, config.tol_ppm, config.tol_abs)
    n_bins = int(bins.max()) + 1
    prior = forward_marginals(steps, d_h, graph.root_id)

    targets, dropped = [], []
    for t, spec in zip(depths, spectra):
        tgt, drop = bin_targets(spec, masses, bins, config.tol_ppm, config.tol_abs)
        reach = _bin_sum(prior[t], bins, n_bins) > 0
        if tgt is None or not (tgt * reach).sum() > 0:
            raise NonConvergence(f"no peak of the depth-{t} spectrum matches a reachable fragment")
        unreachable = tgt[~reach].sum()
        tgt = np.where(reach, tgt, 0.0)
        targets.append(tgt / tgt.sum())
        dropped.append(max(0.0, 1.0 - (1.0 - drop) * (1.0 - unreachable)))

    diag = {"dropped": dropped, "restarts": 0, "cycles": 0, "averaged": False, "dual_polish": False}
    for _ in range(max_restarts + 1):
        chain = _PotentialChain(steps, graph.root_id, depths, bins, n_bins,
                                {t: tgt > 0 for t, tgt in zip(depths, targets)})
        res, oscillating, visited = _cycles(chain, targets, max_iters, tol, diag)
        # stalled or capped: consistent targets are finished off on the dual,
        # alternating with a few cycles from the polished point
        for _ in range(3 if np.isfinite(res) else 0):
            if res < tol:
                return _finish(chain, diag, res)
            res = _dual_polish(chain, targets, tol)
            diag["dual_polish"] = True
            if res < tol:
                return _finish(chain, diag, res)
            res, _, _ = _cycles(chain, targets, 20, tol, diag)
        if res < tol:
            return _finish(chain, diag, res)
        if not oscillating:
            raise NonConvergence(f"IPFP residual {res:.3g} after {diag['cycles']} cycles")
        states = [s for w in visited[-2:] for s in w] or [chain.binned(chain.belief(False))]
        targets = [np.mean([s[k] for s in states], axis=0) for k in range(len(depths))]
        targets = [tgt / tgt.sum() for tgt in targets]
        diag["restarts"] += 1
        diag["averaged"] = True
        log.debug("IPFP oscillating at residual %.3g; refitting to averaged targets", res)
    raise NonConvergence("IPFP still oscillating after averaging")


def _cycles(chain, targets, n, tol, diag):
    """Up to `n` IPFP cycles; returns (residual, stalled, binned states per cycle)."""
    history, visited = [], []
    if not np.isfinite(chain.belief(with_joints=False).log_likelihood):
        # the zero-target bins exclude every path: the constraints contradict
        # each other outright, so the states to average are the single fits
        return np.inf, True, [_single_fits(chain, targets)]
    for _ in range(n):
        res = _residual(chain.binned(chain.belief(with_joints=False)), targets)
        history.append(res)
        diag["cycles"] += 1
        if res < tol:
            return res, False, visited
        if len(history) >= 3 and history[-1] >= history[-2] >= history[-3]:
            return res, True, visited
        window = []
        for k, t in enumerate(chain.depths):
            _ipfp_update(chain, k, t, targets[k])
            window.append(chain.binned(chain.belief(with_joints=False)))
        visited.append(window)
    res = _residual(chain.binned(chain.belief(with_joints=False)), targets)
    return res, False, visited


def _single_fits(chain, targets) -> list:
    """Binned marginals after fitting each constraint on its own from the prior."""
    states = []
    for k, t in enumerate(chain.depths):
        masks = {u: np.ones(chain.n_bins, bool) for u in chain.depths}
        masks[t] = targets[k] > 0
        single = _PotentialChain(chain.steps, chain.root, chain.depths, chain.bins, chain.n_bins, masks)
        _ipfp_update(single, k, t, targets[k])
        states.append(single.binned(single.belief(with_joints=False)))
    return states


def _finish(chain, diag, res):
    belief = chain.belief()
    belief.diagnostics = dict(diag, residual=res)
    return belief


def _residual(current, targets) -> float:
    return max(float(np.abs(c - t).max()) for c, t in zip(current, targets))


def _ipfp_update(chain, k, t, target):
    current = chain.binned(chain.belief(with_joints=False))[k]
    ok = chain.masks[t] & (current > 0)
    if not ok.any():
        return  # would remove all probability
    step = np.zeros(chain.n_bins)
    step[ok] = np.log(target[ok]) - np.log(current[ok])
    chain.lam[t] = chain.lam[t] + step


def _dual_polish(chain, targets, tol) -> float:
    from scipy.optimize import minimize

    free = [np.nonzero(chain.masks[t])[0] for t in chain.depths]
    sizes = np.cumsum([0] + [len(f) for f in free])
    tgt = np.concatenate([targets[k][f] for k, f in enumerate(free)])
    # diagonal of the dual Hessian at the solution is about t (1 - t); rescaling
    # by its square root evens out bins with very different target mass
    scale = 1.0 / np.sqrt(np.maximum(tgt * (1.0 - tgt), 1e-12))

    def unpack(u):
        v = u * scale
        for k, t in enumerate(chain.depths):
            lam = chain.lam[t].copy()
            lam[free[k]] = v[sizes[k]:sizes[k + 1]]
            chain.lam[t] = lam

    def fun(u):
        unpack(u)
        belief = chain.belief(with_joints=False)
        if not np.isfinite(belief.log_likelihood):
            return np.inf, np.zeros_like(u)
        cur = chain.binned(belief)
        g = np.concatenate([cur[k][f] for k, f in enumerate(free)]) - tgt
        return belief.log_likelihood - float(tgt @ (u * scale)), g * scale

    u0 = np.concatenate([chain.lam[t][free[k]] for k, t in enumerate(chain.depths)]) / scale
    out = minimize(fun, u0, jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": tol * 1e-2, "ftol": 0.0})
    unpack(out.x)
    res = _residual(chain.binned(chain.belief(with_joints=False)), targets)
    log.debug("dual polish: %s after %d evaluations, residual %.3g", out.message, out.nfev, res)
    return res
