"""EM training of the break-tendency weights.

The E-step computes expected transition counts nu(i, j) under the current
weights; the M-step maximises

    Q(w) = sum_ij nu(i, j) log rho(i, j; w) - lam * |w|^2   (bias unpenalised)

with L-BFGS. Q is concave in w, so the quasi-Newton iteration converges to
its maximum.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from .errors import NonConvergence, NoTrainingData
from .fraggraph import build_graph
from .inference import expected_counts, ipfp_marginal_fit
from .model import CE_TAGS, SE_TAGS, ModelConfig, ParamVector, TransitionTable, compile_graph, edge_log_probs

log = logging.getLogger(__name__)

INIT_BIAS = -1.0


@dataclass
class TrainingInstance:
    id: str
    root: object  # protonated Molecule
    spectra: dict  # energy -> Spectrum, normalised to 100
    graph: object = None
    compiled: object = field(default=None, repr=False)

    def prepare(self, config: ModelConfig):
        if self.graph is None or self.graph.max_depth < config.graph_depth:
            self.graph = build_graph(self.root, config.graph_depth, config.graph_cap)
            self.compiled = None
        if self.compiled is None or self.compiled.layout != config.layout:
            self.compiled = compile_graph(self.graph, config.layout)
        return self.compiled


class Batch:
    """All instances' edges stacked into one feature matrix over shared columns."""

    def __init__(self, compiled: list, layout):
        self.compiled = compiled
        self.layout = layout
        cols = np.unique(np.concatenate([[0]] + [cg.columns for cg in compiled])).astype(np.int64)
        self.columns = cols
        self.bias = int(np.searchsorted(cols, 0))
        mats, parents = [], []
        self.edge_offsets = [0]
        self.frag_offsets = [0]
        for cg in compiled:
            remap = np.searchsorted(cols, cg.columns)
            X = cg.X.tocoo()
            mats.append(sp.csr_matrix((X.data, (X.row, remap[X.col])), shape=(X.shape[0], len(cols))))
            parents.append(cg.parent + self.frag_offsets[-1])
            self.edge_offsets.append(self.edge_offsets[-1] + len(cg.parent))
            self.frag_offsets.append(self.frag_offsets[-1] + cg.n_fragments)
        self.X = sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, len(cols)))
        self.XT = self.X.T.tocsr()
        self.parent = np.concatenate(parents) if parents else np.zeros(0, np.int64)
        self.n_fragments = self.frag_offsets[-1]
        self.penalty_mask = np.ones(len(cols))
        self.penalty_mask[self.bias] = 0.0

    @property
    def n_edges(self) -> int:
        return self.edge_offsets[-1]

    def dense(self, w: ParamVector) -> np.ndarray:
        return w.dense(self.columns)

    def params(self, x: np.ndarray, tag: str) -> ParamVector:
        return ParamVector.from_dense(self.columns, x, self.layout.version, tag)

    def log_probs(self, x: np.ndarray):
        theta = self.X @ x
        return edge_log_probs(theta, self.parent, self.n_fragments)

    def tables(self, x: np.ndarray) -> list[TransitionTable]:
        theta = self.X @ x
        log_e, log_s = edge_log_probs(theta, self.parent, self.n_fragments)
        pe, ps = np.exp(log_e), np.exp(log_s)
        out = []
        for k, cg in enumerate(self.compiled):
            e0, e1 = self.edge_offsets[k], self.edge_offsets[k + 1]
            f0, f1 = self.frag_offsets[k], self.frag_offsets[k + 1]
            out.append(TransitionTable(cg.parent, cg.child, theta[e0:e1], pe[e0:e1], ps[f0:f1]))
        return out


@dataclass
class SufficientStats:
    """Expected transition counts, stacked in batch edge / fragment order."""

    edge: np.ndarray
    self_: np.ndarray
    log_likelihood: float = 0.0
    n_no_support: int = 0
    skipped: list = field(default_factory=list)

    def scaled(self, factor: float) -> "SufficientStats":
        return SufficientStats(self.edge * factor, self.self_ * factor, self.log_likelihood * factor,
                               self.n_no_support, list(self.skipped))

    @classmethod
    def zeros(cls, batch: Batch) -> "SufficientStats":
        return cls(np.zeros(batch.n_edges), np.zeros(batch.n_fragments))


# ---------------------------------------------------------------------------
# Q and its gradient


def q_parts(stats: SufficientStats, x: np.ndarray, batch: Batch, lam: float):
    """(data term, penalty, gradient of the regularised Q)."""
    log_e, log_s = batch.log_probs(x)
    data = float(stats.edge @ log_e + stats.self_ @ log_s)
    wp = x * batch.penalty_mask
    penalty = lam * float(wp @ wp)
    total = stats.self_ + np.bincount(batch.parent, weights=stats.edge, minlength=batch.n_fragments)
    resid = stats.edge - total[batch.parent] * np.exp(log_e)
    grad = batch.XT @ resid - 2.0 * lam * wp
    return data, penalty, grad


def q_value(stats, x, batch, lam) -> float:
    data, penalty, _ = q_parts(stats, x, batch, lam)
    return data - penalty


def q_gradient(stats, x, batch, lam) -> np.ndarray:
    return q_parts(stats, x, batch, lam)[2]


@dataclass
class MStepInfo:
    q_start: float
    q_end: float
    grad_norm: float
    iterations: int
    reason: str


def m_step(stats, x0: np.ndarray, batch: Batch, lam: float, tol: float = 1e-5,
           max_iter: int = 200) -> tuple[np.ndarray, MStepInfo]:
    """Maximise the regularised Q by limited-memory quasi-Newton ascent.

    Q is concave, and the line search only accepts increasing steps; the
    starting point is kept if the optimiser somehow ends lower, so Q never
    decreases across an M-step.
    """
    def neg(x):
        data, pen, g = q_parts(stats, x, batch, lam)
        return -(data - pen), -g

    f0, g0 = neg(x0)
    out = minimize(neg, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": tol, "ftol": 0.0})
    x, f, g = out.x, out.fun, out.jac
    if not f <= f0:
        x, f, g = x0.copy(), f0, g0
    reason = "grad_tol" if out.status == 0 else ("max_iter" if out.status == 1 else "line_search")
    return x, MStepInfo(-f0, -f, float(np.linalg.norm(g)), int(out.nit), reason)


# ---------------------------------------------------------------------------
# E-steps


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def e_step_se(instances, batch: Batch, x: np.ndarray, energy: int, config: ModelConfig,
              workers: int = 1) -> SufficientStats:
    """Expected counts over steps 1..d for every peak of each instance's `energy` spectrum."""
    tables = batch.tables(x)
    d = config.depth

    def one(k):
        inst, cg = instances[k], batch.compiled[k]
        spec = inst.spectra[energy]
        sigma = config.sigma(cg.masses)
        res = expected_counts(cg.graph, tables[k], d, spec.masses, spec.intensities, sigma)
        return sum(res.edge_counts), sum(res.self_counts), res.log_likelihood, res.n_no_support

    parts = _map(one, list(range(len(instances))), workers)
    stats = SufficientStats.zeros(batch)
    for k, (e, s, ll, nns) in enumerate(parts):
        stats.edge[batch.edge_offsets[k]:batch.edge_offsets[k + 1]] = e
        stats.self_[batch.frag_offsets[k]:batch.frag_offsets[k + 1]] = s
        stats.log_likelihood += ll
        stats.n_no_support += nns
    if stats.n_no_support:
        log.info("%d peaks had no support under the current model", stats.n_no_support)
    return stats


def e_step_ce(instances, batch: Batch, xs: list, config: ModelConfig, workers: int = 1,
              scale: float = 100.0) -> list[SufficientStats]:
    """Per-block expected counts from IPFP fits of all three spectra at once.

    Block L collects steps 1..d_L, block M steps d_L+1..d_M and block H
    steps d_M+1..d_H. Counts are scaled by the spectrum intensity total.
    """
    tables = [batch.tables(x) for x in xs]
    d_l, d_m, d_h = config.depths
    spans = [(0, d_l), (d_l, d_m), (d_m, d_h)]

    def one(k):
        inst, cg = instances[k], batch.compiled[k]
        try:
            belief = ipfp_marginal_fit(cg.graph, [t[k] for t in tables], config.depths,
                                       [inst.spectra[e] for e in range(3)], config)
        except NonConvergence as exc:
            log.warning("skipping %s: %s", inst.id, exc)
            return None
        out = []
        for a, b in spans:
            out.append((sum(belief.edge_joint[a:b]), sum(belief.self_joint[a:b])))
        return out

    parts = _map(one, list(range(len(instances))), workers)
    stats = [SufficientStats.zeros(batch) for _ in range(3)]
    for k, part in enumerate(parts):
        if part is None:
            for s in stats:
                s.skipped.append(instances[k].id)
            continue
        for s, (e, f) in zip(stats, part):
            s.edge[batch.edge_offsets[k]:batch.edge_offsets[k + 1]] = e * scale
            s.self_[batch.frag_offsets[k]:batch.frag_offsets[k + 1]] = f * scale
    return stats


# ---------------------------------------------------------------------------
# EM drivers


@dataclass
class IterationRecord:
    iteration: int
    q: float  # expected complete-data log likelihood (without the constant)
    q_reg: float  # q minus the l2 penalty
    log_likelihood: float
    grad_norm: float
    inner_iterations: int
    wall_time: float
    n_no_support: int = 0

    def line(self) -> str:
        return (f"iter {self.iteration} q {self.q:.10g} q_reg {self.q_reg:.10g} "
                f"loglik {self.log_likelihood:.10g} grad_norm {self.grad_norm:.3g} "
                f"inner {self.inner_iterations} time {self.wall_time:.3f} no_support {self.n_no_support}")


@dataclass
class TrainReport:
    iterations: list = field(default_factory=list)
    reason: str = ""

    @property
    def q_reg(self) -> list[float]:
        return [r.q_reg for r in self.iterations]

    def text(self) -> str:
        return "\n".join(r.line() for r in self.iterations) + f"\nstop {self.reason}\n"


def _prepare(instances, config, workers):
    if not instances:
        raise NoTrainingData("no training instances")
    compiled = _map(lambda inst: inst.prepare(config), list(instances), workers)
    return Batch(compiled, config.layout)


def _converged(prev, cur, tol):
    return prev is not None and abs(cur - prev) <= tol * max(abs(prev), 1e-300)


def em_train_se(instances, energy: int, config: ModelConfig, init: ParamVector | None = None,
                workers: int = 1, callback=None, start_iteration: int = 0,
                prev_q: float | None = None) -> tuple[ParamVector, TrainReport]:
    """Fit one energy's weights. `callback(iteration, params, record)` runs after each iteration."""
    instances = [inst for inst in instances if energy in inst.spectra]
    batch = _prepare(instances, config, workers)
    tag = SE_TAGS[energy]
    x = batch.dense(init) if init is not None else _initial(batch)
    report = TrainReport()
    for it in range(start_iteration, config.em_max_iter):
        t0 = time.perf_counter()
        stats = e_step_se(instances, batch, x, energy, config, workers)
        x, info = m_step(stats, x, batch, config.lam, config.m_tol, config.m_max_iter)
        data, pen, _ = q_parts(stats, x, batch, config.lam)
        rec = IterationRecord(it, data, data - pen, stats.log_likelihood, info.grad_norm,
                              info.iterations, time.perf_counter() - t0, stats.n_no_support)
        report.iterations.append(rec)
        log.info("%s %s", tag, rec.line())
        if callback is not None:
            callback(it, batch.params(x, tag), rec)
        if _converged(prev_q, rec.q_reg, config.em_tol):
            report.reason = "converged"
            break
        prev_q = rec.q_reg
    else:
        report.reason = "max_iter"
    return batch.params(x, tag), report


def em_train_ce(instances, config: ModelConfig, init: dict | None = None, workers: int = 1,
                callback=None, start_iteration: int = 0,
                prev_q: float | None = None) -> tuple[dict, TrainReport]:
    """Fit the three block weights jointly from all three spectra of each instance."""
    if config.mode != "ce":
        config = config.with_overrides(mode="ce")
    instances = [inst for inst in instances if all(e in inst.spectra for e in range(3))]
    batch = _prepare(instances, config, workers)
    xs = [batch.dense(init[t]) if init else _initial(batch) for t in CE_TAGS]
    report = TrainReport()
    for it in range(start_iteration, config.em_max_iter):
        t0 = time.perf_counter()
        stats = e_step_ce(instances, batch, xs, config, workers)
        if len(stats[0].skipped) == len(instances):
            raise NoTrainingData("IPFP failed for every training instance")
        results = [m_step(s, x, batch, config.lam, config.m_tol, config.m_max_iter) for s, x in zip(stats, xs)]
        xs = [r[0] for r in results]
        q = qr = 0.0
        for s, x in zip(stats, xs):
            data, pen, _ = q_parts(s, x, batch, config.lam)
            q += data
            qr += data - pen
        rec = IterationRecord(it, q, qr, float("nan"), max(r[1].grad_norm for r in results),
                              sum(r[1].iterations for r in results), time.perf_counter() - t0,
                              len(stats[0].skipped))
        report.iterations.append(rec)
        log.info("ce %s", rec.line())
        params = {t: batch.params(x, t) for t, x in zip(CE_TAGS, xs)}
        if callback is not None:
            callback(it, params, rec)
        if _converged(prev_q, rec.q_reg, config.em_tol):
            report.reason = "converged"
            break
        prev_q = rec.q_reg
    else:
        report.reason = "max_iter"
    return {t: batch.params(x, t) for t, x in zip(CE_TAGS, xs)}, report


def _initial(batch: Batch) -> np.ndarray:
    x = np.zeros(len(batch.columns))
    x[batch.bias] = INIT_BIAS
    return x
