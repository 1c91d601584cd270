"""Transition and observation models, plus the model file format.

A break from fragment i to child j has tendency theta_ij = w . phi_ij and
probability exp(theta_ij) / (1 + sum_k exp(theta_ik)); the self-transition
keeps tendency 0. Observed peak masses are Gaussian around fragment masses.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp

from .errors import CorruptFile, LayoutMismatch, VersionMismatch
from .features import FeatureLayout, SparseFeatureVector, graph_features

MODEL_FORMAT = "cfmkit-model/1"
SE_TAGS = ("energy0", "energy1", "energy2")
CE_TAGS = ("L", "M", "H")


@dataclass(frozen=True)
class ParamVector:
    """Sparse weights; absent indices are zero."""

    weights: dict
    layout_version: str
    tag: str = "single"

    def __post_init__(self):
        for k, v in self.weights.items():
            if not math.isfinite(v):
                raise ValueError(f"non-finite weight at index {k}")

    def __getitem__(self, idx: int) -> float:
        return self.weights.get(idx, 0.0)

    def dense(self, columns: np.ndarray) -> np.ndarray:
        return np.array([self.weights.get(int(c), 0.0) for c in columns])

    @classmethod
    def from_dense(cls, columns, values, layout_version, tag="single"):
        w = {int(c): float(v) for c, v in zip(columns, values) if v != 0.0}
        return cls(w, layout_version, tag)

    @classmethod
    def initial(cls, layout: FeatureLayout, tag="single", bias=-1.0):
        return cls({0: bias}, layout.version, tag)


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "se"  # "se" or "ce"
    depth: int = 2
    depth_low: int = 2
    depth_med: int = 4
    depth_high: int = 6
    # observation width: sigma = max(sigma_ppm * 1e-6 * mass, sigma_abs)
    sigma_ppm: float = 10.0 / 3
    sigma_abs: float = 0.01 / 3
    lam: float = 0.01
    tol_ppm: float = 10.0
    tol_abs: float = 0.01
    em_tol: float = 1e-4
    em_max_iter: int = 50
    m_tol: float = 1e-5
    m_max_iter: int = 200
    groups: tuple = FeatureLayout().groups
    quadratic: bool = False
    graph_cap: int = 50_000

    def __post_init__(self):
        if self.mode not in ("se", "ce"):
            raise ValueError(f"mode must be 'se' or 'ce', got {self.mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not 1 <= self.depth_low < self.depth_med < self.depth_high:
            raise ValueError("CE depths must satisfy 1 <= depth_low < depth_med < depth_high")
        if self.sigma_ppm < 0 or self.sigma_abs <= 0:
            raise ValueError("sigma must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(tuple(self.groups), self.quadratic)

    @property
    def depths(self) -> tuple[int, int, int]:
        return (self.depth_low, self.depth_med, self.depth_high)

    @property
    def graph_depth(self) -> int:
        return self.depth if self.mode == "se" else self.depth_high

    def energy_depth(self, energy: int) -> int:
        return self.depth if self.mode == "se" else self.depths[energy]

    def sigma(self, mass):
        return np.maximum(self.sigma_ppm * 1e-6 * np.asarray(mass, float), self.sigma_abs)

    def tolerance(self, mass) -> float:
        return max(self.tol_ppm * 1e-6 * mass, self.tol_abs)

    def with_overrides(self, **kw) -> "ModelConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


CONFIG_KEYS = {
    "mode": "mode", "depth": "depth", "depth_low": "depth_low", "depth_med": "depth_med",
    "depth_high": "depth_high", "sigma_ppm": "sigma_ppm", "sigma_abs": "sigma_abs",
    "lambda": "lam", "tol_ppm": "tol_ppm", "tol_abs": "tol_abs", "em_tol": "em_tol",
    "em_max_iter": "em_max_iter", "m_tol": "m_tol", "m_max_iter": "m_max_iter",
    "groups": "groups", "quadratic": "quadratic", "graph_cap": "graph_cap",
}


def config_from_items(items: dict) -> ModelConfig:
    """Build a config from string key/value pairs (file keys, e.g. ``lambda``)."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    kw = {}
    for key, raw in items.items():
        if key not in CONFIG_KEYS:
            raise KeyError(f"unknown config key {key!r}")
        name = CONFIG_KEYS[key]
        t = types[name]
        if name == "groups":
            kw[name] = tuple(g for g in str(raw).split(",") if g)
        elif name == "quadratic":
            kw[name] = str(raw).lower() in ("1", "true", "yes", "on")
        elif t == "int":
            kw[name] = int(raw)
        elif t == "float":
            kw[name] = float(raw)
        else:
            kw[name] = str(raw)
    return ModelConfig(**kw)


def config_items(config: ModelConfig) -> dict[str, str]:
    out = {}
    for key, name in CONFIG_KEYS.items():
        v = getattr(config, name)
        if name == "groups":
            out[key] = ",".join(v)
        elif name == "quadratic":
            out[key] = "1" if v else "0"
        elif isinstance(v, float):
            out[key] = repr(v)
        else:
            out[key] = str(v)
    return out


# ---------------------------------------------------------------------------
# break tendencies and transition rows


def break_tendency(w: ParamVector, phi: SparseFeatureVector) -> float:
    if phi.layout_version != w.layout_version:
        raise LayoutMismatch(f"features use {phi.layout_version!r}, weights use {w.layout_version!r}")
    return float(sum(w.weights.get(i, 0.0) for i in phi.active_indices))


@dataclass
class CompiledGraph:
    """A graph's edge features as a sparse matrix over the columns it uses."""

    graph: object
    layout: FeatureLayout
    columns: np.ndarray  # global feature index of each local column
    X: sp.csr_matrix  # n_edges x len(columns), binary
    parent: np.ndarray
    child: np.ndarray

    @property
    def n_fragments(self) -> int:
        return self.graph.n_fragments

    @property
    def masses(self) -> np.ndarray:
        return np.array(self.graph.masses())


def compile_graph(graph, layout: FeatureLayout, features=None) -> CompiledGraph:
    if features is None:
        features = graph_features(graph, layout)
    indptr = np.zeros(len(features) + 1, dtype=np.int64)
    for k, f in enumerate(features):
        if f.layout_version != layout.version:
            raise LayoutMismatch("feature vectors built under a different layout")
        indptr[k + 1] = indptr[k] + len(f.active_indices)
    flat = np.fromiter((i for f in features for i in f.active_indices), dtype=np.int64, count=indptr[-1])
    columns, local = np.unique(flat, return_inverse=True)
    X = sp.csr_matrix(
        (np.ones(len(flat)), local.reshape(-1), indptr), shape=(len(features), len(columns))
    )
    parent = np.array([e.parent for e in graph.edges], dtype=np.int64)
    child = np.array([e.child for e in graph.edges], dtype=np.int64)
    return CompiledGraph(graph, layout, columns, X, parent, child)


def edge_log_probs(theta: np.ndarray, parent: np.ndarray, n_parents: int):
    """Log transition probabilities of edges and of self-transitions.

    Returns (log rho per edge, log rho_ii per parent). Max-subtracted, so
    tendencies of any magnitude stay finite.
    """
    top = np.zeros(n_parents)
    if len(theta):
        np.maximum.at(top, parent, theta)
    acc = np.exp(-top)
    if len(theta):
        np.add.at(acc, parent, np.exp(theta - top[parent]))
    lse = top + np.log(acc)
    return theta - lse[parent], -lse


@dataclass
class TransitionTable:
    parent: np.ndarray
    child: np.ndarray
    theta: np.ndarray
    prob: np.ndarray
    self_prob: np.ndarray
    _matrix: object = field(default=None, repr=False)
    _matrix_t: object = field(default=None, repr=False)

    @property
    def n_fragments(self) -> int:
        return len(self.self_prob)

    def row(self, pid: int) -> tuple[list[tuple[int, float, float]], float]:
        sel = np.nonzero(self.parent == pid)[0]
        return ([(int(self.child[k]), float(self.theta[k]), float(self.prob[k])) for k in sel],
                float(self.self_prob[pid]))

    def matrix(self) -> sp.csr_matrix:
        """Row-stochastic n x n operator including the self-loops."""
        if self._matrix is None:
            n = self.n_fragments
            rows = np.concatenate([self.parent, np.arange(n)])
            cols = np.concatenate([self.child, np.arange(n)])
            vals = np.concatenate([self.prob, self.self_prob])
            self._matrix = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return self._matrix

    def matrix_t(self) -> sp.csr_matrix:
        """Transpose of :meth:`matrix`, for pushing distributions forward."""
        if self._matrix_t is None:
            self._matrix_t = self.matrix().T.tocsr()
        return self._matrix_t


def edge_thetas(cg: CompiledGraph, w: ParamVector) -> np.ndarray:
    if cg.layout.version != w.layout_version:
        raise LayoutMismatch(f"graph compiled for {cg.layout.version!r}, weights use {w.layout_version!r}")
    return cg.X @ w.dense(cg.columns)


def transition_table(cg: CompiledGraph, w: ParamVector) -> TransitionTable:
    theta = edge_thetas(cg, w)
    log_e, log_s = edge_log_probs(theta, cg.parent, cg.n_fragments)
    return TransitionTable(cg.parent, cg.child, theta, np.exp(log_e), np.exp(log_s))


def transition_probs(graph, parent_id: int, w: ParamVector):
    """Row of the transition table for one parent: ([(child, theta, p)], p_self)."""
    from .chem.gasteiger import atom_charges
    from .features import compute_features

    layout = FeatureLayout.from_version(w.layout_version)
    parent = graph.fragments[parent_id]
    charges = atom_charges(parent.structure)
    kids = graph.child_edges(parent_id)
    theta = np.array([
        break_tendency(w, compute_features(parent, graph.fragments[graph.edges[k].child],
                                           graph.edges[k].neutral_loss, graph.edges[k].meta,
                                           charges, layout))
        for k in kids
    ])
    log_e, log_s = edge_log_probs(theta, np.zeros(len(kids), dtype=np.int64), 1)
    row = [(graph.edges[k].child, float(t), float(np.exp(p))) for k, t, p in zip(kids, theta, log_e)]
    return row, float(np.exp(log_s[0]))


# ---------------------------------------------------------------------------
# observation model


def observe_density(m, fragment_mass, sigma):
    """Gaussian density of observing mass `m` from a fragment of mass `fragment_mass`."""
    mass = getattr(fragment_mass, "mass", fragment_mass)
    z = (np.asarray(m, float) - mass) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi))


def log_observe_density(m, mass, sigma):
    z = (np.asarray(m, float) - mass) / sigma
    return -0.5 * z * z - np.log(sigma * math.sqrt(2 * math.pi))


# ---------------------------------------------------------------------------
# model container and file format


@dataclass
class Model:
    config: ModelConfig
    params: dict  # tag -> ParamVector

    @property
    def layout(self) -> FeatureLayout:
        return self.config.layout

    def block(self, tag: str) -> ParamVector:
        try:
            return self.params[tag]
        except KeyError:
            raise KeyError(f"model has no parameter block {tag!r}; blocks: {sorted(self.params)}") from None

    def digest(self) -> str:
        return hashlib.sha256(_model_body(self.params, self.config).encode()).hexdigest()


def _model_body(params: dict, config: ModelConfig) -> str:
    lines = [f"layout {config.layout.version}"]
    lines += [f"config {k} {v}" for k, v in config_items(config).items()]
    for tag in sorted(params):
        p = params[tag]
        lines.append(f"block {tag} {len(p.weights)}")
        lines += [f"{i} {p.weights[i]:.17g}" for i in sorted(p.weights)]
    return "\n".join(lines) + "\n"


def save_model(params: dict, config: ModelConfig, path) -> None:
    for p in params.values():
        if p.layout_version != config.layout.version:
            raise LayoutMismatch("parameter block layout differs from the config layout")
    body = _model_body(params, config)
    digest = hashlib.sha256(body.encode()).hexdigest()
    with open(path, "w") as fh:
        fh.write(f"{MODEL_FORMAT}\nchecksum {digest}\n{body}")


def load_model(path) -> Model:
    with open(path) as fh:
        text = fh.read()
    head, _, rest = text.partition("\n")
    if head != MODEL_FORMAT:
        raise VersionMismatch(f"{path}: expected {MODEL_FORMAT!r}, found {head!r}")
    check, _, body = rest.partition("\n")
    if not check.startswith("checksum ") or hashlib.sha256(body.encode()).hexdigest() != check[9:]:
        raise CorruptFile(f"{path}: checksum mismatch")
    lines = body.splitlines()
    layout_version = lines[0].split(" ", 1)[1]
    try:
        FeatureLayout.from_version(layout_version)
    except (LayoutMismatch, KeyError, ValueError) as exc:
        raise VersionMismatch(f"{path}: unsupported feature layout {layout_version!r}") from exc
    items, params = {}, {}
    k = 1
    while k < len(lines) and lines[k].startswith("config "):
        _, key, value = lines[k].split(" ", 2)
        items[key] = value
        k += 1
    config = config_from_items(items)
    if config.layout.version != layout_version:
        raise VersionMismatch(f"{path}: layout line disagrees with config")
    while k < len(lines):
        _, tag, count = lines[k].split()
        weights = {}
        for line in lines[k + 1:k + 1 + int(count)]:
            i, v = line.split()
            weights[int(i)] = float(v)
        params[tag] = ParamVector(weights, layout_version, tag)
        k += 1 + int(count)
    return Model(config, params)
