"""Spectrum prediction, peak matching, evaluation metrics and spectra files."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySpectrum, MalformedLine, MissingEnergyBlock
from .fraggraph import build_graph, protonate
from .inference import forward_marginals
from .model import CE_TAGS, SE_TAGS, compile_graph, transition_table

ENERGY_NAMES = ("energy0", "energy1", "energy2")
MIN_PEAKS = 5
MAX_PEAKS = 30
KEEP_FRACTION = 0.8
DECIMALS = 6


@dataclass(frozen=True)
class Peak:
    mass: float
    intensity: float

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"peak mass must be positive, got {self.mass}")
        if not self.intensity >= 0:
            raise ValueError(f"peak intensity must be non-negative, got {self.intensity}")


@dataclass
class Spectrum:
    peaks: list
    energy: int = 0
    normalized: bool = False

    def __post_init__(self):
        self.peaks = sorted(self.peaks, key=lambda p: p.mass)

    def __len__(self):
        return len(self.peaks)

    @property
    def masses(self) -> np.ndarray:
        return np.array([p.mass for p in self.peaks])

    @property
    def intensities(self) -> np.ndarray:
        return np.array([p.intensity for p in self.peaks])

    def normalize(self, total: float = 100.0) -> "Spectrum":
        s = sum(p.intensity for p in self.peaks)
        if s <= 0:
            raise EmptySpectrum("cannot normalize a spectrum with no intensity")
        return Spectrum([Peak(p.mass, p.intensity * total / s) for p in self.peaks], self.energy, True)


@dataclass
class MetricReport:
    weighted_recall: float
    weighted_precision: float
    recall: float
    precision: float
    jaccard: float
    n_matched: int = field(default=0, compare=False)

    def as_tuple(self):
        return (self.weighted_recall, self.weighted_precision, self.recall, self.precision, self.jaccard)


def tolerance(mass: float, tol_ppm: float, tol_abs: float) -> float:
    return max(tol_ppm * 1e-6 * mass, tol_abs)


# ---------------------------------------------------------------------------
# prediction


def merge_close(masses, weights, tol_ppm, tol_abs):
    """Merge sorted-by-mass items closer than the tolerance (sum weight, weighted mean mass)."""
    order = np.argsort(masses, kind="stable")
    groups = []
    for j in order:
        m, w = masses[j], weights[j]
        if groups and m - groups[-1][2] <= tolerance(m, tol_ppm, tol_abs):
            g = groups[-1]
            g[0] += m * w
            g[1] += w
            g[2] = m
            g[3] += m
            g[4] += 1
        else:
            groups.append([m * w, w, m, m, 1])
    out = []
    for mw, w, _, msum, k in groups:
        out.append((mw / w if w > 0 else msum / k, w))
    return out


def apply_cutoff(peaks: list) -> list:
    """Keep the highest peaks covering >= 80% of intensity, clamped to [5, 30] peaks."""
    ranked = sorted(peaks, key=lambda p: (-p.intensity, p.mass))
    total = sum(p.intensity for p in ranked)
    acc, keep = 0.0, 0
    for p in ranked:
        acc += p.intensity
        keep += 1
        if acc >= KEEP_FRACTION * total * (1 - 1e-12):
            break
    keep = min(max(keep, MIN_PEAKS), MAX_PEAKS, len(ranked))
    return ranked[:keep]


def marginal_to_spectrum(masses, probs, energy, tol_ppm, tol_abs, cutoff=True) -> Spectrum:
    sel = probs > 0
    merged = merge_close(np.asarray(masses)[sel], np.asarray(probs)[sel], tol_ppm, tol_abs)
    peaks = [Peak(m, w) for m, w in merged if w > 0]
    if cutoff:
        peaks = apply_cutoff(peaks)
    return Spectrum(peaks, energy).normalize()


def root_ion(mol):
    """The precursor ion: `mol` itself if it is already +1, else its protonated form."""
    return mol if mol.total_charge == 1 else protonate(mol)


def energy_marginals(cg, model) -> dict[int, np.ndarray]:
    """Forward marginals at each energy's depth for one compiled graph."""
    cfg = model.config
    if cfg.mode == "se":
        out = {}
        for e, tag in enumerate(SE_TAGS):
            block = model.params.get(tag, model.params.get("single"))
            if block is None:
                continue
            tab = transition_table(cg, block)
            out[e] = forward_marginals(tab, cfg.depth, cg.graph.root_id)[cfg.depth]
        return out
    tabs = [transition_table(cg, model.block(tag)) for tag in CE_TAGS]
    d_l, d_m, d_h = cfg.depths
    steps = [tabs[0]] * d_l + [tabs[1]] * (d_m - d_l) + [tabs[2]] * (d_h - d_m)
    mu = forward_marginals(steps, d_h, cg.graph.root_id)
    return {0: mu[d_l], 1: mu[d_m], 2: mu[d_h]}


def prepare(mol, model):
    ion = root_ion(mol)
    graph = build_graph(ion, model.config.graph_depth, model.config.graph_cap)
    return compile_graph(graph, model.layout)


def predict_spectra(mol, model, cg=None, cutoff=True) -> dict[int, Spectrum]:
    """Predicted spectra for every energy the model covers."""
    if cg is None:
        cg = prepare(mol, model)
    cfg = model.config
    masses = cg.masses
    return {e: marginal_to_spectrum(masses, mu, e, cfg.tol_ppm, cfg.tol_abs, cutoff)
            for e, mu in energy_marginals(cg, model).items()}


def predict_spectrum(mol, model, energy: int, cg=None, cutoff=True) -> Spectrum:
    spectra = predict_spectra(mol, model, cg, cutoff)
    if energy not in spectra:
        raise KeyError(f"model has no parameters for energy {energy}")
    return spectra[energy]


# ---------------------------------------------------------------------------
# matching and metrics


def match_peaks(a: Spectrum, b: Spectrum, tol_ppm: float = 10.0, tol_abs: float = 0.01):
    """Greedy one-to-one nearest-mass matching between `a` (predicted) and `b` (measured).

    Candidate pairs are taken in order of increasing mass difference; ties
    prefer the lower-mass pair. The ppm tolerance uses the measured mass.
    Returns (index in a, index in b) pairs sorted by a-index.
    """
    cands = []
    bm = b.masses
    for i, p in enumerate(a.peaks):
        # search window slightly wider than any admissible pair; exact test below
        lo = np.searchsorted(bm, p.mass - tolerance(p.mass * 1.01, tol_ppm, tol_abs), "left")
        hi = np.searchsorted(bm, p.mass + tolerance(p.mass * 1.01, tol_ppm, tol_abs), "right")
        for j in range(lo, hi):
            diff = abs(p.mass - bm[j])
            if diff <= tolerance(bm[j], tol_ppm, tol_abs) * (1 + 1e-12):
                cands.append((diff, min(p.mass, bm[j]), i, j))
    cands.sort()
    used_a, used_b, pairs = set(), set(), []
    for _, _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    return sorted(pairs)


def compute_metrics(predicted: Spectrum, measured: Spectrum, tol_ppm: float = 10.0,
                    tol_abs: float = 0.01) -> MetricReport:
    if not len(predicted) or not len(measured):
        raise EmptySpectrum("cannot score an empty spectrum")
    pairs = match_peaks(predicted, measured, tol_ppm, tol_abs)
    pi, mi = predicted.intensities, measured.intensities
    k = len(pairs)
    wr = 100.0 * sum(mi[j] for _, j in pairs) / mi.sum()
    wp = 100.0 * sum(pi[i] for i, _ in pairs) / pi.sum()
    r = 100.0 * k / len(measured)
    p = 100.0 * k / len(predicted)
    jac = k / (len(predicted) + len(measured) - k)
    return MetricReport(wr, wp, r, p, jac, k)


def merge_energy_spectra(s_l: Spectrum, s_m: Spectrum, s_h: Spectrum, tol_ppm: float = 10.0,
                         tol_abs: float = 0.01) -> Spectrum:
    """Union of three spectra; close peaks merge to (mean mass, max intensity)."""
    peaks = sorted([p for s in (s_l, s_m, s_h) for p in s.peaks], key=lambda p: p.mass)
    groups = []
    for p in peaks:
        if groups and p.mass - groups[-1][-1].mass <= tolerance(p.mass, tol_ppm, tol_abs):
            groups[-1].append(p)
        else:
            groups.append([p])
    merged = [Peak(sum(q.mass for q in g) / len(g), max(q.intensity for q in g)) for g in groups]
    return Spectrum(merged, -1).normalize()


# ---------------------------------------------------------------------------
# spectra files


def format_spectra(spectra: dict) -> str:
    lines = []
    for e, name in enumerate(ENERGY_NAMES):
        if e not in spectra:
            continue
        lines.append(name)
        for p in spectra[e].peaks:
            lines.append(f"{p.mass:.{DECIMALS}f} {p.intensity:.{DECIMALS}f}")
    return "\n".join(lines) + "\n"


def write_spectra_file(spectra: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_spectra(spectra))


def parse_spectra(text: str, require_all: bool = True, source: str = "<text>") -> dict[int, Spectrum]:
    blocks: dict[int, list] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line in ENERGY_NAMES:
            current = ENERGY_NAMES.index(line)
            if current in blocks:
                raise MalformedLine(f"{source}: duplicate block {line}", lineno)
            blocks[current] = []
            continue
        parts = line.split()
        if current is None or len(parts) != 2:
            raise MalformedLine(f"{source}: expected 'mass intensity', got {raw.strip()!r}", lineno)
        try:
            mass, inten = float(parts[0]), float(parts[1])
        except ValueError:
            raise MalformedLine(f"{source}: non-numeric value in {raw.strip()!r}", lineno) from None
        if not (math.isfinite(mass) and math.isfinite(inten)) or mass <= 0 or inten < 0:
            raise MalformedLine(f"{source}: invalid peak {raw.strip()!r}", lineno)
        blocks[current].append(Peak(mass, inten))
    if require_all:
        for e, name in enumerate(ENERGY_NAMES):
            if e not in blocks:
                raise MissingEnergyBlock(f"{source}: missing {name} block")
    return {e: Spectrum(peaks, e) for e, peaks in blocks.items()}


def read_spectra_file(path, require_all: bool = True) -> dict[int, Spectrum]:
    with open(path) as fh:
        return parse_spectra(fh.read(), require_all, str(path))
