"""Candidate ranking by predicted-vs-target Jaccard score."""
from __future__ import annotations

import hashlib
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .chem import canonical_key, monoisotopic_mass, parse_smiles
from .errors import CfmError, EmptySpectrum, MalformedLine, UnknownCorrectId
from .predict import compute_metrics, format_spectra, parse_spectra, predict_spectra, tolerance

log = logging.getLogger(__name__)

# scores are sums of three ratios; anything closer than this is a tie
SCORE_DECIMALS = 12


@dataclass
class Candidate:
    id: str
    smiles: str
    status: str = "accepted"
    reason: str | None = None
    mol: object = field(default=None, repr=False)
    key: str | None = None

    @property
    def accepted(self) -> bool:
        return self.status == "accepted"


def _classify(cid: str, smiles: str, seen: dict) -> Candidate:
    if "." in smiles:
        return Candidate(cid, smiles, "filtered", "multi-fragment")
    try:
        mol = parse_smiles(smiles)
    except CfmError as exc:
        return Candidate(cid, smiles, "filtered", f"unparseable ({exc.kind}: {exc})")
    if any(a.formal_charge for a in mol.atoms):
        return Candidate(cid, smiles, "filtered", "charged")
    key = canonical_key(mol)
    if key in seen:
        return Candidate(cid, smiles, "filtered", f"duplicate of {seen[key]}", mol, key)
    seen[key] = cid
    return Candidate(cid, smiles, "accepted", None, mol, key)


def parse_candidates(text: str, source: str = "<text>") -> list[Candidate]:
    out, seen = [], {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        if len(parts) != 2:
            raise MalformedLine(f"{source}: expected 'id<TAB>smiles', got {line!r}", lineno)
        out.append(_classify(parts[0], parts[1], seen))
    return out


def load_candidates(path) -> list[Candidate]:
    """Every line of a candidate TSV; rejected entries keep their reason."""
    with open(path) as fh:
        return parse_candidates(fh.read(), str(path))


def filter_mass_window(candidates, neutral_mass: float, tol_ppm: float = 5.0, tol_abs: float = 0.0):
    """Mark accepted candidates whose neutral mass is outside the window as filtered."""
    out = []
    for c in candidates:
        if c.accepted:
            m = monoisotopic_mass(c.mol)
            if abs(m - neutral_mass) > tolerance(neutral_mass, tol_ppm, tol_abs):
                c = Candidate(c.id, c.smiles, "filtered", f"mass {m:.4f} outside window", c.mol, c.key)
        out.append(c)
    return out


# ---------------------------------------------------------------------------
# cache of predicted spectra


class SpectrumCache:
    """Predicted spectra on disk, one file per (canonical key, model digest)."""

    def __init__(self, directory):
        self.directory = str(directory)
        os.makedirs(self.directory, exist_ok=True)

    def path(self, key: str, digest: str) -> str:
        name = hashlib.sha256(f"{key}\n{digest}".encode()).hexdigest()
        return os.path.join(self.directory, name + ".spectra")

    def get(self, key, digest):
        p = self.path(key, digest)
        if not os.path.exists(p):
            return None
        with open(p) as fh:
            return parse_spectra(fh.read(), require_all=False, source=p)

    def put(self, key, digest, spectra) -> None:
        # write to a temp file then rename, so readers never see a partial file
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(format_spectra(spectra))
        os.replace(tmp, self.path(key, digest))


# ---------------------------------------------------------------------------
# ranking


@dataclass
class RankedResult:
    id: str
    score: float
    rank: int
    tie_group: int
    seed: int
    failed: bool = False
    per_energy: tuple = ()


def _candidate_spectra(c: Candidate, model, cache, digest):
    if cache is not None:
        hit = cache.get(c.key, digest)
        if hit is not None:
            return hit
    spectra = predict_spectra(c.mol, model)
    if cache is not None:
        cache.put(c.key, digest, spectra)
    return spectra


def score_candidate(target: dict, spectra: dict, tol_ppm=10.0, tol_abs=0.01) -> tuple:
    """Per-energy Jaccard scores of predicted `spectra` against `target`."""
    return tuple(compute_metrics(spectra[e], target[e], tol_ppm, tol_abs).jaccard if e in spectra else 0.0
                 for e in sorted(target))


def rank_candidates(target, candidates, model, seed: int = 0, workers: int = 1,
                    cache: SpectrumCache | None = None, spectra: dict | None = None) -> list[RankedResult]:
    """Rank accepted candidates by summed per-energy Jaccard against `target`.

    `target` is a dict energy -> Spectrum or a (low, medium, high) tuple.
    Equal scores form a tie group whose members are ordered by a uniform
    random permutation drawn from `seed`. `spectra` may supply precomputed
    predictions keyed by candidate id.
    """
    if not isinstance(target, dict):
        target = dict(enumerate(target))
    for e, s in target.items():
        if not len(s):
            raise EmptySpectrum(f"target spectrum for energy {e} has no peaks")
    accepted = [c for c in candidates if c.accepted]
    if not accepted:
        raise ValueError("no accepted candidates to rank")
    cfg = model.config
    digest = model.digest() if cache is not None else None

    def work(c):
        try:
            pred = spectra[c.id] if spectra and c.id in spectra else _candidate_spectra(c, model, cache, digest)
            return score_candidate(target, pred, cfg.tol_ppm, cfg.tol_abs), False
        except EmptySpectrum:
            raise
        except CfmError as exc:
            log.warning("candidate %s scored 0: %s: %s", c.id, exc.kind, exc)
            return tuple(0.0 for _ in target), True

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scored = list(pool.map(work, accepted))
    else:
        scored = [work(c) for c in accepted]
    return order_scores([c.id for c in accepted], scored, seed)


def order_scores(ids, scored, seed: int) -> list[RankedResult]:
    """Sort (per-energy scores, failed) by total, permuting ties uniformly with `seed`."""
    totals = [round(sum(s), SCORE_DECIMALS) for s, _ in scored]
    rng = np.random.default_rng(seed)
    groups: dict[float, list[int]] = {}
    for i, t in enumerate(totals):
        groups.setdefault(t, []).append(i)
    out, rank = [], 1
    for g, t in enumerate(sorted(groups, reverse=True), start=1):
        members = groups[t]
        for i in rng.permutation(len(members)):
            k = members[i]
            per, failed = scored[k]
            out.append(RankedResult(ids[k], float(sum(per)), rank, g, seed, failed, tuple(per)))
            rank += 1
    return out


def rank_of(results, correct_id: str) -> int:
    for r in results:
        if r.id == correct_id:
            return r.rank
    raise UnknownCorrectId(f"correct id {correct_id!r} is not among the ranked candidates")


def format_ranking(results) -> str:
    return "".join(f"{r.rank}\t{r.id}\t{r.score:.6f}\t{r.tie_group}\n" for r in results)


# ---------------------------------------------------------------------------
# reports


@dataclass
class IdentificationSummary:
    ranks: dict  # case id -> rank of the correct candidate
    curve: dict  # k -> fraction of cases with rank <= k

    def text(self) -> str:
        lines = [f"case\t{cid}\trank\t{r}" for cid, r in self.ranks.items()]
        lines += [f"top{k}\t{100 * f:.2f}%" for k, f in self.curve.items()]
        return "\n".join(lines) + "\n"

    def svg(self, width: int = 320, height: int = 200) -> str:
        """Cumulative rank curve as a minimal SVG polyline."""
        ks = sorted(self.curve)
        kmax = max(ks)
        pts = " ".join(f"{20 + (width - 40) * (k - 1) / max(kmax - 1, 1):.1f},"
                       f"{height - 20 - (height - 40) * self.curve[k]:.1f}" for k in ks)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
                f'<polyline fill="none" stroke="black" points="{pts}"/></svg>\n')


def identification_report(cases, ks=(1, 5, 10)) -> IdentificationSummary:
    """`cases` holds (case id, ranked results, correct candidate id) triples."""
    ranks = {cid: rank_of(results, correct) for cid, results, correct in cases}
    n = len(ranks)
    curve = {k: (sum(r <= k for r in ranks.values()) / n if n else 0.0) for k in ks}
    return IdentificationSummary(ranks, curve)
