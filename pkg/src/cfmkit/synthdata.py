"""Synthetic spectra from a model with known weights, and decoy molecules."""
from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .chem import canonical_key, parse_smiles, write_smiles
from .chem.molecule import Atom, Bond, Molecule
from .errors import CfmError
from .fraggraph import protonate
from .model import CE_TAGS, SE_TAGS, Model, ModelConfig, ParamVector, compile_graph
from .predict import Peak, Spectrum, predict_spectra, write_spectra_file
from .train import TrainingInstance


def load_toy_molecules(role: str | None = None) -> list[tuple[str, str]]:
    """The shipped toy set as (id, smiles) pairs; `role` filters on the third column."""
    text = resources.files("cfmkit.data").joinpath("toy_molecules.tsv").read_text()
    out = []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        r = parts[2] if len(parts) > 2 else "train"
        if role is None or r == role:
            out.append((parts[0], parts[1]))
    return out


@dataclass
class SynthSpec:
    molecules: list  # (id, smiles)
    params: dict  # tag -> ParamVector (energy0..2 for se, L/M/H for ce)
    config: ModelConfig
    jitter: float = 0.0  # std dev of Gaussian mass noise, Da
    cutoff: bool = True

    @property
    def model(self) -> Model:
        return Model(self.config, self.params)


def random_weights(columns, layout, rng, scale: float = 1.0, bias: float = -1.0, tag="single") -> ParamVector:
    """Gaussian weights on `columns` (the bias gets `bias`)."""
    w = {int(c): float(rng.normal(0.0, scale)) for c in columns if c != 0}
    w[0] = bias
    return ParamVector(w, layout.version, tag)


def corpus_columns(molecules, config: ModelConfig) -> np.ndarray:
    """Feature indices used by any edge of the molecules' graphs."""
    from .fraggraph import build_graph

    cols = [np.array([0])]
    for _, smi in molecules:
        g = build_graph(protonate(parse_smiles(smi)), config.graph_depth, config.graph_cap)
        cols.append(compile_graph(g, config.layout).columns)
    return np.unique(np.concatenate(cols))


def generator_params(molecules, config: ModelConfig, seed: int, scale: float = 1.0) -> dict:
    rng = np.random.default_rng(seed)
    cols = corpus_columns(molecules, config)
    tags = SE_TAGS if config.mode == "se" else CE_TAGS
    return {t: random_weights(cols, config.layout, rng, scale, tag=t) for t in tags}


def generate_dataset(spec: SynthSpec, seed: int = 0) -> list[TrainingInstance]:
    """One training instance per molecule with spectra predicted under `spec.params`."""
    rng = np.random.default_rng(seed)
    model = spec.model
    out = []
    for mid, smi in spec.molecules:
        root = protonate(parse_smiles(smi))
        inst = TrainingInstance(mid, root, {})
        cg = inst.prepare(spec.config)
        spectra = predict_spectra(root, model, cg, cutoff=spec.cutoff)
        if spec.jitter > 0:
            spectra = {e: _jitter(s, spec.jitter, rng) for e, s in spectra.items()}
        inst.spectra = spectra
        out.append(inst)
    return out


def _jitter(spec: Spectrum, sd: float, rng) -> Spectrum:
    peaks = [Peak(max(p.mass + rng.normal(0.0, sd), 1e-6), p.intensity) for p in spec.peaks]
    return Spectrum(peaks, spec.energy, spec.normalized)


def write_dataset(instances, outdir) -> str:
    """Write ``molecules.tsv`` and one spectra file per instance; returns the TSV path."""
    os.makedirs(outdir, exist_ok=True)
    tsv = os.path.join(outdir, "molecules.tsv")
    with open(tsv, "w") as fh:
        for inst in instances:
            fh.write(f"{inst.id}\t{write_smiles(inst.root)}\n")
            write_spectra_file(inst.spectra, os.path.join(outdir, f"{inst.id}.spectra"))
    return tsv


# ---------------------------------------------------------------------------
# decoys

_SWAP = {"C": ("N", "O"), "N": ("C", "O"), "O": ("C", "N", "S"), "S": ("O", "C")}


def _mutations(mol: Molecule, rng):
    """Random single edits of a neutral molecule: element swap, add or remove a terminal atom."""
    n = mol.n_atoms
    kind = rng.integers(3)
    atoms = [Atom(a.element, 0, 0, False) for a in mol.atoms]
    bonds = [Bond(b.begin, b.end, 1) for b in mol.bonds if not (mol.atoms[b.begin].aromatic and mol.atoms[b.end].aromatic)]
    arom = [(b.begin, b.end) for b in mol.bonds if mol.atoms[b.begin].aromatic and mol.atoms[b.end].aromatic]
    i = int(rng.integers(n))
    if kind == 0 and not mol.atoms[i].aromatic and atoms[i].element in _SWAP:
        opts = _SWAP[atoms[i].element]
        atoms[i] = Atom(opts[int(rng.integers(len(opts)))])
    elif kind == 1:
        atoms.append(Atom(("C", "N", "O")[int(rng.integers(3))]))
        bonds.append(Bond(i, n, 1))
    else:
        leaves = [a for a in range(n) if len(mol.neighbors[a]) == 1 and not mol.atoms[a].aromatic]
        if not leaves or n < 3:
            return None
        j = leaves[int(rng.integers(len(leaves)))]
        keep = [a for a in range(n) if a != j]
        remap = {a: k for k, a in enumerate(keep)}
        atoms = [atoms[a] for a in keep]
        bonds = [Bond(remap[b.begin], remap[b.end], b.order) for b in bonds if j not in (b.begin, b.end)]
        arom = [(remap[u], remap[v]) for u, v in arom]
        aromatic_atoms = {remap[a] for a in range(n) if mol.atoms[a].aromatic}
        return _to_smiles(atoms, bonds, arom, aromatic_atoms, mol, remap)
    aromatic_atoms = {a for a in range(n) if mol.atoms[a].aromatic}
    return _to_smiles(atoms, bonds, arom, aromatic_atoms, mol, None)


def _to_smiles(atoms, bonds, arom, aromatic_atoms, original, remap):
    # rebuild via SMILES text so implicit hydrogens and kekulization are recomputed
    parts = []
    for k, a in enumerate(atoms):
        sym = a.element.lower() if k in aromatic_atoms else a.element
        parts.append(sym if a.element in ("C", "N", "O", "P", "S", "F", "Cl", "Br", "I") else f"[{sym}]")
    # keep exocyclic multiple bonds of the original where both atoms survive
    orders = {}
    for b in original.bonds:
        u, v = (b.begin, b.end) if remap is None else (remap.get(b.begin), remap.get(b.end))
        if u is not None and v is not None and not (u in aromatic_atoms and v in aromatic_atoms):
            orders[frozenset((u, v))] = b.order
    edges = [(b.begin, b.end, orders.get(frozenset((b.begin, b.end)), 1)) for b in bonds]
    edges += [(u, v, "ar") for u, v in arom]
    return _graph_smiles(parts, edges)


def _graph_smiles(tokens, edges) -> str | None:
    n = len(tokens)
    adj = [[] for _ in range(n)]
    for u, v, o in edges:
        adj[u].append((v, o))
        adj[v].append((u, o))
    seen = [False] * n
    closures = {}
    label = [0]
    tree = set()

    def dfs(u):
        seen[u] = True
        for v, _ in adj[u]:
            if not seen[v]:
                tree.add(frozenset((u, v)))
                dfs(v)

    dfs(0)
    if not all(seen):
        return None
    out = []
    done = [False] * n
    sym = {1: "", 2: "=", 3: "#", "ar": ""}

    def emit(u, parent):
        done[u] = True
        out.append(tokens[u])
        kids = []
        for v, o in adj[u]:
            if v == parent:
                continue
            e = frozenset((u, v))
            if e in tree:
                if not done[v]:
                    kids.append((v, o))
            elif e in closures:
                out.append(sym[o] + str(closures.pop(e)))
            else:
                label[0] += 1
                closures[e] = label[0]
                out.append(sym[o] + str(label[0]))
        for k, (v, o) in enumerate(kids):
            text = sym[o]
            if k < len(kids) - 1:
                out.append("(" + text)
                emit(v, u)
                out.append(")")
            else:
                out.append(text)
                emit(v, u)

    emit(0, None)
    return "".join(out)


def make_decoys(smiles: str, n: int, seed: int = 0, max_tries: int = 5000) -> list[str]:
    """Up to `n` distinct valid neutral molecules one to three edits away from `smiles`."""
    rng = np.random.default_rng(seed)
    target = parse_smiles(smiles)
    seen = {canonical_key(target)}
    out = []
    for _ in range(max_tries):
        if len(out) >= n:
            break
        mol, text = target, None
        for _ in range(int(rng.integers(1, 4))):
            text = _mutations(mol, rng)
            if text is None:
                break
            try:
                mol = parse_smiles(text)
            except CfmError:
                text = None
                break
        if text is None or mol.n_atoms < 2 or mol.total_charge != 0:
            continue
        key = canonical_key(mol)
        if key in seen:
            continue
        try:
            protonate(mol)
        except CfmError:
            continue
        seen.add(key)
        out.append(text)
    return out
