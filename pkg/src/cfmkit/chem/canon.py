"""Canonical atom ordering and canonical SMILES keys.

Atoms are partitioned by invariants and refined Morgan-style until stable.
Remaining ties are broken by individualizing each member of the first tied
cell in turn and keeping the ordering whose serialization is smallest, so the
key is invariant under graph isomorphism.
"""
from __future__ import annotations

from .smiles import write_smiles

# Orderings explored before settling for the first branch; far above what the
# molecules handled here need.
MAX_LEAVES = 4096


def _refine(mol, ranks, bond_label):
    """Iterate neighbourhood refinement until the partition stops splitting."""
    n = mol.n_atoms
    while True:
        sigs = []
        for i in range(n):
            nb = sorted((bond_label(bi), ranks[v]) for v, bi in mol.neighbors[i])
            sigs.append((ranks[i], tuple(nb)))
        new = _dense_ranks(sigs)
        if len(set(new)) == len(set(ranks)):
            return new
        ranks = new


def _dense_ranks(keys):
    uniq = sorted(set(keys))
    pos = {k: r for r, k in enumerate(uniq)}
    return [pos[k] for k in keys]


def canonical_order(mol, atom_label=None, bond_label=None, serialize=None):
    """Return atom indices in canonical order for `mol`.

    `atom_label` / `bond_label` map an atom index / bond index to a sortable
    invariant; `serialize` maps an ordering to a comparable string.
    """
    if atom_label is None:
        atom_label = _full_atom_label(mol)
    if bond_label is None:
        bond_label = lambda bi: mol.bonds[bi].order  # noqa: E731
    if serialize is None:
        serialize = lambda order: write_smiles(mol, order)  # noqa: E731
    n = mol.n_atoms
    if n == 0:
        return []
    init = _dense_ranks([(atom_label(i), len(mol.neighbors[i])) for i in range(n)])
    ranks = _refine(mol, init, bond_label)

    best = [None, None]
    leaves = [0]

    def search(ranks):
        if leaves[0] >= MAX_LEAVES and best[0] is not None:
            return
        counts = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = sorted(r for r, c in counts.items() if c > 1)
        if not tied:
            leaves[0] += 1
            order = sorted(range(n), key=ranks.__getitem__)
            text = serialize(order)
            if best[0] is None or text < best[0]:
                best[0], best[1] = text, order
            return
        cell = tied[0]
        members = [i for i in range(n) if ranks[i] == cell]
        for m in members:
            # individualize m: keep it at `cell`, push the rest of the cell up
            split = [2 * r + (1 if (r == cell and i != m) else 0) for i, r in enumerate(ranks)]
            search(_refine(mol, _dense_ranks(split), bond_label))

    search(ranks)
    return best[1]


def _full_atom_label(mol):
    atoms = mol.atoms
    return lambda i: (atoms[i].element, atoms[i].h_count, atoms[i].formal_charge)


def canonical_key(mol) -> str:
    """Isomorphism-invariant string over elements, bond orders, H counts and charge site."""
    plain = _strip_aromatic(mol)
    order = canonical_order(plain)
    return write_smiles(plain, order)


def _strip_aromatic(mol):
    from .molecule import Atom, Molecule

    if not any(a.aromatic for a in mol.atoms):
        return mol
    atoms = tuple(Atom(a.element, a.h_count, a.formal_charge, False) for a in mol.atoms)
    return Molecule(atoms, mol.bonds)


def skeleton_order(mol) -> list[int]:
    """Canonical order of the heavy-atom sigma skeleton (elements only, orders ignored)."""
    atoms = mol.atoms

    def serialize(order):
        rank = {a: k for k, a in enumerate(order)}
        edges = sorted(
            tuple(sorted((rank[b.begin], rank[b.end]))) for b in mol.bonds
        )
        return (tuple(atoms[a].element for a in order), tuple(edges))

    return canonical_order(
        mol,
        atom_label=lambda i: atoms[i].element,
        bond_label=lambda bi: 1,
        serialize=serialize,
    )
