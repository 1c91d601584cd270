"""Ring perception: smallest set of smallest rings via Horton candidates."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class RingInfo:
    # each ring is a cyclic atom sequence; ring_bonds[k] the matching bond ids
    rings: tuple[tuple[int, ...], ...]
    ring_bonds: tuple[tuple[int, ...], ...]
    ring_system_id: tuple[int, ...]
    aromatic_flags: tuple[bool, ...]

    def rings_of_bond(self, bond_id: int) -> list[int]:
        return [k for k, bonds in enumerate(self.ring_bonds) if bond_id in bonds]

    def system_size(self, ring_idx: int) -> int:
        """Number of rings sharing the ring system of ring `ring_idx`."""
        sys_id = self.ring_system_id[self.rings[ring_idx][0]]
        return sum(1 for r in self.rings if self.ring_system_id[r[0]] == sys_id)


def ring_bonds(mol) -> set[int]:
    """Bond ids lying on at least one cycle (i.e. non-bridge bonds)."""
    n = mol.n_atoms
    disc = [-1] * n
    low = [0] * n
    bridges = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(mol.neighbors[root]))]
        while stack:
            u, parent_bond, it = stack[-1]
            advanced = False
            for v, bi in it:
                if bi == parent_bond:
                    continue
                if disc[v] == -1:
                    disc[v] = low[v] = timer
                    timer += 1
                    stack.append((v, bi, iter(mol.neighbors[v])))
                    advanced = True
                    break
                low[u] = min(low[u], disc[v])
            if not advanced:
                stack.pop()
                if stack:
                    p = stack[-1][0]
                    low[p] = min(low[p], low[u])
                    if low[u] > disc[p]:
                        bridges.add(parent_bond)
    return set(range(len(mol.bonds))) - bridges


def _bfs_tree(mol, src, allowed_bonds):
    parent = {src: (None, None)}
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v, bi in mol.neighbors[u]:
            if bi in allowed_bonds and v not in dist:
                dist[v] = dist[u] + 1
                parent[v] = (u, bi)
                q.append(v)
    return parent, dist


def _path(parent, node):
    atoms, bonds = [node], []
    while parent[node][0] is not None:
        prev, bi = parent[node]
        bonds.append(bi)
        atoms.append(prev)
        node = prev
    return atoms[::-1], bonds[::-1]


def find_rings(mol) -> RingInfo:
    """Smallest set of smallest rings, ring systems and ring aromaticity."""
    cyc = ring_bonds(mol)
    n_ring_atoms = {a for bi in cyc for a in mol.bonds[bi].endpoints}
    system = _ring_systems(mol, cyc)
    if not cyc:
        return RingInfo((), (), tuple(system), ())

    # Horton candidate cycles: for each vertex x and edge (u, v), P(x,u)+uv+P(v,x)
    candidates = {}
    trees = {x: _bfs_tree(mol, x, cyc) for x in sorted(n_ring_atoms)}
    for x, (parent, dist) in trees.items():
        for bi in sorted(cyc):
            b = mol.bonds[bi]
            u, v = b.begin, b.end
            if u not in dist or v not in dist:
                continue
            pu_atoms, pu_bonds = _path(parent, u)
            pv_atoms, pv_bonds = _path(parent, v)
            if set(pu_atoms) & set(pv_atoms) != {x}:
                continue
            if bi in pu_bonds or bi in pv_bonds:
                continue
            bond_set = frozenset(pu_bonds + pv_bonds + [bi])
            if len(bond_set) < 3:
                continue
            atoms = tuple(pu_atoms + pv_atoms[:0:-1])
            candidates.setdefault(bond_set, atoms)

    n_components = len({system[a] for a in n_ring_atoms})
    ring_atom_count = len(n_ring_atoms)
    target = len(cyc) - ring_atom_count + n_components

    ordered = sorted(candidates.items(), key=lambda kv: (len(kv[0]), sorted(kv[0])))
    basis_rows: list[int] = []  # GF(2) row-reduced bitmasks keyed by pivot
    pivots: dict[int, int] = {}
    rings, rbonds = [], []
    for bond_set, atoms in ordered:
        if len(rings) == target:
            break
        vec = 0
        for bi in bond_set:
            vec |= 1 << bi
        while vec:
            top = vec.bit_length() - 1
            if top not in pivots:
                break
            vec ^= pivots[top]
        if not vec:
            continue
        pivots[vec.bit_length() - 1] = vec
        basis_rows.append(vec)
        rings.append(_normalise_cycle(atoms))
        rbonds.append(tuple(_cycle_bonds(mol, rings[-1])))

    aromatic = tuple(all(mol.atoms[a].aromatic for a in r) for r in rings)
    return RingInfo(tuple(rings), tuple(rbonds), tuple(system), aromatic)


def _normalise_cycle(atoms):
    k = atoms.index(min(atoms))
    rot = atoms[k:] + atoms[:k]
    if len(rot) > 2 and rot[-1] < rot[1]:
        rot = (rot[0],) + tuple(reversed(rot[1:]))
    return tuple(rot)


def _cycle_bonds(mol, ring):
    n = len(ring)
    return [mol.bond_index[(ring[i], ring[(i + 1) % n])] for i in range(n)]


def _ring_systems(mol, cyc):
    """Label atoms by connected component of the ring-bond subgraph; -1 if acyclic."""
    label = [-1] * mol.n_atoms
    next_id = 0
    for start in range(mol.n_atoms):
        if label[start] != -1:
            continue
        if not any(bi in cyc for _, bi in mol.neighbors[start]):
            continue
        label[start] = next_id
        stack = [start]
        while stack:
            u = stack.pop()
            for v, bi in mol.neighbors[u]:
                if bi in cyc and label[v] == -1:
                    label[v] = next_id
                    stack.append(v)
        next_id += 1
    return label
