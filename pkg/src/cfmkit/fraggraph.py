"""Fragmentation graph enumeration for singly protonated molecules.

A break removes one non-ring bond, or two bonds of the same ring, splitting a
charged fragment into a charged child and a neutral loss. Pi bonds and
hydrogens are free to rearrange on each side as long as every atom ends up at
an allowed valence, so each side admits a set of feasible hydrogen counts.
One child is emitted per feasible split of the parent's hydrogens.

Every fragment keeps the sigma skeleton of the root restricted to its atoms,
so fragment structures are built from ``(skeleton, hydrogen count)`` alone:
the skeleton is put in canonical order and the first valid bond-order /
hydrogen assignment found for that order is used. Isomorphic skeletons with
equal hydrogen counts therefore give identical fragments.
"""
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

from .chem.canon import canonical_key, skeleton_order
from .chem.masses import monoisotopic_mass
from .chem.molecule import Atom, Bond, Molecule, allowed_valences
from .chem.rings import find_rings, ring_bonds
from .errors import GraphTooLarge, NoProtonationSite

log = logging.getLogger(__name__)

DEFAULT_FRAGMENT_CAP = 50_000
MAX_BOND_ORDER = 3


@dataclass(frozen=True)
class Fragment:
    id: int
    structure: Molecule
    mass: float
    canonical_key: str
    atom_ids: tuple[int, ...]  # root atom index of each structure atom
    depth: int = 0


@dataclass(frozen=True)
class BreakMeta:
    """How a child was cut out of its parent. Atom/bond ids index the parent."""

    broken_bonds: tuple[int, ...]
    is_ring_break: bool
    hydrogen_movement: int
    ion_root_atoms: tuple[int, ...]
    nl_root_atoms: tuple[int, ...]
    ion_atoms: tuple[int, ...]
    nl_atoms: tuple[int, ...]
    ring_size: int | None = None
    ring_aromatic: bool | None = None
    ring_in_multi_system: bool | None = None
    bond_distance: int | None = None


@dataclass(frozen=True)
class Edge:
    parent: int
    child: int
    neutral_loss: Molecule
    meta: BreakMeta
    neutral_loss_key: str = ""


@dataclass
class FragmentationGraph:
    fragments: list[Fragment]
    edges: list[Edge]
    max_depth: int
    root_id: int = 0
    edge_collisions: int = 0
    _children: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        kids: dict[int, list[int]] = {}
        for k, e in enumerate(self.edges):
            kids.setdefault(e.parent, []).append(k)
        self._children = kids

    @property
    def n_fragments(self) -> int:
        return len(self.fragments)

    def child_edges(self, parent_id: int) -> list[int]:
        return self._children.get(parent_id, [])

    def masses(self):
        return [f.mass for f in self.fragments]


# ---------------------------------------------------------------------------
# hydrogen allocation


def _valences(element, charged, degree):
    vals = allowed_valences(element, charged)
    if vals:
        return vals
    # unparameterised elements keep their sigma valence and never carry charge
    return () if charged else (degree,)


def _bfs_bond_order(n, bonds):
    """Bond processing order that keeps the DP frontier to roughly one BFS layer."""
    adj = [[] for _ in range(n)]
    for u, v in bonds:
        adj[u].append(v)
        adj[v].append(u)
    pos = [-1] * n
    order = 0
    for s in range(n):
        if pos[s] != -1:
            continue
        pos[s] = order
        order += 1
        q = deque([s])
        while q:
            u = q.popleft()
            for v in sorted(adj[u]):
                if pos[v] == -1:
                    pos[v] = order
                    order += 1
                    q.append(v)
    return sorted(range(len(bonds)), key=lambda k: (max(pos[bonds[k][0]], pos[bonds[k][1]]),
                                                    min(pos[bonds[k][0]], pos[bonds[k][1]])))


@lru_cache(maxsize=100_000)
def _allocate(elements: tuple[str, ...], bonds: tuple[tuple[int, int], ...], charged: bool):
    """Map each feasible total H count to one witness assignment.

    Exact dynamic programme over bonds in order: the state holds the pi
    electrons already placed on atoms that still have unprocessed bonds, plus
    whether the charge has been placed. An atom is closed out at its last bond,
    choosing a valence (and, for the charged side, optionally the charge).

    Witness: (bond orders, per-atom h counts, index of charged atom or -1).
    """
    n = len(elements)
    deg = [0] * n
    last = [-1] * n
    schedule = _bfs_bond_order(n, bonds)
    for step, k in enumerate(schedule):
        u, v = bonds[k]
        deg[u] += 1
        deg[v] += 1
        last[u] = step
        last[v] = step
    options = []
    maxpi = []
    for i, el in enumerate(elements):
        neutral = _valences(el, False, deg[i])
        plus = _valences(el, True, deg[i]) if charged else ()
        top = max(neutral + plus, default=-1)
        maxpi.append(min(top - deg[i], 2 * deg[i]))
        options.append((neutral, plus))
    if any(m < 0 for m in maxpi):
        return {}

    def close(i, p, charge_used):
        neutral, plus = options[i]
        out = []
        for val in neutral:
            h = val - deg[i] - p
            if h >= 0:
                out.append((h, False))
        if not charge_used:
            for val in plus:
                h = val - deg[i] - p
                if h >= 0:
                    out.append((h, True))
        return out

    # state key: (pi used per atom, -1 once closed; charge placed) -> {H: witness}
    # witness is a linked list of events (prev, event)
    start = (tuple(0 for _ in range(n)), False)
    states = {start: {0: None}}

    def close_atom(states, i):
        out = {}
        for (used, cu), hmap in states.items():
            p = used[i]
            for h, chg in close(i, p, cu):
                nused = used[:i] + (-1,) + used[i + 1:]
                key = (nused, cu or chg)
                bucket = out.setdefault(key, {})
                for H, wit in hmap.items():
                    bucket.setdefault(H + h, (wit, ("a", i, h, chg)))
        return out

    for i in range(n):
        if last[i] == -1:
            states = close_atom(states, i)

    for step, k in enumerate(schedule):
        u, v = bonds[k]
        nxt = {}
        for (used, cu), hmap in states.items():
            for e in range(MAX_BOND_ORDER):
                if used[u] + e > maxpi[u] or used[v] + e > maxpi[v]:
                    break
                nused = list(used)
                nused[u] += e
                nused[v] += e
                key = (tuple(nused), cu)
                bucket = nxt.setdefault(key, {})
                for H, wit in hmap.items():
                    bucket.setdefault(H, (wit, ("b", k, e + 1)))
        states = nxt
        if last[u] == step:
            states = close_atom(states, u)
        if last[v] == step:
            states = close_atom(states, v)

    result = {}
    for (used, cu), hmap in states.items():
        if cu != charged:
            continue
        for H, wit in hmap.items():
            if H not in result:
                result[H] = _unwind(wit, n, len(bonds))
    return dict(sorted(result.items()))


def _unwind(wit, n_atoms, n_bonds):
    orders = [1] * n_bonds
    hs = [0] * n_atoms
    charge_at = -1
    while wit is not None:
        wit, ev = wit
        if ev[0] == "b":
            orders[ev[1]] = ev[2]
        else:
            hs[ev[1]] = ev[2]
            if ev[3]:
                charge_at = ev[1]
    return tuple(orders), tuple(hs), charge_at


class _Skeleton:
    """A fragment side in canonical skeleton order, relative to the root."""

    __slots__ = ("root_ids", "elements", "bonds", "aromatic", "bond_rings")

    def __init__(self, root_ids, elements, bonds, aromatic, bond_rings):
        self.root_ids = root_ids
        self.elements = elements
        self.bonds = bonds
        self.aromatic = aromatic
        self.bond_rings = bond_rings

    @property
    def key(self):
        return (self.elements, self.bonds)


class _SideBuilder:
    """Caches skeleton ordering, allocations and structures per root-atom subset."""

    def __init__(self, root: Molecule):
        self.root = root
        self._skel: dict[frozenset, _Skeleton] = {}
        self._struct: dict[tuple, tuple[Molecule, str]] = {}

    def skeleton(self, root_ids: frozenset) -> _Skeleton:
        sk = self._skel.get(root_ids)
        if sk is not None:
            return sk
        ids = sorted(root_ids)
        sub = self.root.substructure(ids)
        order = skeleton_order(sub)
        rank = {a: r for r, a in enumerate(order)}
        bonds = tuple(sorted(tuple(sorted((rank[b.begin], rank[b.end]))) for b in sub.bonds))
        elements = tuple(sub.atoms[a].element for a in order)
        aromatic = tuple(sub.atoms[a].aromatic for a in order)
        canon_root_ids = tuple(ids[a] for a in order)
        probe = Molecule(tuple(Atom(e) for e in elements), tuple(Bond(u, v) for u, v in bonds))
        flags = ring_bonds(probe)
        bond_rings = tuple(k in flags for k in range(len(bonds)))
        sk = _Skeleton(canon_root_ids, elements, bonds, aromatic, bond_rings)
        self._skel[root_ids] = sk
        return sk

    def feasible(self, sk: _Skeleton, charged: bool) -> dict:
        return _allocate(sk.elements, sk.bonds, charged)

    def structure(self, sk: _Skeleton, h_total: int, charged: bool) -> tuple[Molecule, str]:
        """The representative structure of `sk` carrying `h_total` hydrogens, and its key."""
        ck = (sk.key, sk.aromatic, h_total, charged)
        hit = self._struct.get(ck)
        if hit is not None:
            return hit
        orders, hs, charge_at = _allocate(sk.elements, sk.bonds, charged)[h_total]
        atoms = tuple(
            Atom(el, hs[i], 1 if i == charge_at else 0, sk.aromatic[i])
            for i, el in enumerate(sk.elements)
        )
        bonds = tuple(
            Bond(u, v, orders[k], sk.bond_rings[k]) for k, (u, v) in enumerate(sk.bonds)
        )
        mol = Molecule(atoms, bonds)
        hit = (mol, canonical_key(mol))
        self._struct[ck] = hit
        return hit


def feasible_hydrogen_counts(side: Molecule, carries_charge: bool) -> set[int]:
    """Total hydrogen counts that `side`'s sigma skeleton can carry.

    Bond orders (1..3) and per-atom hydrogens are free; each atom must reach an
    allowed valence, with exactly one +1 atom when `carries_charge`.
    """
    order = skeleton_order(side) if side.n_atoms else []
    rank = {a: r for r, a in enumerate(order)}
    elements = tuple(side.atoms[a].element for a in order)
    bonds = tuple(sorted(tuple(sorted((rank[b.begin], rank[b.end]))) for b in side.bonds))
    return set(_allocate(elements, bonds, carries_charge))


# ---------------------------------------------------------------------------
# breaks


def _components(mol: Molecule, removed: set[int]) -> list[list[int]]:
    seen = [False] * mol.n_atoms
    comps = []
    for s in range(mol.n_atoms):
        if seen[s]:
            continue
        comp = [s]
        seen[s] = True
        stack = [s]
        while stack:
            u = stack.pop()
            for v, bi in mol.neighbors[u]:
                if bi not in removed and not seen[v]:
                    seen[v] = True
                    comp.append(v)
                    stack.append(v)
        comps.append(sorted(comp))
    return comps


def _candidate_breaks(mol: Molecule):
    """Yield (broken bond ids, ring meta or None) in a deterministic order."""
    info = find_rings(mol)
    for bi, b in enumerate(mol.bonds):
        if not b.in_ring:
            yield (bi,), None
    seen = set()
    for r, ring in enumerate(info.ring_bonds):
        size = len(ring)
        aromatic = info.aromatic_flags[r]
        multi = info.system_size(r) > 1
        for i in range(size):
            for j in range(i + 1, size):
                pair = tuple(sorted((ring[i], ring[j])))
                if pair in seen:
                    continue
                seen.add(pair)
                dist = min(j - i, size - (j - i))
                yield pair, (size, aromatic, multi, dist)


def enumerate_child_breaks(parent: Fragment) -> list[tuple[Fragment, Molecule, BreakMeta]]:
    """Every (child, neutral loss, break metadata) obtainable from `parent` in one break.

    Children are returned with id -1; only `build_graph` assigns ids.
    """
    builder = _SideBuilder(parent.structure)
    out = []
    for child, key, _, loss, _, meta in _child_breaks(parent, builder, list(range(parent.structure.n_atoms))):
        out.append((Fragment(-1, child, monoisotopic_mass(child), key, (), parent.depth + 1), loss, meta))
    return out


def _child_breaks(parent: Fragment, builder: _SideBuilder, local_to_root: list[int]):
    mol = parent.structure
    total_h = mol.total_h
    out = []
    for broken, ring_meta in _candidate_breaks(mol):
        comps = _components(mol, set(broken))
        if len(comps) != 2:
            continue
        first = mol.bonds[broken[0]].begin
        side_a, side_b = (comps[0], comps[1]) if first in comps[0] else (comps[1], comps[0])
        sk_a = builder.skeleton(frozenset(local_to_root[i] for i in side_a))
        sk_b = builder.skeleton(frozenset(local_to_root[i] for i in side_b))
        for ion, nl, sk_ion, sk_nl in ((side_a, side_b, sk_a, sk_b), (side_b, side_a, sk_b, sk_a)):
            ion_feasible = builder.feasible(sk_ion, True)
            nl_feasible = builder.feasible(sk_nl, False)
            if not ion_feasible or not nl_feasible:
                continue
            ion_set = set(ion)
            ion_roots = tuple(sorted({a for bi in broken for a in mol.bonds[bi].endpoints if a in ion_set}))
            nl_roots = tuple(sorted({a for bi in broken for a in mol.bonds[bi].endpoints if a not in ion_set}))
            h_before = sum(mol.atoms[i].h_count for i in ion)
            for h_ion in ion_feasible:
                h_nl = total_h - h_ion
                if h_nl not in nl_feasible:
                    continue
                child, child_key = builder.structure(sk_ion, h_ion, True)
                loss, loss_key = builder.structure(sk_nl, h_nl, False)
                meta = BreakMeta(
                    broken_bonds=tuple(broken),
                    is_ring_break=ring_meta is not None,
                    hydrogen_movement=h_ion - h_before,
                    ion_root_atoms=ion_roots,
                    nl_root_atoms=nl_roots,
                    ion_atoms=tuple(ion),
                    nl_atoms=tuple(nl),
                    ring_size=ring_meta[0] if ring_meta else None,
                    ring_aromatic=ring_meta[1] if ring_meta else None,
                    ring_in_multi_system=ring_meta[2] if ring_meta else None,
                    bond_distance=ring_meta[3] if ring_meta else None,
                )
                out.append((child, child_key, sk_ion.root_ids, loss, loss_key, meta))
    return out


def make_fragment(mol: Molecule, fid: int = 0, depth: int = 0) -> Fragment:
    mol = mol.with_ring_flags()
    return Fragment(fid, mol, monoisotopic_mass(mol), canonical_key(mol), tuple(range(mol.n_atoms)), depth)


def build_graph(root: Molecule, depth: int, cap: int = DEFAULT_FRAGMENT_CAP) -> FragmentationGraph:
    """Breadth-first fragmentation of `root` (a +1 ion) down to `depth` breaks."""
    if root.total_charge != 1:
        raise ValueError("root must carry a single positive charge")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    root_frag = make_fragment(root)
    builder = _SideBuilder(root_frag.structure)
    fragments = [root_frag]
    by_key = {root_frag.canonical_key: 0}
    edges: list[Edge] = []
    edge_seen: set[tuple[int, int]] = set()
    collisions = 0
    frontier = deque([0])
    while frontier:
        pid = frontier.popleft()
        parent = fragments[pid]
        if parent.depth >= depth:
            continue
        for child, child_key, root_ids, loss, loss_key, meta in _child_breaks(parent, builder, list(parent.atom_ids)):
            cid = by_key.get(child_key)
            if cid is None:
                cid = len(fragments)
                if cid >= cap:
                    raise GraphTooLarge(f"fragmentation graph exceeds {cap} fragments")
                by_key[child_key] = cid
                fragments.append(
                    Fragment(cid, child, monoisotopic_mass(child), child_key, root_ids, parent.depth + 1)
                )
                frontier.append(cid)
            if (pid, cid) in edge_seen:
                collisions += 1
                continue
            edge_seen.add((pid, cid))
            edges.append(Edge(pid, cid, loss, meta, loss_key))
    if collisions:
        log.debug("%d duplicate parent/child breaks merged", collisions)
    return FragmentationGraph(fragments, edges, depth, 0, collisions)


# ---------------------------------------------------------------------------
# protonation


def protonate_all(neutral: Molecule) -> list[Molecule]:
    """Every distinct [M+H]+ obtainable by adding H+ to one heavy atom, sorted by key."""
    if neutral.total_charge != 0:
        raise ValueError("protonate expects a neutral molecule")
    found = {}
    for i, atom in enumerate(neutral.atoms):
        val = neutral.valence(i) + 1
        if val not in allowed_valences(atom.element, True):
            continue
        atoms = list(neutral.atoms)
        atoms[i] = Atom(atom.element, atom.h_count + 1, 1, atom.aromatic)
        mol = Molecule(tuple(atoms), neutral.bonds)
        found.setdefault(canonical_key(mol), mol)
    if not found:
        raise NoProtonationSite("no atom can accept a proton under the valence rules")
    return [found[k] for k in sorted(found)]


def protonate(neutral: Molecule) -> Molecule:
    """The protonated form with the lexicographically smallest canonical key."""
    return protonate_all(neutral)[0]


# ---------------------------------------------------------------------------
# dump format


def dump_graph(graph: FragmentationGraph) -> str:
    lines = [f"{f.id} {f.mass:.6f} {f.canonical_key}" for f in graph.fragments]
    lines.append("")
    lines += [f"{e.parent} {e.child} {e.neutral_loss_key}" for e in graph.edges]
    return "\n".join(lines) + "\n"
