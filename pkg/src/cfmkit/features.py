"""Sparse binary break features.

Index layout (base groups in this order, each optional):

=================  =====  ====================================================
group              size   layout
=================  =====  ====================================================
bias               1      always on
break_atom_pair    72     break type (non-ring, ring) x ion root x NL root
root_paths         2020   side (ion, NL) x break type x ring context of the
                          first path bond x 252 element tuples (36 doubles,
                          216 triples), then 4 no-path indicators
gasteiger_pair     288    break type x ion-root bin x NL-root bin (12 bins)
hydrogen_movement  10     0, +1, -1, +2, -2, +3, -3, +4, -4, other
ring_features      12     aromatic, non-aromatic, multi-ring system,
                          size 3/4/5/6/other, distance 1/2/3/4+
=================  =====  ====================================================

With quadratic features on, every unordered pair of distinct non-bias base
features gets one more index, placed after the base block in triangular order.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

from .chem.molecule import ALPHABET, element_class
from .errors import LayoutMismatch

LAYOUT_FORMAT = "cfmkit-features/1"
GROUPS = (
    ("bias", 1),
    ("break_atom_pair", 72),
    ("root_paths", 2020),
    ("gasteiger_pair", 288),
    ("hydrogen_movement", 10),
    ("ring_features", 12),
)
GROUP_NAMES = tuple(g for g, _ in GROUPS)
SYMBOLS = ALPHABET + ("other",)
N_SYMBOLS = len(SYMBOLS)
N_TUPLES = N_SYMBOLS**2 + N_SYMBOLS**3  # 252

CHARGE_EDGES = (-0.5, -0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3, 0.5)
N_CHARGE_BINS = len(CHARGE_EDGES) + 1  # 12

H_MOVES = {0: 0, 1: 1, -1: 2, 2: 3, -2: 4, 3: 5, -3: 6, 4: 7, -4: 8}
RING_SIZES = {3: 3, 4: 4, 5: 5, 6: 6}


@dataclass(frozen=True)
class FeatureLayout:
    groups: tuple[str, ...] = GROUP_NAMES
    quadratic: bool = False

    def __post_init__(self):
        if "bias" not in self.groups:
            raise ValueError("the bias feature cannot be disabled")
        unknown = set(self.groups) - set(GROUP_NAMES)
        if unknown:
            raise ValueError(f"unknown feature groups {sorted(unknown)}")
        # canonical group order
        object.__setattr__(self, "groups", tuple(g for g in GROUP_NAMES if g in self.groups))

    @cached_property
    def offsets(self) -> dict[str, int]:
        out, pos = {}, 0
        for name, size in GROUPS:
            if name in self.groups:
                out[name] = pos
                pos += size
        return out

    @cached_property
    def base_dim(self) -> int:
        return sum(size for name, size in GROUPS if name in self.groups)

    @property
    def n_quadratic(self) -> int:
        k = self.base_dim - 1
        return k * (k - 1) // 2 if self.quadratic else 0

    @property
    def total_dim(self) -> int:
        return self.base_dim + self.n_quadratic

    @property
    def version(self) -> str:
        return f"{LAYOUT_FORMAT};groups={','.join(self.groups)};quadratic={int(self.quadratic)}"

    @classmethod
    def from_version(cls, version: str) -> "FeatureLayout":
        parts = dict(p.split("=", 1) for p in version.split(";")[1:])
        if not version.startswith(LAYOUT_FORMAT + ";"):
            raise LayoutMismatch(f"unrecognised layout version {version!r}")
        return cls(tuple(parts["groups"].split(",")), parts["quadratic"] == "1")

    def group_sizes(self) -> dict[str, int]:
        return {name: size for name, size in GROUPS if name in self.groups}

    def pair_index(self, i: int, j: int) -> int:
        """Quadratic index for base features i != j (both non-bias)."""
        if i > j:
            i, j = j, i
        n = self.base_dim - 1
        a, b = i - 1, j - 1
        return self.base_dim + a * (2 * n - a - 1) // 2 + (b - a - 1)

    def pair_of(self, index: int) -> tuple[int, int]:
        """Inverse of :meth:`pair_index`."""
        r = index - self.base_dim
        n = self.base_dim - 1
        a = 0
        while r >= n - a - 1:
            r -= n - a - 1
            a += 1
        return a + 1, a + 2 + r

    def name(self, index: int) -> str:
        if index >= self.base_dim:
            i, j = self.pair_of(index)
            return f"quadratic:{self.name(i)}&{self.name(j)}"
        for group in reversed(self.groups):
            off = self.offsets[group]
            if index >= off:
                return f"{group}:{_describe(group, index - off)}"
        raise IndexError(index)


def feature_dim(layout: FeatureLayout) -> int:
    return layout.total_dim


def _describe(group: str, k: int) -> str:
    brk = ("nonring", "ring")
    if group == "bias":
        return "bias"
    if group == "break_atom_pair":
        t, rest = divmod(k, N_SYMBOLS * N_SYMBOLS)
        a, b = divmod(rest, N_SYMBOLS)
        return f"{brk[t]} {SYMBOLS[a]}-{SYMBOLS[b]}"
    if group == "root_paths":
        if k >= 2016:
            side, length = divmod(k - 2016, 2)
            return f"{('ion', 'nl')[side]} no path of length {length + 2}"
        side, rest = divmod(k, 2 * 2 * N_TUPLES)
        bt, rest = divmod(rest, 2 * N_TUPLES)
        ctx, t = divmod(rest, N_TUPLES)
        return f"{('ion', 'nl')[side]} {brk[bt]}-break {('nonring', 'ring')[ctx]}-path {_tuple_name(t)}"
    if group == "gasteiger_pair":
        t, rest = divmod(k, N_CHARGE_BINS * N_CHARGE_BINS)
        a, b = divmod(rest, N_CHARGE_BINS)
        return f"{brk[t]} ion-bin{a} nl-bin{b}"
    if group == "hydrogen_movement":
        inv = {v: u for u, v in H_MOVES.items()}
        return "other" if k == 9 else f"{inv[k]:+d}"
    if group == "ring_features":
        names = ["aromatic", "nonaromatic", "multiple ring system", "size 3", "size 4", "size 5",
                 "size 6", "size other", "distance 1", "distance 2", "distance 3", "distance 4+"]
        return names[k]
    raise KeyError(group)


def _tuple_name(t: int) -> str:
    if t < N_SYMBOLS**2:
        a, b = divmod(t, N_SYMBOLS)
        return f"{SYMBOLS[a]}-{SYMBOLS[b]}"
    t -= N_SYMBOLS**2
    a, rest = divmod(t, N_SYMBOLS**2)
    b, c = divmod(rest, N_SYMBOLS)
    return f"{SYMBOLS[a]}-{SYMBOLS[b]}-{SYMBOLS[c]}"


@dataclass(frozen=True)
class SparseFeatureVector:
    active_indices: tuple[int, ...]
    layout_version: str

    def __len__(self):
        return len(self.active_indices)


def charge_bin(q: float) -> int:
    return bisect.bisect_right(CHARGE_EDGES, q)


def _pick_root(mol, roots):
    # lexicographically smallest element, then lowest atom index
    return min(roots, key=lambda a: (element_class(mol.atoms[a].element), a))


def _paths(mol, root, side, blocked):
    """Simple paths of 2 and 3 atoms from `root` within `side`, avoiding `blocked` bonds."""
    doubles, triples = [], []
    for v, b1 in mol.neighbors[root]:
        if b1 in blocked or v not in side:
            continue
        ring = mol.bonds[b1].in_ring
        doubles.append(((root, v), ring))
        for w, b2 in mol.neighbors[v]:
            if b2 in blocked or w not in side or w == root:
                continue
            triples.append(((root, v, w), ring))
    return doubles, triples


def _path_features(mol, roots, side, blocked, side_idx, ring_break, off, out):
    side_set = set(side)
    any_double = any_triple = False
    bt = 1 if ring_break else 0
    for r in roots:
        doubles, triples = _paths(mol, r, side_set, blocked)
        for path, ring in doubles + triples:
            any_double |= len(path) == 2
            any_triple |= len(path) == 3
            cls = [element_class(mol.atoms[a].element) for a in path]
            if len(cls) == 2:
                t = cls[0] * N_SYMBOLS + cls[1]
            else:
                t = N_SYMBOLS**2 + (cls[0] * N_SYMBOLS + cls[1]) * N_SYMBOLS + cls[2]
            out.add(off + ((side_idx * 2 + bt) * 2 + int(ring)) * N_TUPLES + t)
    if not any_double:
        out.add(off + 2016 + side_idx * 2)
    if not any_triple:
        out.add(off + 2016 + side_idx * 2 + 1)


def compute_features(parent, child, neutral_loss, meta, charges, layout: FeatureLayout) -> SparseFeatureVector:
    """Binary features of the break `parent` -> `child` described by `meta`.

    `charges` are per-atom Gasteiger charges of the parent structure.
    """
    mol = parent.structure
    off = layout.offsets
    ring_break = bool(meta.is_ring_break)
    active = {0}
    ion_root = _pick_root(mol, meta.ion_root_atoms)
    nl_root = _pick_root(mol, meta.nl_root_atoms)
    if "break_atom_pair" in off:
        a = element_class(mol.atoms[ion_root].element)
        b = element_class(mol.atoms[nl_root].element)
        active.add(off["break_atom_pair"] + (int(ring_break) * N_SYMBOLS + a) * N_SYMBOLS + b)
    if "root_paths" in off:
        blocked = set(meta.broken_bonds)
        _path_features(mol, meta.ion_root_atoms, meta.ion_atoms, blocked, 0, ring_break,
                       off["root_paths"], active)
        _path_features(mol, meta.nl_root_atoms, meta.nl_atoms, blocked, 1, ring_break,
                       off["root_paths"], active)
    if "gasteiger_pair" in off:
        qa, qb = charge_bin(charges[ion_root]), charge_bin(charges[nl_root])
        active.add(off["gasteiger_pair"] + (int(ring_break) * N_CHARGE_BINS + qa) * N_CHARGE_BINS + qb)
    if "hydrogen_movement" in off:
        active.add(off["hydrogen_movement"] + H_MOVES.get(meta.hydrogen_movement, 9))
    if ring_break and "ring_features" in off:
        o = off["ring_features"]
        active.add(o + (0 if meta.ring_aromatic else 1))
        if meta.ring_in_multi_system:
            active.add(o + 2)
        active.add(o + RING_SIZES.get(meta.ring_size, 7))
        active.add(o + 7 + min(meta.bond_distance, 4))
    base = sorted(active)
    if layout.quadratic:
        nonbias = base[1:]
        base = base + [layout.pair_index(i, j) for i, j in combinations(nonbias, 2)]
    return SparseFeatureVector(tuple(base), layout.version)


def graph_features(graph, layout: FeatureLayout) -> list[SparseFeatureVector]:
    """Feature vectors for every edge of `graph`, in edge order."""
    from .chem.gasteiger import atom_charges

    charges = {}
    out = []
    for e in graph.edges:
        parent = graph.fragments[e.parent]
        if e.parent not in charges:
            charges[e.parent] = atom_charges(parent.structure)
        out.append(compute_features(parent, graph.fragments[e.child], e.neutral_loss, e.meta,
                                    charges[e.parent], layout))
    return out


def dump_feature_names(layout: FeatureLayout) -> str:
    """Versioned index -> name listing of the base features."""
    lines = [f"# {layout.version}", f"# base_dim {layout.base_dim} total_dim {layout.total_dim}"]
    if layout.quadratic:
        lines.append(f"# quadratic pairs of base features 1..{layout.base_dim - 1} start at {layout.base_dim}")
    lines += [f"{i}\t{layout.name(i)}" for i in range(layout.base_dim)]
    return "\n".join(lines) + "\n"
