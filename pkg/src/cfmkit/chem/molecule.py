"""Core molecular graph types and valence rules."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

# Feature alphabet; anything else is "other".
ALPHABET = ("C", "N", "O", "P", "S")
OTHER = len(ALPHABET)

NEUTRAL_VALENCES = {
    "C": (4,),
    "N": (3,),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}


def element_class(symbol: str) -> int:
    """Index of `symbol` in {C, N, O, P, S, other}."""
    try:
        return ALPHABET.index(symbol)
    except ValueError:
        return OTHER


def element_label(symbol: str) -> str:
    return symbol if symbol in ALPHABET else "other"


def allowed_valences(symbol: str, charged: bool) -> tuple[int, ...]:
    """Allowed total valences (bond orders + hydrogens) for an atom.

    A +1 atom may sit one above or one below each neutral valence, which keeps
    the electron count even.
    """
    neutral = NEUTRAL_VALENCES.get(symbol)
    if neutral is None:
        return ()
    if not charged:
        return neutral
    shifted = {v + s for v in neutral for s in (-1, 1) if v + s >= 0}
    return tuple(sorted(shifted))


@dataclass(frozen=True)
class Atom:
    element: str
    h_count: int = 0
    formal_charge: int = 0
    aromatic: bool = False


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: int = 1
    in_ring: bool = False

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)

    def other(self, idx: int) -> int:
        return self.end if idx == self.begin else self.begin


@dataclass(frozen=True)
class Molecule:
    """Heavy-atom graph with per-atom hydrogen counts.

    Hydrogens are never atoms of the graph. Instances are immutable; derived
    lookups are cached on first use.
    """

    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...] = ()

    @property
    def total_charge(self) -> int:
        return sum(a.formal_charge for a in self.atoms)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def total_h(self) -> int:
        return sum(a.h_count for a in self.atoms)

    @cached_property
    def neighbors(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom: sorted tuple of (neighbor index, bond index)."""
        nbrs: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for bi, b in enumerate(self.bonds):
            nbrs[b.begin].append((b.end, bi))
            nbrs[b.end].append((b.begin, bi))
        return tuple(tuple(sorted(n)) for n in nbrs)

    @cached_property
    def bond_index(self) -> dict[tuple[int, int], int]:
        out = {}
        for bi, b in enumerate(self.bonds):
            out[(b.begin, b.end)] = bi
            out[(b.end, b.begin)] = bi
        return out

    def bond_between(self, i: int, j: int) -> Bond | None:
        bi = self.bond_index.get((i, j))
        return None if bi is None else self.bonds[bi]

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def bond_order_sum(self, i: int) -> int:
        return sum(self.bonds[bi].order for _, bi in self.neighbors[i])

    def valence(self, i: int) -> int:
        return self.bond_order_sum(i) + self.atoms[i].h_count

    def is_connected(self) -> bool:
        if not self.atoms:
            return False
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v, _ in self.neighbors[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == len(self.atoms)

    def formula(self) -> dict[str, int]:
        """Element counts including hydrogen."""
        counts: dict[str, int] = {}
        for a in self.atoms:
            counts[a.element] = counts.get(a.element, 0) + 1
        if self.total_h:
            counts["H"] = self.total_h
        return counts

    def formula_string(self) -> str:
        counts = self.formula()
        order = ["C", "H"] + sorted(k for k in counts if k not in ("C", "H"))
        parts = []
        for el in order:
            n = counts.get(el, 0)
            if n:
                parts.append(el if n == 1 else f"{el}{n}")
        return "".join(parts)

    def electron_count(self) -> int:
        """Total electrons, used for the even-electron check."""
        from .masses import ATOMIC_NUMBERS

        z = sum(ATOMIC_NUMBERS[a.element] for a in self.atoms)
        return z + self.total_h - self.total_charge

    def valence_ok(self) -> bool:
        return all(
            self.valence(i) in allowed_valences(a.element, a.formal_charge == 1)
            for i, a in enumerate(self.atoms)
        )

    def substructure(self, atom_ids, drop_bonds=()) -> "Molecule":
        """Induced subgraph on `atom_ids` (in the given order), minus `drop_bonds`."""
        remap = {old: new for new, old in enumerate(atom_ids)}
        drop = set(drop_bonds)
        atoms = tuple(self.atoms[i] for i in atom_ids)
        bonds = []
        for bi, b in enumerate(self.bonds):
            if bi in drop:
                continue
            if b.begin in remap and b.end in remap:
                bonds.append(Bond(remap[b.begin], remap[b.end], b.order, b.in_ring))
        return Molecule(atoms, tuple(bonds))

    def with_ring_flags(self) -> "Molecule":
        """Copy with `Bond.in_ring` recomputed for this graph."""
        from .rings import ring_bonds

        flags = ring_bonds(self)
        bonds = tuple(
            Bond(b.begin, b.end, b.order, bi in flags) for bi, b in enumerate(self.bonds)
        )
        return Molecule(self.atoms, bonds)
