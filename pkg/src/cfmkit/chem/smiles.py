"""Parser and writer for the SMILES dialect used throughout cfmkit.

Supported: organic-subset atoms (B-free: C N O P S F Cl Br I), aromatic
lowercase c n o p s, bracket atoms with an explicit H count and a single
``+`` charge, bonds ``- = # :``, ring-closure digits and ``%nn``, and
parenthesised branches. Stereo marks, isotopes, negative charges and
dot-separated fragments are rejected.

Aromatic systems are Kekulized on input. The aromatic flag survives on the
atoms, and the writer emits those atoms in lowercase with explicit bond
symbols so that the Kekulé structure round-trips.
"""
from __future__ import annotations

import sys

import networkx as nx

from ..errors import (
    KekulizationError,
    MultipleCharges,
    UnbalancedParenthesis,
    UnclosedRingBond,
    UnsupportedToken,
    ValenceViolation,
)
from .molecule import NEUTRAL_VALENCES, Atom, Bond, Molecule, allowed_valences

ORGANIC = ("Cl", "Br", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("c", "n", "o", "p", "s")
BOND_SYMBOLS = {"-": 1, "=": 2, "#": 3, ":": "ar"}
_ELEMENTS = set(NEUTRAL_VALENCES)


class _RawAtom:
    __slots__ = ("element", "aromatic", "h", "charge", "bracket")

    def __init__(self, element, aromatic, h=None, charge=0, bracket=False):
        self.element = element
        self.aromatic = aromatic
        self.h = h
        self.charge = charge
        self.bracket = bracket


def _parse_bracket(text, start):
    end = text.find("]", start)
    if end < 0:
        raise UnsupportedToken("[", start)
    body = text[start + 1:end]
    pos = 0
    if body[:1].isdigit():
        raise UnsupportedToken(body, start)  # isotope
    symbol = None
    for cand in ("Cl", "Br", "C", "N", "O", "P", "S", "F", "I", "c", "n", "o", "p", "s"):
        if body.startswith(cand):
            symbol = cand
            break
    if symbol is None:
        # any other element symbol is carried as "other"
        sym = body[:1]
        if not sym.isupper():
            raise UnsupportedToken(body, start)
        if body[1:2].islower():
            sym = body[:2]
        if sym == "H":
            raise UnsupportedToken(body, start)
        symbol = sym
    pos = len(symbol)
    h = 0
    if body[pos:pos + 1] == "H":
        pos += 1
        digits = ""
        while pos < len(body) and body[pos].isdigit():
            digits += body[pos]
            pos += 1
        h = int(digits) if digits else 1
    charge = 0
    rest = body[pos:]
    if rest == "":
        pass
    elif rest in ("+", "+1"):
        charge = 1
    elif rest.startswith("+"):
        raise MultipleCharges(f"charge {rest!r} at position {start}: only a single +1 site is supported")
    else:
        raise UnsupportedToken(rest, start + 1 + pos)
    aromatic = symbol.islower()
    element = symbol.capitalize() if aromatic else symbol
    return _RawAtom(element, aromatic, h, charge, True), end + 1


def parse_smiles(text: str) -> Molecule:
    """Parse `text` into a Kekulized :class:`Molecule` with implicit H filled."""
    atoms: list[_RawAtom] = []
    bonds: list[list] = []  # [a, b, order or "ar" or None]
    stack: list[int] = []
    ring_open: dict[int, tuple[int, object, int]] = {}
    prev: int | None = None
    pending_bond = None
    pending_pos = -1
    i = 0
    n = len(text)
    if not text:
        raise UnsupportedToken("", 0)
    while i < n:
        ch = text[i]
        if ch in BOND_SYMBOLS:
            if pending_bond is not None or prev is None:
                raise UnsupportedToken(ch, i)
            pending_bond = BOND_SYMBOLS[ch]
            pending_pos = i
            i += 1
            continue
        if ch == "(":
            if prev is None:
                raise UnbalancedParenthesis(f"branch opened before any atom at position {i}")
            stack.append(prev)
            i += 1
            continue
        if ch == ")":
            if not stack:
                raise UnbalancedParenthesis(f"unmatched ')' at position {i}")
            if pending_bond is not None:
                raise UnsupportedToken(text[pending_pos], pending_pos)
            prev = stack.pop()
            i += 1
            continue
        if ch.isdigit() or ch == "%":
            if prev is None:
                raise UnsupportedToken(ch, i)
            if ch == "%":
                num = text[i + 1:i + 3]
                if len(num) != 2 or not num.isdigit():
                    raise UnsupportedToken(text[i:i + 3], i)
                label = int(num)
                i += 3
            else:
                label = int(ch)
                i += 1
            if label in ring_open:
                other, order, _ = ring_open.pop(label)
                if pending_bond is not None and order is not None and pending_bond != order:
                    raise UnsupportedToken(str(label), i - 1)
                order = pending_bond if pending_bond is not None else order
                if other == prev or _has_bond(bonds, other, prev):
                    raise UnsupportedToken(str(label), i - 1)
                bonds.append([other, prev, order])
            else:
                ring_open[label] = (prev, pending_bond, i - 1)
            pending_bond = None
            continue
        if ch == "[":
            atom, i_next = _parse_bracket(text, i)
            start = i
            i = i_next
        else:
            sym = None
            for cand in ORGANIC + AROMATIC_ORGANIC:
                if text.startswith(cand, i):
                    sym = cand
                    break
            if sym is None:
                raise UnsupportedToken(ch, i)
            start = i
            i += len(sym)
            aromatic = sym.islower()
            atom = _RawAtom(sym.capitalize() if aromatic else sym, aromatic)
        atoms.append(atom)
        idx = len(atoms) - 1
        if prev is not None:
            bonds.append([prev, idx, pending_bond])
        pending_bond = None
        prev = idx
    if stack:
        raise UnbalancedParenthesis("unclosed '(' at end of input")
    if ring_open:
        label, (_, _, pos) = next(iter(ring_open.items()))
        raise UnclosedRingBond(f"ring bond {label} opened at position {pos} is never closed")
    if pending_bond is not None:
        raise UnsupportedToken(text[pending_pos], pending_pos)
    if sum(1 for a in atoms if a.charge) > 1:
        raise MultipleCharges("more than one charged atom")
    return _finalise(atoms, bonds)


def _has_bond(bonds, a, b):
    return any((x == a and y == b) or (x == b and y == a) for x, y, _ in bonds)


def _finalise(raw: list[_RawAtom], raw_bonds: list[list]) -> Molecule:
    n = len(raw)
    # resolve unspecified bonds: aromatic between two aromatic atoms, else single
    for b in raw_bonds:
        if b[2] is None:
            b[2] = "ar" if raw[b[0]].aromatic and raw[b[1]].aromatic else 1
    sigma = [0] * n  # bond-order sum counting aromatic bonds as 1
    ar_deg = [0] * n
    for a, c, order in raw_bonds:
        o = 1 if order == "ar" else order
        sigma[a] += o
        sigma[c] += o
        if order == "ar":
            ar_deg[a] += 1
            ar_deg[c] += 1

    needs_pi = [False] * n
    for i, atom in enumerate(raw):
        if not ar_deg[i]:
            continue
        allowed = allowed_valences(atom.element, atom.charge == 1)
        if atom.bracket:
            s = sigma[i] + atom.h
            needs_pi[i] = s not in allowed and (s + 1) in allowed
        elif atom.element == "C":
            # implicit H makes room for the pi bond unless an exocyclic double bond took it
            needs_pi[i] = sigma[i] <= 3
        else:
            needs_pi[i] = (sigma[i] + 1) in allowed

    orders = [b[2] for b in raw_bonds]
    pi_atoms = [i for i in range(n) if needs_pi[i]]
    if pi_atoms:
        g = nx.Graph()
        g.add_nodes_from(pi_atoms)
        for k, (a, c, order) in enumerate(raw_bonds):
            if order == "ar" and needs_pi[a] and needs_pi[c]:
                g.add_edge(a, c, k=k)
        matching = nx.max_weight_matching(g, maxcardinality=True)
        if 2 * len(matching) != len(pi_atoms):
            raise KekulizationError("cannot assign alternating bonds to the aromatic system")
        for a, c in matching:
            orders[g.edges[a, c]["k"]] = 2
    orders = [1 if o == "ar" else o for o in orders]

    bond_sum = [0] * n
    for (a, c, _), o in zip(raw_bonds, orders):
        bond_sum[a] += o
        bond_sum[c] += o

    atoms = []
    for i, r in enumerate(raw):
        allowed = allowed_valences(r.element, r.charge == 1)
        if r.bracket:
            h = r.h
        elif not allowed:
            h = 0
        else:
            fits = [v for v in allowed if v >= bond_sum[i]]
            if not fits:
                raise ValenceViolation(
                    f"atom {i} ({r.element}) has bond order sum {bond_sum[i]} above every allowed valence"
                )
            h = fits[0] - bond_sum[i]
        if allowed and bond_sum[i] + h not in allowed:
            raise ValenceViolation(
                f"atom {i} ({r.element}{'+' if r.charge else ''}) has valence {bond_sum[i] + h}; "
                f"allowed {list(allowed)}"
            )
        atoms.append(Atom(r.element, h, r.charge, r.aromatic))

    bonds = tuple(Bond(a, c, o) for (a, c, _), o in zip(raw_bonds, orders))
    return Molecule(tuple(atoms), bonds).with_ring_flags()


# --------------------------------------------------------------------------
# writer

_BOND_CHAR = {1: "-", 2: "=", 3: "#"}


def _atom_token(atom: Atom) -> str:
    sym = atom.element.lower() if atom.aromatic else atom.element
    h = "" if atom.h_count == 0 else ("H" if atom.h_count == 1 else f"H{atom.h_count}")
    chg = "+" if atom.formal_charge == 1 else ""
    return f"[{sym}{h}{chg}]"


def write_smiles(mol: Molecule, order: list[int] | None = None) -> str:
    """Serialize `mol` as a bracket-atom SMILES string.

    The DFS starts from the first atom of `order` (default: index order) and
    visits neighbours in that order; every bond is written explicitly except
    single bonds between non-aromatic atoms.
    """
    rank = {a: k for k, a in enumerate(order if order is not None else range(mol.n_atoms))}
    start = min(range(mol.n_atoms), key=rank.__getitem__)

    def nbr_order(u):
        return sorted(mol.neighbors[u], key=lambda vb: rank[vb[0]])

    tree_bonds = set()
    visited = [False] * mol.n_atoms

    def walk(u):
        visited[u] = True
        for v, bi in nbr_order(u):
            if not visited[v]:
                tree_bonds.add(bi)
                walk(v)

    ring_label: dict[int, int] = {}
    free_labels: list[int] = []
    next_label = [1]
    out: list[str] = []

    def bond_text(bi):
        b = mol.bonds[bi]
        if b.order == 1 and not (mol.atoms[b.begin].aromatic and mol.atoms[b.end].aromatic):
            return ""
        return _BOND_CHAR[b.order]

    def label_text(k):
        return str(k) if k < 10 else f"%{k:02d}"

    def emit(u, via):
        visited[u] = True
        if via is not None:
            out.append(bond_text(via))
        out.append(_atom_token(mol.atoms[u]))
        children = []
        for v, bi in nbr_order(u):
            if bi == via:
                continue
            if visited[v]:
                if bi in ring_label:
                    k = ring_label.pop(bi)
                    out.append(bond_text(bi) + label_text(k))
                    free_labels.append(k)
                    free_labels.sort()
                continue
            if bi in tree_bonds:
                children.append((v, bi))
            else:
                # ring closure opened here
                if free_labels:
                    k = free_labels.pop(0)
                else:
                    k = next_label[0]
                    next_label[0] += 1
                ring_label[bi] = k
                out.append(bond_text(bi) + label_text(k))
        for j, (v, bi) in enumerate(children):
            if j < len(children) - 1:
                out.append("(")
                emit(v, bi)
                out.append(")")
            else:
                emit(v, bi)

    limit = sys.getrecursionlimit()
    if 2 * mol.n_atoms + 50 > limit:
        sys.setrecursionlimit(2 * mol.n_atoms + 100)
    walk(start)
    visited = [False] * mol.n_atoms
    emit(start, None)
    return "".join(out)
