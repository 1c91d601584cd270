"""Gasteiger-Marsili partial equalization of orbital electronegativity."""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)

# (a, b, c) electronegativity coefficients, chi(q) = a + b q + c q^2
PEOE_PARAMS = {
    ("H", "*"): (7.17, 6.24, -0.56),
    ("C", "sp3"): (7.98, 9.18, 1.88),
    ("C", "sp2"): (8.79, 9.32, 1.51),
    ("C", "sp"): (10.39, 9.45, 0.73),
    ("N", "sp3"): (11.54, 10.82, 1.36),
    ("N", "sp2"): (12.87, 11.15, 0.85),
    ("N", "sp"): (15.68, 11.70, -0.27),
    ("O", "sp3"): (14.18, 12.92, 1.39),
    ("O", "sp2"): (17.07, 13.79, 0.47),
    ("S", "sp3"): (10.14, 9.13, 1.38),
    ("S", "sp2"): (10.88, 9.485, 1.325),
    ("P", "sp3"): (8.90, 8.24, 0.96),
    ("F", "sp3"): (14.66, 13.85, 2.31),
    ("Cl", "sp3"): (11.00, 9.69, 1.35),
    ("Br", "sp3"): (10.08, 8.47, 1.16),
    ("I", "sp3"): (9.90, 7.96, 0.96),
}
# chi of the cation of hydrogen is a special case in the original method
H_CATION_CHI = 20.02
N_ITER = 6
CONJUGATING = ("N", "O", "S")
PI_ELEMENTS = ("C", "N", "O")
DAMPING = 0.5


def _by_bonds(mol, i: int) -> str:
    orders = [mol.bonds[bi].order for _, bi in mol.neighbors[i]]
    if orders.count(3) or orders.count(2) >= 2:
        return "sp"
    if orders.count(2) or mol.atoms[i].aromatic:
        return "sp2"
    return "sp3"


def hybridization(mol, i: int) -> str:
    """Hybridization from bond orders; a lone-pair N/O/S next to a pi system is sp2."""
    hyb = _by_bonds(mol, i)
    if hyb == "sp3" and mol.atoms[i].element in CONJUGATING and mol.atoms[i].formal_charge <= 0:
        for j, _ in mol.neighbors[i]:
            if mol.atoms[j].element in PI_ELEMENTS and _by_bonds(mol, j) != "sp3" and _pi_partner(mol, j):
                return "sp2"
    return hyb


def _pi_partner(mol, j: int) -> bool:
    # the multiple bond of j must itself be between second-row atoms
    for k, bi in mol.neighbors[j]:
        if (mol.bonds[bi].order > 1 or (mol.atoms[j].aromatic and mol.atoms[k].aromatic)) \
                and mol.atoms[k].element in PI_ELEMENTS:
            return True
    return False


def _params(element, hyb):
    for key in ((element, hyb), (element, "sp2" if hyb == "sp" else "sp3"), (element, "sp3")):
        if key in PEOE_PARAMS:
            return PEOE_PARAMS[key]
    return None


def peoe(mol, n_iter: int = N_ITER) -> tuple[np.ndarray, np.ndarray]:
    """Run PEOE with hydrogens expanded explicitly.

    Returns the charge on each heavy atom and the charge on each one of its
    hydrogens (all hydrogens of an atom are equivalent, so one value each).
    """
    n = mol.n_atoms
    params = []
    charges = []
    missing = []
    for i, atom in enumerate(mol.atoms):
        p = _params(atom.element, hybridization(mol, i))
        if p is None:
            missing.append(atom.element)
        params.append(p)
        charges.append(float(atom.formal_charge))
    edges = [(b.begin, b.end) for b in mol.bonds]
    first_h = np.full(n, -1)
    for i, atom in enumerate(mol.atoms):
        for k in range(atom.h_count):
            params.append(PEOE_PARAMS[("H", "*")])
            charges.append(0.0)
            if k == 0:
                first_h[i] = len(params) - 1
            edges.append((i, len(params) - 1))
    if missing:
        log.warning("no PEOE parameters for %s; their charges stay at the formal value",
                    sorted(set(missing)))

    q = np.array(charges)
    active = np.array([p is not None for p in params])
    abc = np.array([p if p is not None else (0.0, 0.0, 0.0) for p in params])
    chi_plus = abc.sum(axis=1)
    chi_plus[n:] = H_CATION_CHI
    src = np.array([e[0] for e in edges], int)
    dst = np.array([e[1] for e in edges], int)
    if len(edges):
        ok = active[src] & active[dst]
        src, dst = src[ok], dst[ok]

    damp = 1.0
    for _ in range(n_iter):
        damp *= DAMPING
        chi = abc[:, 0] + abc[:, 1] * q + abc[:, 2] * q * q
        diff = chi[dst] - chi[src]
        # electrons flow to the more electronegative end, scaled by the donor's chi+
        donor = np.where(diff > 0, src, dst)
        flow = diff / chi_plus[donor] * damp
        dq = np.zeros_like(q)
        np.add.at(dq, src, flow)
        np.add.at(dq, dst, -flow)
        q = q + dq

    h_each = np.where(first_h >= 0, q[np.maximum(first_h, 0)], 0.0)
    return q[:n].copy(), h_each


def gasteiger_charges(mol, n_iter: int = N_ITER) -> np.ndarray:
    """Per-heavy-atom charges with each atom's hydrogens folded in.

    These sum to the formal charge of `mol`.
    """
    heavy, h_each = peoe(mol, n_iter)
    return heavy + h_each * np.array([a.h_count for a in mol.atoms])


def atom_charges(mol, n_iter: int = N_ITER) -> np.ndarray:
    """Charge on each heavy atom alone, hydrogens excluded."""
    return peoe(mol, n_iter)[0]
