"""Molecular representation: SMILES dialect, masses, rings, charges, canonical keys."""
from .canon import canonical_key, canonical_order
from .gasteiger import atom_charges, gasteiger_charges
from .masses import PROTON_MASS, monoisotopic_mass
from .molecule import Atom, Bond, Molecule, allowed_valences, element_class
from .rings import RingInfo, find_rings
from .smiles import parse_smiles, write_smiles

__all__ = [
    "Atom", "Bond", "Molecule", "RingInfo", "PROTON_MASS",
    "allowed_valences", "atom_charges", "canonical_key", "canonical_order",
    "element_class", "find_rings", "gasteiger_charges", "monoisotopic_mass",
    "parse_smiles", "write_smiles",
]
