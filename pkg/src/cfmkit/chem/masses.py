"""Monoisotopic masses (most abundant isotope), 6-decimal precision."""
from ..errors import UnknownElementMass

H_MASS = 1.007825
ELECTRON_MASS = 0.000549
PROTON_MASS = H_MASS - ELECTRON_MASS

MONOISOTOPIC = {
    "H": H_MASS,
    "C": 12.000000,
    "N": 14.003074,
    "O": 15.994915,
    "P": 30.973762,
    "S": 31.972071,
    "F": 18.998403,
    "Cl": 34.968853,
    "Br": 78.918338,
    "I": 126.904473,
}

ATOMIC_NUMBERS = {
    "H": 1, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53,
}


def element_mass(symbol: str) -> float:
    try:
        return MONOISOTOPIC[symbol]
    except KeyError:
        raise UnknownElementMass(f"no monoisotopic mass for element {symbol!r}") from None


def monoisotopic_mass(mol) -> float:
    """Mass in Da of `mol`, accounting for its net charge in electrons."""
    total = 0.0
    for atom in mol.atoms:
        total += element_mass(atom.element) + atom.h_count * H_MASS
    return total - mol.total_charge * ELECTRON_MASS
