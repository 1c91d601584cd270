from math import comb

import pytest

from cfmkit.chem import parse_smiles
from cfmkit.features import (GROUP_NAMES, FeatureLayout, dump_feature_names, feature_dim, graph_features)
from cfmkit.fraggraph import build_graph, protonate
from cfmkit.synthdata import load_toy_molecules

TOY = [s for _, s in load_toy_molecules()]


def names(layout, phi):
    return [layout.name(i) for i in phi.active_indices]


def test_group_sizes():
    sizes = FeatureLayout().group_sizes()
    assert sizes == {"bias": 1, "break_atom_pair": 72, "root_paths": 2020, "gasteiger_pair": 288,
                     "hydrogen_movement": 10, "ring_features": 12}
    assert feature_dim(FeatureLayout()) == 2403


def test_quadratic_dim():
    assert feature_dim(FeatureLayout(quadratic=True)) == 2403 + comb(2402, 2) == 2403 + 2_883_601


def test_bias_only_layout():
    assert feature_dim(FeatureLayout(groups=("bias",))) == 1


def test_pair_index_round_trip():
    lay = FeatureLayout(quadratic=True)
    seen = set()
    for i, j in [(1, 2), (1, 2402), (5, 900), (2401, 2402), (7, 8)]:
        k = lay.pair_index(i, j)
        assert lay.pair_of(k) == (i, j)
        assert lay.pair_index(j, i) == k
        assert lay.base_dim <= k < lay.total_dim
        seen.add(k)
    assert len(seen) == 5
    assert lay.pair_index(2401, 2402) == lay.total_dim - 1


def test_figure_4a_style_break():
    # ion root carbon bonded to O and N, NL leaves as ethene donating one hydrogen
    g = build_graph(parse_smiles("CCC(O)[NH2+]C"), 1)
    lay = FeatureLayout()
    for e, phi in zip(g.edges, graph_features(g, lay)):
        if e.meta.broken_bonds == (1,) and e.meta.hydrogen_movement == 1:
            got = names(lay, phi)
            break
    else:
        pytest.fail("expected break not enumerated")
    assert "break_atom_pair:nonring C-C" in got
    ion_paths = {n.rsplit(" ", 1)[-1] for n in got if n.startswith("root_paths:ion")}
    assert ion_paths == {"C-O", "C-N", "C-N-C"}
    assert "hydrogen_movement:+1" in got


def test_figure_4b_style_ring_break():
    g = build_graph(protonate(parse_smiles("c1ccccc1")), 1)
    lay = FeatureLayout()
    hits = [names(lay, phi) for e, phi in zip(g.edges, graph_features(g, lay))
            if e.meta.is_ring_break and e.meta.bond_distance == 3]
    assert hits
    for got in hits:
        assert {"ring_features:aromatic", "ring_features:size 6", "ring_features:distance 3"} <= set(got)
        assert "ring_features:multiple ring system" not in got


def test_no_path_indicator():
    # a lone carbon ion has no paths away from the break
    g = build_graph(parse_smiles("CC(O)[NH2+]C"), 1)
    lay = FeatureLayout()
    got = [names(lay, phi) for e, phi in zip(g.edges, graph_features(g, lay))
           if len(e.meta.ion_atoms) == 1]
    assert got and all("root_paths:ion no path of length 2" in n for n in got)


@pytest.mark.parametrize("smi", TOY)
def test_one_hot_groups(smi):
    lay = FeatureLayout()
    off, sizes = lay.offsets, lay.group_sizes()
    g = build_graph(protonate(parse_smiles(smi)), 1, cap=10_000)
    for e, phi in zip(g.edges, graph_features(g, lay)):
        idx = list(phi.active_indices)
        assert idx == sorted(set(idx)) and idx[0] == 0
        assert all(i < lay.total_dim for i in idx)

        def count(group):
            return sum(off[group] <= i < off[group] + sizes[group] for i in idx)

        assert count("break_atom_pair") == 1
        assert count("gasteiger_pair") == 1
        assert count("hydrogen_movement") == 1
        assert (count("ring_features") > 0) == e.meta.is_ring_break


def test_quadratic_activations():
    base, quad = FeatureLayout(), FeatureLayout(quadratic=True)
    g = build_graph(protonate(parse_smiles("NCC(=O)O")), 1)
    for pb, pq in zip(graph_features(g, base), graph_features(g, quad)):
        k = len(pb.active_indices) - 1
        extra = [i for i in pq.active_indices if i >= quad.base_dim]
        assert len(extra) == comb(k, 2)
        assert [i for i in pq.active_indices if i < quad.base_dim] == list(pb.active_indices)


def test_pure_function():
    g = build_graph(protonate(parse_smiles("OCC(N)C(=O)O")), 1)
    lay = FeatureLayout()
    assert [p.active_indices for p in graph_features(g, lay)] == [p.active_indices for p in graph_features(g, lay)]


def test_version_round_trip():
    lay = FeatureLayout(groups=("bias", "break_atom_pair"), quadratic=True)
    assert FeatureLayout.from_version(lay.version) == lay
    assert set(GROUP_NAMES) >= set(lay.groups)


def test_names_dump_lists_every_base_index():
    text = dump_feature_names(FeatureLayout())
    rows = [line for line in text.splitlines() if not line.startswith("#")]
    assert len(rows) == 2403
    assert rows[0] == "0\tbias:bias"
