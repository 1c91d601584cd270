import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmkit.chem import parse_smiles
from cfmkit.errors import EmptySpectrum, MalformedLine, MissingEnergyBlock
from cfmkit.model import Model, ModelConfig, ParamVector
from cfmkit.predict import (Peak, Spectrum, apply_cutoff, compute_metrics, marginal_to_spectrum, match_peaks,
                            merge_energy_spectra, parse_spectra, predict_spectra, predict_spectrum,
                            read_spectra_file, write_spectra_file)


def spec(*pairs, energy=0):
    return Spectrum([Peak(m, i) for m, i in pairs], energy)


def zero_model():
    cfg = ModelConfig()
    v = cfg.layout.version
    return Model(cfg, {f"energy{e}": ParamVector({0: -1.0}, v, f"energy{e}") for e in range(3)})


def test_leaf_only_prediction():
    s = predict_spectrum(parse_smiles("O"), zero_model(), 0)
    assert len(s) == 1 and s.peaks[0].intensity == pytest.approx(100.0)


def test_cutoff_min_five():
    peaks = [Peak(100.0 + k, i) for k, i in enumerate([70, 20, 5, 3, 1, 1])]
    kept = apply_cutoff(peaks)
    assert [p.intensity for p in kept] == [70, 20, 5, 3, 1]


def test_cutoff_eighty_percent():
    peaks = [Peak(100.0 + k, i) for k, i in enumerate([30, 30, 20, 5, 5, 4, 3, 2, 1])]
    assert len(apply_cutoff(peaks)) == 5
    peaks = [Peak(100.0 + k, 10.0) for k in range(10)]
    assert len(apply_cutoff(peaks)) == 8


def test_cutoff_max_thirty():
    peaks = [Peak(100.0 + k, 1.0) for k in range(40)]
    assert len(apply_cutoff(peaks)) == 30


def test_cutoff_tie_break_by_mass():
    peaks = [Peak(300.0, 1.0), Peak(100.0, 1.0), Peak(200.0, 1.0)] + [Peak(400.0 + k, 1.0) for k in range(5)]
    kept = apply_cutoff(peaks)
    assert [p.mass for p in kept][:3] == [100.0, 200.0, 300.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 100.0), min_size=1, max_size=60))
def test_cutoff_properties(intensities):
    peaks = [Peak(50.0 + 3 * k, i) for k, i in enumerate(intensities)]
    kept = apply_cutoff(peaks)
    n = len(peaks)
    assert len(kept) <= 30
    assert len(kept) >= min(5, n)
    total = sum(intensities)
    assert len(kept) == 30 or sum(p.intensity for p in kept) >= 0.8 * total * (1 - 1e-9)


def test_merge_close_fragments():
    s = marginal_to_spectrum(np.array([100.0, 100.004, 150.0]), np.array([0.25, 0.25, 0.5]), 0, 10.0, 0.01,
                             cutoff=False)
    assert len(s) == 2
    assert s.peaks[0].mass == pytest.approx(100.002)
    assert s.peaks[0].intensity == pytest.approx(50.0)
    assert sum(s.intensities) == pytest.approx(100.0, abs=1e-6)


def test_predicted_spectra_normalized_and_separated():
    model = zero_model()
    for smi in ["CCCO", "NCC(=O)O", "Oc1ccccc1"]:
        for s in predict_spectra(parse_smiles(smi), model).values():
            assert sum(s.intensities) == pytest.approx(100.0, abs=1e-6)
            assert 1 <= len(s) <= 30
            m = s.masses
            assert np.all(np.diff(m) > 0.01)


def test_match_boundary_inside_tolerance():
    assert match_peaks(spec((100.0, 1)), spec((100.0099, 1))) == [(0, 0)]
    assert match_peaks(spec((100.0, 1)), spec((100.0101, 1))) == []


def test_match_nearest_only():
    pairs = match_peaks(spec((100.0, 1)), spec((99.995, 1), (100.003, 1)))
    assert pairs == [(0, 1)]


def test_match_one_to_one():
    pairs = match_peaks(spec((100.0, 1), (100.004, 1)), spec((100.002, 1)))
    assert len(pairs) == 1


def test_metrics_identical():
    s = spec((50.0, 20), (80.0, 30), (120.0, 50))
    assert compute_metrics(s, s).as_tuple() == (100.0, 100.0, 100.0, 100.0, 1.0)


def test_metrics_disjoint():
    assert compute_metrics(spec((50.0, 1)), spec((60.0, 1))).as_tuple() == (0.0, 0.0, 0.0, 0.0, 0.0)


def test_metrics_hand_example():
    r = compute_metrics(spec((100.0, 100)), spec((100.0, 60), (200.0, 40)))
    assert r.as_tuple() == pytest.approx((60.0, 100.0, 50.0, 100.0, 0.5))


def test_metrics_empty():
    with pytest.raises(EmptySpectrum):
        compute_metrics(spec(), spec((1.0, 1)))


spectra_st = st.lists(st.tuples(st.integers(100, 900), st.floats(0.1, 50.0)), min_size=1, max_size=12,
                      unique_by=lambda t: t[0])


@settings(max_examples=100, deadline=None)
@given(spectra_st, spectra_st, st.floats(0.01, 1000.0))
def test_metric_symmetry_and_scaling(a, b, scale):
    # masses on a 0.5 Da grid with small offsets keep the absolute tolerance in charge
    pa = spec(*[(m / 2 + 0.003, i) for m, i in a])
    pb = spec(*[(m / 2, i) for m, i in b])
    ab, ba = compute_metrics(pa, pb), compute_metrics(pb, pa)
    assert ab.weighted_recall == ba.weighted_precision and ab.weighted_precision == ba.weighted_recall
    assert ab.recall == ba.precision and ab.precision == ba.recall
    assert ab.jaccard == ba.jaccard
    scaled = spec(*[(p.mass, p.intensity * scale) for p in pa.peaks])
    assert compute_metrics(scaled, pb).as_tuple() == pytest.approx(ab.as_tuple(), rel=1e-9, abs=1e-9)
    assert len(match_peaks(pa, pb)) <= min(len(pa), len(pb))


def test_merge_energy_identical():
    s = spec((100.0, 100))
    m = merge_energy_spectra(s, s, s)
    assert len(m) == 1 and m.peaks[0].intensity == pytest.approx(100.0)


def test_merge_energy_mean_mass():
    m = merge_energy_spectra(spec((100.0, 100)), spec((100.005, 100)), spec((300.0, 100)))
    assert m.peaks[0].mass == pytest.approx(100.0025)
    assert len(m) == 2


def test_merge_energy_max_intensity():
    m = merge_energy_spectra(spec((100.0, 80), (200.0, 20)), spec((100.001, 30), (250.0, 70)), spec((300.0, 100)))
    raw = {round(p.mass): p.intensity for p in m.peaks}
    assert raw[100] / raw[300] == pytest.approx(0.8)


def test_merge_energy_disjoint():
    m = merge_energy_spectra(spec((1.0, 1), (2.0, 1)), spec((3.0, 1)), spec((4.0, 1), (5.0, 1), (6.0, 1)))
    assert len(m) == 6


def test_spectra_file_round_trip(tmp_path):
    spectra = {e: spec((50.123456, 40.0), (75.5, 60.0), energy=e) for e in range(3)}
    path = tmp_path / "x.spectra"
    write_spectra_file(spectra, path)
    first = path.read_text()
    back = read_spectra_file(path)
    assert {e: [(p.mass, p.intensity) for p in s.peaks] for e, s in back.items()} == \
        {e: [(p.mass, p.intensity) for p in s.peaks] for e, s in spectra.items()}
    write_spectra_file(back, path)
    assert path.read_text() == first


def test_parse_comments_and_blanks():
    text = "# header\nenergy0\n\n50 1 # a peak\nenergy1\n60 2\nenergy2\n70 3\n"
    assert len(parse_spectra(text)[0]) == 1


def test_missing_energy_block():
    with pytest.raises(MissingEnergyBlock):
        parse_spectra("energy0\n50 1\nenergy1\n60 1\n")


def test_malformed_line_number():
    with pytest.raises(MalformedLine) as info:
        parse_spectra("energy0\n50 1\nabc 10\n")
    assert info.value.lineno == 3 and "line 3" in str(info.value)
