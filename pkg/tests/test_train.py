import numpy as np
import pytest

from cfmkit.chem import parse_smiles
from cfmkit.errors import NoTrainingData
from cfmkit.fraggraph import protonate
from cfmkit.model import CE_TAGS, Model, ModelConfig
from cfmkit.predict import Peak, Spectrum, compute_metrics, predict_spectra
from cfmkit.synthdata import SynthSpec, generate_dataset, generator_params, load_toy_molecules
from cfmkit.train import (Batch, SufficientStats, TrainingInstance, e_step_ce, e_step_se, em_train_ce,
                          em_train_se, m_step, q_gradient, q_value)

SMALL = load_toy_molecules("train")[:6]


def instances(mols, config, spectra=None):
    out = []
    for mid, smi in mols:
        inst = TrainingInstance(mid, protonate(parse_smiles(smi)), dict(spectra or {}))
        inst.prepare(config)
        out.append(inst)
    return out


def batch_for(mols, config):
    insts = instances(mols, config)
    return insts, Batch([i.compiled for i in insts], config.layout)


def random_stats(batch, rng):
    return SufficientStats(rng.gamma(0.5, 3.0, batch.n_edges), rng.gamma(0.5, 3.0, batch.n_fragments))


def fd_gradient(stats, x, batch, lam, eps=1e-5):
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = eps
        g[k] = (q_value(stats, x + e, batch, lam) - q_value(stats, x - e, batch, lam)) / (2 * eps)
    return g


@pytest.mark.parametrize("seed", range(4))
def test_gradient_matches_finite_differences(seed):
    cfg = ModelConfig()
    rng = np.random.default_rng(seed)
    _, batch = batch_for(SMALL[seed:seed + 2], cfg)
    stats = random_stats(batch, rng)
    x = rng.normal(0, 0.5, len(batch.columns))
    g, fd = q_gradient(stats, x, batch, 0.3), fd_gradient(stats, x, batch, 0.3)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-4


def test_gradient_quadratic_features():
    cfg = ModelConfig(quadratic=True)
    rng = np.random.default_rng(5)
    _, batch = batch_for([("ethanol", "CCO")], cfg)
    stats = random_stats(batch, rng)
    x = rng.normal(0, 0.2, len(batch.columns))
    g, fd = q_gradient(stats, x, batch, 0.1), fd_gradient(stats, x, batch, 0.1)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_zero_stats():
    _, batch = batch_for(SMALL[:2], ModelConfig())
    rng = np.random.default_rng(0)
    x = rng.normal(0, 1, len(batch.columns))
    lam = 0.7
    wp = x * batch.penalty_mask
    stats = SufficientStats.zeros(batch)
    assert q_value(stats, x, batch, lam) == pytest.approx(-lam * wp @ wp)
    np.testing.assert_allclose(q_gradient(stats, x, batch, lam), -2 * lam * wp)
    assert batch.penalty_mask[batch.bias] == 0


def test_huge_lambda_shrinks_weights():
    _, batch = batch_for(SMALL[:3], ModelConfig())
    stats = random_stats(batch, np.random.default_rng(1))
    x0 = np.random.default_rng(2).normal(0, 1, len(batch.columns))
    x, _ = m_step(stats, x0, batch, 1e9)
    assert np.max(np.abs(np.delete(x, batch.bias))) < 1e-3


def test_m_step_never_decreases_and_line_is_unimodal():
    _, batch = batch_for(SMALL[:3], ModelConfig())
    rng = np.random.default_rng(3)
    stats = random_stats(batch, rng)
    x0 = rng.normal(0, 1, len(batch.columns))
    x, info = m_step(stats, x0, batch, 0.01)
    assert info.q_end >= info.q_start - 1e-9
    qs = [q_value(stats, x0 + a * (x - x0), batch, 0.01) for a in np.linspace(0, 1.5, 31)]
    peak = int(np.argmax(qs))
    assert all(np.diff(qs[:peak + 1]) >= -1e-9) and all(np.diff(qs[peak:]) <= 1e-9)


def test_m_step_at_optimum_is_identity():
    _, batch = batch_for(SMALL[:2], ModelConfig())
    stats = random_stats(batch, np.random.default_rng(4))
    x, _ = m_step(stats, np.zeros(len(batch.columns)), batch, 0.01, tol=1e-8, max_iter=1000)
    again, info = m_step(stats, x, batch, 0.01, tol=1e-5)
    assert info.iterations == 0
    np.testing.assert_array_equal(again, x)


def test_single_edge_count_drives_probability_up():
    _, batch = batch_for([("ethylamine", "CCN")], ModelConfig())
    stats = SufficientStats.zeros(batch)
    root_edges = np.nonzero(batch.parent == 0)[0]
    k = int(root_edges[0])
    stats.edge[k] = 1000.0
    x, _ = m_step(stats, np.zeros(len(batch.columns)), batch, 0.0, max_iter=2000)
    log_e, _ = batch.log_probs(x)
    assert np.exp(log_e[k]) > 0.99


def se_instances(mols, cfg, seed=0):
    params = generator_params(mols, cfg, seed)
    return generate_dataset(SynthSpec(mols, params, cfg), seed), params


def test_e_step_leaf_only():
    cfg = ModelConfig()
    inst = instances([("water", "O")], cfg)[0]
    root_mass = inst.compiled.masses[0]
    inst.spectra = {0: Spectrum([Peak(root_mass, 100.0)])}
    batch = Batch([inst.compiled], cfg.layout)
    stats = e_step_se([inst], batch, np.zeros(len(batch.columns)), 0, cfg)
    assert stats.edge.size == 0
    assert stats.self_.sum() == pytest.approx(100.0 * cfg.depth)


def test_e_step_height_linearity_and_unexplained_peak():
    cfg = ModelConfig()
    insts, _ = se_instances(SMALL[:3], cfg)
    batch = Batch([i.compiled for i in insts], cfg.layout)
    x = np.random.default_rng(0).normal(0, 0.3, len(batch.columns))
    base = e_step_se(insts, batch, x, 1, cfg)
    for inst in insts:
        inst.spectra[1] = Spectrum([Peak(p.mass, 2 * p.intensity) for p in inst.spectra[1].peaks], 1)
    doubled = e_step_se(insts, batch, x, 1, cfg)
    np.testing.assert_array_equal(doubled.edge, 2 * base.edge)
    np.testing.assert_array_equal(doubled.self_, 2 * base.self_)
    for inst in insts:
        inst.spectra[1] = Spectrum(inst.spectra[1].peaks + [Peak(999.5, 1e-6)], 1)
    extra = e_step_se(insts, batch, x, 1, cfg)
    np.testing.assert_array_equal(extra.edge, doubled.edge)
    assert extra.n_no_support == doubled.n_no_support + len(insts)


def test_em_monotone_and_deterministic():
    cfg = ModelConfig(em_max_iter=8)
    insts, _ = se_instances(SMALL, cfg)
    w1, r1 = em_train_se(insts, 0, cfg)
    w2, r2 = em_train_se(insts, 0, cfg)
    assert w1.weights == w2.weights
    assert r1.q_reg == r2.q_reg and r1.reason == r2.reason
    q = np.array(r1.q_reg)
    assert np.all(np.diff(q) >= -1e-6 * np.abs(q[:-1]))


def test_em_recovers_synthetic_spectra():
    cfg = ModelConfig()
    mols = load_toy_molecules("train")[:10]
    insts, _ = se_instances(mols, cfg, seed=1)
    for inst in insts:  # train on energy 0 only
        inst.spectra = {0: inst.spectra[0]}
    w, report = em_train_se(insts, 0, cfg)
    model = Model(cfg, {"energy0": w})
    wr = [compute_metrics(predict_spectra(i.root, model, i.compiled)[0], i.spectra[0]).weighted_recall
          for i in insts]
    assert np.mean(wr) >= 90


def test_precursor_only_spectrum():
    cfg = ModelConfig()
    inst = instances([("propanol", "CCCO")], cfg)[0]
    inst.spectra = {0: Spectrum([Peak(inst.compiled.masses[0], 100.0)])}
    w, _ = em_train_se([inst], 0, cfg)
    pred = predict_spectra(inst.root, Model(cfg, {"energy0": w}), inst.compiled)[0]
    top = max(pred.peaks, key=lambda p: p.intensity)
    assert top.mass == pytest.approx(inst.compiled.masses[0], abs=1e-6)


def test_no_training_data():
    with pytest.raises(NoTrainingData):
        em_train_se([], 0, ModelConfig())
    with pytest.raises(NoTrainingData):
        em_train_ce([], ModelConfig(mode="ce"))


CE_CFG = ModelConfig(mode="ce", depth_low=1, depth_med=2, depth_high=3)


def test_ce_block_isolation():
    insts, _ = se_instances(SMALL[:3], CE_CFG)
    batch = Batch([i.compiled for i in insts], CE_CFG.layout)
    rng = np.random.default_rng(0)
    xs = [rng.normal(0, 0.3, len(batch.columns)) for _ in CE_TAGS]
    stats = e_step_ce(insts, batch, xs, CE_CFG)
    g_l = q_gradient(stats[0], xs[0], batch, CE_CFG.lam)
    xs[2] += 1.0  # perturb w_H in place
    assert np.array_equal(g_l, q_gradient(stats[0], xs[0], batch, CE_CFG.lam))
    # w_H does reach the joint E-step, just not the L gradient for fixed stats
    assert not np.allclose(e_step_ce(insts, batch, xs, CE_CFG)[2].edge, stats[2].edge)


def test_ce_leaf_only_contributes_self_counts():
    inst = instances([("water", "O")], CE_CFG)[0]
    root = inst.compiled.masses[0]
    inst.spectra = {e: Spectrum([Peak(root, 100.0)], e) for e in range(3)}
    batch = Batch([inst.compiled], CE_CFG.layout)
    stats = e_step_ce([inst], batch, [np.zeros(len(batch.columns))] * 3, CE_CFG)
    for s, steps in zip(stats, (1, 1, 1)):
        assert s.edge.size == 0
        assert s.self_.sum() == pytest.approx(100.0 * steps)


def test_ce_recovers_synthetic_spectra():
    mols = load_toy_molecules("train")[:8]
    params = generator_params(mols, CE_CFG, 2)
    insts = generate_dataset(SynthSpec(mols, params, CE_CFG), 2)
    w, report = em_train_ce(insts, CE_CFG.with_overrides(em_max_iter=30))
    model = Model(CE_CFG, w)
    for e in range(3):
        wr = [compute_metrics(predict_spectra(i.root, model, i.compiled)[e], i.spectra[e]).weighted_recall
              for i in insts]
        assert np.mean(wr) >= 85, (e, wr)
