import math

import numpy as np
import pytest

import oracles
from vectorir.design_io import DesignBundle, SliceTrace
from vectorir.pdn import (
    GridError, GridModel, SolverError, build_system, golden_dynamic_ir, mirror_design, solve_dc,
)
from vectorir.synth import GeneratorSpec, generate_design

SMALL = GeneratorSpec(width=15.0, length=12.5, num_instances=60, num_vias=5, num_slices=2,
                      cycles=2, substeps=3, toggle_rate=0.2)


def random_grid(rng, n):
    """Connected random graph: a spanning tree plus extra edges, 1-3 pads."""
    edges = [(k, int(rng.integers(0, k))) for k in range(1, n)]
    for _ in range(n):
        a, b = rng.integers(0, n, 2)
        if a != b:
            edges.append((int(a), int(b)))
    g = rng.uniform(0.1, 10.0, len(edges))
    pads = rng.choice(n, size=int(rng.integers(1, 4)), replace=False)
    return GridModel.from_edges(n, edges, g, pads)


def test_ohms_law_single_node():
    m = GridModel.from_edges(2, [(0, 1)], [1.0], [0])
    i = m.injection(np.array([0.0, 0.1]))
    assert solve_dc(m.G, i)[0] == pytest.approx(0.1, rel=1e-12)


def test_chain_hand_analysis():
    m = GridModel.from_edges(3, [(0, 1), (1, 2)], [1.0, 1.0], [0])
    v = solve_dc(m.G, m.injection(np.array([0.0, 0.0, 0.1])))
    np.testing.assert_allclose(v, [0.1, 0.2], rtol=1e-12)


def test_grid_errors():
    with pytest.raises(GridError, match="no pads"):
        GridModel.from_edges(2, [(0, 1)], [1.0], [])
    with pytest.raises(GridError, match="disconnected"):
        GridModel.from_edges(3, [(0, 1)], [1.0], [0])
    with pytest.raises(GridError, match="positive"):
        GridModel.from_edges(2, [(0, 1)], [0.0], [0])


def test_zero_current_and_identity():
    m = GridModel.from_edges(2, [(0, 1)], [4.0], [0])
    assert solve_dc(m.G, np.zeros(1))[0] == 0.0
    assert solve_dc(m.G, np.array([2.0]))[0] == pytest.approx(0.5)


def test_nonconvergence_reports_residual():
    rng = np.random.default_rng(1)
    m = random_grid(rng, 120)
    with pytest.raises(SolverError) as e:
        solve_dc(m.G, rng.uniform(size=m.num_free), max_iter=2)
    assert e.value.residual > 1e-10 and e.value.iterations == 2


def test_cg_matches_dense_elimination():
    rng = np.random.default_rng(2)
    for _ in range(20):
        m = random_grid(rng, int(rng.integers(5, 200)))
        b = rng.uniform(0, 1e-3, size=(m.num_free, 2))
        want = oracles.gaussian_elimination(m.G.toarray(), b)
        got = solve_dc(m.G, b)
        assert np.max(np.abs(got - want)) <= 1e-9 * np.max(np.abs(want))


def test_residual_meets_tolerance():
    rng = np.random.default_rng(3)
    m = random_grid(rng, 150)
    b = rng.uniform(size=m.num_free)
    x = solve_dc(m.G, b)
    assert np.linalg.norm(m.G @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_golden_matches_dense_oracle():
    for seed in range(3):
        d = generate_design(seed, SMALL)
        for s in range(2):
            got = golden_dynamic_ir(d, s).ir
            want = oracles.dense_golden_ir(d, d.slices[s])
            np.testing.assert_allclose(got, want, rtol=1e-8)


def test_quiet_slice_without_leakage_is_zero():
    d = generate_design(4, SMALL)
    power = d.power.copy()
    power[:, 2] = 0.0
    quiet = DesignBundle(d.width, d.length, d.vdd, d.ids, d.xy, power, d.vias,
                         [SliceTrace(0, d.num_steps, [], [])], d.cycles, d.substeps)
    assert np.all(golden_dynamic_ir(quiet, 0).ir == 0.0)


def test_linearity_and_monotonicity():
    d = generate_design(5, SMALL)
    base = golden_dynamic_ir(d, 0).ir
    double = DesignBundle(d.width, d.length, d.vdd, d.ids, d.xy, 2 * d.power, d.vias, d.slices,
                          d.cycles, d.substeps)
    np.testing.assert_allclose(golden_dynamic_ir(double, 0).ir, 2 * base, rtol=1e-9)
    tr = d.slices[0]
    fewer = d.with_slices([SliceTrace(0, tr.num_steps, tr.inst[1:], tr.step[1:])])
    assert np.all(golden_dynamic_ir(fewer, 0).ir <= base + 1e-15)
    assert golden_dynamic_ir(fewer, 0).ir[tr.inst[0]] <= base[tr.inst[0]]


def test_mirror_symmetry():
    d = generate_design(6, SMALL.with_(width=15.0, length=15.0))
    a = golden_dynamic_ir(d, 1).ir
    b = golden_dynamic_ir(mirror_design(d), 1).ir
    np.testing.assert_allclose(a, b, rtol=1e-9)


def test_keep_steps_and_dedup():
    d = generate_design(7, SMALL)
    g = golden_dynamic_ir(d, 0, keep_steps=True)
    assert g.steps.shape == (d.num_instances, d.num_steps)
    np.testing.assert_array_equal(g.steps.max(axis=1), g.ir)
    assert np.all((g.ir >= 0) & (g.ir < d.vdd))


def test_generator_determinism_and_errors():
    assert generate_design(1, SMALL) == generate_design(1, SMALL)
    with pytest.raises(ValueError):
        generate_design(1, SMALL.with_(num_instances=0))
    with pytest.raises(ValueError):
        generate_design(1, SMALL.with_(num_vias=31))


def test_uniform_toggles_hit_configured_rate():
    rate = 0.05
    spec = GeneratorSpec(width=10.0, length=10.0, num_instances=200, num_vias=2, num_slices=1,
                         cycles=20, substeps=5, toggle_rate=rate, clustering=0.0)
    trials = 200 * 100
    for seed in range(10):
        d = generate_design(seed, spec)
        mean = d.slices[0].inst.size / trials
        assert abs(mean - rate) <= 3 * math.sqrt(rate * (1 - rate) / trials)


def test_build_system_shape():
    d = generate_design(8, SMALL)
    m = build_system(d)
    assert m.num_nodes == 6 * 5 + 5
    assert m.num_free == 30
    assert (abs(m.G - m.G.T) > 0).nnz == 0
