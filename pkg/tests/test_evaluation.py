import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import frechet_sqrtm, intra_diversity_loops, kid_loops
from rick.evaluation import (SHARED, SOURCE_ONLY, TARGET_ONLY, GaussianFit, ModeSpec, ProjectionDistance,
                             filter_mode_attribution, frechet_gaussian, frechet_samples, incompatible_mass,
                             intra_diversity, interpolate_latents, kid_mmd, nearest_neighbor, poly_kernel)
from rick.models import build_filter_layout, generate


def fit(mu, cov):
    return GaussianFit(np.asarray(mu, float), np.asarray(cov, float), 100)


def test_frechet_examples():
    assert frechet_gaussian(fit([0, 0], np.eye(2)), fit([3, 4], np.eye(2))) == 25.0
    a = fit([1, 1], np.diag([1.0, 4.0]))
    b = fit([1, 1], np.diag([4.0, 1.0]))
    oracle = frechet_sqrtm(a.mean, a.cov, b.mean, b.cov)
    assert oracle == pytest.approx(2.0, abs=1e-12)
    assert frechet_gaussian(a, b) == pytest.approx(oracle, abs=1e-12)
    assert frechet_gaussian(a, a) == 0.0


def _spd(rng, d):
    m = rng.normal(size=(d, d))
    return m @ m.T + 0.1 * np.eye(d)


@pytest.mark.parametrize("seed", range(5))
def test_frechet_matches_sqrtm_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = fit(rng.normal(size=3), _spd(rng, 3))
    b = fit(rng.normal(size=3), _spd(rng, 3))
    oracle = frechet_sqrtm(a.mean, a.cov, b.mean, b.cov)
    assert frechet_gaussian(a, b) == pytest.approx(oracle, rel=1e-9)
    assert frechet_gaussian(a, b) == pytest.approx(frechet_gaussian(b, a), rel=1e-10)


def test_frechet_rejects_non_psd_and_mismatch():
    with pytest.raises(FloatingPointError):
        frechet_gaussian(fit([0, 0], np.diag([1.0, -1.0])), fit([0, 0], np.eye(2)))
    with pytest.raises(ValueError):
        frechet_gaussian(fit([0], [[1.0]]), fit([0, 0], np.eye(2)))


def test_gaussian_fit_unbiased():
    x = np.array([[0.0, 0.0], [2.0, 0.0], [4.0, 6.0]])
    f = GaussianFit.from_samples(x)
    np.testing.assert_allclose(f.cov, np.cov(x.T, ddof=1))
    with pytest.raises(ValueError):
        GaussianFit.from_samples(x[:1])


def test_kernel_self_point():
    u = np.array([[1.0, -1.0]])
    assert poly_kernel(u, u)[0, 0] == 8.0


@pytest.mark.parametrize("n", [2, 7, 30, 50])
def test_kid_matches_loops(n):
    rng = np.random.default_rng(n)
    x = rng.normal(size=(n, 3))
    y = rng.normal(size=(n + 3, 3)) + 0.5
    assert kid_mmd(x, y) == pytest.approx(kid_loops(x, y), abs=1e-12, rel=1e-12)


def test_kid_same_distribution_within_permutation_bound():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(500, 2)), rng.normal(size=(500, 2))
    stat = kid_mmd(x, y)
    pooled = np.concatenate([x, y])
    null = []
    for _ in range(100):
        p = rng.permutation(1000)
        null.append(kid_mmd(pooled[p[:500]], pooled[p[500:]]))
    assert abs(stat) <= np.quantile(np.abs(null), 0.95)


def test_kid_needs_two():
    with pytest.raises(ValueError):
        kid_mmd(np.zeros((1, 2)), np.zeros((3, 2)))


def test_intra_diversity_examples():
    targets = np.array([[0.0, 0.0], [10.0, 0.0]])
    gen = np.array([[0.0, 1.0], [0.0, -1.0], [10.0, 1.0]])
    assert intra_diversity(gen, targets) == 2.0
    assert intra_diversity(np.ones((5, 2)), targets) == 0.0
    assert intra_diversity(np.array([[0.0, 0.0], [10.0, 0.0]]), targets) == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 32), st.just(2)), elements=st.floats(-5, 5)),
       arrays(np.float64, st.tuples(st.integers(1, 4), st.just(2)), elements=st.floats(-5, 5)))
def test_intra_diversity_matches_brute_force(gen, targets):
    assert intra_diversity(gen, targets) == intra_diversity_loops(gen.tolist(), targets.tolist())


def test_intra_diversity_random_20_points():
    rng = np.random.default_rng(3)
    for _ in range(10):
        gen, tgt = rng.normal(size=(20, 2)), rng.normal(size=(3, 2))
        assert intra_diversity(gen, tgt) == intra_diversity_loops(gen.tolist(), tgt.tolist())


def test_projection_distance_fixed():
    a = ProjectionDistance(64, 32, seed=1)
    b = ProjectionDistance(64, 32, seed=1)
    x = np.random.default_rng(0).normal(size=(4, 64))
    assert np.array_equal(a(x, x), b(x, x)) and np.allclose(np.diag(a(x, x)), 0)


MODES = ModeSpec(np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]), [SHARED, SOURCE_ONLY, TARGET_ONLY])


def test_incompatible_mass_examples():
    assert incompatible_mass(np.tile([5.0, 0.0], (4, 1)), MODES) == 1.0
    assert incompatible_mass(np.array([[0.0, 0.1], [0.1, 5.0]]), MODES) == 0.0
    x = np.array([[5.0, 0.0]] * 3 + [[0.0, 0.0]] * 7)
    assert incompatible_mass(x, MODES) == pytest.approx(0.3)
    assert incompatible_mass(x[::-1], MODES) == incompatible_mass(x, MODES)


def test_mode_spec_validation():
    with pytest.raises(ValueError):
        ModeSpec(np.zeros((2, 2)), [SHARED, SOURCE_ONLY])
    with pytest.raises(ValueError):
        ModeSpec(np.eye(2), [SHARED, "other"])


def test_nearest_neighbor_examples():
    pool = np.array([[1.0, 0.0], [0.0, 2.0]])
    i, s, dist = nearest_neighbor(np.zeros(2), pool)
    assert i == 0 and np.array_equal(s, [1.0, 0.0]) and dist == 1.0
    assert nearest_neighbor(pool[1], pool)[2] == 0.0
    i, s, _ = nearest_neighbor(np.zeros(2), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert i == 0
    perm = pool[::-1]
    assert np.array_equal(nearest_neighbor(np.zeros(2), perm)[1], [1.0, 0.0])
    with pytest.raises(ValueError):
        nearest_neighbor(np.zeros(2), np.empty((0, 2)))


def test_interpolate_latents(point_gan, rng):
    z1, z2 = rng.normal(size=4), rng.normal(size=4)
    out = interpolate_latents(point_gan.g, z1, z2, 3)
    # one batched forward; BLAS results can depend on batch size
    assert np.array_equal(out, generate(point_gan.g, np.stack([z1, (z1 + z2) / 2, z2])))
    a = interpolate_latents(point_gan.g, z1, z2, 5)
    assert a.tobytes() == interpolate_latents(point_gan.g, z1, z2, 5).tobytes()
    with pytest.raises(ValueError):
        interpolate_latents(point_gan.g, z1, z2, 1)


def test_filter_mode_attribution(point_gan, rng):
    layout = build_filter_layout(point_gan.g, point_gan.d)
    modes = ModeSpec(np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]), [SHARED, SOURCE_ONLY, TARGET_ONLY])
    bank = "F" * len(layout)
    bank = bank[:3] + "X" + bank[4:]
    point_gan.g.layers[0].zero_filter(3)
    before = point_gan.g.flat().copy()
    out = filter_mode_attribution(point_gan.g, layout, bank, modes, rng.normal(size=(200, 4)))
    assert point_gan.g.flat().tobytes() == before.tobytes()
    assert len(out) == layout.count("G")
    assert np.all(out[3] == 0.0)
    assert all(abs(v.sum()) < 1e-12 for v in out.values())


def test_frechet_samples_zero_on_same_set(rng):
    x = rng.normal(size=(50, 2))
    assert frechet_samples(x, x) == pytest.approx(0.0, abs=1e-12)
