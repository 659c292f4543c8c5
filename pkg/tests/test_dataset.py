import numpy as np
import pytest

from nfem.dataset import (
    SampleSet,
    audit_residuals,
    embed_lshape,
    extract_lshape,
    generate_dataset,
    generate_load_case,
    inject_noise,
    split_dataset,
)
from nfem.dataset_io import DatasetFormatError, load_dataset, save_dataset
from nfem.ordering import OrderingMap, apply_ordering


@pytest.fixture(scope="module")
def small_set(beam2d_small, mat):
    return generate_dataset(beam2d_small, mat, count=24, force_range=(-2.5, 2.5),
                            seed=101, problem_id="beam2d")


class TestGenerateLoadCase:
    def test_single_excited_node_within_range(self, beam2d_paper):
        rng = np.random.default_rng(0)
        f = generate_load_case(beam2d_paper, (-2.5, 2.5), rng)
        nz = np.flatnonzero(f)
        assert nz.size == 2
        assert nz[0] // 2 == nz[1] // 2  # same node, both components
        assert np.all(np.abs(f[nz]) <= 2.5)

    def test_degenerate_range_gives_zero(self, beam2d_paper):
        rng = np.random.default_rng(1)
        f = generate_load_case(beam2d_paper, (0.0, 0.0), rng)
        np.testing.assert_array_equal(f, 0.0)

    def test_node_selection_uniform(self, beam2d_paper):
        # Chi-square style check: each eligible node within 3 binomial sigma.
        mesh = beam2d_paper
        rng = np.random.default_rng(42)
        draws = 10_000
        counts = np.zeros(mesh.load_nodes.size)
        lookup = {int(n): i for i, n in enumerate(mesh.load_nodes)}
        for _ in range(draws):
            f = generate_load_case(mesh, (1.0, 1.0), rng)
            node = int(np.flatnonzero(f)[0] // 2)
            counts[lookup[int(mesh.active_nodes[node])]] += 1
        p = 1.0 / mesh.load_nodes.size
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) <= 3 * sigma)

    def test_empty_load_set_rejected(self, beam2d_paper):
        import dataclasses

        mesh = dataclasses.replace(beam2d_paper, load_nodes=np.array([], dtype=np.int64))
        with pytest.raises(ValueError):
            generate_load_case(mesh, (-1, 1), np.random.default_rng(0))


class TestGenerateDataset:
    def test_shapes_and_convergence(self, small_set, beam2d_small):
        assert small_set.f.shape == (24, 8, 3, 2)
        assert small_set.u.shape == (24, 8, 3, 2)
        assert small_set.redraws == 0

    def test_seed_reproducibility_bitwise(self, beam2d_small, mat, small_set):
        again = generate_dataset(beam2d_small, mat, count=24, force_range=(-2.5, 2.5),
                                 seed=101, problem_id="beam2d")
        assert again.f.tobytes() == small_set.f.tobytes()
        assert again.u.tobytes() == small_set.u.tobytes()

    def test_residual_audit(self, beam2d_small, mat, small_set):
        worst = audit_residuals(beam2d_small, mat, small_set, fraction=0.2, seed=3)
        assert worst <= 1e-6

    def test_threaded_generation_matches_serial(self, beam2d_small, mat, small_set,
                                                monkeypatch):
        monkeypatch.setenv("NFEM_THREADS", "4")
        threaded = generate_dataset(beam2d_small, mat, count=24, force_range=(-2.5, 2.5),
                                    seed=101, problem_id="beam2d")
        assert threaded.f.tobytes() == small_set.f.tobytes()
        assert threaded.u.tobytes() == small_set.u.tobytes()


class TestSplit:
    def test_paper_sizes(self):
        s = _dummy_set(6000)
        train, test = split_dataset(s, 0.05, seed=0)
        assert (train.count, test.count) == (5700, 300)

    def test_small_sizes(self):
        train, test = split_dataset(_dummy_set(100), 0.05, seed=0)
        assert (train.count, test.count) == (95, 5)

    def test_partition(self):
        s = _dummy_set(40)
        train, test = split_dataset(s, 0.25, seed=1)
        key = lambda arr: {a.tobytes() for a in arr}
        all_f = key(s.f)
        assert key(train.f) | key(test.f) == all_f
        assert key(train.f) & key(test.f) == set()

    def test_rejects_bad_fraction(self):
        with pytest.raises(ValueError):
            split_dataset(_dummy_set(10), 0.0, seed=0)
        with pytest.raises(ValueError):
            split_dataset(_dummy_set(10), 1.0, seed=0)


def _dummy_set(n, grid=(4, 3), dim=2, seed=9):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((n, *grid, dim))
    u = rng.standard_normal((n, *grid, dim))
    return SampleSet("dummy", grid, dim, f, u, (-1.0, 1.0), seed)


class TestNoise:
    def test_only_weak_forces_corrupted(self, small_set):
        noised = inject_noise(small_set, threshold=0.7, level=0.2, seed=5)
        mags = small_set.excited_magnitudes()
        for i in range(small_set.count):
            changed = not np.array_equal(noised.u[i], small_set.u[i])
            assert changed == (mags[i] < 0.7)
        assert noised.noise_spec.threshold == 0.7
        assert noised.noise_spec.level == 0.2

    def test_noise_moments(self):
        # Sample std of u'/u - 1 over noised DOFs matches the level.
        n, grid = 50, (50, 20)
        s = _dummy_set(n, grid=grid)
        s.u[:] = 1.0
        s.f[:] = 0.0
        s.f[:, 0, 0, 0] = 0.1  # every sample weakly loaded -> all noised
        noised = inject_noise(s, threshold=0.7, level=0.2, seed=11)
        eta = (noised.u / s.u - 1.0).reshape(-1)
        assert eta.size >= 1e5
        assert eta.std() == pytest.approx(0.2, abs=0.01)
        assert eta.mean() == pytest.approx(0.0, abs=0.01)

    def test_level_bounds(self, small_set):
        with pytest.raises(ValueError):
            inject_noise(small_set, 0.7, 0.0, seed=0)


class TestLshapeEmbedding:
    def test_pad_and_roundtrip(self, lshape_mesh):
        rng = np.random.default_rng(2)
        f = rng.standard_normal((5, 80, 2))
        u = rng.standard_normal((5, 80, 2))
        padded = embed_lshape(lshape_mesh, f, u)
        assert padded.f.shape == (5, 16, 8, 2)
        void = ~lshape_mesh.active_mask
        assert np.all(padded.f.reshape(5, -1, 2)[:, void] == 0.0)
        assert np.all(padded.u.reshape(5, -1, 2)[:, void] == 0.0)
        f2, u2 = extract_lshape(lshape_mesh, padded)
        np.testing.assert_array_equal(f2, f)
        np.testing.assert_array_equal(u2, u)

    def test_zero_input(self, lshape_mesh):
        padded = embed_lshape(lshape_mesh, np.zeros((1, 80, 2)), np.zeros((1, 80, 2)))
        assert not padded.f.any() and not padded.u.any()

    def test_node_count_mismatch(self, lshape_mesh):
        with pytest.raises(ValueError):
            embed_lshape(lshape_mesh, np.zeros((1, 79, 2)), np.zeros((1, 79, 2)))

    def test_generated_lshape_zero_at_voids(self, lshape_mesh, mat):
        s = generate_dataset(lshape_mesh, mat, count=4, force_range=(-1, 1), seed=7)
        void = ~lshape_mesh.active_mask
        assert np.all(s.f.reshape(4, -1, 2)[:, void] == 0.0)
        assert np.all(s.u.reshape(4, -1, 2)[:, void] == 0.0)


class TestOrdering:
    def test_preferred_is_identity(self, small_set):
        m = OrderingMap.preferred(int(np.prod(small_set.grid_shape)))
        out = apply_ordering(small_set, m)
        np.testing.assert_array_equal(out.f, small_set.f)
        np.testing.assert_array_equal(out.u, small_set.u)

    def test_roundtrip_inverse(self, small_set):
        m = OrderingMap.random(int(np.prod(small_set.grid_shape)), seed=7)
        back = apply_ordering(apply_ordering(small_set, m), m.inverse())
        np.testing.assert_array_equal(back.f, small_set.f)
        np.testing.assert_array_equal(back.u, small_set.u)

    def test_random_deterministic(self):
        a = OrderingMap.random(24, seed=7)
        b = OrderingMap.random(24, seed=7)
        np.testing.assert_array_equal(a.permutation, b.permutation)

    def test_gmsh_like_groups(self):
        m = OrderingMap.gmsh_like((4, 3))
        # Corners get the first four numbers.
        corner_nodes = [0, 2, 9, 11]  # raster indices of (0,0),(0,2),(3,0),(3,2)
        assert sorted(m.permutation[corner_nodes]) == [0, 1, 2, 3]
        # Interior nodes come last.
        interior = [4, 7]  # (1,1), (2,1)
        assert sorted(m.permutation[interior]) == [10, 11]

    def test_non_bijective_rejected(self):
        with pytest.raises(ValueError):
            OrderingMap(np.array([0, 0, 1]), "broken")

    def test_wrong_size_rejected(self, small_set):
        with pytest.raises(ValueError):
            apply_ordering(small_set, OrderingMap.preferred(5))

    def test_permutation_preserves_error_statistics(self, small_set):
        # The physics is permutation invariant: elementwise statistics between
        # f and u are unchanged when both are permuted consistently.
        m = OrderingMap.random(int(np.prod(small_set.grid_shape)), seed=3)
        out = apply_ordering(small_set, m)
        assert np.abs(out.u).sum() == pytest.approx(np.abs(small_set.u).sum(), rel=1e-15)
        assert (out.f * out.u).sum() == pytest.approx((small_set.f * small_set.u).sum(),
                                                      rel=1e-12)


class TestDatasetIO:
    def test_roundtrip_bit_exact(self, small_set, tmp_path):
        p = tmp_path / "set.nfemds"
        save_dataset(small_set, p)
        loaded = load_dataset(p)
        assert loaded.f.tobytes() == small_set.f.tobytes()
        assert loaded.u.tobytes() == small_set.u.tobytes()
        assert loaded.grid_shape == small_set.grid_shape
        assert loaded.dim == small_set.dim
        assert loaded.force_range == small_set.force_range
        assert loaded.seed == small_set.seed
        assert loaded.noise_spec == small_set.noise_spec
        # Re-serialization is byte identical.
        p2 = tmp_path / "set2.nfemds"
        save_dataset(loaded, p2)
        assert p.read_bytes() == p2.read_bytes()

    def test_noise_spec_roundtrip(self, small_set, tmp_path):
        noised = inject_noise(small_set, 0.7, 0.2, seed=1)
        p = tmp_path / "noised.nfemds"
        save_dataset(noised, p)
        assert load_dataset(p).noise_spec == noised.noise_spec

    def test_truncated_rejected(self, small_set, tmp_path):
        p = tmp_path / "set.nfemds"
        save_dataset(small_set, p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DatasetFormatError):
            load_dataset(p)

    def test_corrupted_crc_rejected(self, small_set, tmp_path):
        p = tmp_path / "set.nfemds"
        save_dataset(small_set, p)
        blob = bytearray(p.read_bytes())
        blob[100] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(DatasetFormatError):
            load_dataset(p)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.nfemds"
        p.write_bytes(b"NOTADATASET")
        with pytest.raises(DatasetFormatError):
            load_dataset(p)

    def test_shape_check(self, small_set, tmp_path):
        p = tmp_path / "set.nfemds"
        save_dataset(small_set, p)
        with pytest.raises(DatasetFormatError):
            load_dataset(p, expect_grid_shape=(16, 8))
