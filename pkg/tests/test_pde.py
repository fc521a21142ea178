"""Generator and solver tests: scheme-exactness oracles, conservation, io."""

import struct
import zlib
from math import comb

import numpy as np
import pytest
from scipy.signal import correlate2d

from stencilseer.dataio import export_csv, load_dataset, save_dataset
from stencilseer.errors import CompatibilityError, FormatError, StabilityError
from stencilseer.pde import (
    Dataset,
    GenConfig,
    SourceSpec,
    gen_coupled,
    gen_elliptic,
    gen_hyperbolic,
    gen_parabolic,
    generate_dataset,
    generate_sample,
    smooth_signal,
    solve_tridiagonal_neumann,
    transport_step,
)


def upwind_stencil(c):
    # Annihilator of the +x upwind scheme, (space, time) orientation.
    return np.array([[-c, 0.0], [c - 1.0, 1.0]])


def ftcs_stencil(r):
    return np.array([[-r, 0.0], [2.0 * r - 1.0, 1.0], [-r, 0.0]])


def interior_residual(image2d, stencil):
    res = correlate2d(image2d, stencil, mode="valid")
    m = stencil.shape[0] + 1
    return np.max(np.abs(res[m:-m])) if res.shape[0] > 2 * m else 0.0


class TestTridiagonalSolver:
    def test_zero_source_gives_zero(self):
        u = solve_tridiagonal_neumann(np.zeros(6), 1.0, 1.0)
        np.testing.assert_array_equal(u, 0.0)

    def test_w4_hand_solution(self):
        u = solve_tridiagonal_neumann([1.0, 0.0, 0.0, -1.0], 1.0, 1.0)
        np.testing.assert_allclose(u, [-1.5, -0.5, 0.5, 1.5], atol=1e-13)

    @pytest.mark.parametrize("seed", range(20))
    def test_system_residual_matrix_oracle(self, seed):
        rng = np.random.default_rng(seed)
        w = int(rng.integers(4, 40))
        a = float(rng.uniform(0.5, 3.0))
        dx = 1.0
        p = rng.normal(size=w)
        p -= p.mean()  # compatible
        u = solve_tridiagonal_neumann(p, a, dx)
        kappa = a / dx**2
        mat = np.zeros((w, w))
        mat[0, 0], mat[0, 1] = -kappa, kappa
        for i in range(1, w - 1):
            mat[i, i - 1 : i + 2] = (kappa, -2.0 * kappa, kappa)
        mat[w - 1, w - 2], mat[w - 1, w - 1] = kappa, -kappa
        rhs = p.copy()
        rhs[0] /= dx
        rhs[-1] /= dx
        assert np.max(np.abs(mat @ u - rhs)) <= 1e-12
        assert abs(u.mean()) <= 1e-13

    def test_incompatible_source_rejected(self):
        with pytest.raises(CompatibilityError):
            solve_tridiagonal_neumann([1.0, 0.0, 0.0, 0.0], 1.0, 1.0)


CFG = dict(W=50, H=50, alpha=1e-4)


class TestHyperbolic:
    def test_cfl_one_pulse_shifts_on_diagonal(self):
        cfg = GenConfig("hyperbolic", cfl=1.0, **CFG)
        g = np.zeros(50)
        g[0] = 1.0
        s = gen_hyperbolic(cfg, SourceSpec(g=g))
        expected = np.eye(50)
        np.testing.assert_array_equal(s.image[:, :, 0], expected)

    def test_cfl_half_pulse_is_binomial(self):
        cfg = GenConfig("hyperbolic", cfl=0.5, **CFG)
        g = np.zeros(50)
        g[0] = 1.0
        s = gen_hyperbolic(cfg, SourceSpec(g=g))
        v = s.image[:, :, 0]
        for n in (0, 1, 2, 7, 20, 49):
            for i in range(min(n, 49) + 1):
                assert v[i, n] == pytest.approx(comb(n, i) * 0.5**n, abs=1e-300)
        assert np.all(v[np.triu_indices(50, k=1)[::-1]] == 0.0)  # below the wavefront

    def test_interior_residual_annihilated(self):
        s = generate_sample(GenConfig("hyperbolic", **CFG), 7)
        assert interior_residual(s.image[:, :, 0], upwind_stencil(0.5)) <= 1e-12

    def test_injection_trace_visible_in_residual(self):
        s = generate_sample(GenConfig("hyperbolic", **CFG), 11)
        res = correlate2d(s.image[:, :, 0], upwind_stencil(0.5), mode="valid")
        np.testing.assert_allclose(res[0], s.boundary[0, 1:, 0], atol=1e-15)

    def test_cfl_violation_rejected(self):
        cfg = GenConfig("hyperbolic", cfl=1.5, **CFG)
        with pytest.raises(StabilityError):
            gen_hyperbolic(cfg, SourceSpec())


class TestElliptic:
    def test_identical_source_columns_identical_solution_columns(self):
        cfg = GenConfig("elliptic", **CFG)
        trace = np.full(50, 3e-5)
        s = gen_elliptic(cfg, SourceSpec(p0=trace, pL=-trace))
        first = s.image[:, 0, 0]
        for t in range(1, 50):
            np.testing.assert_array_equal(s.image[:, t, 0], first)

    def test_columns_permute_with_sources(self):
        cfg = GenConfig("elliptic", **CFG)
        rng = np.random.default_rng(0)
        trace = smooth_signal(rng, 50, 1e-4)
        s1 = gen_elliptic(cfg, SourceSpec(p0=trace, pL=-trace))
        perm = rng.permutation(50)
        s2 = gen_elliptic(cfg, SourceSpec(p0=trace[perm], pL=-trace[perm]))
        np.testing.assert_array_equal(s1.image[:, perm, 0], s2.image[:, :, 0])

    def test_columns_have_zero_mean(self):
        s = generate_sample(GenConfig("elliptic", **CFG), 5)
        np.testing.assert_allclose(s.image[:, :, 0].mean(axis=0), 0.0, atol=1e-18)

    def test_interior_second_difference_annihilated(self):
        s = generate_sample(GenConfig("elliptic", **CFG), 13)
        col = np.array([[-1.0], [2.0], [-1.0]])
        assert interior_residual(s.image[:, :, 0], col) <= 1e-12

    def test_source_trace_visible_in_residual(self):
        s = generate_sample(GenConfig("elliptic", **CFG), 21)
        col = np.array([[-1.0], [2.0], [-1.0]])
        res = correlate2d(s.image[:, :, 0], col, mode="valid")
        np.testing.assert_allclose(res[0], -s.boundary[0, :, 0], atol=1e-15)
        np.testing.assert_allclose(res[-1], -s.boundary[1, :, 0], atol=1e-15)


class TestParabolic:
    def test_zero_source_mass_conserved(self):
        cfg = GenConfig("parabolic", **CFG)
        rng = np.random.default_rng(3)
        f = smooth_signal(rng, 50, 1e-4)
        s = gen_parabolic(cfg, SourceSpec(f=f))
        mass = s.image[:, :, 0].sum(axis=0)
        assert np.max(np.abs(mass - mass[0])) <= 1e-10

    def test_half_ratio_delta_spreads_binomially(self):
        cfg = GenConfig("parabolic", cfl=0.5, **CFG)
        f = np.zeros(50)
        f[25] = 1.0
        s = gen_parabolic(cfg, SourceSpec(f=f))
        u = s.image[:, :, 0]
        # At r = 1/2 the update is the two-neighbour average; one parity stays zero.
        for n in (1, 2, 3, 8):
            np.testing.assert_allclose(
                u[1:-1, n], 0.5 * (u[2:, n - 1] + u[:-2, n - 1]), atol=1e-300
            )
        assert u[25, 2] == pytest.approx(comb(2, 1) * 0.25)
        assert u[24, 2] == 0.0  # opposite parity stays empty
        assert u[25, 1] == 0.0

    def test_interior_residual_annihilated(self):
        s = generate_sample(GenConfig("parabolic", **CFG), 17)
        assert interior_residual(s.image[:, :, 0], ftcs_stencil(0.5)) <= 1e-12

    def test_source_traces_visible_in_residual(self):
        s = generate_sample(GenConfig("parabolic", **CFG), 19)
        res = correlate2d(s.image[:, :, 0], ftcs_stencil(0.5), mode="valid")
        np.testing.assert_allclose(res[0], s.boundary[0, 1:, 0], atol=1e-15)
        np.testing.assert_allclose(res[-1], s.boundary[1, 1:, 0], atol=1e-15)

    def test_ratio_bound_enforced(self):
        with pytest.raises(StabilityError):
            gen_parabolic(GenConfig("parabolic", cfl=0.6, **CFG), SourceSpec())


class TestCoupled:
    def test_zero_potential_freezes_transport(self):
        cfg = GenConfig("coupled", **CFG)
        rng = np.random.default_rng(4)
        g = smooth_signal(rng, 50, 1e-4)
        s = gen_coupled(cfg, SourceSpec(p0=np.zeros(50), pL=np.zeros(50), g=g))
        np.testing.assert_array_equal(s.image[:, :, 0], 0.0)
        for t in range(50):
            np.testing.assert_array_equal(s.image[:, t, 1], g)

    def test_constant_velocity_matches_hyperbolic_bit_exactly(self):
        cfg = GenConfig("hyperbolic", cfl=0.5, **CFG)
        rng = np.random.default_rng(5)
        q0 = smooth_signal(rng, 50, 1e-4)
        g = smooth_signal(rng, 50, 1e-4)
        hyp = gen_hyperbolic(cfg, SourceSpec(q0=q0, g=g))
        # Same stepping driven by a forced-constant velocity field.
        v = np.zeros((50, 50))
        v[:, 0] = g
        u_const = np.full(50, cfg.a)
        dt_eff = cfg.cfl * cfg.dx / cfg.a
        for n in range(49):
            v[:, n + 1] = transport_step(v[:, n], u_const, q0[n + 1], dt_eff, cfg.dx)
        assert v.tobytes() == hyp.image[:, :, 0].tobytes()

    def test_mass_balance_per_step(self):
        cfg = GenConfig("coupled", **CFG)
        s = generate_sample(cfg, 23)
        u = s.image[:, :, 0]
        v = s.image[:, :, 1]
        q0 = s.boundary[0, :, 1]
        for n in range(10):
            uf = 0.5 * (u[:-1, n] + u[1:, n])
            outflow = u[-1, n] * v[-1, n] if u[-1, n] > 0 else 0.0
            expected = v[:, n].sum() - outflow * cfg.dt / cfg.dx + q0[n + 1]
            assert v[:, n + 1].sum() == pytest.approx(expected, abs=1e-10)

    def test_channels_finite_and_ordered(self):
        s = generate_sample(GenConfig("coupled", **CFG), 29)
        assert s.image.shape == (50, 50, 2)
        assert np.isfinite(s.image).all()
        # channel 0 carries the larger-magnitude potential field
        assert np.max(np.abs(s.image[:, :, 0])) > np.max(np.abs(s.image[:, :, 1]))

    def test_per_step_cfl_enforced(self):
        cfg = GenConfig("coupled", u_amp=5.0, **CFG)
        with pytest.raises(StabilityError):
            generate_sample(cfg, 1)


class TestDatasetProperties:
    def test_generation_deterministic(self):
        cfg = GenConfig("hyperbolic", n_samples=5, seed=42, **CFG)
        d1 = generate_dataset(cfg)
        d2 = generate_dataset(cfg)
        for s1, s2 in zip(d1.samples, d2.samples):
            assert s1.image.tobytes() == s2.image.tobytes()
            assert s1.boundary.tobytes() == s2.boundary.tobytes()
            assert s1.meta == s2.meta

    def test_split_80_20_disjoint_and_complete(self):
        cfg = GenConfig("elliptic", n_samples=101, seed=3, **CFG)
        ds = generate_dataset(cfg)
        train = set(ds.train_indices.tolist())
        val = set(ds.val_indices.tolist())
        assert len(train) == 80 and len(val) == 21
        assert train.isdisjoint(val)
        assert train | val == set(range(101))

    def test_magnitudes_bounded(self):
        for family in ("hyperbolic", "elliptic", "parabolic"):
            cfg = GenConfig(family, n_samples=3, seed=9, **CFG)
            ds = generate_dataset(cfg)
            bound = cfg.alpha * cfg.W * cfg.H
            for s in ds.samples:
                assert np.max(np.abs(s.image)) <= bound

    def test_smooth_signal_amplitude_and_determinism(self):
        r1 = smooth_signal(np.random.default_rng(1), 64, 2.5)
        r2 = smooth_signal(np.random.default_rng(1), 64, 2.5)
        np.testing.assert_array_equal(r1, r2)
        assert np.max(np.abs(r1)) <= 2.5


class TestDatasetIO:
    def make_ds(self, family="hyperbolic", n=4, seed=1):
        return generate_dataset(GenConfig(family, n_samples=n, seed=seed, **CFG))

    def test_round_trip_bit_exact(self, tmp_path):
        ds = self.make_ds()
        p = tmp_path / "d.pdek"
        save_dataset(ds, p)
        back = load_dataset(p)
        assert len(back) == len(ds)
        for s1, s2 in zip(ds.samples, back.samples):
            assert s1.image.tobytes() == s2.image.tobytes()
            assert s1.boundary.tobytes() == s2.boundary.tobytes()
            assert s1.meta == s2.meta
        np.testing.assert_array_equal(back.train_indices, ds.train_indices)

    def test_save_is_byte_deterministic(self, tmp_path):
        ds = self.make_ds()
        p1, p2 = tmp_path / "a.pdek", tmp_path / "b.pdek"
        save_dataset(ds, p1)
        save_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_size_formula(self, tmp_path):
        ds = generate_dataset(GenConfig("elliptic", n_samples=101, seed=2, **CFG))
        p = tmp_path / "d.pdek"
        save_dataset(ds, p)
        header = 4 + 2 + 1 + 4 * 4
        record = 50 * 50 * 8 + 2 * 50 * 8 + (3 * 8 + 8)
        assert p.stat().st_size == header + 101 * record + 4

    def test_corrupted_magic_rejected(self, tmp_path):
        ds = self.make_ds(n=2)
        p = tmp_path / "d.pdek"
        save_dataset(ds, p)
        blob = bytearray(p.read_bytes())
        blob[0] = ord(b"X")
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_truncated_rejected(self, tmp_path):
        ds = self.make_ds(n=2)
        p = tmp_path / "d.pdek"
        save_dataset(ds, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_checksum_mismatch_rejected(self, tmp_path):
        ds = self.make_ds(n=2)
        p = tmp_path / "d.pdek"
        save_dataset(ds, p)
        blob = bytearray(p.read_bytes())
        blob[100] ^= 0xFF
        p.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_csv_export(self, tmp_path):
        ds = self.make_ds(family="coupled", n=2)
        written = export_csv(ds, tmp_path / "csv")
        assert len(written) == 4  # 2 samples x 2 channels
        arr = np.loadtxt(written[0], delimiter=",")
        np.testing.assert_array_equal(arr, ds.samples[0].image[:, :, 0])
