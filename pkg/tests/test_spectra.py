import numpy as np
import pytest

from aimkit.spectra import (
    QHAT_CAP,
    SpectralDensity,
    WishartPrior,
    convolved_density,
    mu_cubed_integral,
    rie_denoise,
    rie_divergence,
    semicircle_density,
    stieltjes_free_conv,
    support_edges,
    teacher_density,
)
from aimkit.state_evolution import prior_update

from conftest import sym_noise


def sample_teacher_matrix(rng, d, rho):
    r = int(round(rho * d))
    W = rng.standard_normal((d, r))
    return W @ W.T / np.sqrt(r * d)


class TestWishartPrior:
    def test_moment_identity(self):
        for rho in (0.1, 0.5, 1.0, 2.0):
            p = WishartPrior(rho)
            assert p.kappa2 - p.kappa1**2 == pytest.approx(1.0, abs=1e-14)

    def test_rejects_bad_rho(self):
        with pytest.raises(ValueError):
            WishartPrior(0.0)
        with pytest.raises(ValueError):
            WishartPrior(-1.0)


class TestTeacherDensity:
    def test_zero_mass_rho_half(self):
        assert teacher_density(WishartPrior(0.5)).zero_mass == pytest.approx(0.5)

    def test_zero_mass_rho_two(self):
        assert teacher_density(WishartPrior(2.0)).zero_mass == 0.0

    def test_first_moment_against_sampled_traces(self, rng):
        # oracle: Tr S / d averaged over 8 draws at d=2000, r=500
        d, r = 2000, 500
        traces = []
        for _ in range(8):
            W = rng.standard_normal((d, r))
            traces.append(np.sum(W * W) / (d * np.sqrt(r * d)))
        oracle = np.mean(traces)
        dens = teacher_density(WishartPrior(0.25))
        assert dens.moment(1) == pytest.approx(oracle, abs=0.02)
        assert dens.moment(1) == pytest.approx(0.5, abs=0.02)

    def test_normalization_and_second_moment(self):
        for rho in (0.25, 0.5, 2.0):
            dens = teacher_density(WishartPrior(rho))
            assert dens.mass() == pytest.approx(1.0, abs=1e-6)
            assert dens.moment(2) == pytest.approx(1 + rho, abs=1e-4)

    def test_grid_size_guard(self):
        with pytest.raises(ValueError):
            teacher_density(WishartPrior(0.5), grid_size=8)


class TestStieltjes:
    def test_herglotz_property(self, rng):
        zs = rng.standard_normal(1000) * 3 + 1j * np.abs(rng.standard_normal(1000))
        for rho in (0.1, 0.5, 1.0, 2.0):
            for qhat in (0.1, 1.0, 10.0):
                m = stieltjes_free_conv(zs, WishartPrior(rho), qhat)
                assert (m.imag >= -1e-12).all()

    def test_zero_noise_limit_matches_teacher_transform(self):
        # qhat -> inf: transform of the teacher law itself; compare against
        # quadrature of the closed-form density
        prior = WishartPrior(0.5)
        dens = teacher_density(prior, 4000)
        z = 6.0 + 0.5j
        quad = np.trapezoid(dens.values / (dens.grid - z), dens.grid)
        quad += dens.zero_mass / (0.0 - z)
        m = stieltjes_free_conv(z, prior, 1e6)
        assert abs(m - quad) < 1e-3

    def test_density_at_zero_vs_empirical(self, rng):
        # eigen-decomposition oracle at d=2000, rho=1, qhat=1
        d = 2000
        S = sample_teacher_matrix(rng, d, 1.0)
        X = S + sym_noise(rng, d)
        ev = np.linalg.eigvalsh(X)
        emp = np.mean(np.abs(ev) < 0.1) / 0.2
        m = stieltjes_free_conv(0.0, WishartPrior(1.0), 1.0)
        assert m.imag / np.pi == pytest.approx(emp, abs=0.02)

    def test_rejects_nonpositive_qhat(self):
        with pytest.raises(ValueError):
            stieltjes_free_conv(0.0, WishartPrior(1.0), 0.0)


class TestConvolvedDensity:
    @pytest.mark.parametrize("rho", [0.1, 0.5, 1.0, 2.0])
    @pytest.mark.parametrize("qhat", [0.1, 1.0, 10.0])
    def test_normalization_sweep(self, rho, qhat):
        dens = convolved_density(WishartPrior(rho), qhat)
        assert dens.mass() == pytest.approx(1.0, abs=1e-4)
        assert dens.zero_mass == 0.0

    def test_second_moment(self):
        dens = convolved_density(WishartPrior(0.5), 2.0)
        assert dens.moment(2) == pytest.approx(2.0, abs=0.01)

    def test_second_moment_additivity_vs_sampled(self, rng):
        d = 2000
        S = sample_teacher_matrix(rng, d, 0.5)
        X = S + sym_noise(rng, d) / np.sqrt(2.0)
        emp = np.mean(np.linalg.eigvalsh(X) ** 2)
        assert emp == pytest.approx(2.0, abs=0.05)

    def test_vanishing_noise_matches_teacher_pointwise(self):
        prior = WishartPrior(0.5)
        dc = convolved_density(prior, 1e6)
        dt = teacher_density(prior)
        lo, hi = dt.edges[0]
        xs = np.linspace(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo), 300)
        diff = np.interp(xs, dc.grid, dc.values) - np.interp(xs, dt.grid, dt.values)
        assert np.max(np.abs(diff)) < 0.02

    def test_kolmogorov_distance_vs_empirical(self, rng):
        d = 2000
        S = sample_teacher_matrix(rng, d, 0.5)
        X = S + sym_noise(rng, d)
        ev = np.sort(np.linalg.eigvalsh(X))
        dens = convolved_density(WishartPrior(0.5), 1.0)
        pieces = np.diff(dens.grid) * (dens.values[1:] + dens.values[:-1]) / 2
        cdf = np.concatenate([[0.0], np.cumsum(pieces)])
        ks = np.max(np.abs(np.interp(ev, dens.grid, cdf) - (np.arange(1, d + 1) - 0.5) / d))
        assert ks < 0.03

    def test_values_vanish_outside_edges(self):
        dens = convolved_density(WishartPrior(0.5), 2.0)
        (lo, hi), = dens.edges
        outside = (dens.grid < lo - 1e-12) | (dens.grid > hi + 1e-12)
        assert np.all(dens.values[outside] <= 1e-12)

    def test_atom_bump_detected_at_weak_noise(self):
        edges = support_edges(WishartPrior(0.25), 1e4)
        assert len(edges) == 2
        lo, hi = edges[0]
        assert lo < 0 < hi  # smeared zero-eigenvalue cluster


class TestMuCubed:
    def test_semicircle_closed_form(self):
        # oracle: int sc(delta)^3 = 3/(4 pi^2 delta), from
        # int (a^2 - x^2)^(3/2) dx = 3 pi a^4 / 8 with a = 2 sqrt(delta)
        for delta, scale in ((1.0, 1.0), (0.25, 4.0)):
            val = mu_cubed_integral(semicircle_density(delta))
            target = scale * 3.0 / (4.0 * np.pi**2)
            assert val == pytest.approx(target, rel=1e-6)

    def test_cubic_homogeneity_under_dilation(self):
        base = semicircle_density(1.0)
        dilated = SpectralDensity(
            base.grid * 2.0, base.values / 2.0, 0.0,
            [(e[0] * 2, e[1] * 2) for e in base.edges],
            list(base.segments),
        )
        assert dilated.mass() == pytest.approx(1.0, abs=1e-6)
        assert mu_cubed_integral(dilated) == pytest.approx(
            mu_cubed_integral(base) / 4.0, rel=1e-9
        )

    def test_atom_excluded(self):
        dens = teacher_density(WishartPrior(0.5))
        with_atom = mu_cubed_integral(dens)
        no_atom = mu_cubed_integral(
            SpectralDensity(dens.grid, dens.values, 0.0, dens.edges, list(dens.segments))
        )
        assert with_atom == no_atom


class TestRieDenoise:
    def test_noiseless_limit_is_identity(self, rng):
        d = 64
        S = sample_teacher_matrix(rng, d, 0.5)
        w, v = np.linalg.eigh(S)
        out = rie_denoise(w, v, 1e-9, WishartPrior(0.5))
        assert np.allclose(out, S, atol=1e-6)

    def test_improves_on_raw_observation(self, rng):
        # Monte-Carlo denoising oracle: 8 draws at d=400, rho=0.5, delta=0.5
        d, rho, delta = 400, 0.5, 0.5
        prior = WishartPrior(rho)
        mse_raw, mse_rie = [], []
        for _ in range(8):
            S = sample_teacher_matrix(rng, d, rho)
            X = S + np.sqrt(delta) * sym_noise(rng, d)
            w, v = np.linalg.eigh(X)
            Shat = rie_denoise(w, v, delta, prior)
            mse_raw.append(np.mean((X - S) ** 2))
            mse_rie.append(np.mean((Shat - S) ** 2))
        assert np.mean(mse_rie) < np.mean(mse_raw)

    def test_preserves_eigenbasis(self, rng):
        d = 32
        S = sample_teacher_matrix(rng, d, 0.5)
        X = S + 0.3 * sym_noise(rng, d)
        w, v = np.linalg.eigh(X)
        out = rie_denoise(w, v, 0.09, WishartPrior(0.5))
        off = v.T @ out @ v
        assert np.allclose(off - np.diag(np.diag(off)), 0.0, atol=1e-10)

    def test_rejects_nonpositive_delta(self, rng):
        with pytest.raises(ValueError):
            rie_denoise(np.ones(4), np.eye(4), 0.0, WishartPrior(1.0))


class TestRieDivergence:
    def test_zero_noise_limit(self):
        assert rie_divergence(1e-9, WishartPrior(0.5)) == 0.0

    def test_infinite_noise_limit(self):
        # data-less posterior variance kappa2 - kappa1^2 = 1
        val = rie_divergence(1e6, WishartPrior(0.5))
        assert val == pytest.approx(1.0, abs=1e-3)

    def test_matches_prior_update_residual(self):
        prior = WishartPrior(0.5)
        val = rie_divergence(1.0, prior)
        assert 0.0 < val < 1.0
        assert val == pytest.approx(prior.kappa2 - prior_update(1.0, prior), abs=1e-6)

    def test_monotone_in_delta(self):
        prior = WishartPrior(0.5)
        deltas = np.geomspace(1e-3, 1e3, 50)
        vals = [rie_divergence(d, prior, grid_size=1000) for d in deltas]
        assert all(b >= a - 1e-9 for a, b in zip(vals, vals[1:]))


class TestCsvExport:
    def test_round_trip_header(self, tmp_path):
        dens = convolved_density(WishartPrior(0.5), 2.0, grid_size=200)
        path = tmp_path / "dens.csv"
        dens.to_csv(path, rho=0.5, qhat=2.0)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("x,mu,rho=0.5,qhat=2.0,zero_mass=")
        x, mu = zip(*(line.split(",")[:2] for line in lines[1:]))
        assert np.allclose(np.array(x, float), dens.grid)
        assert np.allclose(np.array(mu, float), dens.values)
