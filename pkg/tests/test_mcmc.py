"""MALA chain tests: stationary laws, buffer IO, exact eval accounting."""

import numpy as np
import pytest

from tempdiff.energies import (
    DoubleWell1D,
    EnergyCallCounter,
    GaussianDiag,
    GMM2D,
    LJParams,
    LennardJones,
)
from tempdiff.mcmc import (
    ChainConfig,
    EmptyBuffer,
    MalaState,
    SampleBuffer,
    collect_buffer,
    mala_step,
)


class TestMalaStep:
    def test_identity_proposal_has_unit_acceptance(self):
        # zero Langevin noise and zero drift: the MH log-ratio is exactly 0
        g = GaussianDiag(dim=2)
        x = np.zeros((4, 2))
        state = MalaState(energy=g.energy(x), score=g.score(x))
        drift = 0.0 * state.score
        prop = x + drift
        fwd = prop - x - drift
        rev = x - prop - drift
        log_q_diff = (np.sum(fwd**2, axis=1) - np.sum(rev**2, axis=1)) / (2 * 0.1)
        log_alpha = 1.0 * (state.energy - g.energy(prop)) + log_q_diff
        np.testing.assert_allclose(log_alpha, 0.0)

    def test_gaussian_stationary_moments(self):
        g = GaussianDiag(dim=1)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 1))
        state = None
        samples = []
        for _ in range(100_000):
            x, _, state, _ = mala_step(g, 1.0, x, 0.1, rng, state)
            samples.append(x[0, 0])
        samples = np.array(samples[2000:])
        n_eff = samples.size / 10  # generous autocorrelation allowance
        assert abs(samples.mean()) < 3.0 / np.sqrt(n_eff)
        assert samples.var() == pytest.approx(1.0, rel=0.05)

    def test_annealed_gaussian_variance(self):
        # pi^beta for N(0,1) at beta = 1/4 is N(0, 4)
        g = GaussianDiag(dim=1)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((8, 1))
        state = None
        samples = []
        for _ in range(20_000):
            x, _, state, _ = mala_step(g, 0.25, x, 0.4, rng, state)
            samples.append(x[:, 0].copy())
        samples = np.concatenate(samples[1000:])
        assert samples.var() == pytest.approx(4.0, rel=0.05)


class TestCollectBuffer:
    def test_empty_buffer_error(self):
        g = GaussianDiag(dim=1)
        with pytest.raises(EmptyBuffer):
            collect_buffer(g, 1.0, ChainConfig(n_steps=100, burn_in=100))

    def test_buffer_determinism(self):
        g = GMM2D(weights=(0.3, 0.7))
        cfg = ChainConfig(n_steps=300, burn_in=100, n_chains=8, thin=2, seed=42)
        a = collect_buffer(g, 0.25, cfg)
        b = collect_buffer(g, 0.25, cfg)
        assert np.array_equal(a.samples, b.samples)
        assert a.energy_evals_spent == b.energy_evals_spent

    def test_eval_accounting_matches_instrumented_counter(self):
        g = GaussianDiag(dim=2)
        g.counter = EnergyCallCounter()
        g.counter.phase = "mcmc"
        cfg = ChainConfig(n_steps=200, burn_in=50, n_chains=4, thin=3, seed=7)
        buf = collect_buffer(g, 1.0, cfg)
        assert buf.energy_evals_spent == g.counter.total()
        assert buf.energy_evals_spent == 2 * 4 * (200 + 1)

    def test_cached_values_match_recomputation(self):
        g = GMM2D(weights=(0.3, 0.7))
        cfg = ChainConfig(n_steps=300, burn_in=100, n_chains=4, seed=3)
        buf = collect_buffer(g, 0.5, cfg)
        assert buf.validate_cache(g)

    def test_gmm_mode_masses_at_quarter_beta(self):
        # oracle: 2-D quadrature of pi^beta over each half plane
        g = GMM2D(weights=(0.3, 0.7))
        beta = 0.25
        grid = np.linspace(-9, 9, 1201)
        xs, ys = np.meshgrid(grid, grid, indexing="ij")
        pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
        dens = np.exp(-beta * g.energy(pts)).reshape(xs.shape)
        mass_right = dens[grid > 0, :].sum() / dens.sum()
        cfg = ChainConfig(n_steps=6000, burn_in=1000, n_chains=32, thin=5,
                          step_size=0.5, seed=11, init_scale=4.0)
        buf = collect_buffer(g, beta, cfg)
        frac_right = float(np.mean(buf.samples[:, 0] > 0))
        assert frac_right == pytest.approx(mass_right, abs=0.05)

    def test_double_well_stationary_histogram(self):
        # discretized detailed-balance consistency: empirical bin masses
        # match quadrature of exp(-beta E) within Monte Carlo error
        t = DoubleWell1D()
        beta = 1.0
        cfg = ChainConfig(n_steps=8000, burn_in=1000, n_chains=16, thin=2,
                          step_size=0.3, seed=13, init_scale=1.5)
        buf = collect_buffer(t, beta, cfg)
        edges = np.linspace(-2.2, 2.2, 23)
        hist, _ = np.histogram(buf.samples[:, 0], bins=edges)
        grid = np.linspace(-2.2, 2.2, 8801)
        dens = np.exp(-beta * t.energy(grid[:, None]))
        centers = 0.5 * (edges[:-1] + edges[1:])
        oracle = np.array([
            dens[(grid >= lo) & (grid < hi)].sum()
            for lo, hi in zip(edges[:-1], edges[1:])
        ])
        oracle /= oracle.sum()
        emp = hist / hist.sum()
        assert np.max(np.abs(emp - oracle)) < 0.02

    def test_stationarity_of_transition_flow(self):
        # net probability flow between coarse bins vanishes at stationarity
        t = DoubleWell1D()
        rng = np.random.default_rng(17)
        x = rng.standard_normal((32, 1))
        state = None
        prev = None
        edges = np.array([-np.inf, -0.8, 0.0, 0.8, np.inf])
        flow = np.zeros((4, 4))
        for k in range(6000):
            x, _, state, _ = mala_step(t, 1.0, x, 0.3, rng, state)
            cur = np.digitize(x[:, 0], edges) - 1
            if k > 500 and prev is not None:
                for a, b in zip(prev, cur):
                    flow[a, b] += 1
            prev = cur
        total = flow.sum()
        net = (flow - flow.T) / total
        assert np.max(np.abs(net)) < 0.01

    def test_recenter_com(self):
        lj = LennardJones(LJParams(n_particles=4), sign_convention="twelve_minus_six")
        cfg = ChainConfig(n_steps=200, burn_in=50, n_chains=4, thin=5, seed=5,
                          step_size=0.01, recenter_com=True, init_scale=0.8)
        buf = collect_buffer(lj, 0.5, cfg)
        pts = buf.samples.reshape(buf.n, 4, 3)
        np.testing.assert_allclose(pts.mean(axis=1), 0.0, atol=1e-12)
        assert buf.validate_cache(lj)

    def test_acceptance_warning_flag(self):
        g = GaussianDiag(dim=1)
        cfg = ChainConfig(step_size=50.0, n_steps=150, burn_in=50, n_chains=4,
                          adapt_step=False, seed=9)
        with pytest.warns(UserWarning):
            buf = collect_buffer(g, 1.0, cfg)
        assert any(f.startswith("acceptance_rate") for f in buf.flags)


class TestBufferIO:
    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(21)
        buf = SampleBuffer(
            beta=0.5,
            samples=rng.standard_normal((17, 3)),
            cached_energies=rng.standard_normal(17),
            cached_scores=rng.standard_normal((17, 3)),
            provenance="annealed_inference",
            energy_evals_spent=1234,
            flags=["low_ess:0.004"],
        )
        path = tmp_path / "buf.bin"
        buf.save(path)
        loaded = SampleBuffer.load(path)
        assert np.array_equal(loaded.samples, buf.samples)
        assert np.array_equal(loaded.cached_energies, buf.cached_energies)
        assert np.array_equal(loaded.cached_scores, buf.cached_scores)
        assert loaded.beta == 0.5 and loaded.energy_evals_spent == 1234
        assert loaded.provenance == "annealed_inference"
        assert loaded.flags == ["low_ess:0.004"]
        path2 = tmp_path / "buf2.bin"
        loaded.save(path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_optional_blocks(self, tmp_path):
        buf = SampleBuffer(beta=1.0, samples=np.zeros((3, 2)))
        p = tmp_path / "b.bin"
        buf.save(p)
        loaded = SampleBuffer.load(p)
        assert loaded.cached_energies is None and loaded.cached_scores is None
