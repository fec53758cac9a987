import copy

import numpy as np
import pytest

import creditfolio as cf
from creditfolio import oracle as om
from creditfolio import sim
from creditfolio.model import CreditSpec, DefaultState, FactorSpec, MarketSpec, ModelSpec, PreferenceSpec

Z00 = DefaultState.from_bitstring("00")


def constant_lambda_spec(lam=(1.0, 1.0)):
    lam = np.asarray(lam, dtype=float)
    return ModelSpec(
        n=2,
        factor=FactorSpec(mu0=lambda y: -np.asarray(y, dtype=float),
                          sigma0=np.array([0.3, 0.2]), rho=0.0,
                          domain_lo=-2.0, domain_hi=2.0),
        credit=CreditSpec(2, fn=lambda y, st: np.broadcast_to(
            lam, np.shape(np.asarray(y)) + (2,)).copy()),
        market=MarketSpec(mu=[0.25, 0.25], sigma=[0.5, 0.5], r=0.2),
        pref=PreferenceSpec(p=0.5, K1=1.0, K2=1.0, T=1.0),
    )


class TestMarketPaths:
    def test_bit_reproducible(self, benchmark_spec):
        b1 = sim.simulate_market(benchmark_spec, 5000, 50, seed=42, keep=8)
        b2 = sim.simulate_market(benchmark_spec, 5000, 50, seed=42, keep=8)
        assert np.array_equal(b1.default_times, b2.default_times)
        assert np.array_equal(b1.y_terminal, b2.y_terminal)
        assert np.array_equal(b1.kept["Y"], b2.kept["Y"])
        b3 = sim.simulate_market(benchmark_spec, 5000, 50, seed=43)
        assert not np.array_equal(b3.y_terminal, b2.y_terminal)

    def test_zero_intensity_no_defaults(self, merton_result):
        spec, _, _ = merton_result
        bundle = sim.simulate_market(spec, 4000, 40, seed=1)
        assert bundle.survival_probability() == 1.0
        assert np.all(np.isinf(bundle.default_times))

    def test_constant_intensity_survival(self):
        spec = constant_lambda_spec((1.0, 1.0))
        n = 100_000
        bundle = sim.simulate_market(spec, n, 64, seed=11)
        p_hat = bundle.survival_probability()
        target = np.exp(-2.0)
        se = np.sqrt(target * (1 - target) / n)
        assert abs(p_hat - target) <= 3 * se

    def test_no_simultaneous_defaults(self, benchmark_spec):
        bundle = sim.simulate_market(benchmark_spec, 30000, 60, seed=3)
        both = np.isfinite(bundle.default_times).all(axis=1)
        gaps = np.abs(bundle.default_times[both, 0] - bundle.default_times[both, 1])
        assert both.sum() > 100
        assert np.all(gaps > 0)

    def test_default_count_bounded(self, benchmark_spec):
        bundle = sim.simulate_market(benchmark_spec, 2000, 40, seed=5)
        assert np.all(bundle.final_bits <= 3)

    def test_compensator_zero_mean(self, benchmark_spec):
        bundle = sim.simulate_market(benchmark_spec, 50000, 100, seed=7,
                                     comp_probe_times=(0.25, 0.5, 1.0))
        for t, samples in bundle.compensator.items():
            for i in range(2):
                m = samples[:, i].mean()
                se = samples[:, i].std(ddof=1) / np.sqrt(len(samples))
                assert abs(m) <= 3 * se, (t, i, m, 3 * se)

    def test_kept_prices_zero_after_default(self, benchmark_spec):
        bundle = sim.simulate_market(benchmark_spec, 64, 50, seed=33, keep=64)
        H = bundle.kept["H_bits"]
        P = bundle.kept["P"]
        for i in range(2):
            dead = (H >> i) & 1 == 1
            assert np.all(P[..., i][dead] == 0.0)
            assert np.all(P[..., i][~dead] > 0.0)

    def test_reflection_counted(self, benchmark_spec):
        bundle = sim.simulate_market(benchmark_spec, 2000, 50, seed=9)
        assert 0.0 <= bundle.exit_fraction < 0.05


class TestWealthPaths:
    def test_bank_account_exact(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        bundle = sim.simulate_market(benchmark_spec, 500, 64, seed=2, keep=0)
        sim.simulate_wealth(bundle, result, 1.0, pi_override=np.zeros(2),
                            zero_consumption=True)
        want = np.exp(benchmark_spec.market.r * 1.0)
        assert np.max(np.abs(bundle.wealth["X_T"] - want)) < 1e-12

    def test_gbm_log_mean(self, merton_result):
        # constant weight, no defaults, no consumption: log X_T has known mean
        spec, result, _ = merton_result
        n = 40000
        pi_c = 0.6
        bundle = sim.simulate_market(spec, n, 64, seed=21, keep=0)
        sim.simulate_wealth(bundle, result, 1.0, pi_override=np.array([pi_c, 0.0]),
                            zero_consumption=True)
        lx = np.log(bundle.wealth["X_T"])
        sig = 0.2
        drift = (spec.market.r + pi_c * (0.25 - 0.2) - 0.5 * pi_c**2 * sig**2) * 1.0
        se = lx.std(ddof=1) / np.sqrt(n)
        assert abs(lx.mean() - drift) <= 3 * se

    def test_default_jump_rule(self):
        # near-deterministic wealth: a default multiplies X by exactly (1 - pi);
        # the compensated-jump drift pi * lambda accrues per step started alive
        lam_c = 2.0
        spec = ModelSpec(
            n=1,
            factor=FactorSpec(mu0=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
                              sigma0=np.array([0.1]), rho=0.0, domain_lo=-2, domain_hi=2),
            credit=CreditSpec(1, fn=lambda y, st: np.full(np.shape(np.asarray(y)) + (1,), lam_c)),
            market=MarketSpec(mu=[0.0], sigma=[1e-7], r=0.0),
            pref=PreferenceSpec(p=0.5, K1=1.0, K2=1.0, T=1.0),
        )
        grid = cf.GridSpec(-1.0, 1.0, 11, 20)
        result = cf.solve_recursive_system(spec, grid)
        n_steps = 200
        bundle = sim.simulate_market(spec, 2000, n_steps, seed=3, keep=0)
        sim.simulate_wealth(bundle, result, 1.0, pi_override=np.array([0.3]),
                            zero_consumption=True)
        tau = bundle.default_times[:, 0]
        defaulted = np.isfinite(tau)
        assert 0.5 < defaulted.mean() < 0.95
        dt = 1.0 / n_steps
        alive_steps = np.floor(tau[defaulted] / dt) + 1
        want = 0.7 * np.exp(0.3 * lam_c * alive_steps * dt)
        assert np.allclose(bundle.wealth["X_T"][defaulted], want, rtol=1e-5)
        # survivors never jump
        want_surv = np.exp(0.3 * lam_c * 1.0)
        assert np.allclose(bundle.wealth["X_T"][~defaulted], want_surv, rtol=1e-5)

    def test_flagged_when_weight_reaches_one(self):
        spec = constant_lambda_spec((2.0, 0.0))
        grid = cf.GridSpec(-1.0, 1.0, 21, 20)
        result = cf.solve_recursive_system(spec, grid)
        bundle = sim.simulate_market(spec, 2000, 20, seed=4, keep=0)
        sim.simulate_wealth(bundle, result, 1.0, pi_override=np.array([1.5, 0.0]))
        defaulted = np.isfinite(bundle.default_times[:, 0])
        assert np.all(bundle.wealth["flagged"][defaulted])


class TestDensity:
    def test_trivial_measure_change(self, benchmark_spec, benchmark_result):
        # benchmark optimal controls are ~0: Gamma stays at 1
        result, _ = benchmark_result
        bundle = sim.simulate_market(benchmark_spec, 2000, 50, seed=6, keep=0)
        sim.density_path(bundle, result)
        assert np.max(np.abs(bundle.density["Gamma_T"] - 1.0)) < 1e-6

    def test_unit_mean_deterministic_theta(self, merton_result):
        # merton: theta = xi constant, no defaults; exponential martingale mean 1
        spec, result, _ = merton_result
        n = 50000
        bundle = sim.simulate_market(spec, n, 64, seed=8, keep=0)
        sim.density_path(bundle, result)
        g = bundle.density["Gamma_T"]
        se = g.std(ddof=1) / np.sqrt(n)
        assert abs(g.mean() - 1.0) <= 3 * se

    def test_jump_factor(self):
        # theta = a = 0 and constant jump loading: Gamma_T = (1+h) e^{-h int lambda}
        spec = constant_lambda_spec((0.8, 0.0))
        spec = ModelSpec(n=2, factor=spec.factor, credit=spec.credit,
                         market=MarketSpec(mu=[0.2, 0.2], sigma=[0.5, 0.5], r=0.2),
                         pref=spec.pref)  # mu = r: optimal loadings vanish
        grid = cf.GridSpec(-1.0, 1.0, 21, 20)
        result = cf.solve_recursive_system(spec, grid)
        h_const = 0.2
        for pol in result.policies.values():
            pol.hhat[:] = 0.0
            pol.hhat[:, :, 0] = h_const * (1.0 - pol.state.indicator()[0])
            pol.theta[:] = 0.0
            pol.ahat[:] = 0.0
        n_steps = 50
        bundle = sim.simulate_market(spec, 3000, n_steps, seed=10, keep=0)
        sim.density_path(bundle, result)
        # the density drift -h lambda accrues per step started alive; the jump
        # multiplies by exactly (1 + h)
        tau = bundle.default_times[:, 0]
        defaulted = np.isfinite(tau)
        dt = 1.0 / n_steps
        alive_time = np.where(defaulted, (np.floor(tau / dt) + 1) * dt, 1.0)
        jump = np.where(defaulted, 1.0 + h_const, 1.0)
        want = jump * np.exp(-h_const * 0.8 * alive_time)
        assert np.allclose(bundle.density["Gamma_T"], want, rtol=1e-10)


class TestGMartingale:
    def test_benchmark_passes(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        reports = sim.check_G_martingale(benchmark_spec, result, 20000, 100, seed=12)
        assert len(reports) == 3
        assert all(r.passed for r in reports)

    def test_time_zero_probe_exact(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        reports = sim.check_G_martingale(benchmark_spec, result, 200, 20, seed=13,
                                         probes=(0.0,))
        assert reports[0].estimate == pytest.approx(reports[0].target, abs=1e-12)

    def test_corrupted_field_fails_at_T(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        corrupted = copy.deepcopy(result)
        for fld in corrupted.fields.values():
            fld.f = fld.f * 1.1
            fld.df = fld.df * 1.1
        reports = sim.check_G_martingale(benchmark_spec, corrupted, 20000, 100, seed=12,
                                         probes=(1.0,))
        assert not reports[0].passed

    def test_nondegenerate_passes(self, single_name_result):
        spec, result, _ = single_name_result
        reports = sim.check_G_martingale(spec, result, 30000, 150, seed=14)
        assert all(r.passed for r in reports)
        assert reports[-1].se > 1e-5  # genuine variance on this spec


class TestDualityGap:
    def test_benchmark_passes(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        rep = sim.duality_gap(benchmark_spec, result, 1.0, 20000, 200, seed=15)
        assert rep.passed
        assert rep.extra["hedge_gap"] < 1e-9

    def test_merton_matches_classical_value(self, merton_result):
        # closed-form no-default value: the scalar oracle driven by the combined
        # squared market price of risk of the two independent stocks
        spec, result, _ = merton_result
        xi_sq = 2 * 0.25**2
        m = om.ScalarModel(lambda0=0.0, sigma=0.2, xi=np.sqrt(xi_sq), r=0.2, q=spec.q,
                           K1=1.0, K2=1.0, T=1.0)
        V_closed = cf.dual_value(1.0, float(om.ftil_defaulted(1.0, m)), spec.pref.p)
        v_solver = cf.value_function(1.0, 0.0, Z00, result, spec)
        # fixture grid is 100 time steps; the solver's own error is ~1e-6 here
        assert v_solver == pytest.approx(V_closed, rel=1e-5)
        rep = sim.duality_gap(spec, result, 1.0, 30000, 200, seed=16)
        assert rep.passed
        assert abs(rep.estimate - V_closed) <= rep.tolerance

    def test_premium_spec_tight_with_variance(self, premium_result):
        spec, result, _ = premium_result
        rep = sim.duality_gap(spec, result, 1.0, 30000, 200, seed=17)
        assert rep.passed
        assert rep.se > 1e-4                       # genuinely stochastic estimate
        assert rep.extra["rep_log_corr"] > 0.99    # representation tracks wealth
        assert rep.extra["hedge_gap"] < 1e-9

    def test_zero_consumption_strictly_lower(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        rep = sim.duality_gap(benchmark_spec, result, 1.0, 20000, 200, seed=15,
                              zero_consumption=True)
        assert not rep.passed
        assert rep.estimate < rep.target - rep.tolerance

    def test_constant_pi_strictly_lower(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        rep = sim.duality_gap(benchmark_spec, result, 1.0, 20000, 200, seed=15,
                              pi_override=np.array([0.5, 0.5]))
        assert rep.estimate < rep.target - rep.tolerance

    def test_weak_duality_under_hedge_gap(self, single_name_result):
        # dead-state market price of risk is unhedgeable: the dual value is a
        # strict upper bound; simulated utility must stay (weakly) below it
        spec, result, _ = single_name_result
        rep = sim.duality_gap(spec, result, 1.0, 30000, 200, seed=18)
        assert rep.extra["hedge_gap"] > 0.1
        assert rep.estimate <= rep.target + rep.tolerance

    def test_halving_dt_within_floored_se(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        r1 = sim.duality_gap(benchmark_spec, result, 1.0, 20000, 100, seed=19)
        r2 = sim.duality_gap(benchmark_spec, result, 1.0, 20000, 200, seed=19)
        assert abs(r1.estimate - r2.estimate) <= r1.se + r1.bias_floor

    def test_scaling_x0(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        r1 = sim.duality_gap(benchmark_spec, result, 1.0, 5000, 50, seed=20)
        r2 = sim.duality_gap(benchmark_spec, result, 4.0, 5000, 50, seed=20)
        p = benchmark_spec.pref.p
        assert r2.estimate == pytest.approx(4.0**p * r1.estimate, rel=1e-10)
        assert r2.target == pytest.approx(4.0**p * r1.target, rel=1e-12)


class TestFeynmanKac:
    def test_deterministic_quadrature_when_vol_zero(self):
        spec = ModelSpec(
            n=1,
            factor=FactorSpec(mu0=lambda y: np.zeros_like(np.asarray(y, dtype=float)),
                              sigma0=np.array([0.0]), rho=0.0, domain_lo=-1.25,
                              domain_hi=1.25),
            credit=CreditSpec.exp_affine(1, {(0, "0"): (0.5, 0.0, 0.0)}),
            market=MarketSpec(mu=[0.3], sigma=[0.8], r=0.1),
            pref=PreferenceSpec(p=0.5, K1=1.0, K2=1.0, T=1.0),
        )
        grid = cf.GridSpec(-0.5, 0.5, 3, 200)
        result = cf.solve_recursive_system(spec, grid)
        rep = sim.mc_feynman_kac(spec, result, DefaultState.from_bitstring("0"),
                                 (1.0, 0.0), 64, 256, seed=1)
        assert rep.se < 1e-12
        assert abs(rep.estimate - rep.target) < 1e-5

    def test_all_defaulted_matches_closed_form(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        z11 = DefaultState.from_bitstring("11")
        m = om.ScalarModel(lambda0=0.0, sigma=0.8, xi=0.0, r=0.2, q=benchmark_spec.q,
                           K1=1.0, K2=1.0, T=1.0)
        rep = sim.mc_feynman_kac(benchmark_spec, result, z11, (0.5, 0.0), 20000, 128,
                                 seed=2)
        oracle_val = float(om.all_defaulted_closed_form(0.5, m))
        assert rep.passed
        assert abs(rep.estimate - oracle_val) <= rep.tolerance + 1e-6

    def test_benchmark_all_states(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        for bits in ("00", "01", "10", "11"):
            rep = sim.mc_feynman_kac(benchmark_spec, result,
                                     DefaultState.from_bitstring(bits), (0.5, 0.0),
                                     20000, 128, seed=3)
            assert rep.passed, str(rep)

    def test_nondegenerate_state_has_variance(self, scott_result):
        spec, result, _ = scott_result
        rep = sim.mc_feynman_kac(spec, result, Z00, (0.8, -0.2), 20000, 128, seed=4)
        assert rep.passed
        assert rep.se > 1e-8

    def test_bad_probe_raises(self, benchmark_spec, benchmark_result):
        result, _ = benchmark_result
        with pytest.raises(ValueError):
            sim.mc_feynman_kac(benchmark_spec, result, Z00, (0.0, 0.0), 100, 16, seed=5)


class TestReachability:
    def test_reachable_states(self, benchmark_spec, merton_result):
        assert {s.bitstring for s in sim.reachable_states(benchmark_spec, Z00)} == \
            {"00", "01", "10", "11"}
        spec_m, _, _ = merton_result
        assert {s.bitstring for s in sim.reachable_states(spec_m, Z00)} == {"00"}
