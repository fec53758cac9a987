import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import creditfolio as cf
from creditfolio.model import (CreditSpec, DefaultState, MarketSpec, PreferenceSpec,
                               all_states, flip, load_preset, states_by_cardinality,
                               validate_spec)


class TestDefaultState:
    def test_flip_examples(self):
        assert flip(DefaultState.from_bitstring("00"), 0).bitstring == "10"
        assert flip(DefaultState.from_bitstring("11"), 1).bitstring == "10"

    def test_flip_involution_example(self):
        z = DefaultState.from_bitstring("010")
        assert flip(flip(z, 2), 2) == z

    @given(st.integers(1, 8), st.data())
    @settings(max_examples=60, deadline=None)
    def test_flip_involution_property(self, n, data):
        bits = data.draw(st.integers(0, (1 << n) - 1))
        i = data.draw(st.integers(0, n - 1))
        z = DefaultState(n, bits)
        assert flip(flip(z, i), i) == z
        assert flip(z, i).bitstring != z.bitstring

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            DefaultState(2, 0).flip(2)

    def test_bad_construction(self):
        with pytest.raises(ValueError):
            DefaultState(0, 0)
        with pytest.raises(ValueError):
            DefaultState(2, 4)
        with pytest.raises(ValueError):
            DefaultState.from_bitstring("01x")

    def test_enumeration_topological(self):
        # every state once; any state with a cleared bit appears after the flipped state
        for n in (1, 2, 3, 4):
            order = states_by_cardinality(n)
            assert len(order) == 2**n
            assert len({s.bits for s in order}) == 2**n
            pos = {s.bits: k for k, s in enumerate(order)}
            for s in order:
                for i in s.alive:
                    child = s.flip(i)
                    assert child.cardinality == s.cardinality + 1
                    assert pos[child.bits] < pos[s.bits]

    def test_indicator_and_alive(self):
        z = DefaultState.from_bitstring("0110")
        assert z.alive == (0, 3)
        assert z.defaulted == (1, 2)
        assert list(z.indicator()) == [0.0, 1.0, 1.0, 0.0]


class TestPresets:
    def test_benchmark_intensities(self):
        spec = load_preset("benchmark_s5")
        z00 = DefaultState.from_bitstring("00")
        lam = spec.intensity(np.array(0.0), z00)
        assert lam[0] == pytest.approx(1.0)       # 0.6 + 0.4
        assert lam[1] == pytest.approx(0.8)       # 0.5 + 0.3
        # contagion: the surviving name's intensity jumps up after the other defaults
        z01 = DefaultState.from_bitstring("01")
        lam1 = spec.intensity(np.array(0.0), z01)
        assert lam1[0] == pytest.approx(1.4)      # 0.8 + 0.6

    def test_benchmark_parameters(self):
        spec = load_preset("benchmark_s5")
        assert spec.pref.p == 0.8 and spec.q == pytest.approx(-4.0)
        assert spec.beta == pytest.approx(5.0)
        assert spec.market.r == 0.2
        assert np.allclose(np.diag(spec.market.sigma_at(0.3)), [0.8, 0.8])
        assert spec.factor.drift(0.0) == pytest.approx(0.5)
        assert spec.factor.drift(1.0) == pytest.approx(0.5 - 1.2)

    def test_contagion_monotonicity(self):
        spec = load_preset("benchmark_s5")
        y = np.linspace(-1, 1, 41)
        for z in all_states(2):
            lam = spec.intensity(y, z)
            for j in range(2):
                if z.is_defaulted(j):
                    continue
                lam_up = spec.intensity(y, z.flip(j))
                for i in range(2):
                    if i != j:
                        assert np.all(lam_up[:, i] >= lam[:, i] - 1e-12)

    def test_own_bit_canonicalisation(self):
        # lambda_i never depends on the i-th bit of the state argument
        spec = load_preset("benchmark_s5")
        y = np.linspace(-1, 1, 11)
        z00, z10 = DefaultState.from_bitstring("00"), DefaultState.from_bitstring("10")
        assert np.allclose(spec.intensity(y, z00)[:, 0], spec.intensity(y, z10)[:, 0])

    def test_merton_preset(self):
        spec = load_preset("merton_nodefault")
        y = np.linspace(-1, 1, 11)
        for z in all_states(2):
            assert np.all(spec.intensity(y, z) == 0.0)
        assert np.allclose(np.diag(spec.market.sigma_at(0.0)), [0.2, 0.2])

    def test_scott_market_price_of_risk(self):
        spec = load_preset("scott_example22")
        for y in (-0.5, 0.0, 0.7):
            xi = cf.market_price_of_risk(y, spec)
            theta_diag = np.diag(spec.market.sigma_at(y)) ** 2
            expected = (spec.market.mu - spec.market.r) / np.sqrt(theta_diag)
            assert np.allclose(xi, expected)

    def test_stein_vol_shape(self):
        spec = load_preset("stein_stein_example22")
        s0 = np.diag(spec.market.sigma_at(0.0)) ** 2
        s1 = np.diag(spec.market.sigma_at(1.0)) ** 2
        assert np.allclose(s1 - s0, [0.5, 0.4])  # eps + gamma y^2

    def test_unknown_preset(self):
        with pytest.raises(ValueError):
            load_preset("nope")


class TestPreferences:
    def test_q_branches(self):
        assert PreferenceSpec(p=0.8, K1=1, K2=1, T=1).q == pytest.approx(-4.0)
        assert PreferenceSpec(p=-1.0, K1=1, K2=1, T=1).q == pytest.approx(0.5)

    @pytest.mark.parametrize("bad", [dict(p=0.0), dict(p=1.0), dict(p=1.5),
                                     dict(K1=0.0), dict(K2=-1.0), dict(T=0.0)])
    def test_invalid(self, bad):
        kwargs = dict(p=0.5, K1=1.0, K2=1.0, T=1.0)
        kwargs.update(bad)
        with pytest.raises(ValueError):
            PreferenceSpec(**kwargs)

    def test_from_q_log_utility(self):
        pref = PreferenceSpec.from_q(0.0, 1.0, 1.0, 1.0)
        assert pref.q == 0.0


class TestValidation:
    def test_benchmark_all_pass(self):
        spec = load_preset("benchmark_s5")
        report = validate_spec(spec, np.linspace(-1, 1, 101))
        assert report.ok, str(report)

    def test_negative_intensity_fails(self):
        spec = load_preset("benchmark_s5")
        bad_credit = CreditSpec.exp_affine(2, {
            (0, "00"): (0.0, -0.5, 0.1), (1, "00"): (0.5, 0.3, 0.1),
        })
        bad = cf.ModelSpec(n=2, factor=spec.factor, credit=bad_credit,
                           market=spec.market, pref=spec.pref)
        report = validate_spec(bad, np.linspace(-1, 1, 101))
        assert not report.ok
        fail = [c for c in report.failures() if "intensity" in c.name]
        assert fail and fail[0].where is not None

    def test_singular_sigma_fails(self):
        spec = load_preset("benchmark_s5")
        singular = MarketSpec(mu=[0.2, 0.2], sigma=np.array([[0.8, 0.1], [0.8, 0.1]]), r=0.2)
        bad = cf.ModelSpec(n=2, factor=spec.factor, credit=spec.credit,
                           market=singular, pref=spec.pref)
        report = validate_spec(bad, np.linspace(-1, 1, 21))
        assert not report.ok
        assert any("invertible" in c.name for c in report.failures())

    def test_deterministic(self):
        spec = load_preset("benchmark_s5")
        grid = np.linspace(-1, 1, 51)
        r1, r2 = validate_spec(spec, grid), validate_spec(spec, grid)
        assert [(c.name, c.passed, c.detail, c.where) for c in r1.checks] == \
               [(c.name, c.passed, c.detail, c.where) for c in r2.checks]

    def test_grid_outside_domain_fails(self):
        spec = load_preset("benchmark_s5")
        report = validate_spec(spec, np.linspace(-2, 2, 21))
        assert not report.ok
