#!/usr/bin/env python3
"""
Tests for coherent efficiency, detector noise and the CV-QKD key rate
"""

import csv
import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import (
    ConfigurationError,
    DomainError,
    ScanRangeError,
    ShapeError,
    UndefinedEfficiencyError,
    UnphysicalStateError,
)
from optics import ComplexField, total_power
from qkd import (
    ChannelStats,
    DetectorParams,
    apply_correction,
    channel_stats,
    coherent_efficiency,
    covariance,
    detector_noise,
    effective_noise,
    g_function,
    holevo,
    mutual_information,
    scan_vmod,
    secure_key_rate,
    symplectic_eigenvalues,
    transmissivity,
    write_scan_csv,
)

TRUSTED = DetectorParams()
UNTRUSTED = DetectorParams(trusted=False)


def _field(values, dx=0.1):
    values = np.asarray(values, dtype=np.complex128)
    return ComplexField(grid_n=values.shape[0], dx=dx, wavelength=1550e-9, values=values)


class TestCoherentEfficiency:
    def test_identical_fields(self):
        rng = np.random.default_rng(0)
        lo = _field(rng.normal(size=(32, 32)) + 1j * rng.normal(size=(32, 32)))
        assert coherent_efficiency(lo, lo, 1.0) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("theta", [0.0, 0.3, math.pi / 4, 1.2, math.pi / 2])
    def test_uniform_phase_offset(self, theta):
        lo = _field(np.ones((32, 32)))
        rp = _field(np.full((32, 32), np.exp(1j * theta)))
        assert coherent_efficiency(lo, rp, 1.0) == pytest.approx(math.cos(theta) ** 2, abs=1e-12)

    def test_correction_restores_matching(self):
        rng = np.random.default_rng(1)
        phase = rng.uniform(-math.pi, math.pi, (32, 32))
        amplitude = np.exp(-np.hypot(*np.meshgrid(np.arange(32) - 16, np.arange(32) - 16)) / 8.0)
        lo = _field(amplitude)
        rp = _field(amplitude * np.exp(1j * phase))
        assert coherent_efficiency(lo, rp, 1.5) < 0.2
        assert coherent_efficiency(apply_correction(lo, phase), rp, 1.5) == pytest.approx(1.0, abs=1e-12)

    def test_result_is_clipped(self):
        rng = np.random.default_rng(2)
        a = _field(rng.normal(size=(32, 32)))
        b = _field(rng.normal(size=(32, 32)))
        assert 0.0 <= coherent_efficiency(a, b, 1.6) <= 1.0

    def test_dark_field(self):
        with pytest.raises(UndefinedEfficiencyError):
            coherent_efficiency(_field(np.ones((32, 32))), _field(np.zeros((32, 32))), 1.0)

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            coherent_efficiency(_field(np.ones((32, 32))), _field(np.ones((64, 64))), 1.0)

    def test_aperture_larger_than_grid(self):
        with pytest.raises(ConfigurationError):
            coherent_efficiency(_field(np.ones((32, 32))), _field(np.ones((32, 32))), 2.0)

    def test_correction_shape(self):
        with pytest.raises(ShapeError):
            apply_correction(_field(np.ones((32, 32))), np.zeros((16, 16)))


class TestDetectorAndChannel:
    def test_detector_noise(self):
        assert detector_noise(0.53, TRUSTED) == pytest.approx(0.86038, abs=1e-5)
        assert detector_noise(1.0, TRUSTED) == pytest.approx(0.0095, rel=1e-12)

    @pytest.mark.parametrize("gamma", [0.0, -0.1, 1.01])
    def test_detector_noise_domain(self, gamma):
        with pytest.raises(DomainError):
            detector_noise(gamma, TRUSTED)

    def test_transmissivity(self):
        field = _field(np.ones((32, 32)))
        power = total_power(field)
        assert transmissivity(field, power, 10.0, 0.95) == pytest.approx(0.95)
        assert transmissivity(field, power, 0.0, 0.95) == 0.0
        assert 0.0 < transmissivity(field, power, 0.5, 0.95) < 0.95

    def test_channel_stats(self):
        stats = channel_stats([0.5, 1.0], [0.64, 0.81], TRUSTED)
        assert stats.mean_T == pytest.approx(0.725)
        assert stats.mean_sqrtT == pytest.approx(0.85)
        assert stats.gamma == pytest.approx(0.75)
        assert stats.mean_xi_det == pytest.approx(0.5 * (0.969 + 0.0095))

    def test_channel_stats_rejects_dark_samples(self):
        with pytest.raises(UndefinedEfficiencyError):
            channel_stats([0.5, 0.0], [0.5, 0.5], TRUSTED)
        with pytest.raises(DomainError):
            channel_stats([], [], TRUSTED)

    def test_fixed_channel_noise(self):
        stats = ChannelStats(mean_T=0.71, mean_xi_det=1.05, gamma=0.53)
        t_f, t_f_xi_f = effective_noise(stats, TRUSTED, 10.0)
        assert t_f == 0.71
        assert t_f_xi_f == pytest.approx(1.062212, abs=1e-9)

    def test_fading_adds_modulation_noise(self):
        stats = ChannelStats(mean_T=0.725, mean_sqrtT=0.85, mean_xi_det=0.0, gamma=1.0)
        _, low = effective_noise(stats, TRUSTED, 1.0)
        _, high = effective_noise(stats, TRUSTED, 5.0)
        assert high - low == pytest.approx(4.0 * (0.725 - 0.85 ** 2))

    def test_inconsistent_sqrt_t(self):
        stats = ChannelStats(mean_T=0.5, mean_sqrtT=0.8, gamma=0.5)
        with pytest.raises(DomainError):
            effective_noise(stats, TRUSTED, 1.0)

    def test_stats_validation(self):
        with pytest.raises(ValidationError):
            ChannelStats(mean_T=1.5, gamma=0.5)
        with pytest.raises(ValidationError):
            ChannelStats(mean_T=0.5, gamma=0.0)


class TestKeyRate:
    def test_mutual_information(self):
        assert mutual_information(0.71, 10.0, 1.062212) == pytest.approx(1.0761, abs=1e-3)

    def test_trusted_covariance_and_eigenvalues(self):
        cov = covariance(10.0, 0.71, 1.062212, TRUSTED)
        assert cov.a == pytest.approx(11.0)
        assert cov.b == pytest.approx(8.1172, abs=1e-4)
        assert cov.c == pytest.approx(9.2304, abs=1e-4)
        nu = symplectic_eigenvalues(cov)
        np.testing.assert_allclose(nu, (1.0419, 3.9247, 2.3540), atol=1e-3)

    def test_untrusted_covariance_includes_detector_noise(self):
        cov = covariance(10.0, 0.71, 1.062212, UNTRUSTED)
        assert cov.b == pytest.approx(7.1 + 1.0 + 1.062212)

    def test_g_function(self):
        assert g_function(1.0) == 0.0
        assert g_function(3.0) == pytest.approx(2.0, rel=1e-12)
        assert g_function(2.0) == pytest.approx(1.377444, abs=1e-6)
        with pytest.raises(DomainError):
            g_function(0.5)

    @pytest.mark.parametrize("v_mod", [0.02, 0.1, 0.3, 0.5, 2.0, 10.0])
    def test_pure_state_leaks_nothing(self, v_mod):
        params = DetectorParams(xi_ch=0.0)
        stats = ChannelStats(mean_T=1.0, mean_xi_det=0.0, gamma=1.0)
        result = secure_key_rate(stats, params, v_mod)
        np.testing.assert_allclose(result.nu, (1.0, 1.0, 1.0), atol=1e-6)
        assert result.chi_BE == pytest.approx(0.0, abs=1e-6)
        assert result.R_sec == pytest.approx(0.95 * 0.5 * math.log2(1.0 + v_mod), abs=1e-6)

    def test_trusted_reference_point(self):
        stats = ChannelStats(mean_T=0.71, mean_xi_det=1.05, gamma=0.53)
        result = secure_key_rate(stats, TRUSTED, 10.0)
        assert result.R_sec == pytest.approx(0.107, abs=2e-3)
        assert result.r_sec_positive == result.R_sec

    def test_trusted_scan_maximum(self):
        stats = ChannelStats(mean_T=0.71, mean_xi_det=1.05, gamma=0.53)
        scan = scan_vmod(stats, TRUSTED)
        assert len(scan.v_mod) == 500
        assert scan.r_best == pytest.approx(0.112, abs=1e-2)
        assert scan.r_best == max(scan.r_sec)
        assert scan.v_mod[0] == pytest.approx(0.02) and scan.v_mod[-1] == pytest.approx(10.0)

    @pytest.mark.parametrize("gamma, trusted, positive", [(0.80, False, False), (0.90, False, True), (0.42, True, True)])
    def test_sign_of_scan_maximum(self, gamma, trusted, positive):
        stats = ChannelStats(mean_T=0.71, gamma=gamma)
        scan = scan_vmod(stats, DetectorParams(trusted=trusted))
        assert (scan.r_best > 0) is positive
        result = secure_key_rate(stats, DetectorParams(trusted=trusted), scan.v_best)
        assert result.r_sec_positive == max(result.R_sec, 0.0)

    @pytest.mark.parametrize("trusted", [True, False])
    @pytest.mark.parametrize("gamma", [0.31, 0.53, 0.8, 1.0])
    def test_scan_from_default_lower_bound(self, gamma, trusted):
        scan = scan_vmod(ChannelStats(mean_T=0.71, gamma=gamma), DetectorParams(trusted=trusted))
        assert scan.v_mod[0] == pytest.approx(0.02)
        assert all(math.isfinite(r) for r in scan.r_sec)
        assert all(chi >= 0.0 for chi in scan.chi_be)

    def test_small_modulation_is_physical(self):
        cov = covariance(0.02, 0.71, 0.261587, UNTRUSTED)
        nu = symplectic_eigenvalues(cov)
        assert min(nu) >= 1.0

    def test_unphysical_covariance_rejected(self):
        with pytest.raises(UnphysicalStateError):
            covariance(1.0, 1.5, 0.0, UNTRUSTED)

    def test_scan_maxima_ordered_by_efficiency(self):
        maxima = [scan_vmod(ChannelStats(mean_T=0.71, gamma=g), TRUSTED).r_best for g in (0.31, 0.42, 0.53, 0.90)]
        assert maxima == sorted(maxima)

    def test_trusted_rate_levels_off(self):
        stats = ChannelStats(mean_T=0.71, mean_xi_det=1.05, gamma=0.53)
        scan = scan_vmod(stats, TRUSTED)
        start_of_tail = next(i for i, v in enumerate(scan.v_mod) if v >= 8.0)
        total_rise = scan.r_best - scan.r_sec[0]
        assert total_rise > 0
        assert scan.r_sec[-1] - scan.r_sec[start_of_tail] < 0.1 * total_rise

    def test_trusted_never_below_untrusted(self):
        for gamma in (0.5, 0.7, 0.9, 1.0):
            stats = ChannelStats(mean_T=0.71, gamma=gamma)
            trusted = secure_key_rate(stats, TRUSTED, 5.0).R_sec
            untrusted = secure_key_rate(stats, UNTRUSTED, 5.0).R_sec
            assert trusted >= untrusted - 1e-12

    def test_rate_grows_with_efficiency(self):
        rates = [secure_key_rate(ChannelStats(mean_T=0.71, gamma=g), TRUSTED, 10.0).R_sec for g in (0.4, 0.6, 0.8, 1.0)]
        assert rates == sorted(rates)

    def test_holevo_of_vacuum_modes(self):
        assert holevo((1.0, 1.0, 1.0)) == 0.0

    def test_invalid_modulation(self):
        stats = ChannelStats(mean_T=0.71, gamma=0.9)
        with pytest.raises(DomainError):
            secure_key_rate(stats, TRUSTED, 0.0)
        with pytest.raises(DomainError):
            mutual_information(0.0, 1.0, 0.1)

    @pytest.mark.parametrize("v_min, v_max, steps", [(0.0, 10.0, 10), (1.0, 0.5, 10), (0.1, 1.0, 0)])
    def test_scan_range(self, v_min, v_max, steps):
        with pytest.raises(ScanRangeError):
            scan_vmod(ChannelStats(mean_T=0.71, gamma=0.9), TRUSTED, v_min, v_max, steps)

    def test_scan_csv(self, tmp_path):
        scan = scan_vmod(ChannelStats(mean_T=0.71, gamma=0.9), TRUSTED, 0.5, 2.0, 4)
        path = tmp_path / "out" / "keyrate.csv"
        write_scan_csv(scan, path)
        with path.open() as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["v_mod", "i_ab", "chi_be", "r_sec"]
        assert len(rows) == 5
        assert [float(r[0]) for r in rows[1:]] == pytest.approx([0.5, 1.0, 1.5, 2.0])
        assert float(rows[1][3]) == pytest.approx(scan.r_sec[0], rel=1e-8)
