"""
Coherent efficiency of the RLO against the received reference pulse, the
detector-noise model driven by it, and the asymptotic GG02 key rate under
collective attacks for trusted and untrusted detectors.

All variances are in shot-noise units (vacuum variance = 1).
"""

import csv
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import xlogy

from errors import (
    ConfigurationError,
    DomainError,
    ScanRangeError,
    ShapeError,
    UndefinedEfficiencyError,
    UnphysicalStateError,
)
from optics import ComplexField, aperture_mask

# Configure logging
logger = logging.getLogger(__name__)

NU_TOLERANCE = 1e-9


class DetectorParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eta_det: float = Field(0.95, gt=0, le=1)
    xi_el: float = Field(0.010, ge=0)
    beta_reconciliation: float = Field(0.95, gt=0, le=1)
    xi_ch: float = Field(0.0172, ge=0)
    trusted: bool = True


class ChannelStats(BaseModel):
    """
    Ensemble averages of a channel.

    mean_sqrtT defaults to sqrt(mean_T) (non-fluctuating channel); mean_xi_det
    defaults to the detector noise computed from gamma.
    """

    model_config = ConfigDict(extra="forbid")

    mean_T: float = Field(ge=0, le=1)
    mean_sqrtT: Optional[float] = Field(None, ge=0, le=1)
    mean_xi_det: Optional[float] = Field(None, ge=0)
    gamma: float = Field(gt=0, le=1)

    @property
    def sqrt_t(self) -> float:
        return math.sqrt(self.mean_T) if self.mean_sqrtT is None else self.mean_sqrtT


class CovarianceABC(BaseModel):
    a: float
    b: float
    c: float
    V_mod: float
    T_f: float
    T_f_xi_f: float


class KeyRateResult(BaseModel):
    I_AB: float
    nu: Tuple[float, float, float]
    chi_BE: float
    R_sec: float
    r_sec_positive: float
    covariance: CovarianceABC


class VmodScan(BaseModel):
    trusted: bool
    v_mod: List[float]
    i_ab: List[float]
    chi_be: List[float]
    r_sec: List[float]
    v_best: float
    r_best: float


def _check_same_grid(first: ComplexField, second: ComplexField) -> None:
    if first.grid_n != second.grid_n or not math.isclose(first.dx, second.dx):
        raise ShapeError(
            f"field grids differ: {first.grid_n}x{first.dx} vs {second.grid_n}x{second.dx}"
        )


def aperture_power(field: ComplexField, radius: float) -> float:
    """Power collected inside the receiver disk of the given radius."""
    mask = aperture_mask(field.grid_n, field.dx, radius)
    return float(np.sum(np.abs(field.values[mask]) ** 2) * field.dx ** 2)


def coherent_efficiency(e_rlo: ComplexField, e_rp: ComplexField, aperture_radius: float) -> float:
    """
    Mode-matching efficiency of the local oscillator against the reference pulse.

    Args:
        e_rlo: Local-oscillator field
        e_rp: Received reference-pulse field on the same grid
        aperture_radius: Receiver radius in metres

    Returns:
        gamma in [0, 1]; the overlap numerator is the squared real part of the
        inner product over the aperture.
    """
    _check_same_grid(e_rlo, e_rp)
    if aperture_radius > 0.5 * e_rlo.grid_n * e_rlo.dx:
        raise ConfigurationError(
            f"aperture radius {aperture_radius} m does not fit the {e_rlo.grid_n * e_rlo.dx:.3f} m grid"
        )
    mask = aperture_mask(e_rlo.grid_n, e_rlo.dx, aperture_radius)
    lo = e_rlo.values[mask]
    rp = e_rp.values[mask]
    area = e_rlo.dx ** 2
    overlap = float(np.real(np.sum(np.conj(lo) * rp))) * area
    power_lo = float(np.sum(np.abs(lo) ** 2)) * area
    power_rp = float(np.sum(np.abs(rp) ** 2)) * area
    if power_lo <= 0 or power_rp <= 0:
        raise UndefinedEfficiencyError("coherent efficiency is undefined: no power inside the aperture")
    return min(1.0, max(0.0, overlap * overlap / (power_lo * power_rp)))


def apply_correction(e_rlo: ComplexField, correction: np.ndarray) -> ComplexField:
    """Phase-modulate the local oscillator pixelwise by the estimated correction map."""
    correction = np.asarray(correction)
    if correction.shape != e_rlo.values.shape:
        raise ShapeError(f"correction shape {correction.shape} does not match field {e_rlo.values.shape}")
    return e_rlo.with_values(e_rlo.values * np.exp(1j * correction))


def detector_noise(gamma: float, params: DetectorParams) -> float:
    """Excess noise of the detector from imperfect LO mode matching, in SNU."""
    if not 0 < gamma <= 1:
        raise DomainError(f"gamma must lie in (0, 1], got {gamma}")
    return ((1.0 - gamma) + params.xi_el) * params.eta_det / gamma


def transmissivity(
    received: ComplexField, transmitted_power: float, aperture_radius: float, eta_det: float
) -> float:
    if transmitted_power <= 0:
        raise DomainError(f"transmitted power must be positive, got {transmitted_power}")
    if aperture_radius <= 0:
        return 0.0
    fraction = aperture_power(received, aperture_radius) / transmitted_power
    return min(eta_det, max(0.0, fraction * eta_det))


def channel_stats(
    gammas: Sequence[float], transmissivities: Sequence[float], params: DetectorParams
) -> ChannelStats:
    """
    Ensemble statistics of a simulated channel.

    Args:
        gammas: Per-sample coherent efficiencies
        transmissivities: Per-sample transmissivities (detector efficiency included)
        params: Detector parameters used for the per-sample noise
    """
    gammas = np.asarray(gammas, dtype=np.float64)
    t = np.asarray(transmissivities, dtype=np.float64)
    if gammas.size == 0 or gammas.shape != t.shape:
        raise DomainError("channel statistics need equally many gammas and transmissivities")
    if np.any(gammas <= 0):
        raise UndefinedEfficiencyError("a sample with zero coherent efficiency has unbounded detector noise")
    xi_det = np.array([detector_noise(float(g), params) for g in np.minimum(gammas, 1.0)])
    return ChannelStats(
        mean_T=float(np.mean(t)),
        mean_sqrtT=float(np.mean(np.sqrt(t))),
        mean_xi_det=float(np.mean(xi_det)),
        gamma=float(np.mean(np.minimum(gammas, 1.0))),
    )


def effective_noise(stats: ChannelStats, params: DetectorParams, v_mod: float) -> Tuple[float, float]:
    """Effective transmissivity and effective excess noise T_f * xi_f of a fading channel."""
    sqrt_t = stats.sqrt_t
    if sqrt_t * sqrt_t > stats.mean_T * (1.0 + 1e-12):
        raise DomainError(f"<sqrt T>^2 = {sqrt_t * sqrt_t} exceeds <T> = {stats.mean_T}")
    xi_det = stats.mean_xi_det if stats.mean_xi_det is not None else detector_noise(stats.gamma, params)
    fading = max(0.0, stats.mean_T - sqrt_t * sqrt_t)
    return stats.mean_T, params.xi_ch * stats.mean_T + xi_det + fading * v_mod


def mutual_information(t_f: float, v_mod: float, t_f_xi_f: float) -> float:
    if v_mod <= 0:
        raise DomainError(f"V_mod must be positive, got {v_mod}")
    if not 0 < t_f <= 1:
        raise DomainError(f"T_f must lie in (0, 1], got {t_f}")
    return 0.5 * math.log2(1.0 + t_f * v_mod / (1.0 + t_f_xi_f))


def covariance(v_mod: float, t_f: float, t_f_xi_f: float, params: DetectorParams) -> CovarianceABC:
    """Entanglement-based covariance entries (a, b, c) shared by Alice and Bob."""
    if v_mod <= 0:
        raise DomainError(f"V_mod must be positive, got {v_mod}")
    a = v_mod + 1.0
    c = math.sqrt(t_f * (v_mod ** 2 + 2.0 * v_mod))
    noise = params.xi_ch if params.trusted else t_f_xi_f
    b = t_f * v_mod + 1.0 + noise
    # bona fide two-mode Gaussian state: smaller symplectic eigenvalue >= 1
    bound = a * b - 1.0 - abs(b - a)
    if c * c > bound + 1e-12 * a * b:
        raise UnphysicalStateError(f"covariance (a={a}, b={b}, c={c}) violates c^2 <= ab - 1 - |b-a| = {bound}")
    return CovarianceABC(a=a, b=b, c=c, V_mod=v_mod, T_f=t_f, T_f_xi_f=t_f_xi_f)


def _clamp_nu(nu: float, name: str) -> float:
    if nu < 1.0 - NU_TOLERANCE:
        raise UnphysicalStateError(f"symplectic eigenvalue {name}={nu} is below 1")
    return max(nu, 1.0)


def symplectic_eigenvalues(cov: CovarianceABC) -> Tuple[float, float, float]:
    a, b, c = cov.a, cov.b, cov.c
    if b <= 0:
        raise UnphysicalStateError(f"b must be positive, got {b}")
    z2 = (a + b) ** 2 - 4.0 * c * c
    if z2 < 0:
        raise UnphysicalStateError(f"(a+b)^2 - 4c^2 = {z2} is negative")
    conditional = a - c * c / b
    if conditional < 0:
        raise UnphysicalStateError(f"a - c^2/b = {conditional} is negative")
    z = math.sqrt(z2)
    nu1 = 0.5 * (z + (b - a))
    nu2 = 0.5 * (z - (b - a))
    nu3 = math.sqrt(a * conditional)
    return _clamp_nu(nu1, "nu1"), _clamp_nu(nu2, "nu2"), _clamp_nu(nu3, "nu3")


def g_function(x: float) -> float:
    """Von Neumann entropy, in bits, of a thermal mode with symplectic eigenvalue x."""
    if x < 1.0 - NU_TOLERANCE:
        raise DomainError(f"g(x) needs x >= 1, got {x}")
    if x <= 1.0:
        return 0.0
    plus = 0.5 * (x + 1.0)
    minus = 0.5 * (x - 1.0)
    return float((xlogy(plus, plus) - xlogy(minus, minus)) / math.log(2.0))


def holevo(nu: Sequence[float]) -> float:
    """Holevo bound on Eve's information under reverse reconciliation."""
    nu1, nu2, nu3 = nu
    chi = g_function(nu1) + g_function(nu2) - g_function(nu3)
    if chi < -NU_TOLERANCE:
        raise UnphysicalStateError(f"Holevo information {chi} is negative")
    return max(0.0, chi)


def secure_key_rate(stats: ChannelStats, params: DetectorParams, v_mod: float) -> KeyRateResult:
    """
    Asymptotic secret key rate in bits per pulse.

    Args:
        stats: Channel ensemble statistics
        params: Detector and reconciliation parameters; params.trusted selects the covariance
        v_mod: Modulation variance in SNU
    """
    if v_mod <= 0:
        raise DomainError(f"V_mod must be positive, got {v_mod}")
    t_f, t_f_xi_f = effective_noise(stats, params, v_mod)
    i_ab = mutual_information(t_f, v_mod, t_f_xi_f)
    cov = covariance(v_mod, t_f, t_f_xi_f, params)
    nu = symplectic_eigenvalues(cov)
    chi = holevo(nu)
    r_sec = params.beta_reconciliation * i_ab - chi
    return KeyRateResult(
        I_AB=i_ab, nu=nu, chi_BE=chi, R_sec=r_sec, r_sec_positive=max(r_sec, 0.0), covariance=cov
    )


def scan_vmod(
    stats: ChannelStats,
    params: DetectorParams,
    v_min: float = 0.02,
    v_max: float = 10.0,
    steps: int = 500,
) -> VmodScan:
    """Key rate on a uniform V_mod grid together with its maximum."""
    if steps < 1 or v_min <= 0 or v_max < v_min:
        raise ScanRangeError(f"empty V_mod range [{v_min}, {v_max}] with {steps} steps")
    grid = np.linspace(v_min, v_max, steps)
    results = [secure_key_rate(stats, params, float(v)) for v in grid]
    r_sec = [r.R_sec for r in results]
    best = int(np.argmax(r_sec))
    scan = VmodScan(
        trusted=params.trusted,
        v_mod=[float(v) for v in grid],
        i_ab=[r.I_AB for r in results],
        chi_be=[r.chi_BE for r in results],
        r_sec=r_sec,
        v_best=float(grid[best]),
        r_best=r_sec[best],
    )
    logger.info(
        f"V_mod scan ({'trusted' if params.trusted else 'untrusted'}, gamma={stats.gamma:.3f}): "
        f"max R_sec={scan.r_best:.6g} at V_mod={scan.v_best:.4g}"
    )
    return scan


def write_scan_csv(scan: VmodScan, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["v_mod", "i_ab", "chi_be", "r_sec"])
        for row in zip(scan.v_mod, scan.i_ab, scan.chi_be, scan.r_sec):
            writer.writerow(["%.9g" % value for value in row])
