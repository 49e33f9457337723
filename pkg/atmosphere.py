"""
Altitude-dependent turbulence strength, path integrals and stratification of
the vertical satellite-to-ground channel into phase-screen layers.
"""

import logging
import math
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.integrate import cumulative_trapezoid, simpson

from errors import DomainError, NumericalError, StratificationError

# Configure logging
logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]
Profile = Callable[[np.ndarray], ArrayLike]

DEFAULT_CEILING = 20_000.0
SCINTILLATION_CAP = 0.1
QUADRATURE_RTOL = 1e-6


class ChannelConfig(BaseModel):
    """Physical parameters of one satellite-to-ground channel (SI units)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    satellite_altitude_H: float = Field(300_000.0, gt=0)
    ground_altitude_h0: float = Field(2_000.0, ge=0)
    cn2_ground: float = Field(1.7e-14, ge=0)
    outer_scale_L0: float = Field(5.0, gt=0)
    inner_scale_l0: float = Field(0.025, gt=0)
    rms_wind_v: float = Field(21.0, ge=0)
    zenith_angle_theta_z: float = Field(0.0, ge=0, lt=math.pi / 2)
    wavelength_lambda: float = Field(1550e-9, gt=0)
    beam_waist_w0: float = Field(0.15, gt=0)
    receiver_radius_Rr: float = Field(0.75, gt=0)
    rp_photon_number_nph: float = Field(55_000.0, gt=0)
    spectral_exponent_alpha: float = Field(11.0 / 3.0, gt=3, lt=4)
    anisotropy_ratio: float = Field(1.0, ge=1)

    @model_validator(mode="after")
    def check_altitudes(self) -> "ChannelConfig":
        if self.satellite_altitude_H <= self.ground_altitude_h0:
            raise ValueError(
                "satellite_altitude_H must be greater than ground_altitude_h0 "
                f"(got H={self.satellite_altitude_H}, h0={self.ground_altitude_h0})"
            )
        return self

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength_lambda

    @property
    def sec_zenith(self) -> float:
        return 1.0 / math.cos(self.zenith_angle_theta_z)

    @property
    def path_length(self) -> float:
        """Slant distance between satellite and ground station."""
        return (self.satellite_altitude_H - self.ground_altitude_h0) * self.sec_zenith


CHANNEL_ONE = ChannelConfig()
CHANNEL_TWO = ChannelConfig(cn2_ground=1.7e-15)
CHANNEL_THREE = ChannelConfig(satellite_altitude_H=500_000.0, receiver_radius_Rr=1.50)


class ScreenLayer(BaseModel):
    """One turbulent slab; distances are measured from the transmitter."""

    model_config = ConfigDict(frozen=True)

    z_start: float = Field(ge=0)
    z_end: float
    screen_position: float
    integrated_cn2: float = Field(gt=0)
    fried_r0: float = Field(gt=0)
    rytov_share: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def check_extent(self) -> "ScreenLayer":
        if self.z_end <= self.z_start:
            raise ValueError("layer z_end must exceed z_start")
        if not self.z_start <= self.screen_position <= self.z_end:
            raise ValueError("screen_position must lie inside its layer")
        return self


class ScreenPlan(BaseModel):
    """Layers ordered from satellite to ground, preceded by a turbulence-free stretch."""

    model_config = ConfigDict(frozen=True)

    layers: List[ScreenLayer] = Field(default_factory=list)
    vacuum_tail: float = Field(ge=0)
    path_length: float = Field(gt=0)
    ceiling: float = DEFAULT_CEILING
    neglected_rytov_fraction: float = 0.0

    @model_validator(mode="after")
    def check_contiguous(self) -> "ScreenPlan":
        tol = 1e-6 * self.path_length
        position = self.vacuum_tail
        for index, layer in enumerate(self.layers):
            if abs(layer.z_start - position) > tol:
                raise ValueError(f"layer {index} is not contiguous with the previous segment")
            position = layer.z_end
        if self.layers and abs(position - self.path_length) > tol:
            raise ValueError("layers must end at the receiver")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def load_channel_config(path: Union[str, Path]) -> ChannelConfig:
    """Read a ChannelConfig JSON document."""
    return ChannelConfig.model_validate_json(Path(path).read_text())


def save_channel_config(config: ChannelConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(config.model_dump_json(indent=2) + "\n")


def cn2_at_altitude(h: ArrayLike, config: ChannelConfig) -> ArrayLike:
    """
    Refractive-index structure parameter at altitude h (metres).

    Args:
        h: Altitude above sea level, scalar or array, must be non-negative
        config: Channel parameters providing the rms wind speed and C2n(0)
    """
    h_arr = np.asarray(h, dtype=np.float64)
    if np.any(h_arr < 0) or np.any(np.isnan(h_arr)):
        raise DomainError(f"altitude must be non-negative, got {h}")
    wind = 0.00594 * (config.rms_wind_v / 27.0) ** 2 * (h_arr * 1e-5) ** 10 * np.exp(-h_arr / 1000.0)
    background = 2.7e-16 * np.exp(-h_arr / 1500.0)
    ground = config.cn2_ground * np.exp(-h_arr / 100.0)
    result = wind + background + ground
    if np.ndim(h) == 0:
        return float(result)
    return result


def _profile_values(h: np.ndarray, config: ChannelConfig, profile: Optional[Profile]) -> np.ndarray:
    if profile is None:
        return cn2_at_altitude(h, config)
    return np.broadcast_to(np.asarray(profile(h), dtype=np.float64), h.shape)


def _simpson_doubling(
    func: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    rtol: float = QUADRATURE_RTOL,
    min_level: int = 6,
    max_level: int = 22,
) -> float:
    """Composite Simpson rule, doubling the interval count until two successive estimates agree."""
    if b <= a:
        return 0.0
    previous = None
    history = []
    for level in range(min_level, max_level + 1):
        x = np.linspace(a, b, 2 ** level + 1)
        estimate = float(simpson(func(x), x=x))
        history.append(estimate)
        if previous is not None and abs(estimate - previous) <= rtol * abs(estimate):
            return estimate
        previous = estimate
    raise NumericalError(
        f"Simpson quadrature on [{a}, {b}] did not reach rtol={rtol} after "
        f"2^{max_level} intervals; last estimates: {history[-3:]}"
    )


def _rytov_prefactor(config: ChannelConfig) -> float:
    return 2.25 * config.wavenumber ** (7.0 / 6.0) * config.sec_zenith ** (11.0 / 6.0)


def rytov_variance(config: ChannelConfig, profile: Optional[Profile] = None) -> float:
    """
    Rytov variance of the downlink, integrating C2n(h)(h - h0)^(5/6) from h0 to H.

    Args:
        config: Channel parameters
        profile: Optional altitude -> C2n callable replacing the default profile
    """
    h0 = config.ground_altitude_h0

    def integrand(h: np.ndarray) -> np.ndarray:
        return _profile_values(h, config, profile) * (h - h0) ** (5.0 / 6.0)

    integral = _simpson_doubling(integrand, h0, config.satellite_altitude_H)
    sigma_r2 = max(_rytov_prefactor(config) * integral, 0.0)
    logger.debug(f"Rytov variance {sigma_r2:.6g} for H={config.satellite_altitude_H}, h0={h0}")
    return sigma_r2


def scintillation_index(sigma_R2: float) -> float:
    """Scintillation index of a downlink for a given Rytov variance."""
    if sigma_R2 < 0 or math.isnan(sigma_R2):
        raise DomainError(f"Rytov variance must be non-negative, got {sigma_R2}")
    if math.isinf(sigma_R2):
        return math.exp(0.51 / 0.69 ** (5.0 / 6.0)) - 1.0
    s125 = sigma_R2 ** (6.0 / 5.0)
    first = 0.49 * sigma_R2 / (1.0 + 1.11 * s125) ** (7.0 / 6.0)
    second = 0.51 * sigma_R2 / (1.0 + 0.69 * s125) ** (5.0 / 6.0)
    return math.expm1(first + second)


def path_integrated_cn2(config: ChannelConfig, profile: Optional[Profile] = None) -> float:
    """Vertical integral of C2n between the ground station and the satellite."""
    return _simpson_doubling(
        lambda h: _profile_values(h, config, profile),
        config.ground_altitude_h0,
        config.satellite_altitude_H,
    )


def fried_parameter(integrated_cn2: float, config: ChannelConfig) -> float:
    """Fried parameter of a slab with the given vertical C2n integral; infinite when it is zero."""
    if integrated_cn2 <= 0:
        return math.inf
    return (0.423 * config.wavenumber ** 2 * config.sec_zenith * integrated_cn2) ** (-3.0 / 5.0)


def _band_top(config: ChannelConfig, ceiling: float) -> float:
    return min(config.satellite_altitude_H, ceiling)


def _band_rytov(config: ChannelConfig, ceiling: float, profile: Optional[Profile]) -> float:
    h0 = config.ground_altitude_h0
    top = _band_top(config, ceiling)
    integral = _simpson_doubling(
        lambda h: _profile_values(h, config, profile) * (h - h0) ** (5.0 / 6.0), h0, top
    )
    return _rytov_prefactor(config) * integral


def minimum_layers(
    config: ChannelConfig,
    ceiling: float = DEFAULT_CEILING,
    profile: Optional[Profile] = None,
    max_layers: int = 100_000,
) -> int:
    """Smallest layer count whose equal Rytov shares each keep the scintillation index <= 0.1."""
    band = _band_rytov(config, ceiling, profile)
    n = 1
    while scintillation_index(band / n) > SCINTILLATION_CAP:
        n += 1
        if n > max_layers:
            raise StratificationError(f"no layer count up to {max_layers} satisfies the scintillation cap")
    return n


def stratify(
    config: ChannelConfig,
    n_layers: int,
    ceiling: float = DEFAULT_CEILING,
    profile: Optional[Profile] = None,
    grid_points: int = 2 ** 16 + 1,
) -> ScreenPlan:
    """
    Split the turbulent band into layers carrying equal shares of the Rytov integrand.

    Args:
        config: Channel parameters
        n_layers: Number of phase screens
        ceiling: Altitude above which the path is treated as vacuum
        profile: Optional altitude -> C2n callable replacing the default profile
        grid_points: Resolution of the cumulative integral used to place boundaries
    """
    if n_layers < 1:
        raise StratificationError(f"n_layers must be at least 1, got {n_layers}")
    if ceiling <= 0:
        raise StratificationError(f"ceiling must be positive, got {ceiling}")

    h0 = config.ground_altitude_h0
    H = config.satellite_altitude_H
    sec = config.sec_zenith
    top = _band_top(config, ceiling)
    path_length = config.path_length

    if top <= h0:
        logger.info("Turbulence ceiling lies below the ground station; plan is pure vacuum")
        return ScreenPlan(layers=[], vacuum_tail=path_length, path_length=path_length, ceiling=ceiling)

    heights = np.linspace(h0, top, grid_points)
    weight = _profile_values(heights, config, profile) * (heights - h0) ** (5.0 / 6.0)
    cumulative = cumulative_trapezoid(weight, heights, initial=0.0)
    total = cumulative[-1]
    if total <= 0:
        logger.info("Turbulence profile vanishes inside the band; plan is pure vacuum")
        return ScreenPlan(layers=[], vacuum_tail=path_length, path_length=path_length, ceiling=ceiling)

    targets = total * np.arange(1, n_layers) / n_layers
    inner = np.interp(targets, cumulative, heights)
    boundaries = np.concatenate(([h0], inner, [top]))

    prefactor = _rytov_prefactor(config)
    layers = []
    # walk from the top of the band down to the ground
    for index in range(n_layers - 1, -1, -1):
        lower, upper = float(boundaries[index]), float(boundaries[index + 1])
        cn2_integral = _simpson_doubling(lambda h: _profile_values(h, config, profile), lower, upper)
        moment = _simpson_doubling(lambda h: _profile_values(h, config, profile) * h, lower, upper)
        share = _simpson_doubling(
            lambda h: _profile_values(h, config, profile) * (h - h0) ** (5.0 / 6.0), lower, upper
        )
        layer_sigma_r2 = prefactor * share
        layer_scintillation = scintillation_index(layer_sigma_r2)
        if layer_scintillation > SCINTILLATION_CAP:
            smallest = minimum_layers(config, ceiling, profile)
            raise StratificationError(
                f"layer between {lower:.1f} m and {upper:.1f} m has scintillation index "
                f"{layer_scintillation:.4f} > {SCINTILLATION_CAP}; use at least {smallest} layers",
                minimum_layers=smallest,
            )
        centroid = moment / cn2_integral if cn2_integral > 0 else 0.5 * (lower + upper)
        centroid = min(max(centroid, lower), upper)
        layers.append(
            ScreenLayer(
                z_start=(H - upper) * sec,
                z_end=(H - lower) * sec,
                screen_position=(H - centroid) * sec,
                integrated_cn2=cn2_integral,
                fried_r0=fried_parameter(cn2_integral, config),
                rytov_share=layer_sigma_r2,
            )
        )

    band_rytov = sum(layer.rytov_share for layer in layers)
    full_rytov = rytov_variance(config, profile)
    neglected = 0.0 if full_rytov <= 0 else max(0.0, 1.0 - band_rytov / full_rytov)
    plan = ScreenPlan(
        layers=layers,
        vacuum_tail=(H - top) * sec,
        path_length=path_length,
        ceiling=ceiling,
        neglected_rytov_fraction=neglected,
    )
    logger.info(
        f"Stratified {h0:.0f}-{top:.0f} m into {n_layers} layers "
        f"(band sigma_R^2={band_rytov:.4g}, {neglected:.2%} of the Rytov integral above the ceiling)"
    )
    return plan
