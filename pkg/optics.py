"""
Complex optical fields, phase-screen synthesis, angular-spectrum vacuum
propagation and the split-step engine that produces the received reference
pulse together with its matched vacuum reference.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.integrate import quad
from scipy.special import gamma as gamma_fn
from scipy.special import j0

from atmosphere import ChannelConfig, ScreenLayer, ScreenPlan
from errors import ConfigurationError, PropagationError, ShapeError

# Configure logging
logger = logging.getLogger(__name__)

SUBHARMONIC_LEVELS = 3
ABSORBER_ORDER = 16
ABSORBER_BAND = 0.10
ABSORBER_EDGE_TRANSMISSION = 1e-6
DEFAULT_MAX_SUBSTEPS = 4096


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


class ComplexField(BaseModel):
    """Sampled complex amplitude on a square grid centred on the optical axis."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    grid_n: int
    dx: float = Field(gt=0)
    wavelength: float = Field(gt=0)
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def as_complex(cls, v):
        return np.asarray(v, dtype=np.complex128)

    @model_validator(mode="after")
    def check_grid(self) -> "ComplexField":
        if self.grid_n < 32 or not _is_power_of_two(self.grid_n):
            raise ValueError(f"grid_n must be a power of two >= 32, got {self.grid_n}")
        if self.values.shape != (self.grid_n, self.grid_n):
            raise ValueError(f"values must have shape {(self.grid_n, self.grid_n)}, got {self.values.shape}")
        return self

    def with_values(self, values: np.ndarray) -> "ComplexField":
        return ComplexField(grid_n=self.grid_n, dx=self.dx, wavelength=self.wavelength, values=values)


class PhaseScreen(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    grid_n: int
    dx: float = Field(gt=0)
    phase: np.ndarray
    fried_r0: float = Field(gt=0)
    seed: int


class PropagationResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    received_field: ComplexField
    reference_field: ComplexField
    phase_correction: np.ndarray
    intensity: np.ndarray


def derive_seed(*keys: int) -> int:
    """Deterministic 64-bit seed from a tuple of non-negative integer keys."""
    sequence = np.random.SeedSequence([int(k) for k in keys])
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def total_power(field: ComplexField) -> float:
    return float(np.sum(np.abs(field.values) ** 2) * field.dx ** 2)


def grid_axis(grid_n: int, dx: float) -> np.ndarray:
    """Sample coordinates along one axis; index grid_n // 2 sits on the optical axis."""
    return (np.arange(grid_n) - grid_n // 2) * dx


def radial_grid(grid_n: int, dx: float) -> np.ndarray:
    axis = grid_axis(grid_n, dx)
    x, y = np.meshgrid(axis, axis, indexing="xy")
    return np.hypot(x, y)


def aperture_mask(grid_n: int, dx: float, radius: float) -> np.ndarray:
    return radial_grid(grid_n, dx) <= radius


def make_gaussian_field(grid_n: int, dx: float, config: ChannelConfig) -> ComplexField:
    """
    Collimated Gaussian beam with flat phase, normalised to unit power.

    Args:
        grid_n: Samples per side (power of two, at least 32)
        dx: Sample spacing in metres
        config: Channel parameters providing the waist radius and wavelength
    """
    if grid_n < 32 or not _is_power_of_two(grid_n):
        raise ConfigurationError(f"grid_n must be a power of two >= 32, got {grid_n}")
    w0 = config.beam_waist_w0
    if grid_n * dx < 6.0 * w0:
        raise ConfigurationError(
            f"grid side {grid_n * dx:.3f} m is smaller than 6 beam waists ({6.0 * w0:.3f} m)"
        )
    r = radial_grid(grid_n, dx)
    amplitude = np.exp(-(r ** 2) / w0 ** 2).astype(np.complex128)
    field = ComplexField(grid_n=grid_n, dx=dx, wavelength=config.wavelength_lambda, values=amplitude)
    return field.with_values(amplitude / math.sqrt(total_power(field)))


def max_vacuum_step(grid_n: int, dx: float, wavelength: float) -> float:
    """Longest single angular-spectrum step whose transfer function is adequately sampled."""
    return grid_n * dx ** 2 / wavelength


def _kz_offset(grid_n: int, dx: float, wavelength: float) -> np.ndarray:
    """kz - k for every FFT frequency sample, written so large k does not cancel."""
    if dx <= wavelength:
        raise PropagationError(f"sample spacing {dx} m must exceed the wavelength {wavelength} m")
    k = 2.0 * math.pi / wavelength
    kx = 2.0 * math.pi * np.fft.fftfreq(grid_n, d=dx)
    kx2, ky2 = np.meshgrid(kx ** 2, kx ** 2, indexing="xy")
    k_perp2 = kx2 + ky2
    return -k_perp2 / (k + np.sqrt(k * k - k_perp2))


def _apply_transfer(values: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return np.fft.ifft2(np.fft.fft2(values) * np.exp(1j * phase))


def propagate_vacuum(field: ComplexField, dz: float) -> ComplexField:
    """
    Single angular-spectrum step over dz metres (negative dz propagates backwards).

    The piston phase exp(ikz) is dropped; it is common to every pixel.
    """
    if dz == 0:
        return field.with_values(field.values.copy())
    limit = max_vacuum_step(field.grid_n, field.dx, field.wavelength)
    if abs(dz) > limit * (1.0 + 1e-12):
        steps = math.ceil(abs(dz) / limit)
        raise PropagationError(
            f"step of {dz:.6g} m exceeds the angular-spectrum limit {limit:.6g} m; "
            f"split it into at least {steps} steps"
        )
    phase = dz * _kz_offset(field.grid_n, field.dx, field.wavelength)
    return field.with_values(_apply_transfer(field.values, phase))


def propagate_segment(
    field: ComplexField,
    dz: float,
    max_substeps: int = DEFAULT_MAX_SUBSTEPS,
    label: str = "segment",
    absorber: Optional[np.ndarray] = None,
) -> ComplexField:
    """
    Propagate over dz using the fewest equal sub-steps that satisfy the sampling limit.

    Args:
        field: Field at the start of the segment
        dz: Segment length in metres
        max_substeps: Upper bound on the number of sub-steps
        label: Name used in error messages
        absorber: Edge mask applied after every sub-step; None leaves the grid edge open
    """
    if dz == 0:
        return field.with_values(field.values.copy())
    limit = max_vacuum_step(field.grid_n, field.dx, field.wavelength)
    substeps = max(1, math.ceil(abs(dz) / limit - 1e-12))
    if substeps > max_substeps:
        raise PropagationError(
            f"{label}: {dz:.6g} m needs {substeps} sub-steps of at most {limit:.6g} m, "
            f"more than the allowed {max_substeps}"
        )
    step_phase = (dz / substeps) * _kz_offset(field.grid_n, field.dx, field.wavelength)
    values = field.values
    for _ in range(substeps):
        values = _apply_transfer(values, step_phase)
        if absorber is not None:
            values = values * absorber
    return field.with_values(values)


def edge_absorber(grid_n: int, dx: float) -> np.ndarray:
    """Super-Gaussian transmission mask: exactly 1 inside, rolling off across the outer grid band."""
    half = 0.5 * grid_n * dx
    inner = (1.0 - ABSORBER_BAND) * half
    u = np.clip((radial_grid(grid_n, dx) - inner) / (half - inner), 0.0, None)
    return np.exp(math.log(ABSORBER_EDGE_TRANSMISSION) * u ** ABSORBER_ORDER)


def _spectrum_constants(alpha: float) -> Tuple[float, float]:
    """Amplitude A(alpha) of the generalised refractive spectrum and the inner-scale constant c(alpha)."""
    amplitude = gamma_fn(alpha - 1.0) * math.cos(alpha * math.pi / 2.0) / (4.0 * math.pi ** 2)
    if math.isclose(alpha, 11.0 / 3.0):
        return amplitude, 5.92
    c = (gamma_fn((5.0 - alpha) / 2.0) * amplitude * 2.0 * math.pi / 3.0) ** (1.0 / (alpha - 5.0))
    return amplitude, c


def phase_psd(kappa2: np.ndarray, fried_r0: float, config: ChannelConfig) -> np.ndarray:
    """
    Modified von Karman phase power spectrum of a screen, in rad^2 m^2.

    Args:
        kappa2: Squared angular spatial frequency (rad^2/m^2)
        fried_r0: Fried parameter of the slab the screen represents
        config: Channel parameters (outer/inner scale, exponent, anisotropy)
    """
    kappa2 = np.asarray(kappa2, dtype=np.float64)
    if math.isinf(fried_r0):
        return np.zeros_like(kappa2)
    k = config.wavenumber
    alpha = config.spectral_exponent_alpha
    amplitude, c = _spectrum_constants(alpha)
    slant_cn2 = fried_r0 ** (-5.0 / 3.0) / (0.423 * k ** 2)
    kappa_m = c / config.inner_scale_l0
    kappa_0 = 2.0 * math.pi / config.outer_scale_L0
    anisotropy = config.anisotropy_ratio ** (2.0 - alpha)
    return (
        2.0 * math.pi * k ** 2 * amplitude * anisotropy * slant_cn2
        * np.exp(-kappa2 / kappa_m ** 2) / (kappa2 + kappa_0 ** 2) ** (alpha / 2.0)
    )


def generate_phase_screen(
    layer: ScreenLayer, grid_n: int, dx: float, config: ChannelConfig, seed: int
) -> PhaseScreen:
    """
    FFT phase screen with three levels of subharmonic low-frequency compensation.

    Args:
        layer: Plan entry supplying the Fried parameter
        grid_n: Samples per side
        dx: Sample spacing in metres
        config: Channel parameters
        seed: 64-bit seed; identical seeds give bit-identical screens
    """
    r0 = layer.fried_r0
    rng = np.random.default_rng(seed)
    dk = 2.0 * math.pi / (grid_n * dx)

    kx = 2.0 * math.pi * np.fft.fftfreq(grid_n, d=dx)
    kx2, ky2 = np.meshgrid(kx ** 2, kx ** 2, indexing="xy")
    psd = phase_psd(kx2 + ky2, r0, config)
    psd[0, 0] = 0.0
    noise = rng.standard_normal((grid_n, grid_n)) + 1j * rng.standard_normal((grid_n, grid_n))
    high = np.real(np.fft.ifft2(noise * np.sqrt(psd) * dk)) * grid_n * grid_n

    # subharmonics on 3x3 frequency grids of spacing dk / 3^p, centre excluded
    axis = grid_axis(grid_n, dx)
    draws = rng.standard_normal((SUBHARMONIC_LEVELS, 2, 3, 3))
    low = np.zeros((grid_n, grid_n), dtype=np.complex128)
    for level in range(SUBHARMONIC_LEVELS):
        dkp = dk / 3 ** (level + 1)
        for i, m in enumerate((-1, 0, 1)):
            for j, n in enumerate((-1, 0, 1)):
                if m == 0 and n == 0:
                    continue
                kxp, kyp = n * dkp, m * dkp
                amp = math.sqrt(float(phase_psd(kxp ** 2 + kyp ** 2, r0, config))) * dkp
                coeff = (draws[level, 0, i, j] + 1j * draws[level, 1, i, j]) * amp
                low += coeff * np.outer(np.exp(1j * kyp * axis), np.exp(1j * kxp * axis))
    low_real = np.real(low)
    phase = high + low_real - low_real.mean()
    return PhaseScreen(grid_n=grid_n, dx=dx, phase=phase, fried_r0=r0, seed=seed)


def phase_structure_function(r: float, fried_r0: float, config: ChannelConfig) -> float:
    """Theoretical phase structure function of the spectrum used by generate_phase_screen."""
    if r <= 0:
        return 0.0

    def integrand(kappa: float) -> float:
        return float(phase_psd(kappa * kappa, fried_r0, config)) * (1.0 - j0(kappa * r)) * kappa

    split = 50.0 / r
    head, _ = quad(integrand, 0.0, split, limit=500)
    tail, _ = quad(integrand, split, math.inf, limit=500)
    return 4.0 * math.pi * (head + tail)


def measure_structure_function(screens: Sequence[np.ndarray], lags: Sequence[int]) -> np.ndarray:
    """Monte-Carlo phase structure function along both grid axes for integer pixel lags."""
    sums = np.zeros(len(lags))
    for phase in screens:
        for index, lag in enumerate(lags):
            dx_sq = np.mean((phase[:, lag:] - phase[:, :-lag]) ** 2)
            dy_sq = np.mean((phase[lag:, :] - phase[:-lag, :]) ** 2)
            sums[index] += 0.5 * (dx_sq + dy_sq)
    return sums / len(screens)


def phase_correction_truth(received: ComplexField, reference: ComplexField) -> np.ndarray:
    """Pixelwise wrap(arg(received) - arg(reference)) into (-pi, pi]."""
    if received.grid_n != reference.grid_n or not math.isclose(received.dx, reference.dx):
        raise ShapeError(
            f"field grids differ: {received.grid_n}x{received.dx} vs {reference.grid_n}x{reference.dx}"
        )
    correction = np.angle(received.values * np.conj(reference.values))
    correction[correction <= -math.pi] = math.pi
    return correction


def split_step(
    field: ComplexField,
    plan: ScreenPlan,
    config: ChannelConfig,
    seed: int,
    max_substeps: int = DEFAULT_MAX_SUBSTEPS,
    reference: Optional[ComplexField] = None,
    absorb_edges: bool = True,
) -> PropagationResult:
    """
    Propagate the transmitted beam through the plan's screens down to the receiver.

    Args:
        field: Transmitted field at the satellite
        plan: Stratification from atmosphere.stratify
        config: Channel parameters
        seed: Sample seed; layer i uses derive_seed(seed, i)
        max_substeps: Upper bound on angular-spectrum sub-steps per segment
        reference: Precomputed vacuum reference over plan.path_length, if available
        absorb_edges: Apply the edge absorber after every sub-step of the turbulent arm;
            off only for fields that are periodic on the grid, such as a plane wave
    """
    if field.grid_n * field.dx < 8.0 * config.receiver_radius_Rr:
        raise ConfigurationError(
            f"grid side {field.grid_n * field.dx:.3f} m is smaller than four receiver "
            f"diameters ({8.0 * config.receiver_radius_Rr:.3f} m)"
        )
    absorber = edge_absorber(field.grid_n, field.dx) if absorb_edges else None
    received = field
    position = 0.0
    for index, layer in enumerate(plan.layers):
        received = propagate_segment(
            received, layer.screen_position - position, max_substeps, f"segment {index}", absorber
        )
        screen = generate_phase_screen(layer, field.grid_n, field.dx, config, derive_seed(seed, index))
        received = received.with_values(received.values * np.exp(1j * screen.phase))
        position = layer.screen_position
        logger.debug(f"Applied screen {index} at z={position:.1f} m (r0={layer.fried_r0:.4g} m)")
    received = propagate_segment(
        received, plan.path_length - position, max_substeps, f"segment {len(plan.layers)}", absorber
    )

    if reference is None:
        reference = propagate_segment(field, plan.path_length, max_substeps, label="reference")
    return PropagationResult(
        received_field=received,
        reference_field=reference,
        phase_correction=phase_correction_truth(received, reference),
        intensity=np.abs(received.values) ** 2,
    )


def aperture_box(grid_n: int, dx: float, radius: float, out_n: int) -> Tuple[int, int]:
    """Start index and downsampling factor of the centred crop that holds the receiver aperture."""
    needed = math.ceil(2.0 * radius / dx - 1e-9)
    factor = max(1, math.ceil(needed / out_n))
    size = factor * out_n
    if size > grid_n:
        raise ConfigurationError(
            f"aperture crop of {size} samples does not fit the {grid_n}-sample grid"
        )
    return grid_n // 2 - size // 2, factor


def block_mean(array: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return array.copy()
    h, w = array.shape
    return array.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def crop_and_downsample(
    received: ComplexField, reference: ComplexField, radius: float, out_n: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """
    Centre-crop both fields to the aperture box and reduce them to out_n x out_n.

    Returns:
        (intensity, phase_correction, reference_values, sample_dx). Phases are
        reduced through the complex product received * conj(reference) so
        wrapping is respected.
    """
    start, factor = aperture_box(received.grid_n, received.dx, radius, out_n)
    size = factor * out_n
    window = (slice(start, start + size), slice(start, start + size))
    rec = received.values[window]
    ref = reference.values[window]
    intensity = block_mean(np.abs(rec) ** 2, factor)
    correction = np.angle(block_mean(rec * np.conj(ref), factor))
    correction[correction <= -math.pi] = math.pi
    return intensity, correction, block_mean(ref, factor), received.dx * factor


def reversed_conjugate_screens(
    screens: List[PhaseScreen],
) -> List[PhaseScreen]:
    """Screens negated and in ground-to-satellite order, for back-propagation checks."""
    return [
        PhaseScreen(grid_n=s.grid_n, dx=s.dx, phase=-s.phase, fried_r0=s.fried_r0, seed=s.seed)
        for s in reversed(screens)
    ]
