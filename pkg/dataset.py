"""
Simulation campaigns producing paired (intensity, phase-correction) samples,
the QPSD shard format they are stored in, and the train/test split.

Layout of a dataset directory:
    manifest.json          written last, sorted keys, no timestamps
    shard_00000.qpsd ...   up to 256 fixed-size little-endian records each
    .partial               present while a campaign runs (and after a failure)
"""

import hashlib
import json
import logging
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from atmosphere import ChannelConfig, ScreenPlan, stratify
from errors import (
    ConfigurationError,
    CorruptionError,
    DatasetIOError,
    FormatError,
    SampleLookupError,
    SplitError,
)
from optics import (
    ComplexField,
    aperture_box,
    crop_and_downsample,
    derive_seed,
    make_gaussian_field,
    propagate_segment,
    split_step,
    total_power,
)
from qkd import coherent_efficiency, transmissivity

# Configure logging
logger = logging.getLogger(__name__)

FORMAT_MAGIC = b"QPSD0001"
MAGIC_FAMILY = b"QPSD"
FORMAT_VERSION = FORMAT_MAGIC.decode("ascii")
SHARD_SIZE = 256
MANIFEST_NAME = "manifest.json"
PARTIAL_MARKER = ".partial"
SHOT_NOISE_STREAM = 0x5107

_HEADER = struct.Struct("<8sIIQ")
_TRAILER = struct.Struct("<dd")

PathLike = Union[str, Path]

_F32_PI = np.float32(np.pi)

# fields every channel of one campaign must agree on: they fix the vacuum
# reference and the stored aperture
SHARED_GEOMETRY = (
    "satellite_altitude_H",
    "ground_altitude_h0",
    "zenith_angle_theta_z",
    "wavelength_lambda",
    "beam_waist_w0",
    "receiver_radius_Rr",
)


def _wrap_f32(phase: np.ndarray) -> np.ndarray:
    out = np.asarray(phase, dtype=np.float32).copy()
    out[out <= -_F32_PI] = _F32_PI
    return out


class Sample(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    sample_index: int = Field(ge=0)
    seed: int = Field(ge=0, lt=2 ** 64)
    intensity: np.ndarray
    phase_correction: np.ndarray
    gamma_uncorrected: float = Field(ge=0, le=1)
    transmissivity_T: float = Field(ge=0, le=1)

    @field_validator("intensity", "phase_correction", mode="before")
    @classmethod
    def as_float32(cls, v):
        return np.asarray(v, dtype=np.float32)

    @model_validator(mode="after")
    def check_ranges(self) -> "Sample":
        if self.intensity.ndim != 2 or self.intensity.shape != self.phase_correction.shape:
            raise ValueError("intensity and phase_correction must be matching 2-D grids")
        if np.any(self.intensity < 0):
            raise ValueError("intensity must be non-negative")
        if np.any(self.phase_correction > _F32_PI) or np.any(self.phase_correction <= -_F32_PI):
            raise ValueError("phase_correction must lie in (-pi, pi]")
        return self


class Manifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: str = FORMAT_VERSION
    channel_config: ChannelConfig
    campaign_seed: int = Field(ge=0)
    sample_count: int = Field(ge=0)
    n_layers: int = Field(ge=0)
    grid_n: int
    grid_side: float = Field(gt=0)
    sample_h: int = Field(gt=0)
    sample_w: int = Field(gt=0)
    sample_dx: float = Field(gt=0)
    shot_noise: bool = False
    ratio: float = Field(0.9, gt=0, lt=1)
    eta_det: float = Field(0.95, gt=0, le=1)
    max_substeps: int = Field(4096, gt=0)
    train_count: int = Field(ge=0)
    test_count: int = Field(ge=0)
    shard_size: int = SHARD_SIZE
    shards: List[str] = Field(default_factory=list)
    digests: List[str] = Field(default_factory=list)
    # mixed campaigns only: sample i was simulated with channels[i % len(channels)]
    channels: List[ChannelConfig] = Field(default_factory=list)

    @model_validator(mode="after")
    def check_counts(self) -> "Manifest":
        if self.train_count + self.test_count != self.sample_count:
            raise ValueError("train_count + test_count must equal sample_count")
        if len(self.digests) != self.sample_count:
            raise ValueError("one digest per sample is required")
        if self.channels and self.channels[0] != self.channel_config:
            raise ValueError("channel_config must be the first of channels")
        return self

    @property
    def record_size(self) -> int:
        return record_size(self.sample_h, self.sample_w)

    def channel_for(self, index: int) -> ChannelConfig:
        """Channel a sample was simulated with."""
        if not 0 <= index < self.sample_count:
            raise SampleLookupError(f"sample index {index} is outside 0..{self.sample_count - 1}")
        if not self.channels:
            return self.channel_config
        return self.channels[index % len(self.channels)]


class _CampaignContext(BaseModel):
    """Everything a worker needs to simulate one sample."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ChannelConfig
    plan: ScreenPlan
    source: ComplexField
    reference: ComplexField
    campaign_seed: int
    sample_n: int
    shot_noise: bool
    eta_det: float
    max_substeps: int


def record_size(h: int, w: int) -> int:
    return _HEADER.size + 2 * 4 * h * w + _TRAILER.size


def split_counts(n: int, ratio: float) -> Tuple[int, int]:
    if not 0 < ratio < 1:
        raise SplitError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    train = min(n, math.ceil(round(ratio * n, 9)))
    return train, n - train


def split(manifest: Manifest, ratio: Optional[float] = None) -> Tuple[List[int], List[int]]:
    """Contiguous split by index: the first ceil(ratio * n) samples train, the rest test."""
    train, _ = split_counts(manifest.sample_count, manifest.ratio if ratio is None else ratio)
    return list(range(train)), list(range(train, manifest.sample_count))


def encode_sample(sample: Sample) -> bytes:
    h, w = sample.intensity.shape
    return b"".join(
        (
            _HEADER.pack(FORMAT_MAGIC, h, w, sample.seed),
            np.ascontiguousarray(sample.intensity, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.phase_correction, dtype="<f4").tobytes(),
            _TRAILER.pack(sample.gamma_uncorrected, sample.transmissivity_T),
        )
    )


def decode_sample(record: bytes, index: int) -> Sample:
    if len(record) < _HEADER.size:
        raise CorruptionError(f"sample {index}: record truncated to {len(record)} bytes")
    magic, h, w, seed = _HEADER.unpack_from(record, 0)
    if magic != FORMAT_MAGIC:
        if magic.startswith(MAGIC_FAMILY):
            raise FormatError(f"sample {index}: unsupported format version {magic[4:]!r}")
        raise CorruptionError(f"sample {index}: bad magic {magic!r}")
    if len(record) != record_size(h, w):
        raise CorruptionError(f"sample {index}: record has {len(record)} bytes, expected {record_size(h, w)}")
    n = h * w
    offset = _HEADER.size
    intensity = np.frombuffer(record, dtype="<f4", count=n, offset=offset).reshape(h, w)
    phase = np.frombuffer(record, dtype="<f4", count=n, offset=offset + 4 * n).reshape(h, w)
    gamma, t = _TRAILER.unpack_from(record, offset + 8 * n)
    try:
        return Sample(
            sample_index=index,
            seed=seed,
            intensity=intensity.astype(np.float32),
            phase_correction=phase.astype(np.float32),
            gamma_uncorrected=gamma,
            transmissivity_T=t,
        )
    except ValidationError as e:
        raise CorruptionError(f"sample {index}: decoded values out of range: {e}")


def _simulate_sample(context: _CampaignContext, index: int) -> Sample:
    config = context.config
    seed = derive_seed(context.campaign_seed, index)
    result = split_step(
        context.source, context.plan, config, seed, context.max_substeps, reference=context.reference
    )
    t = transmissivity(
        result.received_field, total_power(context.source), config.receiver_radius_Rr, context.eta_det
    )
    intensity, correction, ref_coarse, sample_dx = crop_and_downsample(
        result.received_field, result.reference_field, config.receiver_radius_Rr, context.sample_n
    )
    e_rlo = ComplexField(
        grid_n=context.sample_n, dx=sample_dx, wavelength=config.wavelength_lambda, values=ref_coarse
    )
    e_rp = e_rlo.with_values(np.sqrt(intensity) * np.exp(1j * (np.angle(ref_coarse) + correction)))
    gamma = coherent_efficiency(e_rlo, e_rp, config.receiver_radius_Rr)

    if context.shot_noise:
        rng = np.random.default_rng(derive_seed(seed, SHOT_NOISE_STREAM))
        expected = config.rp_photon_number_nph * intensity / max(float(intensity.sum()), 1e-300)
        intensity = rng.poisson(expected).astype(np.float64)
    peak = float(intensity.max())
    if peak > 0:
        intensity = intensity / peak

    logger.debug(f"Sample {index}: seed={seed} gamma={gamma:.4f} T={t:.4f}")
    return Sample(
        sample_index=index,
        seed=seed,
        intensity=intensity.astype(np.float32),
        phase_correction=_wrap_f32(correction),
        gamma_uncorrected=gamma,
        transmissivity_T=t,
    )


def _vacuum_plan(config: ChannelConfig) -> ScreenPlan:
    return ScreenPlan(layers=[], vacuum_tail=config.path_length, path_length=config.path_length)


class _ShardWriter:
    """Accumulates encoded samples in index order and flushes full shards."""

    def __init__(self, out: Path):
        self.out = out
        self.shards: List[str] = []
        self.digests: List[str] = []
        self._pending: List[bytes] = []

    def add(self, sample: Sample) -> None:
        record = encode_sample(sample)
        self.digests.append(hashlib.sha256(record).hexdigest())
        self._pending.append(record)
        if len(self._pending) == SHARD_SIZE:
            self.flush()

    def flush(self) -> None:
        if not self._pending:
            return
        name = f"shard_{len(self.shards):05d}.qpsd"
        (self.out / name).write_bytes(b"".join(self._pending))
        logger.info(f"Wrote {name} ({len(self._pending)} samples)")
        self.shards.append(name)
        self._pending = []


def check_shared_geometry(configs: Sequence[ChannelConfig]) -> None:
    """Raise ConfigurationError unless every config shares the first one's geometry."""
    if not configs:
        raise ConfigurationError("a campaign needs at least one channel config")
    first = configs[0]
    for k, other in enumerate(configs[1:], start=1):
        for name in SHARED_GEOMETRY:
            if getattr(other, name) != getattr(first, name):
                raise ConfigurationError(
                    f"channel {k} differs from channel 0 in {name} "
                    f"({getattr(other, name)} != {getattr(first, name)})"
                )


def run_campaign(
    config: ChannelConfig,
    n_samples: int,
    n_layers: int,
    campaign_seed: int,
    out_path: PathLike,
    grid_n: int = 256,
    grid_side: float = 8.0,
    sample_n: int = 64,
    shot_noise: bool = False,
    ratio: float = 0.9,
    eta_det: float = 0.95,
    workers: int = 1,
    max_substeps: int = 4096,
) -> Manifest:
    """
    Simulate n_samples independent reference-pulse propagations and persist them.

    Args:
        config: Channel parameters
        n_samples: Number of samples
        n_layers: Phase screens per propagation; 0 gives a vacuum channel
        campaign_seed: Root seed; sample i uses derive_seed(campaign_seed, i)
        out_path: Dataset directory
        grid_n: Simulation samples per side
        grid_side: Simulation grid side in metres
        sample_n: Side of the stored intensity / phase maps
        shot_noise: Replace intensities by Poisson photon counts
        ratio: Train fraction recorded in the manifest
        eta_det: Detector efficiency folded into the transmissivity
        workers: Worker processes; output does not depend on it
        max_substeps: Angular-spectrum sub-step cap per segment
    """
    return run_mixed_campaign(
        [config],
        n_samples,
        n_layers,
        campaign_seed,
        out_path,
        grid_n=grid_n,
        grid_side=grid_side,
        sample_n=sample_n,
        shot_noise=shot_noise,
        ratio=ratio,
        eta_det=eta_det,
        workers=workers,
        max_substeps=max_substeps,
    )


def _simulate_interleaved(contexts: Sequence[_CampaignContext], index: int) -> Sample:
    return _simulate_sample(contexts[index % len(contexts)], index)


def run_mixed_campaign(
    configs: Sequence[ChannelConfig],
    n_samples: int,
    n_layers: int,
    campaign_seed: int,
    out_path: PathLike,
    grid_n: int = 256,
    grid_side: float = 8.0,
    sample_n: int = 64,
    shot_noise: bool = False,
    ratio: float = 0.9,
    eta_det: float = 0.95,
    workers: int = 1,
    max_substeps: int = 4096,
) -> Manifest:
    """
    Simulate one dataset over several channels, e.g. a spread of ground-level Cn2.

    Channels are interleaved: sample i is simulated with configs[i % len(configs)]
    and seeded with derive_seed(campaign_seed, i), so both halves of the
    contiguous train/test split cover every channel. The configs must agree on
    SHARED_GEOMETRY so that one vacuum reference serves the whole dataset.

    Args:
        configs: Channel parameters, in interleaving order
        n_samples: Number of samples
        n_layers: Phase screens per propagation, for every channel
        campaign_seed: Root seed
        (remaining arguments as for run_campaign)

    Raises:
        ConfigurationError: empty channel list or differing geometry
        SplitError: negative sample count or a bad ratio
    """
    check_shared_geometry(configs)
    if n_samples < 0:
        raise SplitError(f"n_samples must be non-negative, got {n_samples}")
    train_count, test_count = split_counts(n_samples, ratio)

    plans = [stratify(config, n_layers) if n_layers > 0 else _vacuum_plan(config) for config in configs]
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        marker = out / PARTIAL_MARKER
        marker.write_text("campaign in progress\n")
    except OSError as e:
        raise DatasetIOError(f"cannot prepare output directory {out}: {e}")

    first = configs[0]
    dx = grid_side / grid_n
    _, factor = aperture_box(grid_n, dx, first.receiver_radius_Rr, sample_n)
    source = make_gaussian_field(grid_n, dx, first)
    reference = propagate_segment(source, plans[0].path_length, max_substeps, label="reference")
    contexts = [
        _CampaignContext(
            config=config,
            plan=plan,
            source=source,
            reference=reference,
            campaign_seed=campaign_seed,
            sample_n=sample_n,
            shot_noise=shot_noise,
            eta_det=eta_det,
            max_substeps=max_substeps,
        )
        for config, plan in zip(configs, plans)
    ]
    logger.info(
        f"Starting campaign: {n_samples} samples over {len(configs)} channel(s), {plans[0].n_layers} screens, "
        f"seed {campaign_seed}, {workers} worker(s), output {out}"
    )

    simulate = partial(_simulate_interleaved, contexts)
    writer = _ShardWriter(out)
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                samples = pool.map(simulate, range(n_samples), chunksize=8)
                for sample in samples:
                    writer.add(sample)
        else:
            for sample in map(simulate, range(n_samples)):
                writer.add(sample)
        writer.flush()

        manifest = Manifest(
            channel_config=first,
            campaign_seed=campaign_seed,
            sample_count=n_samples,
            n_layers=n_layers,
            grid_n=grid_n,
            grid_side=grid_side,
            sample_h=sample_n,
            sample_w=sample_n,
            sample_dx=dx * factor,
            shot_noise=shot_noise,
            ratio=ratio,
            eta_det=eta_det,
            max_substeps=max_substeps,
            train_count=train_count,
            test_count=test_count,
            shards=writer.shards,
            digests=writer.digests,
            channels=list(configs) if len(configs) > 1 else [],
        )
        (out / MANIFEST_NAME).write_text(
            json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
        )
        marker.unlink()
    except OSError as e:
        raise DatasetIOError(f"campaign output failed in {out}: {e}")

    logger.info(f"Campaign finished: {n_samples} samples in {len(writer.shards)} shard(s)")
    return manifest


def load_manifest(path: PathLike) -> Manifest:
    """
    Read the manifest of a dataset directory (or a manifest file path).

    Raises:
        DatasetIOError: manifest missing or unreadable
        FormatError: wrong format version or malformed document
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        raw = path.read_text()
    except OSError as e:
        raise DatasetIOError(f"cannot read manifest {path}: {e}")
    try:
        document = json.loads(raw)
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest {path} is not valid JSON: {e}")
    version = document.get("format_version") if isinstance(document, dict) else None
    if version != FORMAT_VERSION:
        raise FormatError(f"manifest {path} has format version {version!r}, expected {FORMAT_VERSION}")
    try:
        return Manifest.model_validate(document)
    except ValidationError as e:
        raise FormatError(f"manifest {path} is invalid: {e}")


def _dataset_dir(path: PathLike) -> Path:
    path = Path(path)
    return path.parent if path.name == MANIFEST_NAME else path


def _read_record(directory: Path, manifest: Manifest, index: int, cache: Optional[Dict[int, bytes]] = None) -> bytes:
    if not 0 <= index < manifest.sample_count:
        raise SampleLookupError(f"sample index {index} is outside 0..{manifest.sample_count - 1}")
    shard, slot = divmod(index, manifest.shard_size)
    size = manifest.record_size
    if cache is not None and shard in cache:
        blob = cache[shard]
        record = blob[slot * size:(slot + 1) * size]
    else:
        shard_path = directory / manifest.shards[shard]
        try:
            if cache is not None:
                blob = shard_path.read_bytes()
                cache[shard] = blob
                record = blob[slot * size:(slot + 1) * size]
            else:
                with shard_path.open("rb") as handle:
                    handle.seek(slot * size)
                    record = handle.read(size)
        except OSError as e:
            raise DatasetIOError(f"cannot read {shard_path}: {e}")
    if len(record) != size:
        raise CorruptionError(f"sample {index}: shard truncated ({len(record)} of {size} bytes)")
    if hashlib.sha256(record).hexdigest() != manifest.digests[index]:
        # a foreign version is a format problem, not corruption
        if record[:4] == MAGIC_FAMILY and record[:8] != FORMAT_MAGIC:
            raise FormatError(f"sample {index}: unsupported format version {record[4:8]!r}")
        raise CorruptionError(f"sample {index}: digest mismatch")
    return record


def read_sample(path: PathLike, index: int) -> Sample:
    """
    Read one sample, verifying its digest against the manifest.

    Args:
        path: Dataset directory
        index: Sample index
    """
    directory = _dataset_dir(path)
    manifest = load_manifest(directory)
    return decode_sample(_read_record(directory, manifest, index), index)


def iter_samples(path: PathLike, indices: Iterable[int]) -> Iterable[Sample]:
    directory = _dataset_dir(path)
    manifest = load_manifest(directory)
    cache: Dict[int, bytes] = {}
    for index in indices:
        yield decode_sample(_read_record(directory, manifest, index, cache), index)


def load_arrays(path: PathLike, indices: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack samples into float32 (N, 1, H, W) network inputs and phase targets."""
    samples = list(iter_samples(path, indices))
    if not samples:
        manifest = load_manifest(_dataset_dir(path))
        empty = np.zeros((0, 1, manifest.sample_h, manifest.sample_w), dtype=np.float32)
        return empty, empty.copy()
    inputs = np.stack([s.intensity for s in samples])[:, None, :, :]
    targets = np.stack([s.phase_correction for s in samples])[:, None, :, :]
    return inputs.astype(np.float32), targets.astype(np.float32)


def receiver_reference(manifest: Manifest) -> ComplexField:
    """The deterministic vacuum local-oscillator field on the stored sample grid."""
    config = manifest.channel_config
    dx = manifest.grid_side / manifest.grid_n
    source = make_gaussian_field(manifest.grid_n, dx, config)
    reference = propagate_segment(source, config.path_length, manifest.max_substeps, label="reference")
    _, _, ref_coarse, sample_dx = crop_and_downsample(
        reference, reference, config.receiver_radius_Rr, manifest.sample_h
    )
    return ComplexField(
        grid_n=manifest.sample_h, dx=sample_dx, wavelength=config.wavelength_lambda, values=ref_coarse
    )
