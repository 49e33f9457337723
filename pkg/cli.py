#!/usr/bin/env python3
"""
Command-line entry point: simulation campaigns, training, evaluation,
key-rate scans, plots and channel stratification diagnostics.

Logs go to stderr; stdout carries one JSON summary per command.
"""

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from atmosphere import (
    CHANNEL_ONE,
    ChannelConfig,
    fried_parameter,
    minimum_layers,
    path_integrated_cn2,
    rytov_variance,
    scintillation_index,
    stratify,
)
from dataset import iter_samples, load_manifest, receiver_reference, run_mixed_campaign, split
from errors import ConfigurationError, DatasetError, DomainError, PhaseNetError
from neuralnet import (
    build_network,
    encoder_decoder_spec,
    load_checkpoint,
    parameter_count,
    predict,
    save_checkpoint,
    train,
)
from plots import plot_csv
from qkd import (
    ChannelStats,
    DetectorParams,
    apply_correction,
    channel_stats,
    coherent_efficiency,
    scan_vmod,
    secure_key_rate,
    write_scan_csv,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
PRESET_WIDTHS = {"full": (32, 64, 128), "reduced": (16, 32, 64)}
SECTION_KEYS = {"channel", "detector", "campaign", "training", "keyrate", "paths"}
DEFAULT_LAYERS = 10


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, str(default)))
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={os.getenv(name)!r}")
        return default


class CampaignSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_samples: int = Field(2000, ge=0)
    n_layers: Optional[int] = Field(None, ge=0)
    seed: int = Field(7, ge=0)
    grid_n: int = 256
    grid_side: float = Field(8.0, gt=0)
    sample_n: int = 64
    shot_noise: bool = False
    ratio: float = Field(0.9, gt=0, lt=1)
    max_substeps: int = Field(4096, gt=0)
    workers: int = Field(default_factory=lambda: _env_int("RLO_PHASENET_WORKERS", 1), ge=1)
    # non-empty: one channel copy per ground-level Cn2, samples interleaved
    cn2_ground_mix: List[float] = Field(default_factory=list)


class TrainingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    seed: int = Field(0, ge=0)
    init_seed: int = Field(0, ge=0)
    preset: Literal["full", "reduced"] = "reduced"


class KeyRateSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    v_min: float = Field(0.02, gt=0)
    v_max: float = Field(10.0, gt=0)
    steps: int = Field(500, ge=1)
    v_mod: float = Field(10.0, gt=0)
    # channel-one ensemble transmissivity
    mean_T: float = Field(0.71, ge=0, le=1)
    mean_sqrtT: Optional[float] = Field(None, ge=0, le=1)
    mean_xi_det: Optional[float] = Field(None, ge=0)


class PathsSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: str = Field(default_factory=lambda: os.getenv("RLO_PHASENET_DATA_DIR", "data"))
    runs_dir: str = Field(default_factory=lambda: os.getenv("RLO_PHASENET_RUNS_DIR", "runs"))


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    channel: ChannelConfig = CHANNEL_ONE
    detector: DetectorParams = Field(default_factory=DetectorParams)
    campaign: CampaignSection = Field(default_factory=CampaignSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    keyrate: KeyRateSection = Field(default_factory=KeyRateSection)
    paths: PathsSection = Field(default_factory=PathsSection)


def load_run_config(path: Optional[str]) -> RunConfig:
    """
    Load a RunConfig, or a bare ChannelConfig document wrapped into one.

    Args:
        path: JSON file; None gives the defaults
    """
    if path is None:
        return RunConfig()
    try:
        document = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config {path} is not valid JSON: {e}")
    if isinstance(document, dict) and document and not SECTION_KEYS & set(document):
        return RunConfig(channel=ChannelConfig.model_validate(document))
    return RunConfig.model_validate(document)


def _emit(summary: Dict[str, Any]) -> None:
    print(json.dumps(summary, indent=2, sort_keys=True))


def _write_rows(path: Path, header: Sequence[str], rows: List[Sequence[float]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([value if isinstance(value, (int, np.integer)) else "%.9g" % value for value in row])


def cmd_stratify(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    channel = config.channel
    n_layers = args.layers or config.campaign.n_layers or max(DEFAULT_LAYERS, minimum_layers(channel, ceiling=args.ceiling))
    plan = stratify(channel, n_layers, ceiling=args.ceiling)
    sigma_r2 = rytov_variance(channel)
    _emit(
        {
            "rytov_variance": sigma_r2,
            "scintillation_index": scintillation_index(sigma_r2),
            "fried_r0": fried_parameter(path_integrated_cn2(channel), channel),
            "minimum_layers": minimum_layers(channel, ceiling=args.ceiling),
            "plan": plan.model_dump(mode="json"),
        }
    )
    return 0


def campaign_channels(channel: ChannelConfig, cn2_grounds: Sequence[float]) -> List[ChannelConfig]:
    """The channel, or one copy of it per ground-level Cn2 for a mixed campaign."""
    if not cn2_grounds:
        return [channel]
    return [ChannelConfig.model_validate({**channel.model_dump(), "cn2_ground": cn2}) for cn2 in cn2_grounds]


def cmd_simulate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    campaign = config.campaign
    channels = campaign_channels(config.channel, args.cn2_ground or campaign.cn2_ground_mix)
    n_samples = args.count if args.count is not None else campaign.n_samples
    seed = args.seed if args.seed is not None else campaign.seed
    n_layers = args.layers if args.layers is not None else campaign.n_layers
    if n_layers is None:
        n_layers = max(DEFAULT_LAYERS, *(minimum_layers(channel) for channel in channels))
    out = args.out or config.paths.data_dir
    manifest = run_mixed_campaign(
        channels,
        n_samples,
        n_layers,
        seed,
        out,
        grid_n=campaign.grid_n,
        grid_side=campaign.grid_side,
        sample_n=campaign.sample_n,
        shot_noise=args.shot_noise or campaign.shot_noise,
        ratio=campaign.ratio,
        eta_det=config.detector.eta_det,
        workers=args.workers or campaign.workers,
        max_substeps=campaign.max_substeps,
    )
    _emit(
        {
            "out": str(out),
            "sample_count": manifest.sample_count,
            "train_count": manifest.train_count,
            "test_count": manifest.test_count,
            "n_layers": manifest.n_layers,
            "channels": len(channels),
            "shards": manifest.shards,
            "sample_dims": [manifest.sample_h, manifest.sample_w],
        }
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    training = config.training
    data_dir = args.data or config.paths.data_dir
    checkpoint = Path(args.out or Path(config.paths.runs_dir) / "model.qnet")
    epochs = args.epochs or training.epochs
    batch_size = args.batch_size or training.batch_size
    learning_rate = args.lr if args.lr is not None else training.learning_rate
    seed = args.seed if args.seed is not None else training.seed
    widths = PRESET_WIDTHS[args.preset or training.preset]

    manifest = load_manifest(data_dir)
    train_ids, _ = split(manifest)
    if not train_ids:
        raise DatasetError(f"dataset {data_dir} has no training samples")
    samples = list(iter_samples(data_dir, train_ids))
    inputs = np.stack([s.intensity for s in samples])[:, None]
    targets = np.stack([s.phase_correction for s in samples])[:, None]

    spec = encoder_decoder_spec(manifest.sample_h, manifest.sample_w, widths)
    network = build_network(spec, training.init_seed)
    if learning_rate == 0:
        logger.warning("Learning rate is 0; network parameters will not change")
    logger.info(f"Training {parameter_count(spec)} parameters on {len(samples)} samples")
    history = train(network, inputs, targets, epochs, batch_size, learning_rate, seed)

    metadata = history.model_dump()
    metadata["init_seed"] = training.init_seed
    save_checkpoint(network, checkpoint, metadata=metadata)
    loss_csv = checkpoint.parent / "loss.csv"
    _write_rows(loss_csv, ["epoch", "train_loss"], [(i + 1, loss) for i, loss in enumerate(history.loss_history)])
    _emit(
        {
            "checkpoint": str(checkpoint),
            "loss_csv": str(loss_csv),
            "epochs": epochs,
            "final_loss": history.loss_history[-1],
            "parameters": parameter_count(spec),
        }
    )
    return 0


def _key_rates(stats: ChannelStats, detector: DetectorParams, v_mod: float) -> Dict[str, float]:
    rates = {}
    for label, trusted in (("trusted", True), ("untrusted", False)):
        result = secure_key_rate(stats, detector.model_copy(update={"trusted": trusted}), v_mod)
        rates[f"i_ab_{label}"] = result.I_AB
        rates[f"r_sec_{label}"] = result.R_sec
    return rates


def cmd_evaluate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    data_dir = args.data or config.paths.data_dir
    report = Path(args.report or Path(config.paths.runs_dir) / "evaluation.csv")
    checkpoint = args.checkpoint or str(Path(config.paths.runs_dir) / "model.qnet")

    manifest = load_manifest(data_dir)
    _, test_ids = split(manifest)
    if not test_ids:
        raise DatasetError(f"dataset {data_dir} has an empty test split")
    network = load_checkpoint(checkpoint, input_shape=(manifest.sample_h, manifest.sample_w))
    samples = list(iter_samples(data_dir, test_ids))
    inputs = np.stack([s.intensity for s in samples])[:, None]
    predictions = predict(network, inputs, batch_size=args.batch_size)[:, 0].astype(np.float64)

    radius = manifest.channel_config.receiver_radius_Rr
    reference = receiver_reference(manifest)
    ref_phase = np.angle(reference.values)
    rows = []
    for sample, predicted in zip(samples, predictions):
        truth = sample.phase_correction.astype(np.float64)
        received = reference.with_values(np.sqrt(sample.intensity.astype(np.float64)) * np.exp(1j * (ref_phase + truth)))
        rows.append(
            (
                sample.sample_index,
                coherent_efficiency(reference, received, radius),
                coherent_efficiency(apply_correction(reference, predicted), received, radius),
                coherent_efficiency(apply_correction(reference, truth), received, radius),
            )
        )
    _write_rows(report, ["sample", "gamma_before", "gamma_after", "gamma_oracle"], rows)

    before = np.array([r[1] for r in rows])
    after = np.array([r[2] for r in rows])
    oracle = np.array([r[3] for r in rows])
    edges = np.linspace(0.0, 1.0, args.bins + 1)
    pdf_before, _ = np.histogram(before, bins=edges, density=True)
    pdf_after, _ = np.histogram(after, bins=edges, density=True)
    pdf_csv = report.with_name(f"{report.stem}_pdf.csv")
    _write_rows(
        pdf_csv,
        ["bin_lo", "bin_hi", "pdf_before", "pdf_after"],
        list(zip(edges[:-1], edges[1:], pdf_before, pdf_after)),
    )

    transmissivities = [s.transmissivity_T for s in samples]
    v_mod = args.v_mod or config.keyrate.v_mod
    # floor keeps the detector noise of a fully mismatched sample finite
    floor = 1e-12
    stats_before = channel_stats(np.maximum(before, floor), transmissivities, config.detector)
    stats_after = channel_stats(np.maximum(after, floor), transmissivities, config.detector)
    summary = {
        "samples": len(rows),
        "mean_gamma_before": float(before.mean()),
        "mean_gamma_after": float(after.mean()),
        "mean_gamma_oracle": float(oracle.mean()),
        "mean_T": stats_before.mean_T,
        "v_mod": v_mod,
        "before": _key_rates(stats_before, config.detector, v_mod),
        "after": _key_rates(stats_after, config.detector, v_mod),
        "report": str(report),
        "pdf_csv": str(pdf_csv),
    }
    summary_path = report.with_name(f"{report.stem}_summary.json")
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info(
        f"Evaluated {len(rows)} samples: mean gamma {summary['mean_gamma_before']:.4f} -> "
        f"{summary['mean_gamma_after']:.4f} (oracle {summary['mean_gamma_oracle']:.4f})"
    )
    _emit(summary)
    return 0


def cmd_keyrate(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    overrides = {
        key: value
        for key, value in (
            ("eta_det", args.eta_det),
            ("xi_el", args.xi_el),
            ("beta_reconciliation", args.beta),
            ("xi_ch", args.xi_ch),
            ("trusted", args.trusted),
        )
        if value is not None
    }
    detector = DetectorParams.model_validate({**config.detector.model_dump(), **overrides})
    try:
        stats = ChannelStats(
            mean_T=args.mean_t if args.mean_t is not None else config.keyrate.mean_T,
            mean_sqrtT=args.mean_sqrt_t if args.mean_sqrt_t is not None else config.keyrate.mean_sqrtT,
            mean_xi_det=args.mean_xi_det if args.mean_xi_det is not None else config.keyrate.mean_xi_det,
            gamma=args.gamma,
        )
    except ValidationError as e:
        raise DomainError(f"invalid channel statistics: {e}")
    keyrate = config.keyrate
    scan = scan_vmod(
        stats,
        detector,
        args.vmod_min if args.vmod_min is not None else keyrate.v_min,
        args.vmod_max if args.vmod_max is not None else keyrate.v_max,
        args.steps or keyrate.steps,
    )
    out = Path(args.out or Path(config.paths.runs_dir) / "keyrate.csv")
    write_scan_csv(scan, out)
    _emit(
        {
            "out": str(out),
            "trusted": scan.trusted,
            "gamma": stats.gamma,
            "v_best": scan.v_best,
            "r_best": scan.r_best,
        }
    )
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    out = plot_csv(args.input, args.output, args.kind)
    _emit({"out": str(out), "kind": args.kind})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlo-phasenet", description="Intensity-only RLO phase correction toolkit"
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="Run a propagation campaign and write a dataset.")
    s.add_argument("--config", type=str, default=None, help="RunConfig or ChannelConfig JSON")
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--layers", type=int, default=None, help="Phase screens (0 = vacuum channel)")
    s.add_argument("--out", type=str, default=None)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--shot-noise", action="store_true")
    s.add_argument(
        "--cn2-ground", type=float, action="append", default=None,
        help="Ground-level Cn2 of one channel in a mixed campaign (repeatable)",
    )
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="Train the phase-correction network.")
    t.add_argument("--config", type=str, default=None)
    t.add_argument("--data", type=str, default=None)
    t.add_argument("--out", type=str, default=None, help="Checkpoint path")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--preset", choices=sorted(PRESET_WIDTHS), default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="Coherent efficiency before/after correction on the test split.")
    e.add_argument("--config", type=str, default=None)
    e.add_argument("--data", type=str, default=None)
    e.add_argument("--checkpoint", type=str, default=None)
    e.add_argument("--report", type=str, default=None)
    e.add_argument("--bins", type=int, default=50)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--v-mod", type=float, default=None)
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("keyrate", help="Scan the secret key rate over V_mod.")
    k.add_argument("--config", type=str, default=None)
    k.add_argument("--gamma", type=float, required=True)
    k.add_argument("--mean-t", type=float, default=None, help="Ensemble <T> (default: keyrate.mean_T)")
    k.add_argument("--mean-sqrt-t", type=float, default=None)
    k.add_argument("--mean-xi-det", type=float, default=None)
    trust = k.add_mutually_exclusive_group()
    trust.add_argument("--trusted", dest="trusted", action="store_const", const=True, default=None)
    trust.add_argument("--untrusted", dest="trusted", action="store_const", const=False)
    k.add_argument("--eta-det", type=float, default=None)
    k.add_argument("--xi-el", type=float, default=None)
    k.add_argument("--beta", type=float, default=None)
    k.add_argument("--xi-ch", type=float, default=None)
    k.add_argument("--vmod-min", type=float, default=None)
    k.add_argument("--vmod-max", type=float, default=None)
    k.add_argument("--steps", type=int, default=None)
    k.add_argument("--out", type=str, default=None)
    k.set_defaults(func=cmd_keyrate)

    p = sub.add_parser("plot", help="Render a CSV artifact as SVG.")
    p.add_argument("--input", type=str, required=True)
    p.add_argument("--output", type=str, required=True)
    p.add_argument("--kind", type=str, required=True, help="keyrate | gamma_pdf | loss")
    p.set_defaults(func=cmd_plot)

    st = sub.add_parser("stratify", help="Print the screen plan and scintillation diagnostics.")
    st.add_argument("--config", type=str, default=None)
    st.add_argument("--layers", type=int, default=None)
    st.add_argument("--ceiling", type=float, default=20_000.0)
    st.set_defaults(func=cmd_stratify)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("RLO_PHASENET_LOG_LEVEL", "INFO").upper(),
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PhaseNetError as e:
        logger.error(f"{args.cmd} failed: {e.detail}", exc_info=True)
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.cmd}: invalid configuration: {e}", exc_info=True)
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        logger.error(f"{args.cmd}: I/O failure: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        logger.error(f"{args.cmd}: unexpected error: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
