"""
Evaluation harness: paired and unpaired generation, single-attribute sweeps,
the face-conditioning paired difference and the ablation table.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .config_manager import ExperimentConfig, SamplingConfig
from .denoiser_net import DenoiserCheckpoint
from .diffusion_core import NoiseSchedule
from .image_utils import save_grid, to_numpy
from .latent_codec import LatentCodec
from .metrics_eval import (AdherenceReport, aggregate_adherence, attribute_adherence, clo_ssim,
                           face_rf_perceptual, rf_perceptual)
from .ms_acm import FACE_FIELDS, FACE_VOCAB, AttributeRecord, prompts_for
from .outpaint_stage import (ADAPTER, FUSED, GenerationRequest, OutpaintCheckpoint, OutpaintOptions,
                             generate_showcase, train_outpainter)
from .synth_data import SampleRecord, generate_sample, sample_seeds

logger = logging.getLogger(__name__)

ABLATIONS = ("no-pose", "no-coarse", "no-fine", "adapter")
FULL = "full"


def held_out_records(n: int, seed: int) -> List[SampleRecord]:
    """Fresh corpus samples from a seed stream disjoint from training (caller picks the seed)."""
    return [generate_sample(s, sample_id=f"eval{i:05d}") for i, s in enumerate(sample_seeds(n, seed))]


def _requested(record: SampleRecord, face_record: SampleRecord) -> AttributeRecord:
    """Scene attributes of `record` with the face attributes of `face_record`."""
    return record.attrs.with_overrides(**{k: getattr(face_record.attrs, k) for k in FACE_FIELDS})


def build_request(record: SampleRecord, sampling: SamplingConfig, seed: int,
                  face_record: Optional[SampleRecord] = None, with_face: bool = True,
                  with_pose: bool = True) -> GenerationRequest:
    """
    Generation request for one record.

    Args:
        record: source of the garment, mask and pose
        face_record: source of the face and its attributes (defaults to `record`;
            unpaired evaluation passes a different sample)
        with_face: include the face image as a condition
        with_pose: when False the pose predictor supplies the pose

    Returns:
        GenerationRequest
    """
    face_record = face_record or record
    return GenerationRequest(
        garment=record.garment,
        mask=record.mask,
        prompts=prompts_for(_requested(record, face_record)),
        pose=record.pose if with_pose else None,
        face=face_record.face if with_face else None,
        seed=seed,
        n_steps=sampling.n_steps,
        cfg_scale=sampling.cfg_scale,
        blend=sampling.blend,
        eta=sampling.eta,
    )


@dataclass
class SampleScore:
    sample_id: str
    clo_ssim: float
    face_distance: float
    image_distance: Optional[float]
    adherence: Dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalSummary:
    setting: str
    scores: List[SampleScore] = field(default_factory=list)
    adherence: Dict[str, float] = field(default_factory=dict)

    def means(self) -> Dict[str, float]:
        out = {
            "clo_ssim": float(np.mean([s.clo_ssim for s in self.scores])),
            "face_rf_perceptual": float(np.mean([s.face_distance for s in self.scores])),
            "attribute_accuracy": self.adherence.get("overall", 0.0),
        }
        image = [s.image_distance for s in self.scores if s.image_distance is not None]
        if image:
            out["rf_perceptual"] = float(np.mean(image))
        return out

    def to_dict(self) -> dict:
        return {"setting": self.setting, "n": len(self.scores), "means": self.means(),
                "adherence": self.adherence, "samples": [s.to_dict() for s in self.scores]}


def _score(record: SampleRecord, face_record: SampleRecord, generated: np.ndarray,
           paired: bool) -> Tuple[SampleScore, AdherenceReport]:
    report = attribute_adherence(generated, record.face_bbox, _requested(record, face_record))
    score = SampleScore(
        sample_id=record.sample_id,
        clo_ssim=clo_ssim(generated, record.garment, record.mask),
        face_distance=face_rf_perceptual(generated, face_record.face, record.face_bbox),
        image_distance=rf_perceptual(generated, record.image) if paired else None,
        adherence=report.to_dict(),
    )
    return score, report


def evaluate(ckpt: OutpaintCheckpoint, codec: LatentCodec, sched: NoiseSchedule,
             records: Sequence[SampleRecord], sampling: SamplingConfig, unpaired: bool = False,
             pose_ckpt: Optional[DenoiserCheckpoint] = None,
             grid_path: Optional[Union[str, Path]] = None, grid_rows: int = 8) -> EvalSummary:
    """
    Generate for every record in the paired (or unpaired) setting and collect the metrics.

    Unpaired runs give garment i the face and face attributes of sample i+1.
    With `pose_ckpt` the pose is sampled from the predictor.
    """
    setting = "unpaired" if unpaired else "paired"
    summary = EvalSummary(setting)
    reports, tiles = [], []
    n = len(records)
    for i, record in enumerate(tqdm(records, desc=f"  {setting:>8}", ncols=80)):
        face_record = records[(i + 1) % n] if unpaired else record
        req = build_request(record, sampling, sampling.seed + i, face_record, with_pose=pose_ckpt is None)
        generated = to_numpy(generate_showcase(req, ckpt, codec, sched, pose_ckpt))
        score, report = _score(record, face_record, generated, paired=not unpaired)
        summary.scores.append(score)
        reports.append(report)
        if grid_path is not None and i < grid_rows:
            tiles += [record.garment, face_record.face, generated, record.image]
    summary.adherence = aggregate_adherence(reports)
    logger.info(f"{setting}: {summary.means()}")
    if grid_path is not None and tiles:
        save_grid(tiles, grid_path, ncols=4)
    return summary


def attribute_sweep(ckpt: OutpaintCheckpoint, codec: LatentCodec, sched: NoiseSchedule,
                    sampling: SamplingConfig, n_requests: int, seed: int,
                    fields: Sequence[str] = FACE_FIELDS) -> Dict[str, Dict[str, float]]:
    """
    Adherence to requests that vary a single face attribute.

    Each attribute gets n_requests requests cycling through its vocabulary. No
    face image is given, so the prompt is the only face signal; blending keeps
    the garment region fixed.
    """
    results: Dict[str, Dict[str, float]] = {}
    seeds = sample_seeds(n_requests, seed)
    for name in fields:
        values = FACE_VOCAB[name]
        reports = []
        for k in tqdm(range(n_requests), desc=f"{name[:9]:>9}", ncols=80):
            record = generate_sample(seeds[k], overrides={name: values[k % len(values)]})
            req = build_request(record, sampling, sampling.seed + k, with_face=False)
            generated = to_numpy(generate_showcase(req, ckpt, codec, sched))
            reports.append(attribute_adherence(generated, record.face_bbox, record.attrs))
        agg = aggregate_adherence(reports, [name])
        results[name] = {"accuracy": agg[name], "unreadable": agg["unreadable"], "n": n_requests}
        logger.info(f"sweep {name}: accuracy {agg[name]:.2f} over {n_requests} requests")
    return results


@dataclass
class FaceEffectReport:
    with_face: List[float]
    without_face: List[float]

    @property
    def mean_difference(self) -> float:
        return float(np.mean(np.subtract(self.with_face, self.without_face)))

    def to_dict(self) -> dict:
        return {**asdict(self), "mean_difference": self.mean_difference}


def face_conditioning_effect(ckpt: OutpaintCheckpoint, codec: LatentCodec, sched: NoiseSchedule,
                             records: Sequence[SampleRecord], sampling: SamplingConfig) -> FaceEffectReport:
    """Face-region distance to the reference face with and without the face condition (same seed)."""
    with_face, without_face = [], []
    for i, record in enumerate(tqdm(records, desc="     Face", ncols=80)):
        for use_face, out in ((True, with_face), (False, without_face)):
            req = build_request(record, sampling, sampling.seed + i, with_face=use_face)
            generated = to_numpy(generate_showcase(req, ckpt, codec, sched))
            out.append(face_rf_perceptual(generated, record.face, record.face_bbox))
    report = FaceEffectReport(with_face, without_face)
    logger.info(f"face conditioning: paired difference {report.mean_difference:+.5f}")
    return report


# ---------------------------------------------------------------- ablations

def ablation_variant(name: str, options: OutpaintOptions, kind: str = FUSED):
    """(options, kind) for an ablation name; 'full' returns the inputs unchanged."""
    if name == FULL:
        return options, kind
    if name == "no-pose":
        return replace(options, use_pose=False), FUSED
    if name == "no-coarse":
        return replace(options, use_coarse=False), FUSED
    if name == "no-fine":
        return replace(options, use_fine=False), FUSED
    if name == "adapter":
        return options, ADAPTER
    raise ValueError(f"unknown ablation '{name}' (choose from {', '.join(ABLATIONS)})")


TrainFn = Callable[[OutpaintOptions, str], OutpaintCheckpoint]


def ablation_table(variants: Sequence[str], train_fn: TrainFn, base_options: OutpaintOptions,
                   codec: LatentCodec, sched: NoiseSchedule, records: Sequence[SampleRecord],
                   sampling: SamplingConfig) -> List[Dict]:
    """
    Ablation table; the first row is always the full model.

    Args:
        variants: subset of ABLATIONS
        train_fn: (options, kind) -> trained OutpaintCheckpoint
        records: evaluation records

    Returns:
        One dict per row (variant, clo_ssim, face_rf_perceptual, rf_perceptual, attribute_accuracy)
    """
    rows = []
    for name in (FULL, *variants):
        options, kind = ablation_variant(name, base_options)
        logger.info(f"ablation '{name}': training {kind} model")
        ckpt = train_fn(options, kind)
        summary = evaluate(ckpt, codec, sched, records, sampling)
        rows.append({"variant": name, **summary.means()})
    return rows


def train_for_ablation(config: ExperimentConfig, dataset: Sequence[SampleRecord], codec: LatentCodec,
                       sched: NoiseSchedule) -> TrainFn:
    train_config = replace(config.outpaint_training, steps=config.evaluation.ablation_steps)

    def train(options: OutpaintOptions, kind: str) -> OutpaintCheckpoint:
        return train_outpainter(dataset, config.outpaint_model, sched, train_config, codec, options, kind,
                                config.text_encoder, config.adapter)
    return train


def full_is_best(rows: Sequence[Dict]) -> bool:
    """Full model no worse than every ablation on attribute accuracy and both distances."""
    full = next(r for r in rows if r["variant"] == FULL)
    for row in rows:
        if row["variant"] == FULL:
            continue
        if row["attribute_accuracy"] > full["attribute_accuracy"]:
            return False
        if row["face_rf_perceptual"] < full["face_rf_perceptual"]:
            return False
        if row.get("rf_perceptual", np.inf) < full.get("rf_perceptual", np.inf):
            return False
    return True


def format_table(rows: Sequence[Dict]) -> str:
    columns = ["variant", "attribute_accuracy", "face_rf_perceptual", "rf_perceptual", "clo_ssim"]
    lines = [" | ".join(f"{c:>18}" for c in columns)]
    for row in rows:
        cells = [f"{row['variant']:>18}"]
        cells += [f"{row.get(c, float('nan')):>18.4f}" for c in columns[1:]]
        lines.append(" | ".join(cells))
    return "\n".join(lines)
