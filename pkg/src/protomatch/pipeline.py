"""End-to-end runs: bank building, inference, evaluation, sweeps, rendering.

Every image is processed independently, so runs parallelize over a worker
pool; all file writes and count aggregation happen afterwards in manifest
order, which makes outputs byte-identical regardless of worker count.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import metrics
from .bank import DEFAULT_PROTOTYPES_PER_CLASS, PrototypeBank, build_bank, load_bank
from .detect import DEFAULT_INCS_THRESHOLD, OODDecision, incs_map, threshold_ood
from .errors import (
    ConfigError,
    DimMismatchError,
    EmptyProposalMaskError,
    MissingInferenceError,
    ShapeMismatchError,
    ToolkitError,
)
from .extract import Backend, FeatureMap, features_for_record, parse_backend
from .matching import classify_pixels, cosine_heatmaps, upsample
from .refine import DEFAULT_DETECTOR_THRESHOLD, Proposal, filter_proposals, refine_ood
from .tensor_io import (
    IGNORE_ID,
    DatasetManifest,
    ImageRecord,
    load_image,
    load_manifest,
    read_mask,
    write_feature_map,
    write_image,
    write_label_map,
    write_mask,
)

logger = logging.getLogger(__name__)

PIXEL_MODE = "pixel"
MASKED_MODE = "masked"
SCOPE_PER_IMAGE = "per-image"
SCOPE_PER_DATASET = "per-dataset"


@dataclass
class RunConfig:
    """Resolved settings of one run; echoed verbatim into every report."""

    manifest: Path
    bank: Path | None = None
    backend: str = "file"
    mode: str = PIXEL_MODE
    incs_threshold: float = DEFAULT_INCS_THRESHOLD
    detector_threshold: float = DEFAULT_DETECTOR_THRESHOLD
    norm_scope: str = SCOPE_PER_IMAGE
    out: Path | None = None
    jobs: int = 1
    prototypes_per_class: int = DEFAULT_PROTOTYPES_PER_CLASS

    def validate(self) -> None:
        if self.mode not in (PIXEL_MODE, MASKED_MODE):
            raise ConfigError(f"mode must be {PIXEL_MODE!r} or {MASKED_MODE!r}, got {self.mode!r}")
        if self.norm_scope not in (SCOPE_PER_IMAGE, SCOPE_PER_DATASET):
            raise ConfigError(f"norm-scope must be per-image or per-dataset, got {self.norm_scope!r}")
        for name in ("incs_threshold", "detector_threshold"):
            value = getattr(self, name)
            if not 0.0 <= float(value) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.prototypes_per_class < 1:
            raise ConfigError(f"prototypes_per_class must be >= 1, got {self.prototypes_per_class}")

    def to_dict(self) -> dict:
        return {
            "manifest": str(self.manifest),
            "bank": None if self.bank is None else str(self.bank),
            "backend": self.backend,
            "mode": self.mode,
            "incs_threshold": float(self.incs_threshold),
            "detector_threshold": float(self.detector_threshold),
            "norm_scope": self.norm_scope,
            "out": None if self.out is None else str(self.out),
            "jobs": int(self.jobs),
            "prototypes_per_class": int(self.prototypes_per_class),
        }


@dataclass(eq=False)
class ImageAnalysis:
    record: ImageRecord
    labels: np.ndarray
    scores: np.ndarray
    extractor_id: str
    proposals: list[Proposal] = field(default_factory=list)
    gt: np.ndarray | None = None


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        width, height = img.size
    return height, width


def analyze_record(
    manifest: DatasetManifest,
    backend: Backend,
    bank: PrototypeBank,
    record: ImageRecord,
    *,
    load_proposals: bool = False,
    load_gt: bool = False,
) -> ImageAnalysis:
    """Match one image against the bank and collect its ancillary masks."""
    try:
        fmap = features_for_record(backend, record, manifest)
        if fmap.dim != bank.dim:
            raise DimMismatchError(f"features dim {fmap.dim} != bank dim {bank.dim}")
        height, width = _image_size(manifest.resolve(record.image_path))
        stack = upsample(cosine_heatmaps(fmap, bank), height, width)
        labels, scores = classify_pixels(stack)

        proposals: list[Proposal] = []
        if load_proposals:
            for ref in record.proposals or []:
                mask = read_mask(manifest.resolve(ref.mask_path))
                if mask.shape != (height, width):
                    raise ShapeMismatchError(
                        f"proposal {ref.mask_path} is {mask.shape}, image is {(height, width)}"
                    )
                if not mask.any():
                    raise EmptyProposalMaskError(f"proposal {ref.mask_path} has no foreground")
                proposals.append(Proposal(mask=mask, score=ref.score, source_id=ref.mask_path))

        gt = None
        if load_gt and record.ood_gt_path:
            gt = read_mask(manifest.resolve(record.ood_gt_path))
            if gt.shape != (height, width):
                raise ShapeMismatchError(
                    f"ground truth {record.ood_gt_path} is {gt.shape}, image is {(height, width)}"
                )
    except ToolkitError as exc:
        raise type(exc)(f"image {record.id!r}: {exc}") from exc
    return ImageAnalysis(
        record=record,
        labels=labels,
        scores=scores,
        extractor_id=fmap.extractor_id,
        proposals=proposals,
        gt=gt,
    )


def _map_records(records, fn, jobs: int):
    """Apply ``fn`` per record, catching toolkit errors as per-image failures."""
    results: dict[str, ImageAnalysis] = {}
    failures: dict[str, ToolkitError] = {}
    if jobs <= 1:
        for record in records:
            try:
                results[record.id] = fn(record)
            except ToolkitError as exc:
                failures[record.id] = exc
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {record.id: pool.submit(fn, record) for record in records}
            for record_id, future in futures.items():
                try:
                    results[record_id] = future.result()
                except ToolkitError as exc:
                    failures[record_id] = exc
    for record_id, exc in failures.items():
        logger.warning("image %s failed: %s", record_id, exc)
    return results, failures


def _incs_maps(analyses: dict[str, ImageAnalysis], norm_scope: str) -> dict[str, np.ndarray]:
    value_range = None
    if norm_scope == SCOPE_PER_DATASET and analyses:
        value_range = (
            min(float(a.scores.min()) for a in analyses.values()),
            max(float(a.scores.max()) for a in analyses.values()),
        )
    return {image_id: incs_map(a.scores, value_range) for image_id, a in analyses.items()}


def _load_run_inputs(config: RunConfig) -> tuple[DatasetManifest, PrototypeBank, Backend]:
    config.validate()
    if config.bank is None:
        raise ConfigError("this command needs --bank")
    manifest = load_manifest(config.manifest)
    bank = load_bank(config.bank)
    backend = parse_backend(config.backend)
    return manifest, bank, backend


# ---------------------------------------------------------------------------
# bank commands
# ---------------------------------------------------------------------------

def run_bank_build(config: RunConfig) -> PrototypeBank:
    config.validate()
    manifest = load_manifest(config.manifest)
    backend = parse_backend(config.backend)
    return build_bank(manifest, backend, per_class_limit=config.prototypes_per_class)


def bank_summary(bank: PrototypeBank) -> str:
    lines = [f"dim {bank.dim}, {len(bank.classes)} classes"]
    for cls in bank.classes:
        sources = ", ".join(f"{image_id}[{index}]" for image_id, index in cls.provenance)
        lines.append(f"  {cls.name}: {cls.count} prototypes ({sources})")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def run_infer(config: RunConfig, image_ids: list[str] | None = None) -> int:
    """Write per-image outputs; returns the number of failed images."""
    manifest, bank, backend = _load_run_inputs(config)
    if config.out is None:
        raise ConfigError("infer needs --out")
    if len(bank.classes) > IGNORE_ID:
        raise ConfigError(f"label map output supports at most {IGNORE_ID} classes")
    records = manifest.images if not image_ids else [manifest.record(i) for i in image_ids]
    masked = config.mode == MASKED_MODE

    analyses, failures = _map_records(
        records,
        lambda rec: analyze_record(
            manifest, backend, bank, rec, load_proposals=masked
        ),
        config.jobs,
    )
    incs = _incs_maps(analyses, config.norm_scope)

    for record in records:
        analysis = analyses.get(record.id)
        if analysis is None:
            continue
        try:
            _write_image_outputs(config, record, analysis, incs[record.id])
        except ToolkitError as exc:
            failures[record.id] = exc
            logger.warning("image %s failed: %s", record.id, exc)
    return len(failures)


def _write_image_outputs(
    config: RunConfig, record: ImageRecord, analysis: ImageAnalysis, incs: np.ndarray
) -> None:
    decision = threshold_ood(incs, analysis.labels, config.incs_threshold)
    out_dir = Path(config.out) / record.id
    out_dir.mkdir(parents=True, exist_ok=True)
    write_feature_map(
        FeatureMap(
            values=incs[None, :, :].astype(np.float32),
            patch_size=1,
            extractor_id=analysis.extractor_id,
            image_id=record.id,
        ),
        out_dir / "incs.pft",
    )
    write_mask(decision.ood, out_dir / "ood.png")
    labels_out = analysis.labels.astype(np.int64).copy()
    labels_out[decision.ood] = IGNORE_ID
    write_label_map(labels_out, out_dir / "labels.png")
    if config.mode == MASKED_MODE:
        if not analysis.proposals:
            logger.warning("image %s has no proposals; refined mask is empty", record.id)
        refined = refine_ood(decision, analysis.proposals, config.detector_threshold)
        write_mask(refined.ood, out_dir / "refined.png")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EvalReport:
    mode: str
    aupr: float
    fpr_at_95tpr: float
    fpr_used_fallback: bool
    achieved_tpr: float
    iou: float
    f1: float
    config: dict
    per_image: list[dict]

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "aupr": self.aupr,
            "fpr_at_95tpr": self.fpr_at_95tpr,
            "fpr_used_fallback": self.fpr_used_fallback,
            "achieved_tpr": self.achieved_tpr,
            "iou": self.iou,
            "f1": self.f1,
            "config": self.config,
            "conventions": {
                "prediction_rule": "score > threshold",
                "ap_integration": "step",
                "pooling": "micro",
            },
            "per_image": self.per_image,
        }


def _fixed_threshold_prediction(
    config: RunConfig, analysis: ImageAnalysis, incs: np.ndarray
) -> np.ndarray:
    decision = threshold_ood(incs, analysis.labels, config.incs_threshold)
    if config.mode == MASKED_MODE:
        return refine_ood(decision, analysis.proposals, config.detector_threshold).ood
    return decision.ood


def _masked_curve(
    ordered: list[ImageAnalysis],
    incs: dict[str, np.ndarray],
    thresholds: np.ndarray,
    detector_threshold: float,
) -> metrics.ThresholdCurve:
    """Pooled counts of the refined map across thresholds.

    Equivalent to re-running refinement at every threshold: a proposal of n
    pixels is voted OOD at threshold t exactly when its (n//2 + 1)-th
    largest score is above t, so the refined map only changes at those flip
    scores and can be accumulated incrementally while t descends.
    """
    order = np.argsort(-thresholds, kind="stable")
    descending = thresholds[order]
    tp = np.zeros(len(descending), dtype=np.int64)
    fp = np.zeros(len(descending), dtype=np.int64)
    positives = 0
    negatives = 0
    for analysis in ordered:
        gt = analysis.gt
        w = incs[analysis.record.id]
        positives += int(gt.sum())
        negatives += int(gt.size - gt.sum())
        kept = filter_proposals(analysis.proposals, detector_threshold)
        flips = []
        for proposal in kept:
            inside = w[proposal.mask]
            need = inside.size // 2 + 1  # strict majority
            flips.append(float(np.partition(inside, inside.size - need)[inside.size - need]))
        by_flip = sorted(zip(flips, range(len(kept))), key=lambda item: -item[0])
        union = np.zeros_like(gt, dtype=bool)
        tp_run = 0
        fp_run = 0
        next_mask = 0
        for i, t in enumerate(descending):
            while next_mask < len(by_flip) and by_flip[next_mask][0] > t:
                mask = kept[by_flip[next_mask][1]].mask
                fresh = mask & ~union
                tp_run += int((fresh & gt).sum())
                fp_run += int((fresh & ~gt).sum())
                union |= mask
                next_mask += 1
            tp[i] += tp_run
            fp[i] += fp_run
    return metrics.ThresholdCurve(
        thresholds=descending, tp=tp, fp=fp, fn=positives - tp, tn=negatives - fp
    )


def run_eval(config: RunConfig) -> tuple[EvalReport, int]:
    """Evaluate all images that declare OOD ground truth; returns (report, failures)."""
    manifest, bank, backend = _load_run_inputs(config)
    records = [r for r in manifest.images if r.ood_gt_path]
    if not records:
        raise ConfigError("no image in the manifest declares ood_gt_path")
    masked = config.mode == MASKED_MODE
    if masked:
        missing = [r.id for r in records if r.proposals is None]
        if missing:
            raise ConfigError(
                "masked mode requires a proposals list for every evaluated image; "
                f"missing on: {', '.join(missing)}"
            )

    analyses, failures = _map_records(
        records,
        lambda rec: analyze_record(
            manifest, backend, bank, rec, load_proposals=masked, load_gt=True
        ),
        config.jobs,
    )
    ordered = [analyses[r.id] for r in records if r.id in analyses]
    if not ordered:
        raise ConfigError("every evaluated image failed; nothing to report")
    incs = _incs_maps(analyses, config.norm_scope)

    grid = metrics.default_threshold_grid([incs[a.record.id] for a in ordered])
    if masked:
        curve = _masked_curve(ordered, incs, grid, config.detector_threshold)
    else:
        curve = metrics.pr_curve(
            [incs[a.record.id] for a in ordered], [a.gt for a in ordered], thresholds=grid
        )
    area = metrics.aupr(curve)
    fpr = metrics.fpr_at_tpr(curve, target=0.95)

    pooled = metrics.ConfusionCounts(0, 0, 0, 0)
    per_image = []
    for analysis in ordered:
        pred = _fixed_threshold_prediction(config, analysis, incs[analysis.record.id])
        counts = metrics.confusion_counts(pred, analysis.gt)
        pooled = pooled + counts
        image_iou, image_f1 = metrics.iou_f1_from_counts(counts)
        per_image.append(
            {
                "id": analysis.record.id,
                "iou": image_iou,
                "f1": image_f1,
                "tp": counts.tp,
                "fp": counts.fp,
                "fn": counts.fn,
                "tn": counts.tn,
            }
        )
    iou, dice = metrics.iou_f1_from_counts(pooled)

    report = EvalReport(
        mode=config.mode,
        aupr=float(area),
        fpr_at_95tpr=float(fpr.fpr),
        fpr_used_fallback=fpr.used_fallback,
        achieved_tpr=float(fpr.achieved_tpr),
        iou=float(iou),
        f1=float(dice),
        config=config.to_dict(),
        per_image=per_image,
    )
    if config.out is not None:
        out_dir = Path(config.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
        write_curve_csv(curve, out_dir / "curves.csv")
    return report, len(failures)


def write_curve_csv(curve: metrics.ThresholdCurve, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tp", "fp", "fn", "tn", "precision", "recall", "fpr"])
        for row in metrics.curve_rows(curve):
            writer.writerow(["" if v is None else v for v in row])


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("incs", "detector", "prototypes")


def run_sweep(config: RunConfig, axis: str, grid: list[float]) -> tuple[list[tuple], int]:
    """One evaluation row per grid value along the chosen hyperparameter axis."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not grid:
        raise ConfigError("sweep grid is empty")
    if axis == "detector" and config.mode != MASKED_MODE:
        raise ConfigError("detector sweeps only apply to masked mode")

    rows: list[tuple] = []
    total_failures = 0
    if axis == "prototypes":
        for value in grid:
            limit = int(value)
            if limit != value or limit < 1:
                raise ConfigError(f"prototype counts must be positive integers, got {value}")
            sub = replace(config, prototypes_per_class=limit, out=None)
            bank = run_bank_build(sub)
            report, failures = _eval_with_bank(sub, bank)
            total_failures += failures
            rows.append((limit, report.iou, report.f1, report.aupr, report.fpr_at_95tpr))
    else:
        key = "incs_threshold" if axis == "incs" else "detector_threshold"
        for value in grid:
            sub = replace(config, out=None, **{key: float(value)})
            report, failures = run_eval(sub)
            total_failures += failures
            rows.append((float(value), report.iou, report.f1, report.aupr, report.fpr_at_95tpr))

    if config.out is not None:
        out_dir = Path(config.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "sweep.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "iou", "f1", "aupr", "fpr_at_95tpr"])
            writer.writerows(rows)
    return rows, total_failures


def _eval_with_bank(config: RunConfig, bank: PrototypeBank) -> tuple[EvalReport, int]:
    """run_eval against a freshly built bank (prototype-count sweeps)."""
    import tempfile

    from .bank import save_bank

    with tempfile.TemporaryDirectory() as tmp:
        bank_path = Path(tmp) / "bank.pbk"
        save_bank(bank, bank_path)
        return run_eval(replace(config, bank=bank_path, out=None))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def run_render(config: RunConfig, image_id: str) -> Path:
    """Blend the OOD mask over the input image in red (0.5 alpha, integer floor)."""
    config.validate()
    if config.out is None:
        raise ConfigError("render needs --out pointing at the inference output directory")
    manifest = load_manifest(config.manifest)
    record = manifest.record(image_id)
    mask_name = "refined.png" if config.mode == MASKED_MODE else "ood.png"
    mask_path = Path(config.out) / image_id / mask_name
    if not mask_path.is_file():
        raise MissingInferenceError(f"no inference output {mask_path}; run infer first")
    mask = read_mask(mask_path)
    image = load_image(manifest.resolve(record.image_path))
    if mask.shape != image.shape[:2]:
        raise ShapeMismatchError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    blended = image.copy()
    red = np.array([255, 0, 0], dtype=np.uint16)
    blended[mask] = ((image[mask].astype(np.uint16) + red) // 2).astype(np.uint8)
    out_path = Path(config.out) / image_id / "overlay.png"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_image(blended, out_path)
    return out_path
