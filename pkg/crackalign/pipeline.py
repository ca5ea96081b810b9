from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .config import Settings, get_settings
from .crackmetrics import compute_metrics, metric_errors, render_overlay, segment_crack, warp_image
from .descmatch import (
    SmoothingCache,
    binary_border_ok,
    binary_descriptor,
    float_descriptors,
    match_arrays,
    MatchSet,
)
from .detect import Keypoint, canonical_order, detect_extrema, fast_corners, fast_levels, orient
from .errors import ConfigError, InsufficientMatchesError, RansacFailure
from .homography import RansacResult, invert, max_corner_error, ransac
from .imgio import GrayImage, load_image, save_image, save_rgb
from .metrics import StageTimer
from .models import (
    DETECTOR_ALIASES,
    AlignReport,
    Artifacts,
    BenchCase,
    BenchSummaryRow,
    CrackMetrics,
    KeypointCounts,
    MetricErrors,
    PerturbSpec,
    RansacConfig,
)
from .scalespace import EvolutionLevel, ScaleSchedule, build_gaussian_pyramid, build_nonlinear_scale_space
from .synthetic import ground_truth_homography, make_pair, perturb

logger = logging.getLogger("crackalign.pipeline")

PathLike = Union[str, Path]

REPORT_NAME = "report.json"
TIMINGS_NAME = "timings.json"
CORRECTED_NAME = "corrected.png"
OVERLAY_NAME = "overlay.png"
MATCHES_NAME = "matches.csv"

KEYPOINT_FIELDS = ["x", "y", "sigma", "response", "orientation", "detector"]
MATCH_FIELDS = ["qx", "qy", "tx", "ty", "distance", "ratio", "inlier"]
BENCH_FIELDS = ["cell", "detector", "seed", "status", "inliers", "corner_error", "area_err", "length_err", "width_err"]
SUMMARY_FIELDS = [
    "cell",
    "detector",
    "runs",
    "successes",
    "mean_inliers",
    "median_corner_error",
    "mean_area_err",
    "mean_length_err",
    "mean_width_err",
]


def resolve_detector(name: str) -> str:
    try:
        return DETECTOR_ALIASES[name]
    except KeyError as exc:
        raise ConfigError(f"unknown detector {name!r}; expected one of nonlinear, dog, fast") from exc


@dataclass
class Features:
    keypoints: List[Keypoint]
    descriptors: np.ndarray
    kind: str
    levels: List[EvolutionLevel] = field(default_factory=list)

    @property
    def points(self) -> npt.NDArray[np.float64]:
        return np.array([(kp.x, kp.y) for kp in self.keypoints], dtype=np.float64).reshape(-1, 2)


def extract_features(
    img: GrayImage,
    detector: str,
    settings: Optional[Settings] = None,
    timer: Optional[StageTimer] = None,
) -> Features:
    """Scale space, keypoints with orientation, and descriptors for one image."""
    settings = settings or get_settings()
    timer = timer or StageTimer()
    detector = resolve_detector(detector)
    limit = settings.max_keypoints

    if detector == "fast":
        with timer.stage("scale_space"):
            levels = fast_levels(img, settings.fast_scales)
        with timer.stage("detect"):
            candidates = fast_corners(img, settings.fast_threshold, settings.fast_arc, levels=levels)
            kept = [kp for kp in candidates if binary_border_ok(kp, img)]
            keypoints = orient(canonical_order(kept, limit), levels)
        with timer.stage("describe"):
            cache = SmoothingCache(img)
            bits = [binary_descriptor(kp, img, cache).bits for kp in keypoints]
            descriptors = np.stack(bits) if bits else np.zeros((0, 256), dtype=bool)
        if len(candidates) > len(kept):
            logger.debug("fast: %s keypoints too close to the border", len(candidates) - len(kept))
        return Features(keypoints, descriptors, "binary", levels)

    schedule = ScaleSchedule(settings.base_sigma, settings.octaves, settings.sublevels).fit(img.width, img.height)
    with timer.stage("scale_space"):
        if detector == "nonlinear":
            space = build_nonlinear_scale_space(
                img, schedule, percentile=settings.kappa_percentile, bins=settings.kappa_bins, dt_max=settings.dt_max
            )
            threshold = settings.hessian_threshold
        else:
            space = build_gaussian_pyramid(img, schedule)
            threshold = settings.dog_contrast
    levels = space.levels
    with timer.stage("detect"):
        keypoints = orient(detect_extrema(space, threshold, limit), levels)
    with timer.stage("describe"):
        descriptors = float_descriptors(keypoints, levels)
    return Features(keypoints, descriptors, "float", levels)


def match_features(ref: Features, tgt: Features, ratio: float = 0.8) -> MatchSet:
    if not ref.keypoints or not tgt.keypoints:
        return MatchSet(matches=[], mutual=0)
    return match_arrays(ref.descriptors, tgt.descriptors, ref.kind, ratio)


@dataclass
class AlignOutcome:
    report: AlignReport
    result: Optional[RansacResult]
    match_rows: List[Dict[str, object]]
    corrected: Optional[GrayImage] = None
    overlay: Optional[npt.NDArray[np.uint8]] = None


def _safe_errors(value: CrackMetrics, baseline: CrackMetrics) -> Optional[MetricErrors]:
    try:
        return metric_errors(value, baseline).rounded()
    except ValueError:
        return None


def align_images(
    ref: GrayImage,
    tgt: GrayImage,
    detector: str = "nonlinear",
    settings: Optional[Settings] = None,
    cfg: Optional[RansacConfig] = None,
    timer: Optional[StageTimer] = None,
) -> AlignOutcome:
    """Full workflow on in-memory images; RANSAC failure is recorded in the report, not raised."""
    settings = settings or get_settings()
    cfg = cfg or RansacConfig.from_settings(settings)
    timer = timer or StageTimer()
    detector = resolve_detector(detector)

    ref_features = extract_features(ref, detector, settings, timer)
    tgt_features = extract_features(tgt, detector, settings, timer)
    logger.info(
        "[align] detect done detector=%s keypoints=%s/%s",
        detector,
        len(ref_features.keypoints),
        len(tgt_features.keypoints),
    )
    with timer.stage("match"):
        match_set = match_features(ref_features, tgt_features, settings.match_ratio)
    matches = match_set.matches
    src = ref_features.points[[m.query for m in matches]] if matches else np.zeros((0, 2))
    dst = tgt_features.points[[m.train for m in matches]] if matches else np.zeros((0, 2))

    result: Optional[RansacResult] = None
    failure: Optional[str] = None
    with timer.stage("ransac"):
        try:
            result = ransac(src, dst, cfg)
        except (InsufficientMatchesError, RansacFailure) as exc:
            failure = str(exc)
    if failure is not None:
        logger.warning("[align] alignment failed: %s", failure)

    with timer.stage("metrics"):
        base_mask = segment_crack(ref)
        baseline = compute_metrics(base_mask)
        uncorrected = compute_metrics(segment_crack(tgt))
        corrected_img = None
        overlay = None
        compared = corrected_metrics = errors = None
        if result is not None:
            corrected_img, valid = warp_image(tgt, invert(result.H), ref.width, ref.height)
            corrected_mask = segment_crack(corrected_img, valid)
            compared_raw = compute_metrics(base_mask, valid)
            corrected_raw = compute_metrics(corrected_mask, valid)
            errors = _safe_errors(corrected_raw, compared_raw)
            compared, corrected_metrics = compared_raw.rounded(), corrected_raw.rounded()
            overlay = render_overlay(base_mask & valid, corrected_mask)

    inliers = result.inliers if result is not None else np.zeros(len(matches), dtype=bool)
    match_rows = [
        {
            "qx": float(src[i, 0]),
            "qy": float(src[i, 1]),
            "tx": float(dst[i, 0]),
            "ty": float(dst[i, 1]),
            "distance": m.distance,
            "ratio": m.ratio,
            "inlier": int(bool(inliers[i])),
        }
        for i, m in enumerate(matches)
    ]
    report = AlignReport(
        detector=detector,
        seed=cfg.seed,
        status="aligned" if result is not None else "failed",
        failure_reason=failure,
        homography=[round(v, 10) for v in result.H.to_list()] if result is not None else None,
        keypoints=KeypointCounts(reference=len(ref_features.keypoints), target=len(tgt_features.keypoints)),
        mutual_matches=match_set.mutual,
        matches_before_ransac=len(matches),
        matches_after_ransac=result.inlier_count if result is not None else 0,
        inliers=result.inlier_count if result is not None else 0,
        sigma_final=round(result.sigma_final, 6) if result is not None else None,
        iterations_run=result.iterations_run if result is not None else 0,
        baseline_metrics=baseline.rounded(),
        uncorrected_metrics=uncorrected.rounded(),
        uncorrected_errors=_safe_errors(uncorrected, baseline),
        compared_baseline_metrics=compared,
        corrected_metrics=corrected_metrics,
        errors=errors,
    )
    return AlignOutcome(report=report, result=result, match_rows=match_rows, corrected=corrected_img, overlay=overlay)


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(path: PathLike, fields: Sequence[str], rows: Sequence[Dict[str, object]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(name)) for name in fields])
    return path


def keypoint_rows(keypoints: Sequence[Keypoint]) -> List[Dict[str, object]]:
    return [
        {
            "x": kp.x,
            "y": kp.y,
            "sigma": kp.sigma,
            "response": kp.response,
            "orientation": kp.orientation,
            "detector": kp.detector,
        }
        for kp in keypoints
    ]


def write_timings(path: PathLike, timer: StageTimer) -> Path:
    path = Path(path)
    payload = {"stages_ms": timer.snapshot(), "summary": timer.summary()}
    path.write_text(json.dumps(payload, ensure_ascii=False, indent=2), encoding="utf-8")
    return path


def align(
    ref_path: PathLike,
    tgt_path: PathLike,
    detector: str = "nonlinear",
    settings: Optional[Settings] = None,
    cfg: Optional[RansacConfig] = None,
    out_dir: Optional[PathLike] = None,
    timer: Optional[StageTimer] = None,
) -> AlignReport:
    """Align two image files and write report.json, timings.json, matches.csv and, on success, images."""
    settings = settings or get_settings()
    timer = timer or StageTimer()
    with timer.stage("load"):
        ref = load_image(ref_path)
        tgt = load_image(tgt_path)
    outcome = align_images(ref, tgt, detector, settings, cfg, timer)
    out = Path(out_dir or settings.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    artifacts = Artifacts(matches=MATCHES_NAME)
    write_csv(out / MATCHES_NAME, MATCH_FIELDS, outcome.match_rows)
    if outcome.corrected is not None and outcome.overlay is not None:
        save_image(outcome.corrected, out / CORRECTED_NAME)
        save_rgb(outcome.overlay, out / OVERLAY_NAME)
        artifacts = Artifacts(corrected=CORRECTED_NAME, overlay=OVERLAY_NAME, matches=MATCHES_NAME)
    report = outcome.report.model_copy(update={"artifacts": artifacts})
    (out / REPORT_NAME).write_text(report.to_json() + "\n", encoding="utf-8")
    write_timings(out / TIMINGS_NAME, timer)
    logger.info("[align] status=%s inliers=%s out=%s", report.status, report.inliers, out)
    return report


# ---------------------------------------------------------------- bench


@dataclass(frozen=True)
class BenchJob:
    cell: str
    spec: PerturbSpec
    seed: int
    base_name: Optional[str] = None
    base_path: Optional[Path] = None


def _run_job(
    job: BenchJob,
    detectors: Sequence[str],
    size: int,
    settings: Settings,
    cfg: RansacConfig,
    timer: StageTimer,
) -> List[BenchCase]:
    if job.base_path is None:
        pair = make_pair(job.spec, job.seed, size)
        ref, tgt, h_gt = pair.reference, pair.target, pair.h_gt
    else:
        ref = load_image(job.base_path)
        h_gt = ground_truth_homography(job.spec, ref.width, ref.height, job.seed)
        tgt = perturb(ref, job.spec, job.seed, h_gt)
    cell = job.cell if job.base_name is None else f"{job.base_name}:{job.cell}"
    cases = []
    for detector in detectors:
        outcome = align_images(ref, tgt, detector, settings, cfg.model_copy(update={"seed": job.seed}), timer)
        report = outcome.report
        corner = None
        if outcome.result is not None:
            corner = round(max_corner_error(outcome.result.H, h_gt, ref.width, ref.height), 4)
        cases.append(
            BenchCase(
                cell=cell,
                detector=resolve_detector(detector),
                seed=job.seed,
                spec=job.spec,
                h_gt=h_gt.to_list(),
                status=report.status,
                inliers=report.inliers,
                corner_error=corner,
                errors=report.errors,
            )
        )
    return cases


def bench(
    cells: Sequence[Tuple[str, PerturbSpec]],
    detectors: Sequence[str] = ("nonlinear", "dog", "fast"),
    seeds: Union[int, Sequence[int]] = 3,
    settings: Optional[Settings] = None,
    cfg: Optional[RansacConfig] = None,
    jobs: int = 1,
    size: Optional[int] = None,
    corpus: Optional[PathLike] = None,
    timer: Optional[StageTimer] = None,
) -> List[BenchCase]:
    """Every (base image x cell x seed) pair aligned by every detector; rows in canonical order."""
    settings = settings or get_settings()
    cfg = cfg or RansacConfig.from_settings(settings)
    timer = timer or StageTimer()
    if not cells:
        raise ConfigError("bench needs at least one grid cell")
    detectors = [resolve_detector(d) for d in detectors]
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    size = size or settings.bench_size

    bases: List[Tuple[Optional[str], Optional[Path]]] = [(None, None)]
    if corpus is not None:
        root = Path(corpus)
        files = sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".pgm"))
        if not files:
            raise ConfigError(f"no PNG/PGM images in {root}")
        bases = [(p.stem, p) for p in files]

    work = [
        BenchJob(cell=name, spec=spec, seed=seed, base_name=base_name, base_path=base_path)
        for base_name, base_path in bases
        for name, spec in cells
        for seed in seed_list
    ]
    logger.info("[bench] jobs=%s detectors=%s workers=%s", len(work), ",".join(detectors), jobs)
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        batches = list(pool.map(lambda job: _run_job(job, detectors, size, settings, cfg, timer), work))
    cases = [case for batch in batches for case in batch]
    return sorted(cases, key=lambda c: (c.cell, c.detector, c.seed))


def bench_rows(cases: Sequence[BenchCase]) -> List[Dict[str, object]]:
    return [
        {
            "cell": c.cell,
            "detector": c.detector,
            "seed": c.seed,
            "status": c.status,
            "inliers": c.inliers,
            "corner_error": c.corner_error,
            "area_err": c.errors.area_err if c.errors else None,
            "length_err": c.errors.length_err if c.errors else None,
            "width_err": c.errors.width_err if c.errors else None,
        }
        for c in cases
    ]


def _mean(values: List[float]) -> Optional[float]:
    return round(statistics.fmean(values), 4) if values else None


def summarize(cases: Sequence[BenchCase]) -> List[BenchSummaryRow]:
    """Per (cell, detector): success count, mean inliers, median corner error, mean metric errors."""
    groups: Dict[Tuple[str, str], List[BenchCase]] = {}
    for case in cases:
        groups.setdefault((case.cell, case.detector), []).append(case)
    rows = []
    for (cell, detector), members in sorted(groups.items()):
        ok = [c for c in members if c.status == "aligned"]
        corners = [c.corner_error for c in ok if c.corner_error is not None]
        errs = [c.errors for c in ok if c.errors is not None]
        rows.append(
            BenchSummaryRow(
                cell=cell,
                detector=detector,
                runs=len(members),
                successes=len(ok),
                mean_inliers=round(statistics.fmean(c.inliers for c in members), 4),
                median_corner_error=round(statistics.median(corners), 4) if corners else None,
                mean_area_err=_mean([e.area_err for e in errs]),
                mean_length_err=_mean([e.length_err for e in errs]),
                mean_width_err=_mean([e.width_err for e in errs]),
            )
        )
    return rows


def write_bench(cases: Sequence[BenchCase], out_dir: PathLike) -> Tuple[Path, Path]:
    out = Path(out_dir)
    bench_csv = write_csv(out / "bench.csv", BENCH_FIELDS, bench_rows(cases))
    summary_csv = write_csv(out / "bench_summary.csv", SUMMARY_FIELDS, [r.model_dump() for r in summarize(cases)])
    return bench_csv, summary_csv
