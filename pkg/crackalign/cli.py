from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .config import Settings, get_settings
from .crackmetrics import compute_metrics, metric_errors, segment_crack
from .errors import ConfigError, CrackAlignError, RansacFailure
from .imgio import load_image, save_image
from .metrics import StageTimer
from .models import RansacConfig
from .pipeline import (
    KEYPOINT_FIELDS,
    align,
    bench,
    extract_features,
    keypoint_rows,
    match_features,
    summarize,
    write_bench,
    write_csv,
    write_timings,
)
from .synthetic import default_grid, parse_grid, scenario_cells

logger = logging.getLogger("crackalign.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_ALIGN_FAILED = 2

console = Console()
err_console = Console(stderr=True)


def setup_logging(level: str):
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, rich_tracebacks=False, show_path=False)],
        force=True,
    )


def _add_detector(parser: argparse.ArgumentParser):
    parser.add_argument("--detector", default="nonlinear", help="nonlinear | dog | fast")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crackalign", description="裂缝图像透视校正与几何量测")
    parser.add_argument("--log-level", default=None, help="覆盖 CRACKALIGN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p_align = sub.add_parser("align", help="对齐两张图像并输出报告")
    p_align.add_argument("ref")
    p_align.add_argument("tgt")
    _add_detector(p_align)
    p_align.add_argument("--out", default=None)
    p_align.add_argument("--seed", type=int, default=None)
    p_align.add_argument("--ransac-k", type=int, default=None)
    p_align.add_argument("--ransac-p", type=float, default=None)
    p_align.add_argument("--ransac-e0", type=float, default=None)
    p_align.add_argument("--ransac-cap", type=int, default=None)
    p_align.add_argument("--ransac-sigma0", type=float, default=None)

    p_detect = sub.add_parser("detect", help="输出关键点 CSV")
    p_detect.add_argument("img")
    _add_detector(p_detect)
    p_detect.add_argument("--out", default=None, help="CSV 路径, 默认输出到 stdout")
    p_detect.add_argument("--dump-levels", default=None, help="把每一层尺度空间写成 PNG")

    p_match = sub.add_parser("match", help="输出匹配 CSV")
    p_match.add_argument("ref")
    p_match.add_argument("tgt")
    _add_detector(p_match)
    p_match.add_argument("--out", default=None)

    p_metrics = sub.add_parser("metrics", help="分割裂缝并计算几何指标")
    p_metrics.add_argument("img")
    p_metrics.add_argument("--baseline", default=None)
    p_metrics.add_argument("--out", default=None)

    p_bench = sub.add_parser("bench", help="合成数据基准测试")
    source = p_bench.add_mutually_exclusive_group()
    source.add_argument("--synthetic", action="store_true", help="合成裂缝场景 (默认)")
    source.add_argument("--corpus", default=None, help="以目录中的 PNG/PGM 作为底图")
    p_bench.add_argument("--scenario", default=None, help="ideal | cropped | brick | shadow")
    p_bench.add_argument("--grid", action="append", default=[], help="FACTOR=LEVEL[,LEVEL], 可重复")
    p_bench.add_argument("--seeds", type=int, default=None)
    p_bench.add_argument("--jobs", type=int, default=None)
    p_bench.add_argument("--detectors", default="nonlinear,dog,fast")
    p_bench.add_argument("--size", type=int, default=None)
    p_bench.add_argument("--out", default=None)
    return parser


def _ransac_config(args: argparse.Namespace, settings: Settings) -> RansacConfig:
    try:
        return RansacConfig.from_settings(
            settings,
            k=args.ransac_k,
            p=args.ransac_p,
            e0=args.ransac_e0,
            cap=args.ransac_cap,
            sigma0=args.ransac_sigma0,
            seed=args.seed,
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid RANSAC configuration: {exc.errors()[0]['loc'][0]} {exc.errors()[0]['msg']}") from exc


def cmd_align(args: argparse.Namespace, settings: Settings) -> int:
    cfg = _ransac_config(args, settings)
    report = align(args.ref, args.tgt, args.detector, settings, cfg, args.out)
    table = Table(title=f"align ({report.detector})")
    table.add_column("item")
    table.add_column("value", justify="right")
    table.add_row("status", report.status)
    table.add_row("keypoints", f"{report.keypoints.reference} / {report.keypoints.target}")
    table.add_row("matches before RANSAC", str(report.matches_before_ransac))
    table.add_row("inliers", str(report.inliers))
    if report.errors is not None:
        table.add_row("area / length / width err %", f"{report.errors.area_err} / {report.errors.length_err} / {report.errors.width_err}")
    console.print(table)
    if report.status != "aligned":
        err_console.print(f"[red]alignment failed:[/] {report.failure_reason}")
        return EXIT_ALIGN_FAILED
    return EXIT_OK


def cmd_detect(args: argparse.Namespace, settings: Settings) -> int:
    img = load_image(args.img)
    features = extract_features(img, args.detector, settings)
    rows = keypoint_rows(features.keypoints)
    if args.out:
        write_csv(args.out, KEYPOINT_FIELDS, rows)
    else:
        console.print(",".join(KEYPOINT_FIELDS), highlight=False)
        for row in rows:
            console.print(",".join(f"{row[k]:.6f}" if isinstance(row[k], float) else str(row[k]) for k in KEYPOINT_FIELDS), highlight=False)
    if args.dump_levels:
        out = Path(args.dump_levels)
        out.mkdir(parents=True, exist_ok=True)
        for index, level in enumerate(features.levels):
            save_image(level.L, out / f"level_{index:02d}_o{level.octave}_s{level.sigma:.2f}.png")
        logger.info("dumped %s levels to %s", len(features.levels), out)
    return EXIT_OK


def cmd_match(args: argparse.Namespace, settings: Settings) -> int:
    ref = extract_features(load_image(args.ref), args.detector, settings)
    tgt = extract_features(load_image(args.tgt), args.detector, settings)
    match_set = match_features(ref, tgt, settings.match_ratio)
    rows = [
        {
            "qx": ref.keypoints[m.query].x,
            "qy": ref.keypoints[m.query].y,
            "tx": tgt.keypoints[m.train].x,
            "ty": tgt.keypoints[m.train].y,
            "distance": m.distance,
            "ratio": m.ratio,
        }
        for m in match_set.matches
    ]
    fields = ["qx", "qy", "tx", "ty", "distance", "ratio"]
    if args.out:
        write_csv(args.out, fields, rows)
    else:
        console.print(",".join(fields), highlight=False)
        for row in rows:
            console.print(",".join(f"{row[k]:.6f}" for k in fields), highlight=False)
    logger.info("matches=%s mutual=%s", len(rows), match_set.mutual)
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace, settings: Settings) -> int:
    metrics = compute_metrics(segment_crack(load_image(args.img)))
    payload = {"metrics": metrics.rounded().model_dump()}
    if args.baseline:
        baseline = compute_metrics(segment_crack(load_image(args.baseline)))
        payload["baseline"] = baseline.rounded().model_dump()
        try:
            payload["errors"] = metric_errors(metrics, baseline).rounded().model_dump()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    text = json.dumps(payload, ensure_ascii=False, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        console.print_json(text)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, settings: Settings) -> int:
    if args.scenario:
        cells = scenario_cells(args.scenario)
    elif args.grid:
        cells = parse_grid(args.grid)
    else:
        cells = default_grid()
    detectors = [d.strip() for d in args.detectors.split(",") if d.strip()]
    timer = StageTimer()
    cases = bench(
        cells,
        detectors=detectors,
        seeds=args.seeds if args.seeds is not None else settings.bench_seeds,
        settings=settings,
        jobs=args.jobs if args.jobs is not None else settings.bench_jobs,
        size=args.size,
        corpus=args.corpus,
        timer=timer,
    )
    out = Path(args.out or settings.output_dir)
    bench_csv, summary_csv = write_bench(cases, out)
    write_timings(out / "timings.json", timer)

    table = Table(title="inlier count / corner error by cell")
    for column in ("cell", "detector", "ok", "mean inliers", "median corner px", "area err %"):
        table.add_column(column, justify="right" if column not in ("cell", "detector") else "left")
    for row in summarize(cases):
        table.add_row(
            row.cell,
            row.detector,
            f"{row.successes}/{row.runs}",
            f"{row.mean_inliers:.1f}",
            "-" if row.median_corner_error is None else f"{row.median_corner_error:.3f}",
            "-" if row.mean_area_err is None else f"{row.mean_area_err:.2f}",
        )
    console.print(table)
    logger.info("wrote %s and %s", bench_csv, summary_csv)
    return EXIT_OK


COMMANDS = {
    "align": cmd_align,
    "detect": cmd_detect,
    "match": cmd_match,
    "metrics": cmd_metrics,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    setup_logging(args.log_level or settings.log_level)
    try:
        return COMMANDS[args.command](args, settings)
    except RansacFailure as exc:
        err_console.print(f"[red]alignment failed:[/] {exc}")
        return EXIT_ALIGN_FAILED
    except (CrackAlignError, OSError) as exc:
        err_console.print(f"[red]error:[/] {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
