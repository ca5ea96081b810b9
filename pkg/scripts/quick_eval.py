from __future__ import annotations

from rich import print

from crackalign.config import get_settings
from crackalign.homography import max_corner_error
from crackalign.models import PerturbSpec, RansacConfig
from crackalign.pipeline import align_images
from crackalign.synthetic import make_pair

CASES = [
    ("ideal", PerturbSpec(tilt="mild")),
    ("low contrast", PerturbSpec(tilt="mild", contrast="low")),
    ("severe tilt", PerturbSpec(tilt="severe")),
]
DETECTORS = ("nonlinear", "dog", "fast")


def main():
    settings = get_settings()
    cfg = RansacConfig.from_settings(settings)

    for name, spec in CASES:
        pair = make_pair(spec, seed=settings.seed, size=settings.bench_size)
        print(f"\n[bold yellow]Case:[/] {name} ({spec.label()})")
        for detector in DETECTORS:
            outcome = align_images(pair.reference, pair.target, detector, settings, cfg)
            report = outcome.report
            if outcome.result is None:
                print(f"  [red]{detector}:[/] failed - {report.failure_reason}")
                continue
            corner = max_corner_error(outcome.result.H, pair.h_gt, pair.reference.width, pair.reference.height)
            print(f"  [green]{detector}:[/] inliers={report.inliers} corner_error={corner:.3f}px")
            if report.errors is not None:
                print(
                    f"    [cyan]errors %:[/] area={report.errors.area_err} "
                    f"length={report.errors.length_err} width={report.errors.width_err}"
                )


if __name__ == "__main__":
    main()
