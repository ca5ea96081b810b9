from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .config import Settings

DetectorName = Literal["nonlinear", "dog", "fast"]
DETECTORS: tuple = ("nonlinear", "dog", "fast")
DETECTOR_ALIASES: Dict[str, str] = {
    "nonlinear": "nonlinear",
    "nonlinear-hessian": "nonlinear",
    "kaze": "nonlinear",
    "dog": "dog",
    "fast": "fast",
    "fast-binary": "fast",
}

Level = Literal["none", "mild", "medium", "severe", "low", "med", "high"]


class RansacConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    k: int = Field(default=10, ge=4, description="每次迭代抽取的对应点数")
    p: float = Field(default=0.99, gt=0.0, lt=1.0, description="置信度")
    e0: float = Field(default=0.5, ge=0.0, lt=1.0, description="初始外点率")
    cap: int = Field(default=5000, ge=1, description="迭代上限")
    sigma0: float = Field(default=1.0, gt=0.0, description="初始 sigma (px)")
    seed: int = Field(default=0, ge=0, lt=2**64)

    @classmethod
    def from_settings(cls, settings: Settings, **overrides) -> "RansacConfig":
        values = {
            "k": settings.ransac_k,
            "p": settings.ransac_p,
            "e0": settings.ransac_e0,
            "cap": settings.ransac_cap,
            "sigma0": settings.ransac_sigma0,
            "seed": settings.seed,
        }
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)


class CrackMetrics(BaseModel):
    area: int = Field(default=0, ge=0, description="裂缝像素数")
    spine_length: float = Field(default=0.0, ge=0.0, description="骨架路径长度 (px)")
    avg_width: float = Field(default=0.0, ge=0.0, description="骨架上 2*EDT-1 的均值 (px)")
    area_over_length: float = Field(default=0.0, ge=0.0, description="area / spine_length 诊断值")

    def rounded(self) -> "CrackMetrics":
        return CrackMetrics(
            area=self.area,
            spine_length=round(self.spine_length, 1),
            avg_width=round(self.avg_width, 1),
            area_over_length=round(self.area_over_length, 1),
        )


class MetricErrors(BaseModel):
    area_err: float = Field(ge=0.0, description="面积误差 (%)")
    length_err: float = Field(ge=0.0, description="骨架长度误差 (%)")
    width_err: float = Field(ge=0.0, description="平均宽度误差 (%)")

    def rounded(self) -> "MetricErrors":
        return MetricErrors(
            area_err=round(self.area_err, 2),
            length_err=round(self.length_err, 2),
            width_err=round(self.width_err, 2),
        )


class KeypointCounts(BaseModel):
    reference: int = 0
    target: int = 0


class Artifacts(BaseModel):
    corrected: Optional[str] = None
    overlay: Optional[str] = None
    matches: Optional[str] = None


class AlignReport(BaseModel):
    schema_version: int = Field(default=1, alias="schema", serialization_alias="schema")
    detector: DetectorName
    seed: int
    status: Literal["aligned", "failed"]
    failure_reason: Optional[str] = None
    homography: Optional[List[float]] = Field(default=None, description="行优先 9 个数, h33 归一化")
    keypoints: KeypointCounts = Field(default_factory=KeypointCounts)
    mutual_matches: int = 0
    matches_before_ransac: int = 0
    matches_after_ransac: int = 0
    inliers: int = 0
    sigma_final: Optional[float] = None
    iterations_run: int = 0
    baseline_metrics: CrackMetrics
    uncorrected_metrics: CrackMetrics
    uncorrected_errors: Optional[MetricErrors] = None
    compared_baseline_metrics: Optional[CrackMetrics] = Field(
        default=None, description="基准图在校正后有效区域内的指标, errors 以此为基准"
    )
    corrected_metrics: Optional[CrackMetrics] = None
    errors: Optional[MetricErrors] = None
    artifacts: Artifacts = Field(default_factory=Artifacts)

    model_config = ConfigDict(populate_by_name=True)

    @model_validator(mode="after")
    def _check_counts(self) -> "AlignReport":
        if not self.inliers <= self.matches_before_ransac <= self.mutual_matches:
            raise ValueError(
                f"inconsistent counts: inliers={self.inliers} before_ransac={self.matches_before_ransac} "
                f"mutual={self.mutual_matches}"
            )
        if self.status == "failed" and (self.homography is not None or self.corrected_metrics is not None):
            raise ValueError("failed alignment must not carry a homography or corrected metrics")
        return self

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)


class PerturbSpec(BaseModel):
    """One cell of the perturbation grid; "none" is the neutral level of every factor."""

    model_config = ConfigDict(frozen=True)

    tilt: Literal["none", "mild", "medium", "severe"] = "mild"
    noise: Literal["none", "low", "med", "high"] = "none"
    blur: Literal["none", "low", "med", "high"] = "none"
    contrast: Literal["none", "high", "med", "low"] = "none"
    shadow: Literal["none", "low", "med", "high"] = "none"
    texture: Literal["high", "medium", "low"] = "medium"
    crop: bool = False
    background: Literal["plain", "brick"] = "plain"

    def label(self) -> str:
        parts = [f"tilt={self.tilt}"]
        for name in ("noise", "blur", "contrast", "shadow"):
            value = getattr(self, name)
            if value != "none":
                parts.append(f"{name}={value}")
        if self.texture != "medium":
            parts.append(f"texture={self.texture}")
        if self.crop:
            parts.append("crop")
        if self.background != "plain":
            parts.append(f"background={self.background}")
        return ";".join(parts)


class BenchCase(BaseModel):
    cell: str
    detector: DetectorName
    seed: int
    spec: PerturbSpec
    h_gt: List[float] = Field(description="参考 -> 目标 的真值单应, 行优先")
    status: Literal["aligned", "failed"] = "failed"
    inliers: int = 0
    corner_error: Optional[float] = Field(default=None, description="四角最大重投影误差 (px)")
    errors: Optional[MetricErrors] = None


class BenchSummaryRow(BaseModel):
    cell: str
    detector: DetectorName
    runs: int
    successes: int
    mean_inliers: float
    median_corner_error: Optional[float] = None
    mean_area_err: Optional[float] = None
    mean_length_err: Optional[float] = None
    mean_width_err: Optional[float] = None
