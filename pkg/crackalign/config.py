from functools import lru_cache
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_file=".env", env_prefix="CRACKALIGN_")

    log_level: str = Field(default="INFO")
    # Scale space
    base_sigma: float = Field(default=1.6, description="sigma_0 of the scale schedule (px)")
    octaves: int = Field(default=4, description="Octave count; clamped to what the image size allows")
    sublevels: int = Field(default=4, description="Sublevels per octave")
    kappa_percentile: float = Field(default=0.70, description="Gradient histogram percentile used for kappa")
    kappa_bins: int = Field(default=300, description="Histogram bins for the kappa estimate")
    dt_max: float = Field(default=10.0, description="Largest AOS sub-step (px^2)")
    # Detection
    hessian_threshold: float = Field(default=1e-4, description="Scale-normalized det(H) threshold")
    dog_contrast: float = Field(default=0.03, description="DoG contrast threshold; |DoG| must exceed half of it")
    fast_threshold: float = Field(default=0.05, description="FAST intensity threshold T (0-1)")
    fast_arc: int = Field(default=9, description="Contiguous arc length of the FAST segment test")
    fast_scales: int = Field(default=3, description="FAST pyramid levels (1x, 2x, 4x ...)")
    max_keypoints: int = Field(default=2000, description="Strongest N keypoints kept per image")
    # Matching
    match_ratio: float = Field(default=0.8, description="Lowe ratio; best/second-best must stay below")
    # RANSAC
    ransac_k: int = Field(default=10, description="Correspondences drawn per iteration")
    ransac_p: float = Field(default=0.99, description="Confidence p of the iteration budget")
    ransac_e0: float = Field(default=0.5, description="Initial outlier ratio e")
    ransac_cap: int = Field(default=5000, description="Hard iteration cap")
    ransac_sigma0: float = Field(default=1.0, description="Initial sigma of the sqrt(5.99)*sigma gate (px)")
    seed: int = Field(default=0)
    # Bench
    bench_jobs: int = Field(default=1, description="Worker threads for bench cases")
    bench_seeds: int = Field(default=3, description="Seeds per bench cell")
    bench_size: int = Field(default=256, description="Synthetic scene edge length (px)")
    output_dir: str = Field(default="out")


@lru_cache
def get_settings() -> Settings:
    settings = Settings()
    return settings
