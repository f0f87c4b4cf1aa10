import copy
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from lidnet.errors import ConfigurationError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Dataset configs
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    image_size: int = 64
    # (center_row, center_col, axis_row, axis_col); None derives it from image_size
    body_ellipse: Optional[Tuple[float, float, float, float]] = None
    n_lesions: Tuple[int, int] = (1, 3)
    lesion_radius: Tuple[int, int] = (3, 6)
    lesion_contrast: float = 0.3
    lesion_elongation: float = 1.0
    background_texture_scale: float = 0.05
    body_intensity: float = 0.4
    num_classes: int = 1
    rng_seed: int = 0

    def resolved_body_ellipse(self) -> Tuple[float, float, float, float]:
        if self.body_ellipse is not None:
            return tuple(float(v) for v in self.body_ellipse)  # type: ignore[return-value]
        half = self.image_size / 2.0
        return (half, half, 0.42 * self.image_size, 0.46 * self.image_size)

    def validate(self) -> None:
        if self.image_size < 32:
            raise ConfigurationError(f"image_size must be >= 32, got {self.image_size}")
        if self.lesion_contrast <= 0:
            raise ConfigurationError("lesion_contrast must be > 0")
        lo, hi = self.n_lesions
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"invalid n_lesions range {self.n_lesions}")
        r_lo, r_hi = self.lesion_radius
        if r_lo < 1 or r_hi < r_lo:
            raise ConfigurationError(f"invalid lesion_radius range {self.lesion_radius}")
        if self.lesion_elongation < 1.0:
            raise ConfigurationError("lesion_elongation must be >= 1")
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        cr, cc, ar, ac = self.resolved_body_ellipse()
        if ar <= 0 or ac <= 0:
            raise ConfigurationError("body ellipse axes must be positive")
        if cr - ar < 0 or cc - ac < 0 or cr + ar > self.image_size or cc + ac > self.image_size:
            raise ConfigurationError("body ellipse must lie inside the image")
        if hi > 0:
            widest = r_hi * self.lesion_elongation
            if r_hi + 1 > ar or widest + 1 > ac:
                raise ConfigurationError(
                    f"lesion radius {r_hi} (elongation {self.lesion_elongation}) "
                    f"cannot fit inside body ellipse axes ({ar}, {ac})"
                )


@dataclass
class SimulationConfig:
    n0: float = 1000.0
    mu_max: float = 4.0
    electronic_noise_sigma: float = 0.0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.n0 <= 0:
            raise ConfigurationError("n0 must be > 0")
        if self.mu_max <= 0:
            raise ConfigurationError("mu_max must be > 0")
        if self.electronic_noise_sigma < 0:
            raise ConfigurationError("electronic_noise_sigma must be >= 0")


@dataclass
class DatasetConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    n_train: int = 200
    n_test: int = 50
    workers: int = 1

    def validate(self) -> None:
        self.phantom.validate()
        self.simulation.validate()
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("n_train and n_test must be >= 1")


# ---------------------------------------------------------------------------
# Network / training configs
# ---------------------------------------------------------------------------

@dataclass
class DetectorConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    anchor_sizes: Tuple[float, ...] = (8.0, 12.0, 16.0)
    anchor_ratios: Tuple[float, ...] = (1.0,)
    num_classes: int = 1
    head_channels: int = 16
    head_hidden: int = 128
    head_pool: int = 7
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    head_fg_iou: float = 0.5
    head_bg_iou: float = 0.5
    boxes_per_image: int = 64
    positive_fraction: float = 0.25
    pre_nms_top_n: int = 200
    post_nms_top_n: int = 50
    proposal_nms_iou: float = 0.7

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        if self.anchors_per_cell < 1:
            raise ConfigurationError("at least one anchor per cell is required")
        if not self.channels:
            raise ConfigurationError("backbone needs at least one block")
        for lo, hi, name in (
            (self.rpn_bg_iou, self.rpn_fg_iou, "rpn"),
            (self.head_bg_iou, self.head_fg_iou, "head"),
        ):
            if not 0.0 <= lo <= hi <= 1.0:
                raise ConfigurationError(f"{name} IoU thresholds must satisfy 0 <= bg <= fg <= 1")


@dataclass
class TrainConfig:
    t1: int = 1500
    t2: int = 1000
    t3: int = 500
    rounds: int = 4
    batch_size: int = 8
    lambda1: float = 5.0
    lambda2: float = 5.0
    variant: str = "cnn"                  # cnn | gan
    strategy: str = "collaborative"       # collaborative | simultaneous
    perceptual: str = "roi"               # roi | global
    reconstruction: str = "mae"           # mae | mse
    lr_generator: float = 1e-4
    lr_discriminator: float = 4e-4
    lr_detector: float = 1e-3
    gp_weight: float = 10.0
    disc_steps: int = 1
    top_k: int = 5
    pool_size: int = 7
    generator_channels: int = 24
    discriminator_channels: int = 32
    eval_interval: int = 250
    eval_samples: int = 16
    early_stop_patience: int = 3
    seed: int = 0

    @property
    def total_steps(self) -> int:
        return self.t1 + self.rounds * (self.t2 + self.t3)

    def validate(self) -> None:
        if min(self.t1, self.t2, self.t3) < 0:
            raise ConfigurationError("T1, T2, T3 must be >= 0")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be >= 0")
        if self.gp_weight < 0:
            raise ConfigurationError("gp_weight must be >= 0")
        if self.top_k < 1 or self.pool_size < 1:
            raise ConfigurationError("top_k and pool_size must be >= 1")
        for name, value, allowed in (
            ("variant", self.variant, ("cnn", "gan")),
            ("strategy", self.strategy, ("collaborative", "simultaneous")),
            ("perceptual", self.perceptual, ("roi", "global")),
            ("reconstruction", self.reconstruction, ("mae", "mse")),
        ):
            if value not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}, got {value!r}")


# ---------------------------------------------------------------------------
# Evaluation configs
# ---------------------------------------------------------------------------

@dataclass
class GlcmConfig:
    n_levels: int = 32
    distances: Tuple[int, ...] = (1,)
    angles: Tuple[float, ...] = (0.0, 45.0, 90.0, 135.0)   # degrees
    symmetric: bool = True
    normalize: bool = True

    def validate(self) -> None:
        if self.n_levels < 2:
            raise ConfigurationError("n_levels must be >= 2")
        if not self.distances or not self.angles:
            raise ConfigurationError("at least one (distance, angle) pair is required")


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0


@dataclass
class EvalConfig:
    glcm: GlcmConfig = field(default_factory=GlcmConfig)
    ssim: SsimConfig = field(default_factory=SsimConfig)
    score_thresh: float = 0.05
    nms_iou: float = 0.5
    ap_interpolation: str = "all"   # all | 11point
    psnr_cap: float = 200.0
    data_range: float = 1.0
    eval_detector: Optional[str] = None

    def validate(self) -> None:
        self.glcm.validate()
        if not 0.0 <= self.score_thresh <= 1.0 or not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigurationError("score_thresh and nms_iou must lie in [0, 1]")
        if self.ap_interpolation not in ("all", "11point"):
            raise ConfigurationError("ap_interpolation must be 'all' or '11point'")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Optional[str] = None

    def validate(self) -> None:
        self.dataset.validate()
        self.detector.validate()
        self.train.validate()
        self.eval.validate()
        if self.detector.num_classes != self.dataset.phantom.num_classes:
            raise ConfigurationError("detector.num_classes must equal dataset.phantom.num_classes")

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# Profiles
# ---------------------------------------------------------------------------

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "paper": {
        "train": {
            "t1": 4000,
            "t2": 4000,
            "t3": 2000,
            "batch_size": 8,
            "lambda1": 5.0,
            "lambda2": 5.0,
            "lr_generator": 1e-4,
            "lr_discriminator": 4e-4,
            "lr_detector": 5e-3,
            "gp_weight": 10.0,
            "top_k": 5,
        },
    },
}


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _get_dict(data: dict, key: str, default: Optional[dict] = None) -> dict:
    value = data.get(key)
    if value is None:
        return default or {}
    if isinstance(value, dict):
        return value
    return default or {}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _scalar(value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        if isinstance(value, bool):
            raise TypeError("expected an integer")
        if isinstance(value, int):
            return value
        number = float(value)
        if not number.is_integer():
            raise ValueError("expected an integer")
        return int(number)
    if isinstance(default, float):
        if isinstance(value, bool):
            raise TypeError("expected a number")
        return float(value)
    return value


def _coerce(value: Any, default: Any, name: str, warnings: List[str]) -> Any:
    if value is None:
        return default
    try:
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise TypeError("expected a list")
            if not default:
                return tuple(value)
            return tuple(_scalar(item, default[0]) for item in value)
        return _scalar(value, default)
    except (TypeError, ValueError):
        warnings.append(f"Invalid value for '{name}': {value!r}; using default {default!r}.")
        return default


def _build(cls: type, data: dict, warnings: List[str], prefix: str = "") -> Any:
    """Instantiate a (possibly nested) config dataclass from a plain mapping."""
    instance = cls()
    kwargs: Dict[str, Any] = {}
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            warnings.append(f"Unknown config key '{prefix}{key}' ignored.")
    for f in dataclasses.fields(cls):
        default = getattr(instance, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), _get_dict(data, f.name, {}), warnings, f"{prefix}{f.name}.")
            continue
        if f.name not in data:
            kwargs[f.name] = default
            continue
        value = data[f.name]
        if default is None:
            kwargs[f.name] = tuple(value) if isinstance(value, list) else value
        else:
            kwargs[f.name] = _coerce(value, default, f"{prefix}{f.name}", warnings)
    return cls(**kwargs)


def _load_yaml(path: str) -> Tuple[dict, List[str]]:
    warnings: List[str] = []
    if not os.path.exists(path):
        warnings.append(f"Config file not found at {path}; using defaults.")
        return {}, warnings
    try:
        import yaml  # type: ignore
    except ImportError:
        warnings.append("PyYAML is not installed; skipping config load.")
        return {}, warnings

    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = yaml.safe_load(handle) or {}
    except yaml.YAMLError as exc:
        warnings.append(f"Config parse error in {path}: {exc}")
        return {}, warnings

    if not isinstance(data, dict):
        warnings.append("Config root must be a mapping; using defaults.")
        return {}, warnings
    return data, warnings


def config_from_dict(data: dict, profile: str = "desk") -> Tuple[ExperimentConfig, List[str]]:
    warnings: List[str] = []
    if profile not in PROFILES:
        raise ConfigurationError(f"Unknown profile '{profile}' (expected one of {sorted(PROFILES)})")
    merged = _deep_merge(PROFILES[profile], data)
    config = _build(ExperimentConfig, merged, warnings)
    return config, warnings


def load_config(path: Optional[str] = None, profile: str = "desk") -> Tuple[ExperimentConfig, List[str]]:
    """Load an experiment config (YAML or JSON) on top of the chosen profile."""
    data: dict = {}
    warnings: List[str] = []
    if path:
        data, warnings = _load_yaml(path)
    config, build_warnings = config_from_dict(data, profile)
    return config, warnings + build_warnings
