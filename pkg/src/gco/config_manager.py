"""
実験設定の管理

`ConfigManager` は TOML ファイルを DEFAULT_CONFIG にセクション単位でマージし、
`validate()` で型付きの `ExperimentConfig` に変換する。チャンネル構成・割り切れ・
確率の範囲など、フィールドをまたぐ制約もここで検証する。
"""

import copy
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .denoiser_net import DenoiserConfig
from .diffusion_core import NoiseSchedule, build_linear_schedule
from .errors import ConfigError, ScheduleError
from .latent_codec import CodecConfig, CodecMode
from .ms_acm import FACE_RESOLUTION, TextEncoderConfig
from .outpaint_stage import ADAPTER, FUSED, AdapterConfig, OutpaintOptions
from .synth_data import RESOLUTION
from .training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "paths": {
        "data_dir": "data/toy",
        "checkpoint_dir": "checkpoints",
        "output_dir": "output",
    },
    "corpus": {
        "n": 500,
        "seed": 0,
        "resolution": RESOLUTION,
        "workers": 0,  # 0: cpu count, capped by GCO_NUM_THREADS
    },
    "codec": {
        "mode": "patch-identity",
        "f": 4,
        "latent_channels": 48,
        "ae_width": 32,
        "ae_steps": 1000,
        "ae_lr": 1e-3,
    },
    "schedule": {
        "T": 200,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "pose_model": {
        "base_width": 32,
        "depth": 2,
        "attention_levels": [1],
        "kernel_size": 3,
        "num_heads": 4,
        "norm_groups": 8,
    },
    "outpaint_model": {
        "kind": FUSED,
        "base_width": 32,
        "depth": 2,
        "attention_levels": [1],
        "kernel_size": 3,
        "num_heads": 4,
        "norm_groups": 8,
    },
    "text_encoder": {
        "context_dim": 64,
        "layers": 2,
        "heads": 4,
        "max_len": 32,
    },
    "adapter": {
        "face_dim": 256,
        "face_layers": 6,
        "face_heads": 4,
        "face_ff": 1024,
        "face_patch": 4,
    },
    "training": {
        "pose_steps": 2000,
        "outpaint_steps": 4000,
        "batch_size": 16,
        "lr": 2e-4,
        "seed": 0,
        "log_every": 100,
        "grad_clip": 1.0,
        "device": "cpu",
        "fine_drop": 0.1,
        "full_drop": 0.1,
        "face_drop": 0.3,
        "noise_face": False,
        "loss_on_garment": True,
    },
    "sampling": {
        "n_steps": 50,
        "cfg_scale": 3.0,
        "blend": True,
        "eta": 0.0,
        "n_poses": 4,
        "seed": 0,
    },
    "evaluation": {
        "seed": 100000,
        "n_requests": 100,
        "n_face_pairs": 50,
        "n_fit": 50,
        "fit_threshold": 0.3,
        "ablation_steps": 4000,
        "audit_steps": 100,
        "audit_batch": 8,
    },
}


@dataclass(frozen=True)
class PathsConfig:
    data_dir: Path
    checkpoint_dir: Path
    output_dir: Path

    @property
    def pose_checkpoint(self) -> Path:
        return self.checkpoint_dir / "pose.gcockpt"

    def outpaint_checkpoint(self, kind: str = FUSED) -> Path:
        return self.checkpoint_dir / f"outpaint_{kind}.gcockpt"

    @property
    def codec_checkpoint(self) -> Path:
        return self.checkpoint_dir / "codec.gcockpt"


@dataclass(frozen=True)
class CorpusConfig:
    n: int
    seed: int
    resolution: int
    workers: int


@dataclass(frozen=True)
class ScheduleConfig:
    T: int
    beta_start: float
    beta_end: float

    def build(self) -> NoiseSchedule:
        return build_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class SamplingConfig:
    n_steps: int
    cfg_scale: float
    blend: bool
    eta: float
    n_poses: int
    seed: int


@dataclass(frozen=True)
class EvaluationConfig:
    seed: int
    n_requests: int
    n_face_pairs: int
    n_fit: int
    fit_threshold: float
    ablation_steps: int
    audit_steps: int
    audit_batch: int


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig
    corpus: CorpusConfig
    codec: CodecConfig
    codec_training: TrainConfig
    codec_width: int
    schedule: ScheduleConfig
    pose_model: DenoiserConfig
    outpaint_model: DenoiserConfig
    outpaint_kind: str
    text_encoder: TextEncoderConfig
    adapter: AdapterConfig
    pose_training: TrainConfig
    outpaint_training: TrainConfig
    options: OutpaintOptions
    sampling: SamplingConfig
    evaluation: EvaluationConfig

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, Path):
                return str(v)
            if hasattr(v, "to_dict"):
                return v.to_dict()
            if hasattr(v, "__dataclass_fields__"):
                return {k: plain(x) for k, x in asdict(v).items()}
            return v
        return {name: plain(getattr(self, name)) for name in self.__dataclass_fields__}


class ConfigManager:
    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self.config_path = Path(config_path) if config_path is not None else None
        self.config = self.load_config()

    def load_config(self) -> Dict[str, Dict[str, Any]]:
        merged = copy.deepcopy(DEFAULT_CONFIG)
        if self.config_path is None:
            return merged
        if not self.config_path.exists():
            raise ConfigError("config", f"file not found: {self.config_path}")
        try:
            with open(self.config_path, "rb") as f:
                saved = tomllib.load(f)
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError("config", f"cannot parse {self.config_path}: {e}") from e

        # 既定値にセクション単位でマージする（未知のキーは受け付けない）
        for section, values in saved.items():
            if section not in merged:
                raise ConfigError(section, f"unknown section in {self.config_path}")
            if not isinstance(values, dict):
                raise ConfigError(section, "must be a table")
            for key, value in values.items():
                self.set(section, key, value, merged)
        logger.info(f"config loaded: {self.config_path}")
        return merged

    def get(self, section: str, key: str) -> Any:
        return self.config.get(section, {}).get(key)

    def set(self, section: str, key: str, value: Any, target: Optional[dict] = None) -> None:
        target = self.config if target is None else target
        if section not in DEFAULT_CONFIG:
            raise ConfigError(section, "unknown section")
        if key not in DEFAULT_CONFIG[section]:
            raise ConfigError(f"{section}.{key}", "unknown key")
        target[section][key] = _coerce(f"{section}.{key}", DEFAULT_CONFIG[section][key], value)

    def update_section(self, section: str, data_dict: Dict[str, Any]) -> None:
        for key, value in data_dict.items():
            self.set(section, key, value)

    def validate(self) -> ExperimentConfig:
        """
        設定を検証して ExperimentConfig を組み立てる

        Returns:
            ExperimentConfig

        Raises:
            ConfigError: 問題のあるフィールド名（ドット区切り）付き
        """
        c = self.config
        paths = PathsConfig(**{k: Path(v) for k, v in c["paths"].items()})

        corpus = CorpusConfig(**c["corpus"])
        if corpus.n < 1:
            raise ConfigError("corpus.n", f"must be >= 1, got {corpus.n}")
        if corpus.resolution != RESOLUTION:
            raise ConfigError("corpus.resolution", f"the corpus renders at {RESOLUTION}x{RESOLUTION}")

        cc = c["codec"]
        f = cc["f"]
        try:
            mode = CodecMode(cc["mode"])
        except ValueError as e:
            raise ConfigError("codec.mode", f"must be one of {[m.value for m in CodecMode]}") from e
        if f < 1 or corpus.resolution % f:
            raise ConfigError("codec.f", f"resolution {corpus.resolution} is not divisible by f={f}")
        if FACE_RESOLUTION % f:
            raise ConfigError("codec.f", f"face resolution {FACE_RESOLUTION} is not divisible by f={f}")
        if FACE_RESOLUTION > corpus.resolution:
            raise ConfigError("codec.f", "face latent is taller than the target latent")
        codec = _section("codec", CodecConfig, {"downsample_factor": "f"},
                         mode=mode, downsample_factor=f, latent_channels=cc["latent_channels"])
        codec_training = _section("codec", TrainConfig, {"steps": "ae_steps", "lr": "ae_lr"},
                                  steps=cc["ae_steps"], lr=cc["ae_lr"], batch_size=c["training"]["batch_size"],
                                  seed=c["training"]["seed"], device=c["training"]["device"])

        sc = c["schedule"]
        schedule = ScheduleConfig(sc["T"], sc["beta_start"], sc["beta_end"])
        try:
            schedule.build()
        except ScheduleError as e:
            raise ConfigError("schedule", str(e)) from e

        lat = codec.latent_channels
        text = TextEncoderConfig(**c["text_encoder"])
        if text.context_dim % text.heads:
            raise ConfigError("text_encoder.heads", f"{text.heads} heads do not divide context_dim {text.context_dim}")
        pose_model = _denoiser("pose_model", c["pose_model"], in_channels=2 * lat, out_channels=lat)
        om = dict(c["outpaint_model"])
        kind = om.pop("kind")
        if kind not in (FUSED, ADAPTER):
            raise ConfigError("outpaint_model.kind", f"must be '{FUSED}' or '{ADAPTER}', got '{kind}'")
        outpaint_model = _denoiser("outpaint_model", om, in_channels=lat, out_channels=lat,
                                   context_dim=text.context_dim)
        latent_h = corpus.resolution // f
        _check_grid("pose_model", pose_model, latent_h, latent_h)
        _check_grid("outpaint_model", outpaint_model, latent_h, latent_h + FACE_RESOLUTION // f)
        adapter = AdapterConfig(**c["adapter"])
        if adapter.face_dim % adapter.face_heads:
            raise ConfigError("adapter.face_heads", f"{adapter.face_heads} heads do not divide {adapter.face_dim}")
        if FACE_RESOLUTION % adapter.face_patch:
            raise ConfigError("adapter.face_patch", f"must divide the face resolution {FACE_RESOLUTION}")

        tc = c["training"]
        common = {k: tc[k] for k in ("batch_size", "lr", "seed", "log_every", "grad_clip", "device")}
        pose_training = _section("training", TrainConfig, {"steps": "pose_steps"}, steps=tc["pose_steps"], **common)
        outpaint_training = _section("training", TrainConfig, {"steps": "outpaint_steps"},
                                     steps=tc["outpaint_steps"], **common)
        options = OutpaintOptions(**{k: tc[k] for k in ("fine_drop", "full_drop", "face_drop",
                                                        "noise_face", "loss_on_garment")})

        sampling = SamplingConfig(**c["sampling"])
        if not 1 <= sampling.n_steps <= schedule.T:
            raise ConfigError("sampling.n_steps", f"must be in 1..{schedule.T}, got {sampling.n_steps}")
        if sampling.cfg_scale < 0:
            raise ConfigError("sampling.cfg_scale", f"must be >= 0, got {sampling.cfg_scale}")
        if not 0.0 <= sampling.eta <= 1.0:
            raise ConfigError("sampling.eta", f"must be in [0, 1], got {sampling.eta}")
        evaluation = EvaluationConfig(**c["evaluation"])
        if not 0.0 < evaluation.fit_threshold < 1.0:
            raise ConfigError("evaluation.fit_threshold", f"must be in (0, 1), got {evaluation.fit_threshold}")

        return ExperimentConfig(
            paths=paths, corpus=corpus, codec=codec, codec_training=codec_training,
            codec_width=cc["ae_width"], schedule=schedule, pose_model=pose_model,
            outpaint_model=outpaint_model, outpaint_kind=kind, text_encoder=text, adapter=adapter,
            pose_training=pose_training, outpaint_training=outpaint_training, options=options,
            sampling=sampling, evaluation=evaluation,
        )

    def with_overrides(self, **sections: Dict[str, Any]) -> "ConfigManager":
        """`section={key: value}` の上書きを反映したコピーを返す（None の値は無視）"""
        other = copy.copy(self)
        other.config = copy.deepcopy(self.config)
        for section, values in sections.items():
            other.update_section(section, {k: v for k, v in values.items() if v is not None})
        return other


def _coerce(name: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(name, f"expected a list of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def _section(section: str, cls, rename: Optional[Dict[str, str]] = None, **kwargs):
    """設定 dataclass を作る。ConfigError のフィールド名は TOML のセクション.キーに付け替える"""
    try:
        return cls(**kwargs)
    except ConfigError as e:
        key = e.field.split(".", 1)[-1]
        key = (rename or {}).get(key, key)
        raise ConfigError(f"{section}.{key}", str(e).split(": ", 1)[-1]) from e


def _denoiser(section: str, values: Dict[str, Any], **fixed) -> DenoiserConfig:
    values = dict(values)
    values["attention_levels"] = tuple(values["attention_levels"])
    return _section(section, DenoiserConfig, **values, **fixed)


def _check_grid(section: str, model: DenoiserConfig, height: int, width: int) -> None:
    # 各ダウンサンプル段で縦横が半分になるので 2^(depth-1) で割り切れる必要がある
    m = model.grid_multiple
    if height % m or width % m:
        raise ConfigError(f"{section}.depth",
                          f"depth {model.depth} needs a latent grid divisible by {m}, got {height}x{width}")
