"""
Configuration globale du package.
Valeurs par défaut, variables d'environnement, chargement et validation des
configurations de run (document JSON versionné).
"""

import os
import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from timedistill.errors import ParameterError

# Charger les variables d'environnement
load_dotenv()

# Chemins racine
PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_OUTPUT_DIR = Path(os.getenv("TIMEDISTILL_OUTPUT_DIR", str(PROJECT_ROOT / "runs")))

CONFIG_VERSION = 1

# Hyperparamètres par défaut
BATCH_SIZE = 4
LEARNING_RATE = 1e-3
ITERATIONS = 200
LOSS_WEIGHT = 0.5          # λ
MOMENTUM = 0.999           # m
KEEP_PROB = 0.5            # ω
TEMPERATURE = 1.0          # τ
CROP_WINDOW = 128

# Dimensions du modèle
HIDDEN_DIMS = 64
REPR_DIMS = 320
DEPTH = 10
KERNEL_SIZE = 3
CONV_WIDTH = 64

# Prévision
LOOKBACK = 64
HORIZONS = [24, 48, 168, 336, 720]
MINUTE_HORIZONS = [24, 48, 96, 288, 672]
ALPHA_GRID = [0.1, 0.2, 0.5, 1, 2, 5, 10, 20, 50, 100, 200, 500, 1000]
SPLIT_RATIOS = (0.6, 0.2, 0.2)

# Sweeps
LAMBDA_SWEEP = [0, 0.1, 0.25, 0.33, 0.5, 0.66, 0.8, 0.9, 1.0]
MOMENTUM_SWEEP = [0, 0.9, 0.99, 0.999]

# Configuration du logging
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL = getattr(logging, os.getenv("TIMEDISTILL_LOG_LEVEL", "INFO").upper(), logging.INFO)


class ConfigValidationError(ParameterError):
    """Exception levée lorsqu'une configuration de run est invalide."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def setup_logging(log_file: Optional[Path] = None):
    """Configure le système de logging."""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, handlers=handlers, force=True)


@dataclass(frozen=True)
class SyntheticSpec:
    """Paramètres du générateur de séries synthétiques."""
    periods: Tuple[float, ...] = (50.0, 17.0)
    amplitudes: Tuple[float, ...] = (1.0, 0.5)
    noise_std: float = 0.1
    ar_coef: float = 0.5
    length: int = 2000
    channels: int = 3
    instances: int = 1
    seed: int = 7


@dataclass(frozen=True)
class DatasetConfig:
    path: Optional[str] = None
    date_column: str = "date"
    univariate: bool = False
    synthetic: Optional[SyntheticSpec] = None
    split_ratios: Tuple[float, float, float] = SPLIT_RATIOS


@dataclass(frozen=True)
class ForecastConfig:
    lookback: int = LOOKBACK
    horizons: Tuple[int, ...] = tuple(HORIZONS)
    alpha_grid: Tuple[float, ...] = tuple(ALPHA_GRID)
    encode_batch_size: int = 256
    workers: int = 1
    denormalized: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Configuration complète d'un run, telle que lue depuis le JSON."""
    train: Any
    dataset: DatasetConfig = DatasetConfig()
    forecast: ForecastConfig = ForecastConfig()
    output_dir: str = str(DEFAULT_OUTPUT_DIR)
    version: int = CONFIG_VERSION

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, train=replace(cfg.train, seed=int(seed)))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=str(output_dir))
        return cfg


def _build(cls, raw: Any, prefix: str):
    """Construit une dataclass en rejetant les clés inconnues."""
    if not isinstance(raw, dict):
        raise ConfigValidationError(prefix or "<racine>", "un objet JSON est attendu")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigValidationError(f"{prefix}{unknown[0]}", "clé inconnue")
    values = {}
    for name, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        values[name] = value
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigValidationError(prefix or "<racine>", str(e))


def parse_run_config(raw: Dict[str, Any]) -> RunConfig:
    """
    Convertit un document JSON déjà chargé en RunConfig validée.

    Raises:
        ConfigValidationError: Clé inconnue, version absente ou valeur hors plage
    """
    # Import local : trainer dépend de config pour ses valeurs par défaut
    from timedistill.trainer import TrainConfig

    if not isinstance(raw, dict):
        raise ConfigValidationError("<racine>", "un objet JSON est attendu")
    if "version" not in raw:
        raise ConfigValidationError("version", "clé obligatoire absente")
    if raw["version"] != CONFIG_VERSION:
        raise ConfigValidationError("version", f"version {raw['version']} non supportée")

    allowed = {"version", "dataset", "train", "forecast", "output_dir"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigValidationError(unknown[0], "clé inconnue")

    dataset_raw = dict(raw.get("dataset", {}))
    synthetic = None
    if dataset_raw.get("synthetic") is not None:
        synthetic = _build(SyntheticSpec, dataset_raw.pop("synthetic"), "dataset.synthetic.")
    else:
        dataset_raw.pop("synthetic", None)
    dataset = replace(_build(DatasetConfig, dataset_raw, "dataset."), synthetic=synthetic)

    cfg = RunConfig(
        train=_build(TrainConfig, raw.get("train", {}), "train."),
        dataset=dataset,
        forecast=_build(ForecastConfig, raw.get("forecast", {}), "forecast."),
        output_dir=str(raw.get("output_dir", DEFAULT_OUTPUT_DIR)),
    )
    validate_config(cfg)
    return cfg


def load_run_config(path: Path) -> RunConfig:
    """
    Lit et valide un fichier de configuration JSON.

    Args:
        path: Chemin du fichier

    Returns:
        Configuration validée
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigValidationError(str(path), f"lecture impossible ({e})")
    return parse_run_config(raw)


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Sérialise une configuration (pour summary.json et les sweeps)."""
    data = asdict(cfg)
    data["train"] = asdict(cfg.train)
    return data


def validate_config(cfg: RunConfig) -> bool:
    """
    Valide que la configuration est correcte avant tout calcul.

    Raises:
        ConfigValidationError: Au premier champ invalide
    """
    cfg.train.validate()

    ds = cfg.dataset
    if (ds.path is None) == (ds.synthetic is None):
        raise ConfigValidationError("dataset", "indiquer exactement un de 'path' ou 'synthetic'")
    if len(ds.split_ratios) != 3 or any(r <= 0 for r in ds.split_ratios) or abs(sum(ds.split_ratios) - 1) > 1e-9:
        raise ConfigValidationError("dataset.split_ratios", "trois ratios positifs de somme 1")
    if ds.synthetic is not None:
        spec = ds.synthetic
        if len(spec.periods) != len(spec.amplitudes):
            raise ConfigValidationError("dataset.synthetic.amplitudes", "autant d'amplitudes que de périodes")
        if spec.noise_std < 0:
            raise ConfigValidationError("dataset.synthetic.noise_std", "doit être ≥ 0")
        if abs(spec.ar_coef) >= 1:
            raise ConfigValidationError("dataset.synthetic.ar_coef", "|φ| < 1 requis")
        if spec.length < 2 or spec.channels < 1 or spec.instances < 1:
            raise ConfigValidationError("dataset.synthetic", "dimensions positives requises")

    fc = cfg.forecast
    if fc.lookback < 1:
        raise ConfigValidationError("forecast.lookback", "doit être ≥ 1")
    if not fc.horizons or any(int(h) != h or h < 1 for h in fc.horizons):
        raise ConfigValidationError("forecast.horizons", "liste non vide d'entiers ≥ 1")
    if not fc.alpha_grid or any(a < 0 for a in fc.alpha_grid):
        raise ConfigValidationError("forecast.alpha_grid", "liste non vide de valeurs ≥ 0")
    if fc.encode_batch_size < 1 or fc.workers < 1:
        raise ConfigValidationError("forecast.workers", "valeurs ≥ 1 requises")
    return True
