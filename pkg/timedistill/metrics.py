"""
Métriques de prévision et test de Kolmogorov-Smirnov à deux échantillons.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import kstwobign

from timedistill.errors import DimensionError, UsageError

logger = logging.getLogger(__name__)

KS_SIGNIFICANCE = 0.01


@dataclass(frozen=True)
class MetricsReport:
    """Résultats d'un horizon ; les champs optionnels restent à None s'ils ne s'appliquent pas."""
    horizon: int
    mse: float
    mae: float
    alpha: Optional[float] = None
    ks_statistic: Optional[float] = None
    ks_p: Optional[float] = None
    ks_reject: Optional[bool] = None
    n_train: int = 0
    n_val: int = 0
    n_test: int = 0
    mse_denormalized: Optional[float] = None
    mae_denormalized: Optional[float] = None


def _check_same_shape(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise DimensionError(f"Prédictions {pred.shape} et cibles {target.shape} incompatibles")
    if pred.size == 0:
        raise UsageError("Aucune valeur à évaluer")


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    return float(np.mean((pred - target) ** 2))


def mae(pred: np.ndarray, target: np.ndarray) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    _check_same_shape(pred, target)
    return float(np.mean(np.abs(pred - target)))


def ks_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """
    Test de Kolmogorov-Smirnov à deux échantillons.

    D = sup |F_a − F_b| sur les fonctions de répartition empiriques ; la
    p-valeur utilise la loi asymptotique de Kolmogorov avec la taille
    effective n_a·n_b / (n_a + n_b).

    Returns:
        Tuple (statistique, p-valeur dans [0, 1])

    Raises:
        UsageError: Échantillon vide
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise UsageError("Le test K-S requiert deux échantillons non vides")

    support = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, support, side="right") / a.size
    cdf_b = np.searchsorted(b, support, side="right") / b.size
    statistic = float(np.max(np.abs(cdf_a - cdf_b)))

    effective = a.size * b.size / (a.size + b.size)
    p_value = float(np.clip(kstwobign.sf(np.sqrt(effective) * statistic), 0.0, 1.0))
    return statistic, p_value


def save_report(report: MetricsReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(asdict(report), f, ensure_ascii=False, indent=2)
    logger.debug(f"Rapport écrit: {path}")
    return path


def load_report(path: Path) -> MetricsReport:
    """Relit un rapport écrit par save_report."""
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    known = {f.name for f in fields(MetricsReport)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"Champs inconnus dans {Path(path).name}: {sorted(unknown)}")
    return MetricsReport(**data)
