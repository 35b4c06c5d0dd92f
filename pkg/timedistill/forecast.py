"""
Module de prévision.
Encodeur élève figé, extraction d'une représentation par fenêtre, tête de
régression ridge choisie sur le split de validation et métriques de test.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from timedistill.config import ALPHA_GRID, ForecastConfig
from timedistill.errors import DimensionError, NumericError, ParameterError, UsageError
from timedistill.loader import SeriesDataset
from timedistill.metrics import KS_SIGNIFICANCE, MetricsReport, ks_test, mae, mse
from timedistill.model import TeacherStudentState, branch_forward
from timedistill.numeric import Tensor, no_tape
from timedistill.preprocessing import (
    ForecastSample,
    inverse_normalize,
    make_forecast_samples,
    split_bounds,
    stack_samples,
)

logger = logging.getLogger(__name__)

Windows = Union[Sequence[ForecastSample], np.ndarray]


class ConditioningError(NumericError):
    """Exception levée lorsque le système ridge est singulier (α = 0 avec moins d'échantillons que de dimensions)."""
    pass


@dataclass(frozen=True, eq=False)
class ForecastHead:
    """Tête linéaire : W [K, P·C], b [P·C], α, P et C."""
    W: np.ndarray
    b: np.ndarray
    alpha: float
    horizon: int
    channels: int

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Prédictions [n, P, C]."""
        if features.ndim != 2 or features.shape[1] != self.W.shape[0]:
            raise DimensionError(f"Caractéristiques {features.shape}, attendu [n, {self.W.shape[0]}]")
        return (features @ self.W + self.b).reshape(-1, self.horizon, self.channels)


def _as_windows(samples: Windows) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return samples
    if not samples:
        raise UsageError("Aucune fenêtre à encoder")
    return np.stack([s.window for s in samples])


def encode_windows(
    state: TeacherStudentState,
    samples: Windows,
    batch_size: int = 256,
    workers: int = 1,
) -> np.ndarray:
    """
    Encode chaque fenêtre (sans masque) avec la projection et l'encodeur élève.

    La caractéristique retenue est la représentation du dernier horodatage de
    la fenêtre.

    Args:
        state: État dont l'élève est utilisé en lecture seule
        samples: Échantillons ou tableau de fenêtres [n, T, C]
        batch_size: Taille des lots d'encodage
        workers: Nombre de threads

    Returns:
        Tableau [n, K]
    """
    windows = _as_windows(samples)
    if windows.ndim != 3 or windows.shape[-1] != state.dims.input_dims:
        raise DimensionError(f"Fenêtres {windows.shape}, {state.dims.input_dims} canaux attendus")
    if batch_size < 1 or workers < 1:
        raise ParameterError(f"batch_size et workers doivent être ≥ 1 ({batch_size}, {workers})")

    student = state.student.copy()
    chunks = [windows[i:i + batch_size] for i in range(0, len(windows), batch_size)]

    def _encode(chunk: np.ndarray) -> np.ndarray:
        return branch_forward(student, state.dims, Tensor(chunk)).data[:, -1, :]

    with no_tape():
        if workers > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=workers) as executor:
                parts = list(executor.map(_encode, chunks))
        else:
            parts = [_encode(chunk) for chunk in chunks]
    return np.concatenate(parts, axis=0)


def ridge_fit(features: np.ndarray, targets: np.ndarray, alpha: float) -> ForecastHead:
    """
    Régression ridge en forme close, biais non pénalisé.

    Le biais est absorbé en centrant X et Y : (XcᵀXc + αI)W = XcᵀYc, puis
    b = ȳ − x̄W, ce qui équivaut aux équations normales augmentées d'une
    colonne constante exclue de la pénalité.

    Args:
        features: X [n, K]
        targets: Y [n, P, C] ou [n, P·C]
        alpha: α ≥ 0

    Raises:
        ParameterError: α négatif ou n = 0
        ConditioningError: Système singulier (α = 0 et n < K)
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, np.newaxis]
    if X.ndim != 2 or len(X) == 0 or len(Y) != len(X):
        raise ParameterError(f"Données ridge invalides: X{X.shape}, Y{Y.shape}")
    if not alpha >= 0:
        raise ParameterError(f"α doit être ≥ 0: {alpha}")
    horizon, channels = (Y.shape[1], Y.shape[2]) if Y.ndim == 3 else (Y.shape[1], 1)
    Y = Y.reshape(len(Y), -1)

    n, K = X.shape
    if alpha == 0 and n < K:
        raise ConditioningError(f"Système singulier: {n} échantillons pour {K} dimensions, utiliser α > 0")

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    gram = Xc.T @ Xc + alpha * np.eye(K)
    try:
        W = np.linalg.solve(gram, Xc.T @ (Y - y_mean))
    except np.linalg.LinAlgError as e:
        raise ConditioningError(f"Système ridge singulier pour α={alpha}: {e}, utiliser α > 0")
    if not np.all(np.isfinite(W)):
        raise ConditioningError(f"Solution ridge non finie pour α={alpha}")
    return ForecastHead(W=W, b=y_mean - x_mean @ W, alpha=float(alpha), horizon=horizon, channels=channels)


def select_alpha_from_features(
    train_features: np.ndarray,
    train_targets: np.ndarray,
    val_features: np.ndarray,
    val_targets: np.ndarray,
    grid: Sequence[float] = ALPHA_GRID,
) -> Tuple[float, Dict[float, float]]:
    """
    Retourne l'α de plus faible MSE de validation (égalité : le plus grand α).

    Returns:
        Tuple (α retenu, MSE de validation par α)
    """
    if not len(grid):
        raise UsageError("Grille de α vide")
    if len(val_features) == 0:
        raise UsageError("Split de validation vide")

    scores: Dict[float, float] = {}
    best_alpha, best_score = None, np.inf
    for alpha in sorted(float(a) for a in grid):
        try:
            head = ridge_fit(train_features, train_targets, alpha)
        except ConditioningError as e:
            logger.warning(f"α={alpha} ignoré: {e}")
            continue
        score = mse(head.predict(val_features), np.asarray(val_targets).reshape(len(val_features), head.horizon, head.channels))
        scores[alpha] = score
        if score <= best_score:
            best_alpha, best_score = alpha, score

    if best_alpha is None:
        raise ConditioningError("Aucun α de la grille ne donne un système résoluble")
    logger.debug(f"MSE de validation par α: {scores}")
    return best_alpha, scores


def alpha_select(
    state: TeacherStudentState,
    train_samples: Sequence[ForecastSample],
    val_samples: Sequence[ForecastSample],
    grid: Sequence[float] = ALPHA_GRID,
) -> float:
    """
    Choisit α sur la grille par MSE de validation.

    Raises:
        UsageError: Validation vide ou grille vide
    """
    if not val_samples:
        raise UsageError("Split de validation vide")
    train_features = encode_windows(state, train_samples)
    val_features = encode_windows(state, val_samples)
    _, train_targets = stack_samples(train_samples)
    _, val_targets = stack_samples(val_samples)
    alpha, _ = select_alpha_from_features(train_features, train_targets, val_features, val_targets, grid)
    return alpha


def score_predictions(
    predictions: np.ndarray,
    samples: Sequence[ForecastSample],
    alpha: Optional[float] = None,
    ds: Optional[SeriesDataset] = None,
    n_train: int = 0,
    n_val: int = 0,
) -> MetricsReport:
    """
    MSE et MAE moyennées sur toutes les valeurs prédites, test K-S entre les
    historiques et les prédictions.

    Raises:
        UsageError: Aucun échantillon
    """
    if not samples:
        raise UsageError("Split de test vide")
    windows, targets = stack_samples(samples)
    statistic, p_value = ks_test(windows.reshape(-1), predictions.reshape(-1))

    denorm_mse = denorm_mae = None
    if ds is not None and ds.norm_stats is not None:
        denorm_pred = inverse_normalize(ds, predictions)
        denorm_target = inverse_normalize(ds, targets)
        denorm_mse, denorm_mae = mse(denorm_pred, denorm_target), mae(denorm_pred, denorm_target)

    return MetricsReport(
        horizon=int(targets.shape[1]),
        mse=mse(predictions, targets),
        mae=mae(predictions, targets),
        alpha=alpha,
        ks_statistic=statistic,
        ks_p=p_value,
        ks_reject=bool(p_value < KS_SIGNIFICANCE),
        n_train=n_train,
        n_val=n_val,
        n_test=len(samples),
        mse_denormalized=denorm_mse,
        mae_denormalized=denorm_mae,
    )


def evaluate(
    head: ForecastHead,
    state: TeacherStudentState,
    test_samples: Sequence[ForecastSample],
    ds: Optional[SeriesDataset] = None,
    features: Optional[np.ndarray] = None,
) -> MetricsReport:
    """
    Évalue une tête ajustée sur le split de test (espace normalisé).

    Args:
        head: Tête ridge
        state: État (encodeur élève)
        test_samples: Échantillons de test
        ds: Dataset normalisé, pour le rapport dénormalisé
        features: Caractéristiques déjà calculées pour test_samples
    """
    if not test_samples:
        raise UsageError("Split de test vide")
    if features is None:
        features = encode_windows(state, test_samples)
    return score_predictions(head.predict(features), test_samples, alpha=head.alpha, ds=ds)


def prediction_frame(predictions: np.ndarray, samples: Sequence[ForecastSample]) -> pd.DataFrame:
    """
    Une ligne par valeur prédite : instance, échantillon, horodatage prédit,
    pas (1..P), canal, valeur réelle et prédiction.

    Raises:
        DimensionError: Si les prédictions n'ont pas la forme des cibles
    """
    _, targets = stack_samples(samples)
    if predictions.size != targets.size:
        raise DimensionError(f"Prédictions {predictions.shape} et cibles {targets.shape} incompatibles")
    N, P, C = targets.shape
    sample, step, channel = (a.ravel() for a in np.meshgrid(np.arange(N), np.arange(P), np.arange(C), indexing="ij"))
    origins = np.array([s.origin for s in samples])
    T = samples[0].window.shape[0]
    return pd.DataFrame({
        "instance": origins[sample, 0],
        "sample": sample,
        "time": origins[sample, 1] + T + step,
        "step": step + 1,
        "channel": channel,
        "y_true": targets.ravel(),
        "y_pred": predictions.reshape(targets.shape).ravel(),
    })


def persistence_baseline(samples: Sequence[ForecastSample], ds: Optional[SeriesDataset] = None) -> MetricsReport:
    """Répète la dernière valeur observée de chaque fenêtre sur tout l'horizon."""
    if not samples:
        raise UsageError("Aucun échantillon pour la référence de persistance")
    windows, targets = stack_samples(samples)
    predictions = np.repeat(windows[:, -1:, :], targets.shape[1], axis=1)
    return score_predictions(predictions, samples, ds=ds)


def encode_split(
    state: TeacherStudentState,
    ds: SeriesDataset,
    split_name: str,
    lookback: int,
    batch_size: int = 256,
    workers: int = 1,
) -> np.ndarray:
    """
    Caractéristiques de toutes les fenêtres d'historique d'un split, [N, n_offsets, K].

    L'offset o correspond à la fenêtre [début + o, début + o + T) ; les
    échantillons d'un horizon P en utilisent les premiers.
    """
    start, end = split_bounds(ds, split_name)
    count = end - start - lookback + 1
    if count < 1:
        raise UsageError(f"Split {split_name} plus court que l'historique {lookback}")
    windows = np.stack([
        ds.values[n, start + o:start + o + lookback]
        for n in range(ds.n_instances)
        for o in range(count)
    ])
    features = encode_windows(state, windows, batch_size=batch_size, workers=workers)
    return features.reshape(ds.n_instances, count, -1)


def _features_for(cache: np.ndarray, n_samples_per_instance: int) -> np.ndarray:
    return cache[:, :n_samples_per_instance].reshape(-1, cache.shape[-1])


def run_forecast(
    state: TeacherStudentState,
    ds: SeriesDataset,
    fc: ForecastConfig,
    out_dir: Optional[Path] = None,
) -> Tuple[List[MetricsReport], List[MetricsReport]]:
    """
    Protocole complet sur tous les horizons : encodage des trois splits, choix
    de α, ajustement sur l'entraînement, évaluation sur le test.

    Args:
        state: État (encodeur élève)
        ds: Dataset découpé et normalisé
        fc: Configuration de prévision
        out_dir: Si fourni, predictions_h{P}.csv y est écrit pour chaque horizon

    Returns:
        Tuple (rapports du modèle, rapports de la référence de persistance)

    Raises:
        SizingError: Horizon trop long pour un split
    """
    T = fc.lookback
    cache = {
        name: encode_split(state, ds, name, T, fc.encode_batch_size, fc.workers)
        for name in ("train", "val", "test")
    }

    reports, baselines = [], []
    for P in fc.horizons:
        samples = {name: make_forecast_samples(ds, T, P, name) for name in cache}
        per_instance = {name: len(samples[name]) // ds.n_instances for name in cache}
        features = {name: _features_for(cache[name], per_instance[name]) for name in cache}
        targets = {name: stack_samples(samples[name])[1] for name in cache}

        alpha, _ = select_alpha_from_features(
            features["train"], targets["train"], features["val"], targets["val"], fc.alpha_grid
        )
        head = ridge_fit(features["train"], targets["train"], alpha)
        predictions = head.predict(features["test"])
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            prediction_frame(predictions, samples["test"]).to_csv(Path(out_dir) / f"predictions_h{P}.csv", index=False)
        report = score_predictions(
            predictions,
            samples["test"],
            alpha=alpha,
            ds=ds if fc.denormalized else None,
            n_train=len(samples["train"]),
            n_val=len(samples["val"]),
        )
        baseline = persistence_baseline(samples["test"], ds=ds if fc.denormalized else None)
        reports.append(report)
        baselines.append(baseline)
        logger.info(
            f"Horizon {P}: MSE={report.mse:.4f} MAE={report.mae:.4f} (α={alpha}), "
            f"persistance MSE={baseline.mse:.4f}, K-S D={report.ks_statistic:.3f} p={report.ks_p:.3g}"
        )
    return reports, baselines
