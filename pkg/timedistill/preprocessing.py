"""
Module de prétraitement des séries.
Découpage temporel train/val/test, normalisation z-score et découpage en
fenêtres (historique, horizon) pour la prévision.
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from timedistill.config import SPLIT_RATIOS
from timedistill.errors import ParameterError, SizingError, UsageError
from timedistill.loader import NormStats, SeriesDataset

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class ForecastSample:
    """Fenêtre d'historique [T, C], cible [P, C] et origine (instance, temps)."""
    window: np.ndarray
    target: np.ndarray
    origin: Tuple[int, int]


def split(ds: SeriesDataset, ratios: Sequence[float] = SPLIT_RATIOS) -> SeriesDataset:
    """
    Découpe la série en trois segments contigus (sans mélange).

    Args:
        ds: Dataset source
        ratios: Proportions train/val/test, de somme 1

    Returns:
        Dataset avec split = (floor(r0·T), floor((r0+r1)·T))

    Raises:
        ParameterError: Ratios invalides ou segment vide
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ParameterError(f"Ratios de découpage invalides: {ratios}")

    total = ds.length
    # tolérance : 0.6·T ne doit pas tomber juste sous un entier
    train_end = math.floor(ratios[0] * total + 1e-9)
    val_end = math.floor((ratios[0] + ratios[1]) * total + 1e-9)
    if not 0 < train_end < val_end < total:
        raise ParameterError(
            f"Découpage vide pour T_total={total}: frontières ({train_end}, {val_end})"
        )

    logger.info(f"Découpage temporel: train [0, {train_end}), val [{train_end}, {val_end}), test [{val_end}, {total})")
    return ds.with_values(ds.values, split=(train_end, val_end))


def split_bounds(ds: SeriesDataset, split_name: str) -> Tuple[int, int]:
    """Bornes [début, fin) d'un split nommé."""
    if ds.split is None:
        raise UsageError("Le dataset n'a pas encore été découpé")
    train_end, val_end = ds.split
    bounds = {"train": (0, train_end), "val": (train_end, val_end), "test": (val_end, ds.length)}
    if split_name not in bounds:
        raise UsageError(f"Split inconnu: {split_name}")
    return bounds[split_name]


def normalize(ds: SeriesDataset) -> SeriesDataset:
    """
    Normalisation z-score par canal avec les statistiques du split d'entraînement.

    Raises:
        UsageError: Si le dataset n'est pas découpé
        ParameterError: Si un canal est constant sur le split d'entraînement
    """
    start, end = split_bounds(ds, "train")
    train = ds.values[:, start:end, :].reshape(-1, ds.n_channels)
    mean = train.mean(axis=0)
    std = train.std(axis=0)

    for channel, value in enumerate(std):
        if not value > 0:
            raise ParameterError(
                f"Variance nulle sur le split d'entraînement pour le canal {ds.feature_names[channel]}"
            )

    values = (ds.values - mean) / std
    logger.info(f"Normalisation z-score appliquée sur {ds.n_channels} canaux")
    return ds.with_values(values, norm_stats=NormStats(mean=mean, std=std))


def inverse_normalize(ds: SeriesDataset, values: np.ndarray) -> np.ndarray:
    """Ramène des valeurs normalisées (dernier axe = canaux) à l'échelle d'origine."""
    if ds.norm_stats is None:
        raise UsageError("Le dataset n'est pas normalisé")
    return values * ds.norm_stats.std + ds.norm_stats.mean


def select_target(ds: SeriesDataset) -> SeriesDataset:
    """Mode univarié : ne garde que la variable cible (dernière colonne)."""
    logger.info(f"Mode univarié: variable cible {ds.feature_names[-1]}")
    norm_stats = None
    if ds.norm_stats is not None:
        norm_stats = NormStats(mean=ds.norm_stats.mean[-1:], std=ds.norm_stats.std[-1:])
    return ds.with_values(
        ds.values[:, :, -1:].copy(),
        feature_names=ds.feature_names[-1:],
        norm_stats=norm_stats,
    )


def make_forecast_samples(ds: SeriesDataset, T: int, P: int, split_name: str) -> List[ForecastSample]:
    """
    Découpe un split en échantillons (historique T, horizon P), pas de 1.

    Args:
        ds: Dataset découpé
        T: Longueur de l'historique
        P: Horizon de prévision
        split_name: "train", "val" ou "test"

    Returns:
        split_length − T − P + 1 échantillons par instance

    Raises:
        SizingError: Si le split est plus court que T + P
    """
    if T < 1 or P < 1:
        raise ParameterError(f"Historique et horizon doivent être ≥ 1 (T={T}, P={P})")
    start, end = split_bounds(ds, split_name)
    length = end - start
    if length < T + P:
        raise SizingError(
            f"Split {split_name} trop court pour l'horizon {P}: longueur {length}, minimum requis {T + P}"
        )

    samples = []
    for instance in range(ds.n_instances):
        series = ds.values[instance]
        for offset in range(start, end - T - P + 1):
            samples.append(ForecastSample(
                window=series[offset:offset + T],
                target=series[offset + T:offset + T + P],
                origin=(instance, offset),
            ))

    logger.debug(f"{len(samples)} échantillons créés sur {split_name} (T={T}, P={P})")
    return samples


def stack_samples(samples: Sequence[ForecastSample]) -> Tuple[np.ndarray, np.ndarray]:
    """Empile fenêtres [n, T, C] et cibles [n, P, C]."""
    if not samples:
        raise UsageError("Aucun échantillon à empiler")
    return np.stack([s.window for s in samples]), np.stack([s.target for s in samples])


def get_split_statistics(ds: SeriesDataset) -> Dict[str, int]:
    """
    Calcule des statistiques sur les splits.

    Returns:
        Dictionnaire avec la longueur de chaque split
    """
    if ds.split is None:
        return {"total": ds.length, "train": 0, "val": 0, "test": 0}

    stats = {"total": ds.length}
    for name in SPLIT_NAMES:
        start, end = split_bounds(ds, name)
        stats[name] = end - start
    return stats
