"""
Module de chargement des séries temporelles.
Lecture des fichiers CSV au format ETT : une colonne de dates puis des colonnes numériques,
la variable cible en dernier.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from timedistill.errors import TimedistillError

logger = logging.getLogger(__name__)


class IngestionError(TimedistillError):
    """Exception levée lorsqu'une cellule du CSV est absente ou illisible."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyFileError(IngestionError):
    """Exception levée lorsqu'un fichier ne contient aucune ligne de données."""
    pass


@dataclass(frozen=True, eq=False)
class NormStats:
    """Moyenne et écart-type par canal, estimés sur le split d'entraînement."""
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class SeriesDataset:
    """
    Série multivariée de forme [N, T_total, C].

    split vaut (train_end, val_end) une fois le découpage fait ; norm_stats est
    renseigné après normalisation.
    """
    values: np.ndarray
    feature_names: List[str]
    split: Optional[Tuple[int, int]] = None
    norm_stats: Optional[NormStats] = None
    timestamps: Optional[List[str]] = None

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def with_values(self, values: np.ndarray, **changes) -> "SeriesDataset":
        return replace(self, values=values, **changes)


def load_csv(path: Path, date_column_name: str = "date") -> SeriesDataset:
    """
    Lit un fichier CSV et le convertit en SeriesDataset (N=1).

    Args:
        path: Chemin du fichier
        date_column_name: Nom de la colonne de dates

    Returns:
        Dataset de forme [1, T_total, C], canaux dans l'ordre de l'en-tête

    Raises:
        IngestionError: Cellule absente ou non numérique, dates non monotones
        EmptyFileError: Si le CSV ne contient aucune donnée
    """
    path = Path(path)
    logger.info(f"Lecture du fichier: {path.name}")

    try:
        df = pd.read_csv(path, encoding='utf-8', dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        raise EmptyFileError(f"Le fichier CSV est vide: {path.name}")
    except (OSError, pd.errors.ParserError) as e:
        logger.error(f"Erreur lors de la lecture du fichier CSV: {e}")
        raise IngestionError(f"Impossible de lire le fichier {path.name}: {e}")

    if df.empty:
        raise EmptyFileError(f"Le fichier CSV est vide: {path.name}")
    if date_column_name not in df.columns:
        raise IngestionError(
            f"Colonne de dates '{date_column_name}' absente de l'en-tête",
            column=date_column_name,
        )

    feature_names = [c for c in df.columns if c != date_column_name]
    if not feature_names:
        raise IngestionError("Aucune colonne numérique dans le fichier")

    dates = pd.to_datetime(df[date_column_name], errors='coerce')
    bad_dates = dates.isna().to_numpy()
    if bad_dates.any():
        row = int(np.argmax(bad_dates))
        raise IngestionError(
            f"Date illisible ligne {row + 1}, colonne {date_column_name}",
            row=row + 1,
            column=date_column_name,
        )
    steps = dates.diff().iloc[1:]
    if (steps <= pd.Timedelta(0)).any():
        row = int(np.argmax((steps <= pd.Timedelta(0)).to_numpy())) + 1
        raise IngestionError(
            f"Dates non monotones ligne {row + 1}",
            row=row + 1,
            column=date_column_name,
        )

    numeric = df[feature_names].apply(pd.to_numeric, errors='coerce')
    values = numeric.to_numpy(dtype=np.float64)
    invalid = ~np.isfinite(values)
    if invalid.any():
        row, col = (int(i) for i in np.argwhere(invalid)[0])
        raise IngestionError(
            f"Cellule manquante ou illisible ligne {row + 1}, colonne {feature_names[col]}: "
            f"{df[feature_names[col]].iloc[row]!r}",
            row=row + 1,
            column=feature_names[col],
        )

    logger.info(f"Fichier CSV lu avec succès ({len(df)} lignes, {len(feature_names)} colonnes)")
    return SeriesDataset(
        values=values[np.newaxis, :, :],
        feature_names=feature_names,
        timestamps=df[date_column_name].tolist(),
    )
