"""
Générateur de séries synthétiques pour les tests à petite échelle.
Chaque canal est une somme de sinusoïdes plus un bruit AR(1).
"""

import logging
from pathlib import Path

import numpy as np
import pandas as pd

from timedistill.config import SyntheticSpec
from timedistill.errors import ParameterError
from timedistill.loader import SeriesDataset

logger = logging.getLogger(__name__)


def synth_generate(seed: int, N: int, T_total: int, C: int, spec: SyntheticSpec) -> SeriesDataset:
    """
    Génère un dataset synthétique déterministe.

    Args:
        seed: Graine du générateur
        N: Nombre d'instances
        T_total: Longueur de chaque série
        C: Nombre de canaux
        spec: Périodes, amplitudes, écart-type du bruit et coefficient AR

    Returns:
        Dataset de forme [N, T_total, C]

    Raises:
        ParameterError: Valeurs non finies, bruit négatif ou |coefficient AR| ≥ 1
    """
    periods = np.asarray(spec.periods, dtype=np.float64)
    amplitudes = np.asarray(spec.amplitudes, dtype=np.float64)
    if periods.shape != amplitudes.shape:
        raise ParameterError("Autant d'amplitudes que de périodes sont requises")
    if not (np.all(np.isfinite(periods)) and np.all(np.isfinite(amplitudes))
            and np.isfinite(spec.noise_std) and np.isfinite(spec.ar_coef)):
        raise ParameterError("Paramètres synthétiques non finis")
    if np.any(periods <= 0):
        raise ParameterError("Les périodes doivent être positives")
    if spec.noise_std < 0:
        raise ParameterError(f"Écart-type du bruit négatif: {spec.noise_std}")
    if abs(spec.ar_coef) >= 1:
        raise ParameterError(f"Coefficient AR non stationnaire: {spec.ar_coef}")
    if N < 1 or T_total < 1 or C < 1:
        raise ParameterError(f"Dimensions invalides: N={N}, T_total={T_total}, C={C}")

    rng = np.random.default_rng(seed)
    t = np.arange(T_total, dtype=np.float64)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(N, C, len(periods)))
    angles = 2.0 * np.pi * t[None, None, None, :] / periods[None, None, :, None] + phases[..., None]
    seasonal = np.einsum("k,nckt->ntc", amplitudes, np.sin(angles))

    noise = np.zeros((N, T_total, C))
    if spec.noise_std > 0:
        shocks = rng.normal(0.0, spec.noise_std, size=(N, T_total, C))
        # état initial tiré dans la loi stationnaire
        noise[:, 0, :] = shocks[:, 0, :] / np.sqrt(1.0 - spec.ar_coef ** 2)
        for step in range(1, T_total):
            noise[:, step, :] = spec.ar_coef * noise[:, step - 1, :] + shocks[:, step, :]

    logger.info(f"Série synthétique générée: N={N}, T={T_total}, C={C}, graine {seed}")
    return SeriesDataset(
        values=seasonal + noise,
        feature_names=[f"ch{c}" for c in range(C)],
    )


def from_spec(spec: SyntheticSpec) -> SeriesDataset:
    return synth_generate(spec.seed, spec.instances, spec.length, spec.channels, spec)


def write_csv(ds: SeriesDataset, path: Path, date_column_name: str = "date") -> Path:
    """
    Écrit la première instance au format lu par loader.load_csv (dates horaires).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(ds.values[0], columns=ds.feature_names)
    df.insert(0, date_column_name, pd.date_range("2016-07-01", periods=ds.length, freq="h").strftime("%Y-%m-%d %H:%M:%S"))
    df.to_csv(path, index=False)
    logger.info(f"CSV synthétique écrit: {path}")
    return path
