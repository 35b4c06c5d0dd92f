"""
Module d'augmentation des données.
Double recadrage avec chevauchement et masquage de Bernoulli par horodatage.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Tuple, Union

import numpy as np

from timedistill.errors import DimensionError, ParameterError, SizingError
from timedistill.numeric import Tensor, mul

logger = logging.getLogger(__name__)

ArrayOrTensor = Union[np.ndarray, Tensor]

RAW = "raw"
LATENT = "latent"

# Espace masqué (enseignant, élève) pour chaque position de masque
MASK_POSITIONS: Dict[str, Tuple[str, str]] = {
    "hybrid": (LATENT, RAW),
    "pre": (RAW, RAW),
    "after": (LATENT, LATENT),
    "reverse": (RAW, LATENT),
}


@dataclass(frozen=True)
class CropPair:
    """
    Deux sous-séries [a1, b1) et [a2, b2) d'une même fenêtre.

    Le chevauchement est [a2, b1), de longueur L = b1 − a2 ≥ 1.
    """
    a1: int
    b1: int
    a2: int
    b2: int

    @property
    def overlap(self) -> Tuple[int, int]:
        return self.a2, self.b1

    @property
    def overlap_len(self) -> int:
        return self.b1 - self.a2

    def is_valid(self, window_len: int) -> bool:
        return 0 <= self.a1 <= self.a2 < self.b1 <= self.b2 <= window_len

    def teacher_overlap(self) -> Tuple[int, int]:
        """Chevauchement exprimé dans les coordonnées du recadrage [a1, b1)."""
        return self.a2 - self.a1, self.b1 - self.a1

    def student_overlap(self) -> Tuple[int, int]:
        """Chevauchement exprimé dans les coordonnées du recadrage [a2, b2)."""
        return 0, self.b1 - self.a2


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Probabilité de conservation ω et, une fois tiré, le masque binaire ρ."""
    keep_prob: float
    seed: Optional[int] = None
    rho: Optional[np.ndarray] = None


@lru_cache(maxsize=16)
def _overlap_table(window_len: int) -> Tuple[np.ndarray, np.ndarray]:
    # Chaque couple (a2, b1) admet (a2 + 1)·(W − b1 + 1) complétions (a1, b2)
    a2, b1 = np.triu_indices(window_len + 1, k=1)
    pairs = np.stack([a2, b1], axis=1)
    weights = (a2 + 1) * (window_len - b1 + 1)
    return pairs, weights / weights.sum()


def sample_crop_pair(
    window_len: int,
    rng: np.random.Generator,
    overlap_len: Optional[int] = None,
) -> CropPair:
    """
    Tire uniformément un couple de recadrages qui se chevauchent.

    Construction directe sans rejet : (a2, b1) d'abord, pondéré par le nombre
    de complétions, puis a1 ≤ a2 et b2 ≥ b1 uniformément. Avec overlap_len,
    le tirage est uniforme parmi les couples où b1 − a2 = overlap_len.

    Raises:
        SizingError: Si window_len < 2 ou overlap_len hors de [1, window_len]
    """
    if window_len < 2:
        raise SizingError(f"Fenêtre trop courte pour un double recadrage: {window_len}")
    pairs, probs = _overlap_table(int(window_len))
    if overlap_len is not None:
        if not 1 <= overlap_len <= window_len:
            raise SizingError(f"Chevauchement {overlap_len} impossible dans une fenêtre de {window_len}")
        keep = pairs[:, 1] - pairs[:, 0] == overlap_len
        pairs, probs = pairs[keep], probs[keep] / probs[keep].sum()
    a2, b1 = (int(v) for v in pairs[rng.choice(len(pairs), p=probs)])
    a1 = int(rng.integers(0, a2 + 1))
    b2 = int(rng.integers(b1, window_len + 1))
    return CropPair(a1=a1, b1=b1, a2=a2, b2=b2)


def _check_keep_prob(keep_prob: float) -> None:
    if not 0.0 < keep_prob <= 1.0:
        raise ParameterError(f"Probabilité de conservation hors de (0, 1]: {keep_prob}")


def draw_mask(keep_prob: float, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """ρ ~ Bernoulli(ω), en 0/1 float."""
    _check_keep_prob(keep_prob)
    return (rng.random(shape) < keep_prob).astype(np.float64)


def bernoulli_mask(
    x: ArrayOrTensor,
    plan: MaskPlan,
    axis: int = 1,
    rng: Optional[np.random.Generator] = None,
) -> ArrayOrTensor:
    """
    Masque chaque horodatage avec probabilité 1 − ω.

    La même décision s'applique à tous les canaux d'un horodatage : ρ a la
    forme x.shape[:axis + 1].

    Args:
        x: Tableau ou tenseur
        plan: ω et éventuellement un masque déjà tiré
        axis: Axe temporel
        rng: Générateur (sinon default_rng(plan.seed))

    Raises:
        ParameterError: Si ω est hors de (0, 1]
        DimensionError: Si le masque fourni n'a pas la bonne forme
    """
    _check_keep_prob(plan.keep_prob)
    axis = axis % len(x.shape)
    shape = tuple(x.shape[:axis + 1])
    rho = plan.rho
    if rho is None:
        generator = rng if rng is not None else np.random.default_rng(plan.seed)
        rho = draw_mask(plan.keep_prob, shape, generator)
    elif tuple(rho.shape) != shape:
        raise DimensionError(f"Masque de forme {rho.shape}, attendu {shape}")

    factor = np.asarray(rho, dtype=np.float64).reshape(shape + (1,) * (len(x.shape) - axis - 1))
    if isinstance(x, Tensor):
        return mul(x, factor)
    return np.asarray(x, dtype=np.float64) * factor


def mask_spaces(mask_position: str) -> Tuple[str, str]:
    """
    Espaces masqués (enseignant, élève) : "raw" avant la projection, "latent" après.

    Raises:
        ParameterError: Position inconnue
    """
    if mask_position not in MASK_POSITIONS:
        raise ParameterError(f"Position de masque inconnue: {mask_position} (choix: {tuple(MASK_POSITIONS)})")
    return MASK_POSITIONS[mask_position]


def augment_for_branches(
    window: np.ndarray,
    crop: CropPair,
    keep_prob: float,
    rng: np.random.Generator,
    mask_position: str = "hybrid",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Construit les entrées des deux branches à partir d'une fenêtre.

    Par défaut ("hybrid") l'enseignant reçoit [a1, b1) brut (son masque est
    appliqué après la projection, dans le modèle) et l'élève reçoit [a2, b2)
    masqué dans l'espace d'entrée. Les autres positions déplacent les masques
    selon MASK_POSITIONS ; une branche masquée dans l'espace latent reçoit
    son recadrage brut.

    Args:
        window: Fenêtre [..., W, C]
        crop: Couple de recadrages valide pour W
        keep_prob: ω
        rng: Générateur
        mask_position: Clé de MASK_POSITIONS

    Returns:
        Tuple (entrée enseignant, entrée élève)
    """
    teacher_space, student_space = mask_spaces(mask_position)
    time_axis = window.ndim - 2
    if not crop.is_valid(window.shape[time_axis]):
        raise SizingError(f"Recadrage {crop} invalide pour une fenêtre de longueur {window.shape[time_axis]}")
    teacher_crop = np.array(window[..., crop.a1:crop.b1, :], dtype=np.float64)
    student_crop = np.array(window[..., crop.a2:crop.b2, :], dtype=np.float64)
    if teacher_space == RAW:
        teacher_crop = bernoulli_mask(teacher_crop, MaskPlan(keep_prob), axis=time_axis, rng=rng)
    if student_space == RAW:
        student_crop = bernoulli_mask(student_crop, MaskPlan(keep_prob), axis=time_axis, rng=rng)
    return teacher_crop, student_crop
