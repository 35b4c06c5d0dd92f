"""
Module des pertes.
Perte contrastive (InfoNCE) sur négatifs temporels et inter-instances, perte de
distillation à étiquettes souples et combinaison pondérée par λ.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from timedistill.errors import DimensionError, ParameterError, UsageError
from timedistill.numeric import (
    Tensor,
    add,
    concat,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    no_tape,
    softmax,
    sub,
    sum_,
    transpose,
)

logger = logging.getLogger(__name__)

SOFTMAX_AXES = {"time": 1, "feature": 2}


@dataclass(frozen=True)
class LossReport:
    """Valeurs scalaires d'une itération et nombre de paires utilisées."""
    ssl: float
    sl: float
    joint: float
    lam: float
    n_positive: int
    n_negative: int

    def is_finite(self) -> bool:
        return bool(np.isfinite([self.ssl, self.sl, self.joint]).all())


def _check_pair(h_t: Tensor, h_s: Tensor) -> Tuple[int, int, int]:
    if h_t.ndim != 3 or h_t.shape != h_s.shape:
        raise DimensionError(f"Représentations incompatibles: {h_t.shape} et {h_s.shape}")
    return h_t.shape


def count_pairs(B: int, L: int, same_branch_negatives: bool = False) -> Tuple[int, int]:
    """(positifs, négatifs) pour un sens d'ancrage."""
    per_anchor = (B - 1) + (L - 1)
    if same_branch_negatives:
        per_anchor *= 2
    return B * L, B * L * per_anchor


def _anchored_infonce(anchor: Tensor, other: Tensor, temperature: float, same_branch_negatives: bool) -> Tensor:
    B, L, _ = anchor.shape
    # [B, L, L] : même instance, tous les horodatages de l'autre branche
    temporal = matmul(anchor, transpose(other, (0, 2, 1)))
    # [B, L, B] : même horodatage, toutes les instances de l'autre branche
    anchor_by_time = transpose(anchor, (1, 0, 2))
    other_by_time = transpose(other, (1, 0, 2))
    instance = transpose(matmul(anchor_by_time, transpose(other_by_time, (0, 2, 1))), (1, 0, 2))

    not_self = ~np.eye(B, dtype=bool)[:, None, :]
    blocks = [temporal, instance]
    masks = [np.ones((B, L, L), dtype=bool), np.broadcast_to(not_self, (B, L, B))]

    if same_branch_negatives:
        blocks.append(matmul(anchor, transpose(anchor, (0, 2, 1))))
        masks.append(np.broadcast_to(~np.eye(L, dtype=bool)[None], (B, L, L)))
        blocks.append(transpose(matmul(anchor_by_time, transpose(anchor_by_time, (0, 2, 1))), (1, 0, 2)))
        masks.append(np.broadcast_to(not_self, (B, L, B)))

    logits = mul(concat(blocks, axis=2), 1.0 / temperature)
    mask = np.concatenate(masks, axis=2)
    positive = mul(sum_(mul(anchor, other), axis=2), 1.0 / temperature)
    return mean(sub(logsumexp(logits, axis=2, mask=mask), positive))


def ssl_loss(
    h_t: Tensor,
    h_s: Tensor,
    temperature: float = 1.0,
    same_branch_negatives: bool = False,
) -> Tensor:
    """
    Perte contrastive sur le segment de chevauchement.

    Pour chaque ancre (i, t) : positif (h_t[i,t], h_s[i,t]) ; négatifs dans
    l'autre branche au même t pour j ≠ i, et pour la même instance à t′ ≠ t.
    Similarité = produit scalaire / τ. La perte est moyennée sur toutes les
    ancres puis sur les deux sens (ancre enseignant, ancre élève).

    Args:
        h_t: Représentations enseignant [B, L, K]
        h_s: Représentations élève [B, L, K]
        temperature: τ
        same_branch_negatives: Ajoute les négatifs de la branche de l'ancre

    Returns:
        Tenseur scalaire

    Raises:
        UsageError: Si aucun négatif n'existe (B = L = 1)
        ParameterError: Si τ n'est pas strictement positif
    """
    B, L, _ = _check_pair(h_t, h_s)
    if not temperature > 0:
        raise ParameterError(f"Température invalide: {temperature}")
    if B < 2 and L < 2:
        raise UsageError("Aucun négatif disponible: il faut B ≥ 2 ou L ≥ 2")

    teacher_anchored = _anchored_infonce(h_t, h_s, temperature, same_branch_negatives)
    student_anchored = _anchored_infonce(h_s, h_t, temperature, same_branch_negatives)
    return mul(add(teacher_anchored, student_anchored), 0.5)


def sl_loss(h_t_centered: Tensor, h_s: Tensor, axis: str = "time") -> Tensor:
    """
    Distillation à étiquettes souples : −Σ p^t log p^s.

    p^t est la softmax des sorties enseignant centrées, traitée comme une
    constante ; p^s celle de l'élève. Le long du temps (par défaut) la somme
    porte sur le chevauchement et la moyenne sur les instances et les canaux ;
    le long des caractéristiques, la moyenne porte sur les instances et le temps.

    Raises:
        UsageError: Axe de softmax dégénéré (longueur 1)
        ParameterError: Axe inconnu
    """
    _check_pair(h_t_centered, h_s)
    if axis not in SOFTMAX_AXES:
        raise ParameterError(f"Axe de softmax inconnu: {axis}")
    dim = SOFTMAX_AXES[axis]
    if h_s.shape[dim] < 2:
        raise UsageError(f"Softmax dégénérée: l'axe {axis} est de longueur {h_s.shape[dim]}")

    with no_tape():
        p_t = softmax(Tensor(h_t_centered.data), axis=dim)
    cross_entropy = mul(sum_(mul(Tensor(p_t.data), log_softmax(h_s, axis=dim)), axis=dim), -1.0)
    return mean(cross_entropy)


def joint_loss(ssl: Tensor, sl: Tensor, lam: float) -> Tensor:
    """
    λ·sl + (1 − λ)·ssl.

    Raises:
        ParameterError: Si λ est hors de [0, 1]
    """
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"Poids λ hors de [0, 1]: {lam}")
    return add(mul(sl, lam), mul(ssl, 1.0 - lam))


def make_report(
    ssl: Tensor,
    sl: Tensor,
    joint: Tensor,
    lam: float,
    shape: Tuple[int, int, int],
    same_branch_negatives: bool = False,
) -> LossReport:
    B, L, _ = shape
    n_positive, n_negative = count_pairs(B, L, same_branch_negatives)
    return LossReport(
        ssl=ssl.item(),
        sl=sl.item(),
        joint=joint.item(),
        lam=float(lam),
        n_positive=n_positive,
        n_negative=n_negative,
    )
