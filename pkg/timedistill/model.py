"""
Module du modèle.
Tête de projection, encodeur à convolutions causales dilatées, couche de centrage
et état enseignant/élève avec mise à jour par moyenne mobile (EMA).
"""

import logging
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from timedistill.augment import MaskPlan, bernoulli_mask
from timedistill.config import CONV_WIDTH, DEPTH, HIDDEN_DIMS, KERNEL_SIZE, REPR_DIMS
from timedistill.errors import DimensionError, ParameterError, UsageError
from timedistill.numeric import (
    ParamSet,
    Tensor,
    add,
    dilated_causal_conv1d,
    gelu,
    l2_normalize,
    linear_forward,
    mul,
    no_tape,
    relu,
    sub,
    transpose,
)

logger = logging.getLogger(__name__)

# Représentations d'une branche, [B, L, K]
ReprBatch = Tensor


@dataclass(frozen=True)
class ModelDims:
    """Dimensions du modèle : C, largeur MLP, K, Q blocs, noyau k, largeur des convolutions."""
    input_dims: int
    hidden_dims: int = HIDDEN_DIMS
    repr_dims: int = REPR_DIMS
    depth: int = DEPTH
    kernel_size: int = KERNEL_SIZE
    width: int = CONV_WIDTH

    def validate(self) -> None:
        for name, value in vars(self).items():
            if int(value) != value or value < 1:
                raise ParameterError(f"Dimension invalide {name}={value}")


@dataclass
class TeacherStudentState:
    """Paramètres θ_t et θ_s, centre c, momentum m et poids λ."""
    teacher: ParamSet
    student: ParamSet
    center: np.ndarray
    momentum: float
    loss_weight: float
    dims: ModelDims
    iteration: int = 0

    def snapshot(self) -> "TeacherStudentState":
        """Copie indépendante, utilisable en lecture pendant l'évaluation."""
        return TeacherStudentState(
            teacher=self.teacher.copy(),
            student=self.student.copy(),
            center=self.center.copy(),
            momentum=self.momentum,
            loss_weight=self.loss_weight,
            dims=self.dims,
            iteration=self.iteration,
        )


class ProjectionHead:
    """
    MLP à trois couches (C → hidden → hidden → hidden, ReLU entre les couches),
    normalisation L2, puis couche linéaire à poids normalisés vers K.
    """

    def __init__(self, params: ParamSet, dims: ModelDims):
        self.params = params
        self.dims = dims

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"proj.{name}"]


class EncoderStack:
    """Q blocs résiduels GELU → DilatedConv → GELU → DilatedConv, dilatation 2^p."""

    def __init__(self, params: ParamSet, dims: ModelDims):
        self.params = params
        self.dims = dims

    def __getitem__(self, name: str) -> Tensor:
        return self.params[f"enc.{name}"]


def _block_name(p: int) -> str:
    return f"block{p:02d}"


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _bias(rng: np.random.Generator, size: int, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=size)


def _init_branch(rng: np.random.Generator, dims: ModelDims) -> ParamSet:
    params = ParamSet()
    C, H, K, W, k = dims.input_dims, dims.hidden_dims, dims.repr_dims, dims.width, dims.kernel_size

    for name, fan_in, fan_out in (("l1", C, H), ("l2", H, H), ("l3", H, H)):
        params.add(f"proj.{name}.W", _kaiming(rng, (fan_in, fan_out), fan_in))
        params.add(f"proj.{name}.b", _bias(rng, fan_out, fan_in))
    V = _kaiming(rng, (H, K), H)
    params.add("proj.out.V", V)
    # g initialisé à ‖V‖ par colonne : W = V au départ
    params.add("proj.out.g", np.linalg.norm(V, axis=0))
    params.add("proj.out.b", _bias(rng, K, H))

    params.add("enc.in.W", _kaiming(rng, (K, W), K))
    params.add("enc.in.b", _bias(rng, W, K))
    for p in range(dims.depth):
        for conv in ("conv1", "conv2"):
            prefix = f"enc.{_block_name(p)}.{conv}"
            params.add(f"{prefix}.kernel", _kaiming(rng, (W, W, k), W * k))
            params.add(f"{prefix}.bias", _bias(rng, W, W * k))
    params.add("enc.out.W", _kaiming(rng, (W, K), W))
    params.add("enc.out.b", _bias(rng, K, W))
    return params


def init_params(
    seed: int,
    dims: ModelDims,
    momentum: float = 0.999,
    loss_weight: float = 0.5,
    independent_teacher: bool = False,
) -> TeacherStudentState:
    """
    Initialise l'état enseignant/élève.

    Poids en Kaiming (variance 2/fan_in), biais uniformes sur ±1/√fan_in,
    enseignant copié de l'élève, centre nul.

    Args:
        seed: Graine
        dims: Dimensions du modèle
        momentum: m
        loss_weight: λ
        independent_teacher: Enseignant initialisé séparément (variante sans momentum)

    Raises:
        ParameterError: Dimensions non positives
    """
    dims.validate()
    rng = np.random.default_rng(seed)
    student = _init_branch(rng, dims)
    teacher = _init_branch(rng, dims) if independent_teacher else student.copy()
    logger.info(
        f"Modèle initialisé: {student.num_values()} paramètres par branche "
        f"(C={dims.input_dims}, K={dims.repr_dims}, Q={dims.depth}, k={dims.kernel_size})"
    )
    return TeacherStudentState(
        teacher=teacher,
        student=student,
        center=np.zeros(dims.repr_dims),
        momentum=float(momentum),
        loss_weight=float(loss_weight),
        dims=dims,
    )


def receptive_field(dims: ModelDims, upto_block: Optional[int] = None) -> int:
    """Champ réceptif cumulé après le bloc p (deux convolutions de dilatation 2^p par bloc)."""
    p = dims.depth - 1 if upto_block is None else upto_block
    return 2 * (dims.kernel_size - 1) * (2 ** (p + 1) - 1) + 1


def project(head: ProjectionHead, x: Tensor, return_normalized: bool = False):
    """
    Applique la tête de projection horodatage par horodatage.

    Args:
        head: Tête de projection
        x: Entrée [B, L, C]
        return_normalized: Renvoie aussi la sortie de l'étape L2 (avant la couche finale)

    Returns:
        z [B, L, K] (et la sortie normalisée si demandé)

    Raises:
        DimensionError: Si le nombre de canaux ne correspond pas
    """
    if x.ndim != 3 or x.shape[-1] != head.dims.input_dims:
        raise DimensionError(f"Projection: entrée {x.shape}, {head.dims.input_dims} canaux attendus")
    h = relu(linear_forward(x, head["l1.W"], head["l1.b"]))
    h = relu(linear_forward(h, head["l2.W"], head["l2.b"]))
    h = linear_forward(h, head["l3.W"], head["l3.b"])
    normalized = l2_normalize(h, axis=-1)
    weight = mul(l2_normalize(head["out.V"], axis=0), head["out.g"])
    z = linear_forward(normalized, weight, head["out.b"])
    if return_normalized:
        return z, normalized
    return z


def _residual_block(enc: EncoderStack, x: Tensor, p: int) -> Tensor:
    prefix = _block_name(p)
    dilation = 2 ** p
    y = gelu(x)
    y = dilated_causal_conv1d(y, enc[f"{prefix}.conv1.kernel"], dilation, enc[f"{prefix}.conv1.bias"])
    y = gelu(y)
    y = dilated_causal_conv1d(y, enc[f"{prefix}.conv2.kernel"], dilation, enc[f"{prefix}.conv2.bias"])
    return add(x, y)


def encode(enc: EncoderStack, z: Tensor) -> Tensor:
    """
    Encodeur causal : projection ponctuelle vers la largeur interne, Q blocs
    résiduels, projection ponctuelle vers K.

    Args:
        enc: Encodeur
        z: Entrée [B, L, K]

    Returns:
        h [B, L, K]

    Raises:
        DimensionError: Si le dernier axe n'est pas K
    """
    if z.ndim != 3 or z.shape[-1] != enc.dims.repr_dims:
        raise DimensionError(f"Encodeur: entrée {z.shape}, dernier axe {enc.dims.repr_dims} attendu")
    h = linear_forward(z, enc["in.W"], enc["in.b"])
    h = transpose(h, (0, 2, 1))
    for p in range(enc.dims.depth):
        h = _residual_block(enc, h, p)
    h = transpose(h, (0, 2, 1))
    return linear_forward(h, enc["out.W"], enc["out.b"])


def branch_forward(params: ParamSet, dims: ModelDims, x: Tensor) -> ReprBatch:
    """Projection puis encodage, sans masque."""
    return encode(EncoderStack(params, dims), project(ProjectionHead(params, dims), x))


def teacher_forward(
    state: TeacherStudentState,
    raw_crop: np.ndarray,
    keep_prob: float,
    rng: np.random.Generator,
    on_tape: bool = False,
    latent_mask: bool = True,
) -> ReprBatch:
    """
    Branche enseignant : projection, masque de Bernoulli dans l'espace latent,
    encodage. Exécutée hors bande par défaut (l'enseignant ne reçoit aucun gradient).

    Args:
        state: État courant
        raw_crop: Recadrage [B, L, C], brut ou déjà masqué en entrée
        keep_prob: ω du masque latent
        rng: Générateur
        on_tape: Enregistre le calcul (variante à deux encodeurs indépendants)
        latent_mask: False quand le masque a été appliqué avant la projection
    """
    context = nullcontext() if on_tape else no_tape()
    with context:
        z = project(ProjectionHead(state.teacher, state.dims), Tensor(raw_crop))
        if latent_mask:
            z = bernoulli_mask(z, MaskPlan(keep_prob), axis=1, rng=rng)
        return encode(EncoderStack(state.teacher, state.dims), z)


def student_forward(
    state: TeacherStudentState,
    masked_crop: np.ndarray,
    keep_prob: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
) -> ReprBatch:
    """
    Branche élève : projection puis encodage, enregistrés sur la bande active.

    Avec keep_prob, le masque de Bernoulli est appliqué dans l'espace latent
    (entre projection et encodeur) plutôt qu'en entrée.
    """
    if keep_prob is None:
        return branch_forward(state.student, state.dims, Tensor(masked_crop))
    z = project(ProjectionHead(state.student, state.dims), Tensor(masked_crop))
    z = bernoulli_mask(z, MaskPlan(keep_prob), axis=1, rng=rng)
    return encode(EncoderStack(state.student, state.dims), z)


def update_center(state: TeacherStudentState, h_t: ReprBatch) -> np.ndarray:
    """
    Recalcule c comme la moyenne des sorties enseignant sur les axes lot et temps.

    Raises:
        UsageError: Lot vide
    """
    if h_t.ndim != 3 or h_t.shape[0] == 0 or h_t.shape[1] == 0:
        raise UsageError(f"Lot vide pour le centrage: {h_t.shape}")
    state.center = h_t.data.mean(axis=(0, 1))
    return state.center


def apply_center(state: TeacherStudentState, h_t: ReprBatch) -> ReprBatch:
    """h_t − c, diffusé sur le lot et le temps."""
    return sub(h_t, Tensor(state.center))


def ema_update(state: TeacherStudentState) -> TeacherStudentState:
    """
    θ_t ← m·θ_t + (1 − m)·θ_s, θ_s inchangé.

    Raises:
        ParameterError: Si m est hors de [0, 1)
    """
    m = state.momentum
    if not 0.0 <= m < 1.0:
        raise ParameterError(f"Coefficient de momentum hors de [0, 1): {m}")
    student = state.student.arrays()
    state.teacher = state.teacher.replace(
        {name: m * tensor.data + (1.0 - m) * student[name] for name, tensor in state.teacher.items()}
    )
    return state


def parameter_drift(state: TeacherStudentState) -> Dict[str, float]:
    """max|θ_t − θ_s| par paramètre (diagnostic)."""
    student = state.student.arrays()
    return {name: float(np.max(np.abs(t.data - student[name]))) for name, t in state.teacher.items()}
