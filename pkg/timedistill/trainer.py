"""
Module d'entraînement.
Boucle de pré-entraînement auto-supervisé : double recadrage, branches
enseignant/élève, perte jointe, descente de gradient sur l'élève et mise à jour
EMA de l'enseignant.
"""

import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from timedistill.augment import LATENT, MASK_POSITIONS, CropPair, augment_for_branches, mask_spaces, sample_crop_pair
from timedistill.checkpoint_manager import CHECKPOINT_SUFFIX, Checkpoint, save_checkpoint
from timedistill.config import (
    BATCH_SIZE,
    CONV_WIDTH,
    CROP_WINDOW,
    DEPTH,
    HIDDEN_DIMS,
    ITERATIONS,
    KEEP_PROB,
    KERNEL_SIZE,
    LEARNING_RATE,
    LOSS_WEIGHT,
    MOMENTUM,
    REPR_DIMS,
    TEMPERATURE,
    ConfigValidationError,
)
from timedistill.errors import NumericError, SizingError, TimedistillError, UsageError
from timedistill.loader import SeriesDataset
from timedistill.loss import SOFTMAX_AXES, LossReport, joint_loss, make_report, sl_loss, ssl_loss
from timedistill.model import (
    ModelDims,
    TeacherStudentState,
    apply_center,
    branch_forward,
    ema_update,
    init_params,
    student_forward,
    teacher_forward,
    update_center,
)
from timedistill.numeric import (
    AdamOptimizer,
    GradTape,
    ParamSet,
    Tensor,
    backward,
    concat,
    l2_normalize,
    no_tape,
    sgd_step,
    slice_axis,
)
from timedistill.preprocessing import split_bounds

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
MIN_OVERLAP = 2


class TrainingDivergedError(TimedistillError):
    """Exception levée lorsqu'une perte devient non finie pendant l'entraînement."""

    def __init__(self, iteration: int, report: Optional[LossReport] = None, detail: str = ""):
        message = f"Divergence à l'itération {iteration}"
        if report is not None:
            message += f" (ssl={report.ssl}, sl={report.sl}, joint={report.joint})"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.iteration = iteration
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparamètres du pré-entraînement (section `train` du JSON)."""
    iterations: int = ITERATIONS
    batch_size: int = BATCH_SIZE
    lr: float = LEARNING_RATE
    lam: float = LOSS_WEIGHT
    momentum: float = MOMENTUM
    keep_prob: float = KEEP_PROB
    temperature: float = TEMPERATURE
    crop_window: int = CROP_WINDOW
    hidden_dims: int = HIDDEN_DIMS
    repr_dims: int = REPR_DIMS
    depth: int = DEPTH
    kernel_size: int = KERNEL_SIZE
    width: int = CONV_WIDTH
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 20
    optimizer: str = "sgd"
    sl_axis: str = "time"
    mask_position: str = "hybrid"
    same_branch_negatives: bool = False
    momentum_teacher: bool = True
    use_center: bool = True
    use_supervised: bool = True
    use_contrastive: bool = True

    def model_dims(self, input_dims: int) -> ModelDims:
        return ModelDims(
            input_dims=input_dims,
            hidden_dims=self.hidden_dims,
            repr_dims=self.repr_dims,
            depth=self.depth,
            kernel_size=self.kernel_size,
            width=self.width,
        )

    def effective_lambda(self) -> float:
        """λ appliqué : 0 sans distillation, 1 sans contraste."""
        if not self.use_supervised:
            return 0.0
        if not self.use_contrastive:
            return 1.0
        return float(self.lam)

    def validate(self) -> None:
        """
        Vérifie types et plages de chaque champ.

        Raises:
            ConfigValidationError: Au premier champ invalide (clé train.<champ>)
        """
        for f in fields(self):
            value = getattr(self, f.name)
            key = f"train.{f.name}"
            if f.type is bool and not isinstance(value, bool):
                raise ConfigValidationError(key, "booléen attendu")
            if f.type is int and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigValidationError(key, "entier attendu")
            if f.type is float and (isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigValidationError(key, "nombre attendu")

        checks = [
            ("iterations", self.iterations >= 1, "doit être ≥ 1"),
            ("batch_size", self.batch_size >= 1, "doit être ≥ 1"),
            ("lr", self.lr > 0, "doit être > 0"),
            ("lam", 0.0 <= self.lam <= 1.0, "doit être dans [0, 1]"),
            ("momentum", 0.0 <= self.momentum < 1.0, "doit être dans [0, 1)"),
            ("keep_prob", 0.0 < self.keep_prob <= 1.0, "doit être dans (0, 1]"),
            ("temperature", self.temperature > 0, "doit être > 0"),
            ("crop_window", self.crop_window >= MIN_OVERLAP, f"doit être ≥ {MIN_OVERLAP}"),
            ("hidden_dims", self.hidden_dims >= 1, "doit être ≥ 1"),
            ("repr_dims", self.repr_dims >= 1, "doit être ≥ 1"),
            ("depth", self.depth >= 1, "doit être ≥ 1"),
            ("kernel_size", self.kernel_size >= 1, "doit être ≥ 1"),
            ("width", self.width >= 1, "doit être ≥ 1"),
            ("seed", self.seed >= 0, "doit être ≥ 0"),
            ("checkpoint_every", self.checkpoint_every >= 0, "doit être ≥ 0"),
            ("log_every", self.log_every >= 1, "doit être ≥ 1"),
            ("optimizer", self.optimizer in OPTIMIZERS, f"valeurs possibles {OPTIMIZERS}"),
            ("sl_axis", self.sl_axis in SOFTMAX_AXES, f"valeurs possibles {tuple(SOFTMAX_AXES)}"),
            ("mask_position", self.mask_position in MASK_POSITIONS, f"valeurs possibles {tuple(MASK_POSITIONS)}"),
            ("use_contrastive", self.use_supervised or self.use_contrastive, "au moins une perte doit rester active"),
        ]
        for name, ok, message in checks:
            if not ok:
                raise ConfigValidationError(f"train.{name}", message)


@dataclass
class TrainTrace:
    """Rapports de perte par itération, durées et dernier point de contrôle."""
    reports: List[LossReport] = field(default_factory=list)
    seconds: List[Tuple[int, float]] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.reports)

    def joint(self) -> np.ndarray:
        return np.array([r.joint for r in self.reports])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "iteration": np.arange(1, len(self.reports) + 1),
            "ssl": [r.ssl for r in self.reports],
            "sl": [r.sl for r in self.reports],
            "joint": [r.joint for r in self.reports],
        })

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def write_timings(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.seconds, columns=["iteration", "seconds"]).to_csv(path, index=False)
        return path


def complexity_terms(crop_len: int, C: int, K: int, L: int) -> Dict[str, int]:
    """Termes de coût par composant pour un recadrage de longueur crop_len et un chevauchement L."""
    return {
        "projection": crop_len * C * K,
        "augmentation": crop_len,
        "momentum_and_distillation": K * L,
        "contrastive": K * L * L,
    }


def training_bounds(ds: SeriesDataset) -> Tuple[int, int]:
    return split_bounds(ds, "train") if ds.split is not None else (0, ds.length)


def sample_windows(ds: SeriesDataset, window_len: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """
    Tire batch_size fenêtres indépendantes de longueur window_len dans le split d'entraînement.

    Raises:
        SizingError: Si le split d'entraînement est plus court que la fenêtre
    """
    start, end = training_bounds(ds)
    if end - start < window_len:
        raise SizingError(
            f"Split d'entraînement trop court ({end - start}) pour une fenêtre de {window_len}"
        )
    instances = rng.integers(0, ds.n_instances, size=batch_size)
    offsets = rng.integers(start, end - window_len + 1, size=batch_size)
    return np.stack([ds.values[n, o:o + window_len] for n, o in zip(instances, offsets)])


def draw_crop(window_len: int, rng: np.random.Generator) -> CropPair:
    """Couple de recadrages dont le chevauchement compte au moins deux horodatages."""
    while True:
        crop = sample_crop_pair(window_len, rng)
        if crop.overlap_len >= MIN_OVERLAP:
            return crop


def draw_crops(window_len: int, batch_size: int, rng: np.random.Generator) -> List[CropPair]:
    """
    Un couple de recadrages par fenêtre. Les positions varient d'une fenêtre
    à l'autre, la longueur de chevauchement L est commune au lot.
    """
    first = draw_crop(window_len, rng)
    return [first] + [
        sample_crop_pair(window_len, rng, overlap_len=first.overlap_len) for _ in range(batch_size - 1)
    ]


def _crop_groups(crops: Union[CropPair, Sequence[CropPair]], batch_size: int) -> List[Tuple[CropPair, np.ndarray]]:
    # Les fenêtres de même recadrage passent ensemble dans les branches
    if isinstance(crops, CropPair):
        crops = [crops] * batch_size
    if len(crops) != batch_size:
        raise UsageError(f"{len(crops)} recadrages pour un lot de {batch_size} fenêtres")
    if len({c.overlap_len for c in crops}) != 1:
        raise UsageError("Les recadrages d'un lot doivent partager la longueur de chevauchement")
    groups: Dict[CropPair, List[int]] = {}
    for i, crop in enumerate(crops):
        groups.setdefault(crop, []).append(i)
    return [(crop, np.array(indices)) for crop, indices in groups.items()]


def _stack(parts: List[Tensor]) -> Tensor:
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def branch_representations(
    state: TeacherStudentState,
    windows: np.ndarray,
    crops: Union[CropPair, Sequence[CropPair]],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Augmentation, branches enseignant/élève et découpage sur le chevauchement,
    à appeler sous la bande active. Met à jour le centre si use_center.

    Args:
        crops: Un couple par fenêtre (ou un seul, partagé par tout le lot)

    Returns:
        Tuple (h_t, h_t centré, h_s), chacun [B, L, K]
    """
    independent = not cfg.momentum_teacher
    teacher_space, student_space = mask_spaces(cfg.mask_position)
    student_keep = cfg.keep_prob if student_space == LATENT else None

    teacher_parts, student_parts = [], []
    for crop, indices in _crop_groups(crops, len(windows)):
        teacher_in, student_in = augment_for_branches(windows[indices], crop, cfg.keep_prob, rng, cfg.mask_position)
        t0, t1 = crop.teacher_overlap()
        s0, s1 = crop.student_overlap()
        h_t_full = teacher_forward(
            state, teacher_in, cfg.keep_prob, rng, on_tape=independent, latent_mask=teacher_space == LATENT
        )
        with nullcontext() if independent else no_tape():
            teacher_parts.append(slice_axis(h_t_full, 1, t0, t1))
        student_parts.append(slice_axis(student_forward(state, student_in, student_keep, rng), 1, s0, s1))

    with nullcontext() if independent else no_tape():
        h_t = _stack(teacher_parts)
    h_s = _stack(student_parts)
    if cfg.use_center:
        update_center(state, h_t)
        with no_tape():
            h_t_centered = apply_center(state, h_t)
    else:
        h_t_centered = Tensor(h_t.data)
    return h_t, h_t_centered, h_s


def _make_optimizer(cfg: TrainConfig) -> Callable[[ParamSet, Dict[str, np.ndarray]], ParamSet]:
    if cfg.optimizer == "adam":
        return AdamOptimizer(cfg.lr).step
    return lambda params, grads: sgd_step(params, grads, cfg.lr)


def _strip(grads: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {name[len(prefix):]: g for name, g in grads.items() if name.startswith(prefix)}


def train_step(
    state: TeacherStudentState,
    windows: np.ndarray,
    crops: Union[CropPair, Sequence[CropPair]],
    cfg: TrainConfig,
    rng: np.random.Generator,
    student_step: Callable,
    teacher_step: Optional[Callable] = None,
) -> Tuple[LossReport, Dict[str, np.ndarray]]:
    """
    Une itération : augmentation, branches, perte jointe, mise à jour des deux encodeurs.

    Returns:
        Rapport de pertes et gradients de l'élève
    """
    independent = not cfg.momentum_teacher
    lam = cfg.effective_lambda()

    tape = GradTape()
    tape.watch(state.student, "student.")
    if independent:
        tape.watch(state.teacher, "teacher.")
    with tape:
        h_t, h_t_centered, h_s = branch_representations(state, windows, crops, cfg, rng)
        ssl = ssl_loss(h_t, h_s, cfg.temperature, cfg.same_branch_negatives)
        sl = sl_loss(h_t_centered, h_s, axis=cfg.sl_axis)
        joint = joint_loss(ssl, sl, lam)

    report = make_report(ssl, sl, joint, lam, h_s.shape, cfg.same_branch_negatives)
    grads = backward(tape, joint)
    student_grads = _strip(grads, "student.")
    state.student = student_step(state.student, student_grads)
    if independent:
        state.teacher = teacher_step(state.teacher, _strip(grads, "teacher."))
    else:
        ema_update(state)
    return report, student_grads


def pretrain(
    cfg: TrainConfig,
    ds: SeriesDataset,
    resume: Optional[Checkpoint] = None,
    out_dir: Optional[Path] = None,
) -> Tuple[TeacherStudentState, TrainTrace]:
    """
    Pré-entraîne le couple enseignant/élève.

    Args:
        cfg: Hyperparamètres validés
        ds: Dataset découpé et normalisé (le split d'entraînement est utilisé)
        resume: Point de contrôle à reprendre (état, itération, générateur)
        out_dir: Répertoire des points de contrôle et de la trace (aucune écriture si None)

    Returns:
        Tuple (état final, trace)

    Raises:
        SizingError: Split d'entraînement plus court que la fenêtre
        TrainingDivergedError: Perte non finie
    """
    cfg.validate()
    dims = cfg.model_dims(ds.n_channels)
    rng = np.random.default_rng(cfg.seed)
    trace = TrainTrace()

    if resume is not None:
        if resume.state.dims != dims:
            raise UsageError(f"Dimensions du point de contrôle {resume.state.dims} différentes de {dims}")
        if resume.rng_state is None:
            raise UsageError("Le point de contrôle ne contient pas l'état du générateur")
        state = resume.state
        rng.bit_generator.state = resume.rng_state
        trace.reports = list(resume.reports)
        start_iteration = resume.iteration
        logger.info(f"Reprise de l'entraînement à l'itération {start_iteration}")
    else:
        state = init_params(
            cfg.seed,
            dims,
            momentum=cfg.momentum,
            loss_weight=cfg.lam,
            independent_teacher=not cfg.momentum_teacher,
        )
        start_iteration = 0

    terms = complexity_terms(cfg.crop_window, dims.input_dims, dims.repr_dims, cfg.crop_window)
    logger.info(f"Coûts par composant (pire cas L = fenêtre): {terms}")

    student_step = _make_optimizer(cfg)
    teacher_step = _make_optimizer(cfg) if not cfg.momentum_teacher else None

    for iteration in range(start_iteration, cfg.iterations):
        started = time.perf_counter()
        windows = sample_windows(ds, cfg.crop_window, cfg.batch_size, rng)
        crops = draw_crops(cfg.crop_window, cfg.batch_size, rng)
        try:
            report, _ = train_step(state, windows, crops, cfg, rng, student_step, teacher_step)
        except NumericError as e:
            logger.error(f"Valeur non finie à l'itération {iteration + 1}: {e}")
            raise TrainingDivergedError(iteration + 1, detail=str(e))
        if not report.is_finite():
            raise TrainingDivergedError(iteration + 1, report)

        state.iteration = iteration + 1
        trace.reports.append(report)
        trace.seconds.append((iteration + 1, time.perf_counter() - started))

        if (iteration + 1) % cfg.log_every == 0 or iteration + 1 == cfg.iterations:
            logger.info(
                f"Itération {iteration + 1}/{cfg.iterations}: ssl={report.ssl:.4f} "
                f"sl={report.sl:.4f} joint={report.joint:.4f} (L={crops[0].overlap_len})"
            )
        if out_dir is not None and cfg.checkpoint_every and (iteration + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(
                state,
                Path(out_dir) / f"iter{iteration + 1:06d}{CHECKPOINT_SUFFIX}",
                rng=rng,
                reports=trace.reports,
            )

    if out_dir is not None:
        out_dir = Path(out_dir)
        trace.checkpoint_path = save_checkpoint(
            state, out_dir / f"final{CHECKPOINT_SUFFIX}", rng=rng, reports=trace.reports
        )
        trace.write_csv(out_dir / "trace.csv")
        trace.write_timings(out_dir / "timings.csv")

    logger.info(f"Pré-entraînement terminé: {len(trace)} itérations")
    return state, trace


def overlap_alignment(
    state: TeacherStudentState,
    ds: SeriesDataset,
    cfg: TrainConfig,
    rng: np.random.Generator,
    n_batches: int = 8,
) -> Tuple[float, float]:
    """
    Similarité cosinus moyenne enseignant/élève aux mêmes horodatages du
    chevauchement, et à des horodatages différents (même instance).

    Returns:
        Tuple (similarité alignée, similarité décalée)
    """
    matched, mismatched = [], []
    with no_tape():
        for _ in range(n_batches):
            windows = sample_windows(ds, cfg.crop_window, cfg.batch_size, rng)
            for window, crop in zip(windows, draw_crops(cfg.crop_window, cfg.batch_size, rng)):
                t0, t1 = crop.teacher_overlap()
                s0, s1 = crop.student_overlap()
                h_t = branch_forward(state.teacher, state.dims, Tensor(window[None, crop.a1:crop.b1]))
                h_s = branch_forward(state.student, state.dims, Tensor(window[None, crop.a2:crop.b2]))
                u = l2_normalize(Tensor(h_t.data[0, t0:t1]), axis=-1).data
                v = l2_normalize(Tensor(h_s.data[0, s0:s1]), axis=-1).data
                sims = u @ v.T
                diagonal = np.eye(len(sims), dtype=bool)
                matched.append(sims[diagonal].mean())
                mismatched.append(sims[~diagonal].mean())

    result = float(np.mean(matched)), float(np.mean(mismatched))
    logger.info(f"Alignement du chevauchement: aligné {result[0]:.4f}, décalé {result[1]:.4f}")
    return result
