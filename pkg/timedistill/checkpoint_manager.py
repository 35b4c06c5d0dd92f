"""
Module de gestion des points de contrôle.
Permet de sauvegarder, charger et lister les états enseignant/élève d'un pré-entraînement.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from timedistill.errors import TimedistillError
from timedistill.loss import LossReport
from timedistill.model import ModelDims, TeacherStudentState
from timedistill.numeric import ParamSet

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".ckpt.json"


class CheckpointError(TimedistillError):
    """Exception levée lorsqu'un point de contrôle est illisible, incomplet ou d'une autre version."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class Checkpoint:
    """État sauvegardé et de quoi reprendre l'entraînement à l'identique."""
    state: TeacherStudentState
    iteration: int
    rng_state: Optional[Dict[str, Any]] = None
    reports: List[LossReport] = field(default_factory=list)


def _encode_params(params: ParamSet) -> Dict[str, Dict[str, Any]]:
    # json écrit les flottants avec repr : relecture exacte
    return {
        name: {"shape": list(tensor.shape), "values": tensor.data.reshape(-1).tolist()}
        for name, tensor in params.items()
    }


def _decode_params(raw: Any, field_name: str) -> ParamSet:
    if not isinstance(raw, dict) or not raw:
        raise CheckpointError(field_name, "dictionnaire de paramètres attendu")
    params = ParamSet()
    for name, entry in raw.items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            values = np.asarray(entry["values"], dtype=np.float64)
            params.add(name, values.reshape(shape))
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"{field_name}.{name}", f"paramètre illisible ({e})")
    return params


def save_checkpoint(
    state: TeacherStudentState,
    path: Path,
    rng: Optional[np.random.Generator] = None,
    reports: Optional[List[LossReport]] = None,
) -> Path:
    """
    Sauvegarde un état au format JSON.

    Args:
        state: État enseignant/élève
        path: Fichier de destination
        rng: Générateur dont l'état permet une reprise exacte
        reports: Trace des itérations déjà effectuées

    Returns:
        Chemin écrit
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "version": CHECKPOINT_VERSION,
        "saved_at": datetime.now().isoformat(),
        "iteration": state.iteration,
        "dims": asdict(state.dims),
        "momentum": state.momentum,
        "loss_weight": state.loss_weight,
        "center": state.center.tolist(),
        "teacher": _encode_params(state.teacher),
        "student": _encode_params(state.student),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "reports": [asdict(r) for r in reports or []],
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(data, f)
    tmp.replace(path)

    logger.info(f"Point de contrôle sauvegardé: {path} (itération {state.iteration})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    """
    Charge un point de contrôle.

    Raises:
        CheckpointError: Fichier tronqué, champ manquant ou version différente
    """
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise CheckpointError("path", f"fichier introuvable: {path}")
    except json.JSONDecodeError as e:
        logger.error(f"Point de contrôle corrompu {path}: {e}")
        raise CheckpointError("document", f"JSON invalide ({e.msg})")

    if not isinstance(data, dict):
        raise CheckpointError("document", "objet JSON attendu")
    for key in ("version", "iteration", "dims", "momentum", "loss_weight", "center", "teacher", "student"):
        if key not in data:
            raise CheckpointError(key, "champ manquant")
    if data["version"] != CHECKPOINT_VERSION:
        raise CheckpointError("version", f"version {data['version']} non supportée (attendu {CHECKPOINT_VERSION})")

    try:
        dims = ModelDims(**data["dims"])
    except TypeError as e:
        raise CheckpointError("dims", str(e))

    teacher = _decode_params(data["teacher"], "teacher")
    student = _decode_params(data["student"], "student")
    if teacher.shapes() != student.shapes():
        raise CheckpointError("teacher", "noms ou formes différents de ceux de l'élève")

    center = np.asarray(data["center"], dtype=np.float64)
    if center.shape != (dims.repr_dims,):
        raise CheckpointError("center", f"forme {center.shape}, attendu ({dims.repr_dims},)")

    try:
        reports = [LossReport(**r) for r in data.get("reports", [])]
    except TypeError as e:
        raise CheckpointError("reports", str(e))

    state = TeacherStudentState(
        teacher=teacher,
        student=student,
        center=center,
        momentum=float(data["momentum"]),
        loss_weight=float(data["loss_weight"]),
        dims=dims,
        iteration=int(data["iteration"]),
    )
    logger.info(f"Point de contrôle chargé: {path.name} (itération {state.iteration})")
    return Checkpoint(state=state, iteration=state.iteration, rng_state=data.get("rng_state"), reports=reports)


def list_checkpoints(directory: Path) -> List[Dict]:
    """
    Liste les points de contrôle d'un répertoire.

    Returns:
        Liste de dictionnaires avec path, iteration, saved_at (plus récent en premier)
    """
    checkpoints = []
    directory = Path(directory)
    if not directory.exists():
        return checkpoints

    for ckpt_file in directory.glob(f"*{CHECKPOINT_SUFFIX}"):
        try:
            with open(ckpt_file, "r", encoding="utf-8") as f:
                data = json.load(f)
            checkpoints.append({
                "path": ckpt_file,
                "iteration": data.get("iteration", 0),
                "saved_at": data.get("saved_at", ""),
            })
        except Exception as e:
            logger.error(f"Erreur lors de la lecture de {ckpt_file}: {e}")

    checkpoints.sort(key=lambda x: (x["iteration"], x["saved_at"]), reverse=True)
    return checkpoints
