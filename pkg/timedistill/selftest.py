"""
Auto-test du package.
Vérification des gradients par différences finies, oracles par énumération
pour les pertes, le test K-S et la régression ridge, invariants EMA, centrage
et causalité.
"""

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from timedistill.augment import CropPair, augment_for_branches
from timedistill.config import ALPHA_GRID
from timedistill.forecast import ridge_fit
from timedistill.loss import joint_loss, sl_loss, ssl_loss
from timedistill.metrics import ks_test
from timedistill.model import (
    EncoderStack,
    ModelDims,
    apply_center,
    branch_forward,
    ema_update,
    encode,
    init_params,
    teacher_forward,
    update_center,
)
from timedistill.numeric import (
    ParamSet,
    Tensor,
    concat,
    dilated_causal_conv1d,
    finite_diff_check,
    gelu,
    l2_normalize,
    linear_forward,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    no_tape,
    relu,
    slice_axis,
    softmax,
    sum_,
    transpose,
)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-4
TINY_DIMS = ModelDims(input_dims=3, hidden_dims=8, repr_dims=8, depth=3, kernel_size=3, width=8)
TINY_BATCH = 2
TINY_CROP = 16
TINY_KEEP_PROB = 0.8


@dataclass(frozen=True)
class CheckResult:
    """Une ligne du tableau d'auto-test."""
    name: str
    passed: bool
    value: float
    threshold: float
    seconds: float = 0.0
    detail: str = ""


# ---------------------------------------------------------------------------
# Oracles par énumération
# ---------------------------------------------------------------------------

def infonce_bruteforce(
    h_t: np.ndarray,
    h_s: np.ndarray,
    temperature: float = 1.0,
    same_branch_negatives: bool = False,
) -> float:
    """Perte contrastive calculée ancre par ancre, négatif par négatif."""
    B, L, _ = h_t.shape
    total = 0.0
    for anchor, other in ((h_t, h_s), (h_s, h_t)):
        for i in range(B):
            for t in range(L):
                positive = anchor[i, t] @ other[i, t] / temperature
                terms = [positive]
                for j in range(B):
                    if j != i:
                        terms.append(anchor[i, t] @ other[j, t] / temperature)
                        if same_branch_negatives:
                            terms.append(anchor[i, t] @ anchor[j, t] / temperature)
                for u in range(L):
                    if u != t:
                        terms.append(anchor[i, t] @ other[i, u] / temperature)
                        if same_branch_negatives:
                            terms.append(anchor[i, t] @ anchor[i, u] / temperature)
                total += np.logaddexp.reduce(terms) - positive
    return total / (2 * B * L)


def ks_bruteforce(a: Sequence[float], b: Sequence[float]) -> float:
    """sup |F_a − F_b| évalué en chaque point des deux échantillons."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    best = 0.0
    for x in np.concatenate([a, b]):
        best = max(best, abs(np.mean(a <= x) - np.mean(b <= x)))
    return float(best)


def ridge_normal_equations(X: np.ndarray, Y: np.ndarray, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    """Équations normales augmentées d'une colonne constante non pénalisée."""
    n, K = X.shape
    Xa = np.hstack([X, np.ones((n, 1))])
    penalty = alpha * np.eye(K + 1)
    penalty[K, K] = 0.0
    theta = np.linalg.solve(Xa.T @ Xa + penalty, Xa.T @ Y)
    return theta[:K], theta[K]


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> Dict[str, Tuple[Callable[[ParamSet], Tensor], ParamSet]]:
    def weights(shape):
        return Tensor(rng.normal(size=shape))

    cases = {}

    R = weights((2, 4, 3))
    cases["linear"] = (
        lambda p: sum_(mul(linear_forward(p["x"], p["W"], p["b"]), R)),
        ParamSet({"x": rng.normal(size=(2, 4, 5)), "W": rng.normal(size=(5, 3)), "b": rng.normal(size=3)}),
    )
    R_mm = weights((2, 3, 4))
    cases["matmul"] = (
        lambda p: sum_(mul(matmul(p["a"], p["b"]), R_mm)),
        ParamSet({"a": rng.normal(size=(2, 3, 5)), "b": rng.normal(size=(2, 5, 4))}),
    )
    R_act = weights((3, 6))
    cases["gelu"] = (lambda p: sum_(mul(gelu(p["x"]), R_act)), ParamSet({"x": rng.normal(size=(3, 6))}))
    # valeurs écartées de 0 : pas de point anguleux dans le voisinage
    away = rng.uniform(0.2, 1.0, size=(3, 6)) * rng.choice([-1.0, 1.0], size=(3, 6))
    cases["relu"] = (lambda p: sum_(mul(relu(p["x"]), R_act)), ParamSet({"x": away}))
    cases["softmax"] = (lambda p: sum_(mul(softmax(p["x"], axis=1), R_act)), ParamSet({"x": rng.normal(size=(3, 6))}))
    cases["log_softmax"] = (
        lambda p: sum_(mul(log_softmax(p["x"], axis=0), R_act)),
        ParamSet({"x": rng.normal(size=(3, 6))}),
    )
    mask = rng.random((3, 6)) < 0.7
    mask[:, 0] = True
    R_row = weights((3,))
    cases["logsumexp"] = (
        lambda p: sum_(mul(logsumexp(p["x"], axis=1, mask=mask), R_row)),
        ParamSet({"x": rng.normal(size=(3, 6))}),
    )
    cases["l2_normalize"] = (
        lambda p: sum_(mul(l2_normalize(p["x"], axis=1), R_act)),
        ParamSet({"x": rng.normal(size=(3, 6))}),
    )
    R_conv = weights((2, 4, 9))
    cases["dilated_conv"] = (
        lambda p: sum_(mul(dilated_causal_conv1d(p["z"], p["kernel"], 2, p["bias"]), R_conv)),
        ParamSet({"z": rng.normal(size=(2, 3, 9)), "kernel": rng.normal(size=(4, 3, 3)), "bias": rng.normal(size=4)}),
    )
    R_shape = weights((4, 2))
    cases["concat_slice_transpose"] = (
        lambda p: mean(mul(transpose(slice_axis(concat([p["a"], p["b"]], axis=0), 0, 1, 3), (1, 0)), R_shape)),
        ParamSet({"a": rng.normal(size=(2, 4)), "b": rng.normal(size=(2, 4))}),
    )
    return cases


def tiny_joint_problem(seed: int = 0, lam: float = 0.5):
    """
    Petit problème complet : B fenêtres de longueur TINY_CROP, double recadrage
    et masques tirés une fois, sorties enseignant figées et fonction
    f(θ_s) = perte jointe sur le chevauchement.
    """
    rng = np.random.default_rng(seed)
    state = init_params(seed, TINY_DIMS)
    # enseignant légèrement différent de l'élève
    state.teacher = state.teacher.replace({
        name: t.data + 0.05 * rng.normal(size=t.shape) for name, t in state.teacher.items()
    })
    windows = rng.normal(size=(TINY_BATCH, TINY_CROP, TINY_DIMS.input_dims))
    crop = CropPair(a1=0, b1=12, a2=4, b2=TINY_CROP)
    teacher_in, student_in = augment_for_branches(windows, crop, TINY_KEEP_PROB, rng)
    t0, t1 = crop.teacher_overlap()
    s0, s1 = crop.student_overlap()
    h_t = Tensor(teacher_forward(state, teacher_in, TINY_KEEP_PROB, rng).data[:, t0:t1])
    update_center(state, h_t)
    h_t_centered = Tensor(apply_center(state, h_t).data)

    def f(params: ParamSet) -> Tensor:
        h_s = slice_axis(branch_forward(params, TINY_DIMS, Tensor(student_in)), 1, s0, s1)
        return joint_loss(ssl_loss(h_t, h_s), sl_loss(h_t_centered, h_s), lam)

    return f, state.student


def check_op_gradients(seed: int = 0) -> List[CheckResult]:
    results = []
    for name, (f, point) in _op_cases(np.random.default_rng(seed)).items():
        started = time.perf_counter()
        error = finite_diff_check(f, point)
        results.append(CheckResult(
            name=f"gradient {name}",
            passed=error < GRAD_TOLERANCE,
            value=error,
            threshold=GRAD_TOLERANCE,
            seconds=time.perf_counter() - started,
        ))
    return results


def check_joint_gradient(seed: int = 0) -> CheckResult:
    f, point = tiny_joint_problem(seed)
    started = time.perf_counter()
    error = finite_diff_check(f, point, max_coords=12, rng=np.random.default_rng(seed))
    return CheckResult("gradient perte jointe", error < GRAD_TOLERANCE, error, GRAD_TOLERANCE,
                       time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Oracles et invariants
# ---------------------------------------------------------------------------

def check_infonce_oracle(seeds: int = 20) -> CheckResult:
    worst = 0.0
    for B in (1, 2, 3):
        for L in (2, 3, 4):
            for K in (2, 5):
                for seed in range(seeds):
                    rng = np.random.default_rng([B, L, K, seed])
                    h_t, h_s = rng.normal(size=(B, L, K)), rng.normal(size=(B, L, K))
                    with no_tape():
                        value = ssl_loss(Tensor(h_t), Tensor(h_s)).item()
                    worst = max(worst, abs(value - infonce_bruteforce(h_t, h_s)))
    return CheckResult("oracle InfoNCE", worst < 1e-9, worst, 1e-9)


def check_ema_invariant(steps: int = 100, momentum: float = 0.999) -> CheckResult:
    state = init_params(1, TINY_DIMS, momentum=momentum)
    rng = np.random.default_rng(1)
    state.teacher = state.teacher.replace({
        name: t.data + rng.normal(size=t.shape) for name, t in state.teacher.items()
    })
    initial_gap = {name: t.data - state.student[name].data for name, t in state.teacher.items()}
    for _ in range(steps):
        ema_update(state)
    worst = max(
        float(np.max(np.abs(np.abs(t.data - state.student[name].data) - momentum ** steps * np.abs(initial_gap[name]))))
        for name, t in state.teacher.items()
    )
    return CheckResult("invariant EMA", worst < 1e-12, worst, 1e-12)


def check_centering_invariant(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    state = init_params(seed, TINY_DIMS)
    h = rng.normal(size=(3, 5, TINY_DIMS.repr_dims))
    shift = rng.normal(size=TINY_DIMS.repr_dims)
    outputs = []
    for values in (h, h + shift):
        update_center(state, Tensor(values))
        with no_tape():
            centered = apply_center(state, Tensor(values))
            outputs.append((centered.data, softmax(centered, axis=2).data, softmax(centered, axis=1).data))
    worst = max(float(np.max(np.abs(a - b))) for a, b in zip(*outputs))
    return CheckResult("invariant centrage", worst < 1e-12, worst, 1e-12)


def check_ridge_oracle(systems: int = 50, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(systems):
        X, Y = rng.normal(size=(30, 6)), rng.normal(size=(30, 4))
        alpha = float(rng.choice(ALPHA_GRID))
        head = ridge_fit(X, Y, alpha)
        W, b = ridge_normal_equations(X, Y, alpha)
        worst = max(worst, float(np.max(np.abs(head.W - W))), float(np.max(np.abs(head.b - b))))

    norms = [np.linalg.norm(ridge_fit(X, Y, a).W) for a in sorted(ALPHA_GRID)]
    monotone = all(n1 >= n2 for n1, n2 in zip(norms, norms[1:]))
    return CheckResult("oracle ridge", worst < 1e-8 and monotone, worst, 1e-8,
                       detail="" if monotone else "‖W(α)‖ non décroissante")


def check_causality(positions: int = 50, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    state = init_params(seed, TINY_DIMS)
    enc = EncoderStack(state.student, TINY_DIMS)
    length = positions + 14
    z = rng.normal(size=(1, length, TINY_DIMS.repr_dims))
    changed = 0
    with no_tape():
        reference = encode(enc, Tensor(z)).data
        for s in rng.choice(np.arange(1, length), size=positions, replace=False):
            perturbed = z.copy()
            perturbed[:, s:] = rng.normal(size=perturbed[:, s:].shape)
            out = encode(enc, Tensor(perturbed)).data
            changed += int(np.count_nonzero(out[:, :s] != reference[:, :s]))
    return CheckResult("causalité encodeur", changed == 0, float(changed), 0.0)


def check_ks_oracle(pairs: int = 20, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(pairs):
        a = rng.uniform(size=rng.integers(5, 40))
        b = rng.uniform(0.2, 1.2, size=rng.integers(5, 40))
        worst = max(worst, abs(ks_test(a, b)[0] - ks_bruteforce(a, b)))
    same = ks_test(a, a)
    identical = same == (0.0, 1.0)
    return CheckResult("oracle K-S", worst < 1e-12 and identical, worst, 1e-12,
                       detail="" if identical else f"échantillons identiques: {same}")


def _timed(check: Callable[[], CheckResult]) -> Callable[[], CheckResult]:
    def runner() -> CheckResult:
        started = time.perf_counter()
        result = check()
        if result.seconds:
            return result
        return CheckResult(result.name, result.passed, result.value, result.threshold,
                           time.perf_counter() - started, result.detail)
    return runner


CHECKS: List[Tuple[str, Callable[[], object]]] = [
    ("gradients", check_op_gradients),
    ("joint", _timed(check_joint_gradient)),
    ("infonce", _timed(check_infonce_oracle)),
    ("ema", _timed(check_ema_invariant)),
    ("centering", _timed(check_centering_invariant)),
    ("ridge", _timed(check_ridge_oracle)),
    ("causality", _timed(check_causality)),
    ("ks", _timed(check_ks_oracle)),
]


def run_selftest(only: Optional[Sequence[str]] = None) -> List[CheckResult]:
    """
    Exécute les vérifications ; une exception est convertie en ligne en échec.

    Args:
        only: Sous-ensemble des clés de CHECKS (toutes si None)
    """
    results: List[CheckResult] = []
    for key, check in CHECKS:
        if only is not None and key not in only:
            continue
        try:
            outcome = check()
        except Exception as e:
            logger.error(f"Vérification {key} interrompue: {e}")
            outcome = CheckResult(key, False, float("nan"), float("nan"), detail=f"{type(e).__name__}: {e}")
        results.extend(outcome if isinstance(outcome, list) else [outcome])

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning(f"Auto-test: {len(failed)} échec(s): {failed}")
    else:
        logger.info(f"Auto-test: {len(results)} vérifications réussies")
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    frame = pd.DataFrame([
        {
            "vérification": r.name,
            "statut": "OK" if r.passed else "ÉCHEC",
            "valeur": f"{r.value:.3e}",
            "seuil": f"{r.threshold:.0e}",
            "secondes": f"{r.seconds:.2f}",
            "détail": r.detail,
        }
        for r in results
    ])
    return frame.to_string(index=False)
