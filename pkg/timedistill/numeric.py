"""
Moteur numérique minimal du package.
Tenseurs denses float64, différentiation automatique en mode inverse via une bande
d'enregistrement (GradTape), primitives du modèle, optimiseurs et vérification
des gradients par différences finies.
"""

import logging
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from timedistill.errors import DimensionError, NumericError, ParameterError, UsageError

logger = logging.getLogger(__name__)

L2_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    """
    Tenseur dense en float64, stocké en ordre ligne (row-major).

    Un tenseur produit par une opération enregistrée sur une bande garde ses
    parents et sa fonction de rétropropagation.
    """

    __slots__ = ("data", "name", "_parents", "_backward")

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() sur un tenseur de forme {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Copie des valeurs sous forme de tableau numpy."""
        return self.data.copy()

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, name={self.name!r})"


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ParamSet:
    """
    Ensemble nommé de tenseurs de paramètres.

    L'itération se fait toujours par ordre alphabétique des noms, les formes
    sont figées après l'ajout.
    """

    def __init__(self, tensors: Optional[Dict[str, ArrayLike]] = None):
        self._tensors: Dict[str, Tensor] = {}
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: ArrayLike) -> Tensor:
        if name in self._tensors:
            raise ParameterError(f"Paramètre déjà défini: {name}")
        tensor = Tensor(np.array(_as_tensor(value).data, dtype=np.float64), name=name)
        self._tensors[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return sorted(self._tensors)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._tensors[name]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tensor.shape for name, tensor in self.items()}

    def arrays(self) -> Dict[str, np.ndarray]:
        """Copie des valeurs, par nom."""
        return {name: tensor.data.copy() for name, tensor in self.items()}

    def num_values(self) -> int:
        return int(sum(tensor.data.size for _, tensor in self.items()))

    def assign(self, name: str, value: np.ndarray) -> None:
        """Remplace les valeurs d'un paramètre sans changer sa forme."""
        value = np.asarray(value, dtype=np.float64)
        current = self._tensors[name]
        if value.shape != current.shape:
            raise DimensionError(
                f"Forme figée pour {name}: {current.shape}, reçu {value.shape}"
            )
        current.data = np.ascontiguousarray(value.copy())

    def copy(self) -> "ParamSet":
        return ParamSet(self.arrays())

    def replace(self, arrays: Dict[str, np.ndarray]) -> "ParamSet":
        """
        Construit un nouvel ensemble avec les mêmes noms et formes.

        Raises:
            UsageError: Si les clés diffèrent
            DimensionError: Si une forme change
        """
        if set(arrays) != set(self._tensors):
            missing = sorted(set(self._tensors) ^ set(arrays))
            raise UsageError(f"Clés de paramètres incohérentes: {missing}")
        updated = ParamSet()
        for name, tensor in self.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(
                    f"Forme figée pour {name}: {tensor.shape}, reçu {value.shape}"
                )
            updated.add(name, value)
        return updated


# ---------------------------------------------------------------------------
# Bande d'enregistrement
# ---------------------------------------------------------------------------

_TAPE_STACK: List[Optional["GradTape"]] = []


class GradTape:
    """
    Bande d'enregistrement des opérations.

    Utilisée comme gestionnaire de contexte : toute opération exécutée à
    l'intérieur est enregistrée, dans l'ordre d'exécution (donc topologique).
    """

    def __init__(self):
        self.nodes: List[Tensor] = []
        self.watched: Dict[str, Tensor] = {}

    def watch(self, params: ParamSet, prefix: str = "") -> None:
        for name, tensor in params.items():
            self.watched[prefix + name] = tensor

    def watch_tensor(self, name: str, tensor: Tensor) -> None:
        self.watched[name] = tensor

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        _TAPE_STACK.pop()


@contextmanager
def no_tape() -> Iterator[None]:
    """Suspend l'enregistrement (branche enseignant, évaluation)."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _result(
    data: np.ndarray,
    parents: Tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]],
    op: str,
) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"Valeur non finie produite par l'opération {op}")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: GradTape, loss: Tensor) -> Dict[str, np.ndarray]:
    """
    Rétropropage le gradient d'une perte scalaire le long de la bande.

    Args:
        tape: Bande sur laquelle la perte a été calculée
        loss: Tenseur scalaire

    Returns:
        Gradients indexés par nom pour chaque tenseur surveillé
        (zéro pour les paramètres non atteints)

    Raises:
        UsageError: Si la perte n'est pas scalaire
    """
    if loss.data.size != 1:
        raise UsageError(f"La perte doit être scalaire, forme reçue {loss.shape}")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        grad = grads.pop(id(node), None)
        if grad is None or node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad

    return {
        name: np.array(grads.get(id(tensor), np.zeros_like(tensor.data)), dtype=np.float64)
        for name, tensor in tape.watched.items()
    }


# ---------------------------------------------------------------------------
# Opérations élémentaires
# ---------------------------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Marqueur d'arrêt du gradient : la valeur passe, le gradient non."""
    return _result(x.data, (x,), lambda g: (None,), "stop_gradient")


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Produit matriciel (éventuellement par lots) avec la sémantique de np.matmul."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul attend des tenseurs d'au moins 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def linear_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """
    Couche linéaire appliquée sur le dernier axe : y = xW + b.

    Args:
        x: Tenseur [*, Din]
        W: Poids [Din, Dout]
        b: Biais [Dout]

    Returns:
        Tenseur [*, Dout]

    Raises:
        DimensionError: Si les dimensions internes ne correspondent pas
    """
    if W.ndim != 2 or b.ndim != 1 or x.shape[-1] != W.shape[0] or b.shape[0] != W.shape[1]:
        raise DimensionError(
            f"linear_forward: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    d_in, d_out = W.shape
    flat = x.data.reshape(-1, d_in)
    out = (flat @ W.data + b.data).reshape(x.shape[:-1] + (d_out,))

    def _backward(g):
        g2 = g.reshape(-1, d_out)
        grad_x = (g2 @ W.data.T).reshape(x.shape)
        return grad_x, flat.T @ g2, g2.sum(axis=0)

    return _result(out, (x, W, b), _backward, "linear")


def sum_(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), _backward, "sum")


def mean(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inverse),),
        "transpose",
    )


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Extrait [start, stop) le long d'un axe."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)

    return _result(a.data[index].copy(), (a,), _backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        _backward,
        "concat",
    )


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0
    return _result(np.where(positive, x.data, 0.0), (x,), lambda g: (g * positive,), "relu")


def _gelu_derivative(x: np.ndarray) -> np.ndarray:
    # Φ(x) + x·φ(x)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gelu(x: Tensor) -> Tensor:
    """GELU exacte x·Φ(x), forme erf (pas d'approximation tanh)."""
    out = x.data * 0.5 * (1.0 + erf(x.data / _SQRT2))
    return _result(out, (x,), lambda g: (g * _gelu_derivative(x.data),), "gelu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax stable (soustraction du maximum) le long d'un axe."""
    if x.shape[axis] < 1:
        raise DimensionError("softmax sur un axe vide")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), _backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm
    probs = np.exp(out)

    def _backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), _backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    log Σ exp(x) le long d'un axe, restreint aux positions où mask est vrai.

    Raises:
        UsageError: Si une ligne ne contient aucune position retenue
    """
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(mask.any(axis=axis)):
        raise UsageError("logsumexp: ligne entièrement masquée")
    peak = np.where(mask, x.data, -np.inf).max(axis=axis, keepdims=True)
    e = np.exp(np.where(mask, x.data - peak, -np.inf))
    total = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(peak + np.log(total), axis=axis)
    weights = e / total

    def _backward(g):
        return (np.expand_dims(g, axis) * weights,)

    return _result(out, (x,), _backward, "logsumexp")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """x / max(‖x‖₂, eps) le long d'un axe."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    active = norm > eps

    def _backward(g):
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / denom),)

    return _result(out, (x,), _backward, "l2_normalize")


def dilated_causal_conv1d(
    z: Tensor,
    kernel: Tensor,
    d: int,
    bias: Optional[Tensor] = None,
) -> Tensor:
    """
    Convolution causale dilatée, longueur préservée par remplissage à gauche.

    F(s) = Σ_i kernel[:, :, i] · z[s − d·i], les indices hors plage valant zéro.

    Args:
        z: Entrée [B, Cin, L]
        kernel: Noyau [Cout, Cin, k]
        d: Facteur de dilatation (≥ 1)
        bias: Biais optionnel [Cout]

    Returns:
        Sortie [B, Cout, L]

    Raises:
        ParameterError: Si d < 1 ou si le noyau est vide
        DimensionError: Si les canaux d'entrée ne correspondent pas
    """
    if int(d) != d or d < 1:
        raise ParameterError(f"Dilatation invalide: {d}")
    if kernel.ndim != 3 or kernel.shape[2] < 1 or kernel.data.size == 0:
        raise ParameterError(f"Noyau vide ou mal formé: {kernel.shape}")
    if z.ndim != 3 or z.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv1d: z{z.shape}, kernel{kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise DimensionError(f"conv1d: biais {bias.shape}")

    d = int(d)
    batch, c_in, length = z.shape
    c_out, _, k = kernel.shape
    pad = (k - 1) * d
    padded = np.pad(z.data, ((0, 0), (0, 0), (pad, 0)))
    offsets = [pad - d * i for i in range(k)]
    # cols[b, l, c*k + i] = z[b, c, l - d*i]
    cols = np.stack([padded[:, :, o:o + length] for o in offsets], axis=-1)
    cols = cols.transpose(0, 2, 1, 3).reshape(batch, length, c_in * k)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = cols @ w2.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def _backward(g):
        g_t = g.transpose(0, 2, 1)
        grad_kernel = (g_t.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(kernel.shape)
        grad_cols = (g_t @ w2).reshape(batch, length, c_in, k).transpose(0, 2, 1, 3)
        grad_padded = np.zeros_like(padded)
        for i, o in enumerate(offsets):
            grad_padded[:, :, o:o + length] += grad_cols[..., i]
        grads = [grad_padded[:, :, pad:], grad_kernel]
        if bias is not None:
            grads.append(g_t.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (z, kernel) if bias is None else (z, kernel, bias)
    return _result(out, parents, _backward, "dilated_causal_conv1d")


# ---------------------------------------------------------------------------
# Optimiseurs
# ---------------------------------------------------------------------------

def _check_grad_keys(params: ParamSet, grads: Dict[str, np.ndarray]) -> None:
    if set(grads) != set(params.names()):
        missing = sorted(set(params.names()) ^ set(grads))
        raise UsageError(f"Gradients et paramètres non alignés: {missing}")


def sgd_step(params: ParamSet, grads: Dict[str, np.ndarray], lr: float) -> ParamSet:
    """
    Pas de descente de gradient : θ ← θ − lr·g.

    Raises:
        ParameterError: Si lr n'est pas strictement positif
        UsageError: Si les clés des gradients diffèrent de celles des paramètres
    """
    if not lr > 0:
        raise ParameterError(f"Taux d'apprentissage invalide: {lr}")
    _check_grad_keys(params, grads)
    return params.replace({name: t.data - lr * grads[name] for name, t in params.items()})


class AdamOptimizer:
    """Variante adaptative, activée par `optimizer: "adam"` dans la configuration."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise ParameterError(f"Taux d'apprentissage invalide: {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: Dict[str, np.ndarray]) -> ParamSet:
        _check_grad_keys(params, grads)
        self.step_count += 1
        updated = {}
        for name, tensor in params.items():
            g = grads[name]
            m = self.beta1 * self._m.get(name, np.zeros_like(g)) + (1 - self.beta1) * g
            v = self.beta2 * self._v.get(name, np.zeros_like(g)) + (1 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.step_count)
            v_hat = v / (1 - self.beta2 ** self.step_count)
            updated[name] = tensor.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params.replace(updated)


# ---------------------------------------------------------------------------
# Vérification par différences finies
# ---------------------------------------------------------------------------

def _evaluate_scalar(f: Callable[[ParamSet], Tensor], point: ParamSet) -> float:
    with no_tape():
        value = f(point)
    value = value.item() if isinstance(value, Tensor) else float(value)
    if not np.isfinite(value):
        raise NumericError("La fonction évaluée renvoie une valeur non finie")
    return value


def finite_diff_check(
    f: Callable[[ParamSet], Tensor],
    point: ParamSet,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Compare le gradient analytique à des différences finies centrées.

    Args:
        f: Fonction scalaire des paramètres, construite avec les opérations du module
        point: Point d'évaluation (modifié temporairement, restauré à la sortie)
        eps: Pas des différences finies
        max_coords: Nombre maximal de coordonnées testées par paramètre (toutes si None)
        rng: Générateur utilisé pour tirer les coordonnées testées

    Returns:
        Pire erreur relative |a − n| / max(|a|, |n|, 1e-8)

    Raises:
        ParameterError: Si eps n'est pas strictement positif
        NumericError: Si f n'est pas finie en un point perturbé
    """
    if not eps > 0:
        raise ParameterError(f"Pas de différences finies invalide: {eps}")

    tape = GradTape()
    tape.watch(point)
    with tape:
        loss = f(point)
    analytic = backward(tape, loss)

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for name, tensor in point.items():
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            indices = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        grad_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for idx in indices:
            original = flat[idx]
            try:
                flat[idx] = original + eps
                f_plus = _evaluate_scalar(f, point)
                flat[idx] = original - eps
                f_minus = _evaluate_scalar(f, point)
            finally:
                flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = grad_flat[idx]
            error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            param_worst = max(param_worst, error)
        logger.debug(f"Différences finies {name}: erreur relative max {param_worst:.3e}")
        worst = max(worst, param_worst)
    return worst
