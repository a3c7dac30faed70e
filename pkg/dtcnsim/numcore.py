"""Diferenciación automática en modo reverso, capas densas, pérdidas y
optimizadores.

Todos los componentes entrenables del simulador (codificadores semánticos,
codificadores JSC, fusión, clasificador y el predictor recurrente de carga)
se construyen con estas piezas. Los datos viven en arreglos de numpy de 64
bits; la cinta (`ComputationTape`) registra cada operación ejecutada dentro
de su contexto y permite recorrer el grafo hacia atrás una sola vez, en orden
topológico inverso.
"""

from __future__ import annotations

import dataclasses
import enum
import os
import struct
import threading
from collections.abc import Mapping
from pathlib import Path
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np
from loguru import logger

CHECKPOINT_MAGIC = b"DTCNPS"
CHECKPOINT_VERSION = 1


class DimensionError(ValueError):
    """Las dimensiones de los operandos no son compatibles con la operación."""

    operation: str
    shapes: tuple[tuple[int, ...], ...]
    reason: str | None

    def __init__(
        self, operation: str, *shapes: Sequence[int], reason: str | None = None
    ) -> None:
        shapes_message = ", ".join(str(tuple(shape)) for shape in shapes)
        detail_message = ", " + reason if reason else ""
        super().__init__(
            f"en {operation!r}: dimensiones incompatibles {shapes_message}"
            + detail_message
        )
        self.operation = operation
        self.shapes = tuple(tuple(shape) for shape in shapes)
        self.reason = reason


class GradientError(RuntimeError):
    """El tensor pedido no participó en la cinta que produjo la pérdida."""


class LabelRangeError(ValueError):
    """Hay etiquetas de clase fuera del rango [0, K)."""

    def __init__(self, labels: np.ndarray, n_classes: int) -> None:
        bad = labels[(labels < 0) | (labels >= n_classes)]
        super().__init__(
            f"etiquetas fuera de rango [0, {n_classes}): {sorted(set(bad.tolist()))!r}"
        )
        self.n_classes = n_classes


class CheckpointError(ValueError):
    """El archivo de parámetros no tiene el formato esperado."""

    def __init__(self, path: str | os.PathLike, reason: str) -> None:
        super().__init__(f"archivo de parámetros {str(path)!r} no es válido: {reason}")
        self.path = Path(path)
        self.reason = reason


class Activation(enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"


class Tensor:
    """Arreglo denso de reales de 64 bits.

    Si `requires_grad` es verdadero y hay una cinta activa, las operaciones
    que lo usen quedan registradas y se puede derivar respecto a él."""

    __slots__ = ("data", "requires_grad", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._tape: ComputationTape | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError("item", self.shape, reason="no es un escalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def sum(self) -> Tensor:
        return sum_all(self)

    def mean(self) -> Tensor:
        return mean_all(self)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape!r}{grad})"


class _Record(NamedTuple):
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _tape_stack() -> list[ComputationTape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> ComputationTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class ComputationTape:
    """Registro de las operaciones ejecutadas dentro de su contexto.

    Cada cinta pertenece al hilo que la abrió. Los registros quedan en orden
    de ejecución, que ya es un orden topológico del grafo."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._seen: set[int] = set()

    def __enter__(self) -> ComputationTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("la cinta se cerró fuera de orden")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(
        self,
        output: Tensor,
        inputs: tuple[Tensor, ...],
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    ) -> None:
        output._tape = self
        output._node = len(self.records)
        self.records.append(_Record(output, inputs, backward))
        for tensor in inputs:
            self._seen.add(id(tensor))

    def participated(self, tensor: Tensor) -> bool:
        return id(tensor) in self._seen

    def gradients(
        self, loss: Tensor, wrt: Sequence[Tensor], *, strict: bool = False
    ) -> list[np.ndarray]:
        """Calcula d(loss)/d(t) para cada tensor de `wrt`.

        Los tensores que no alcanzó la pérdida reciben ceros, salvo con
        `strict`, donde es un error que no hayan participado en la cinta."""
        if loss._tape is not self or loss._node is None:
            raise GradientError("la pérdida no fue registrada en esta cinta")
        if loss.size != 1:
            raise DimensionError("backward", loss.shape, reason="la pérdida no es escalar")
        if strict:
            for tensor in wrt:
                if not self.participated(tensor):
                    raise GradientError(
                        f"el tensor {tensor!r} no participó en la cinta de la pérdida"
                    )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records[: loss._node + 1]):
            upstream = grads.get(id(rec.output))
            if upstream is None:
                continue
            for tensor, grad in zip(rec.inputs, rec.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + grad
                else:
                    grads[key] = grad
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(operation: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(operation, a.shape, b.shape) from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", a.shape, b.shape)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0), (x,), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _result(y, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # forma estable para argumentos grandes en valor absoluto
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * y * (1.0 - y),)

    return _result(y, (x,), backward)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat", *(t.shape for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=axis)

    return _result(data, tensors, backward)


def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum()), (x,), backward)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise DimensionError("mean", x.shape, reason="no hay elementos")
    n = x.size

    def backward(g):
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _result(np.asarray(x.data.mean()), (x,), backward)


def rms_normalize_rows(x) -> Tensor:
    """Escala cada fila para que su valor cuadrático medio sea 1.

    Las filas nulas no tienen normalización posible; quien llama debe
    descartarlas antes."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError("rms_normalize_rows", x.shape, reason="se esperaba 2-D")
    n = x.shape[1]
    rms = np.sqrt(np.mean(x.data * x.data, axis=1, keepdims=True))

    def backward(g):
        coupling = np.sum(g * x.data, axis=1, keepdims=True) / (n * rms**3)
        return (g / rms - x.data * coupling,)

    return _result(x.data / rms, (x,), backward)


def softmax(logits: Tensor | np.ndarray) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_loss(logits, labels: Sequence[int] | np.ndarray) -> Tensor:
    """Media sobre el lote de -log softmax(logits)[etiqueta]."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],) or logits.shape[0] == 0:
        raise DimensionError("cross_entropy_loss", logits.shape, labels.shape)
    batch, n_classes = logits.shape
    if np.any((labels < 0) | (labels >= n_classes)):
        raise LabelRangeError(labels, n_classes)
    logp = log_softmax(logits.data)
    rows = np.arange(batch)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _result(np.asarray(loss), (logits,), backward)


def l1_loss(x, y) -> Tensor:
    """Media de |x - y|; el subgradiente en los empates es 0."""
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError("l1_loss", x.shape, y.shape)
    if x.size == 0:
        raise DimensionError("l1_loss", x.shape, reason="no hay elementos")
    diff = x.data - y.data
    n = diff.size

    def backward(g):
        sign = np.sign(diff) * (g / n)
        return sign, -sign

    return _result(np.asarray(np.abs(diff).mean()), (x, y), backward)


_ACTIVATIONS: dict[Activation, Callable[[Tensor], Tensor]] = {
    Activation.IDENTITY: lambda t: t,
    Activation.RELU: relu,
    Activation.TANH: tanh,
    Activation.SIGMOID: sigmoid,
}


def dense_forward(
    x, weights: Tensor, bias: Tensor, activation: Activation = Activation.IDENTITY
) -> Tensor:
    """Capa densa: activation(x @ weights + bias)."""
    x = _as_tensor(x)
    if (
        x.ndim != 2
        or weights.ndim != 2
        or bias.ndim != 1
        or x.shape[1] != weights.shape[0]
        or bias.shape[0] != weights.shape[1]
    ):
        raise DimensionError("dense_forward", x.shape, weights.shape, bias.shape)
    return _ACTIVATIONS[Activation(activation)](add(matmul(x, weights), bias))


class ParameterSet(Mapping):
    """Colección ordenada de tensores con nombre.

    Es la unidad que se intercambia en el aprendizaje federado y que se
    guarda en los puntos de control."""

    def __init__(self, entries: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = ()):
        self._entries: dict[str, Tensor] = {}
        items = entries.items() if isinstance(entries, Mapping) else entries
        for name, tensor in items:
            if name in self._entries:
                raise ValueError(f"nombre de parámetro duplicado: {name!r}")
            self._entries[name] = tensor if isinstance(tensor, Tensor) else Tensor(tensor)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ParameterSet({len(self)} tensores, {self.parameter_count()} valores)"

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tensor.shape) for name, tensor in self._entries.items()]

    def is_compatible(self, other: ParameterSet) -> bool:
        return self.shapes() == other.shapes()

    def require_compatible(self, other: ParameterSet, operation: str) -> None:
        if not self.is_compatible(other):
            mine = [shape for _, shape in self.shapes()]
            theirs = [shape for _, shape in other.shapes()]
            raise DimensionError(
                operation,
                (len(self),),
                (len(other),),
                reason=f"conjuntos de parámetros no compatibles: {mine!r} vs {theirs!r}",
            )

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self._entries.values())

    def copy(self) -> ParameterSet:
        return ParameterSet(
            (name, Tensor(tensor.data.copy(), requires_grad=tensor.requires_grad))
            for name, tensor in self._entries.items()
        )

    def equals(self, other: ParameterSet) -> bool:
        """Igualdad exacta, bit a bit, de nombres, formas y valores."""
        return self.is_compatible(other) and all(
            np.array_equal(self[name].data, other[name].data) for name in self
        )


def sgd_step(params: ParameterSet, grads: ParameterSet, lr: float) -> ParameterSet:
    """Devuelve params - lr * grads, elemento a elemento."""
    params.require_compatible(grads, "sgd_step")
    if lr < 0:
        raise ValueError(f"la tasa de aprendizaje no puede ser negativa: {lr!r}")
    return ParameterSet(
        (name, Tensor(p.data - lr * grads[name].data, requires_grad=p.requires_grad))
        for name, p in params.items()
    )


class SGD:
    """Descenso de gradiente con momento opcional.

    Con `momentum=0` cada paso es exactamente `sgd_step`."""

    def __init__(self, lr: float, momentum: float = 0.0) -> None:
        if lr < 0:
            raise ValueError(f"la tasa de aprendizaje no puede ser negativa: {lr!r}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"el momento debe estar en [0, 1): {momentum!r}")
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParameterSet, grads: ParameterSet) -> ParameterSet:
        if self.momentum == 0.0:
            return sgd_step(params, grads, self.lr)
        params.require_compatible(grads, "SGD.step")
        velocity = {}
        for name in grads:
            previous = self._velocity.get(name)
            g = grads[name].data
            velocity[name] = g if previous is None else self.momentum * previous + g
        self._velocity.update(velocity)
        return sgd_step(
            params, ParameterSet((n, Tensor(v)) for n, v in velocity.items()), self.lr
        )


def backward(loss: Tensor, params: ParameterSet) -> ParameterSet:
    """Gradiente de la pérdida respecto a cada parámetro, con las mismas
    formas y el mismo orden que `params`."""
    tape = loss._tape
    if tape is None:
        raise GradientError("la pérdida no está conectada a ninguna cinta")
    grads = tape.gradients(loss, list(params.values()))
    return ParameterSet((name, Tensor(g)) for name, g in zip(params, grads))


def gradients(loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradientes respecto a tensores que deben haber participado en la pérdida."""
    tape = loss._tape
    if tape is None:
        raise GradientError("la pérdida no está conectada a ninguna cinta")
    return tape.gradients(loss, tensors, strict=True)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclasses.dataclass
class DenseNet:
    """Red densa de varias capas con nombres de parámetros calificados
    (`<name>.<capa>.weight`, `<name>.<capa>.bias`)."""

    name: str
    sizes: tuple[int, ...]
    activations: tuple[Activation, ...]
    params: ParameterSet

    @classmethod
    def build(
        cls,
        name: str,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden: Activation = Activation.RELU,
        output: Activation = Activation.IDENTITY,
    ) -> DenseNet:
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"tamaños de capa inválidos para {name!r}: {sizes!r}")
        entries = []
        for idx, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            weights = glorot_uniform(rng, fan_in, fan_out)
            bias = rng.uniform(-0.05, 0.05, size=fan_out)
            entries.append((f"{name}.{idx}.weight", Tensor(weights, requires_grad=True)))
            entries.append((f"{name}.{idx}.bias", Tensor(bias, requires_grad=True)))
        activations = (hidden,) * (len(sizes) - 2) + (output,)
        return cls(name, sizes, activations, ParameterSet(entries))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x) -> Tensor:
        h = _as_tensor(x)
        for idx, activation in enumerate(self.activations):
            h = dense_forward(
                h,
                self.params[f"{self.name}.{idx}.weight"],
                self.params[f"{self.name}.{idx}.bias"],
                activation,
            )
        return h

    __call__ = forward

    def load(self, params: ParameterSet) -> None:
        """Copia en el lugar los valores de `params` para los nombres propios."""
        for name, tensor in self.params.items():
            source = params[name]
            if source.shape != tensor.shape:
                raise DimensionError("DenseNet.load", tensor.shape, source.shape)
            tensor.data = source.data.copy()


def save_parameters(params: ParameterSet, path: str | os.PathLike) -> Path:
    """Guarda un conjunto de parámetros en el formato binario versionado.

    Cabecera: magia, versión (u16) y cantidad (u32); por tensor: nombre
    (u16 + utf-8), número de dimensiones (u8), dimensiones (u32) y los
    valores en `<f8`, en el orden del conjunto."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(params))]
    for name, tensor in params.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<B{tensor.ndim}I", tensor.ndim, *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    logger.debug(f"Parámetros guardados en {str(path)!r} ({params!r})")
    return path


def load_parameters(path: str | os.PathLike, requires_grad: bool = True) -> ParameterSet:
    path = Path(path)
    raw = path.read_bytes()
    cursor = 0

    def take(n: int) -> bytes:
        nonlocal cursor
        if cursor + n > len(raw):
            raise CheckpointError(path, "el archivo está truncado")
        chunk = raw[cursor : cursor + n]
        cursor += n
        return chunk

    if take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(path, "la cabecera no corresponde")
    version, count = struct.unpack("<HI", take(6))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            path, f"versión {version} no soportada (se esperaba {CHECKPOINT_VERSION})"
        )
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(path, "un nombre de parámetro no es UTF-8 válido") from None
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_values = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(take(8 * n_values), dtype="<f8").astype(np.float64)
        entries.append((name, Tensor(values.reshape(shape), requires_grad=requires_grad)))
    if cursor != len(raw):
        raise CheckpointError(path, "sobran bytes al final del archivo")
    return ParameterSet(entries)
