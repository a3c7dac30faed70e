"""Optimización adaptativa de la carga dentro de un clúster de dispositivos
cubierto por un mismo servidor de borde, asignación de recursos según la
contribución de cada dispositivo e inferencia conjunta dispositivo-servidor.

Convención de carga tras aplicar un plan:
    uᵢ = (wᵢ + ŵᵢ) + entranteᵢ − salienteᵢ
"""

from __future__ import annotations

import dataclasses
import math
from typing import Callable, NamedTuple, Sequence

import numpy as np
from loguru import logger

from dtcnsim.data import SampleBatch
from dtcnsim.jscrc import Pipeline, device_stage, hop_snrs, server_stage
from dtcnsim.numcore import (
    SGD,
    Activation,
    ComputationTape,
    GradientError,
    ParameterSet,
    Tensor,
    backward,
    concat,
    dense_forward,
    glorot_uniform,
    gradients,
    mean_all,
    mul,
    sub,
    tanh,
)
from dtcnsim.util import rng_for, stopwatch

BYTES_PER_SYMBOL = 8
_TOLERANCE = 1e-12

Predictor = Callable[[Sequence[float]], float]


class InfeasiblePlanError(ValueError):
    """El plan saca de un dispositivo más carga de la que tiene."""

    def __init__(self, source: str, requested: float, available: float) -> None:
        super().__init__(
            f"el dispositivo {source!r} debe ceder {requested!r} unidades "
            f"y solo dispone de {available!r}"
        )
        self.source = source
        self.requested = requested
        self.available = available


@dataclasses.dataclass
class DeviceState:
    id: str
    workload: float
    capacity: float
    predicted: float = 0.0
    history: list[float] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        if self.workload < 0 or self.predicted < 0:
            raise ValueError(f"el dispositivo {self.id!r} tiene carga negativa")
        if not self.capacity > 0:
            raise ValueError(
                f"la capacidad del dispositivo {self.id!r} debe ser positiva: {self.capacity!r}"
            )

    @property
    def load(self) -> float:
        return self.workload + self.predicted

    @property
    def normalized_load(self) -> float:
        return self.load / self.capacity


@dataclasses.dataclass
class TransferPlan:
    flows: dict[tuple[str, str], float] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        for (source, target), amount in self.flows.items():
            self._check(source, target, amount)

    @staticmethod
    def _check(source: str, target: str, amount: float) -> None:
        if source == target:
            raise ValueError(f"transferencia de {source!r} hacia sí mismo")
        if amount < 0 or not math.isfinite(amount):
            raise ValueError(f"cantidad inválida de {source!r} a {target!r}: {amount!r}")

    def __len__(self) -> int:
        return len(self.flows)

    def add(self, source: str, target: str, amount: float) -> None:
        self._check(source, target, amount)
        self.flows[(source, target)] = self.flows.get((source, target), 0.0) + amount

    def outgoing(self, device_id: str) -> float:
        return math.fsum(a for (i, _), a in self.flows.items() if i == device_id)

    def incoming(self, device_id: str) -> float:
        return math.fsum(a for (_, j), a in self.flows.items() if j == device_id)

    def net(self, i: str, j: str) -> float:
        return self.flows.get((i, j), 0.0) - self.flows.get((j, i), 0.0)

    def total(self) -> float:
        return math.fsum(self.flows.values())


@dataclasses.dataclass(frozen=True)
class ContributionScore:
    device_id: str
    score: float

    def __post_init__(self):
        if self.score < 0 or not math.isfinite(self.score):
            raise ValueError(
                f"puntaje inválido para el dispositivo {self.device_id!r}: {self.score!r}"
            )


def predict_workload(history: Sequence[float], alpha: float = 0.5) -> float:
    """Media móvil exponencial de la historia, empezando por el primer valor."""
    if len(history) == 0:
        raise ValueError("no se puede predecir la carga sin historia")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha debe estar en (0, 1]: {alpha!r}")
    estimate = float(history[0])
    for value in history[1:]:
        estimate = alpha * float(value) + (1.0 - alpha) * estimate
    return estimate


class LSTMPredictor:
    """Predictor recurrente de carga: una capa LSTM sobre ventanas de la
    historia y una salida lineal.

    Las ventanas se escalan por el máximo de la serie de entrenamiento; la
    predicción nunca es negativa."""

    GATES = ("input", "forget", "output", "cell")

    def __init__(self, hidden: int = 8, window: int = 8, seed: int = 0) -> None:
        if hidden < 1 or window < 1:
            raise ValueError("el tamaño oculto y la ventana deben ser positivos")
        self.hidden = hidden
        self.window = window
        self.scale = 1.0
        rng = rng_for(seed)
        entries = []
        for gate in self.GATES:
            weight = glorot_uniform(rng, 1 + hidden, hidden)
            # sesgo de olvido en 1
            bias = np.ones(hidden) if gate == "forget" else np.zeros(hidden)
            entries.append((f"lstm.{gate}.weight", Tensor(weight, requires_grad=True)))
            entries.append((f"lstm.{gate}.bias", Tensor(bias, requires_grad=True)))
        entries.append(("lstm.head.weight", Tensor(glorot_uniform(rng, hidden, 1), requires_grad=True)))
        entries.append(("lstm.head.bias", Tensor(np.zeros(1), requires_grad=True)))
        self.params = ParameterSet(entries)

    def _gate(self, z: Tensor, gate: str, activation: Activation) -> Tensor:
        return dense_forward(
            z, self.params[f"lstm.{gate}.weight"], self.params[f"lstm.{gate}.bias"], activation
        )

    def _forward(self, windows: np.ndarray) -> Tensor:
        batch = windows.shape[0]
        h = Tensor(np.zeros((batch, self.hidden)))
        c = Tensor(np.zeros((batch, self.hidden)))
        for t in range(windows.shape[1]):
            z = concat([Tensor(windows[:, t : t + 1] / self.scale), h], axis=1)
            i = self._gate(z, "input", Activation.SIGMOID)
            f = self._gate(z, "forget", Activation.SIGMOID)
            o = self._gate(z, "output", Activation.SIGMOID)
            g = self._gate(z, "cell", Activation.TANH)
            c = f * c + i * g
            h = o * tanh(c)
        return dense_forward(
            h, self.params["lstm.head.weight"], self.params["lstm.head.bias"], Activation.IDENTITY
        )

    def _windows(self, series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = series.shape[0] - self.window
        x = np.stack([series[k : k + self.window] for k in range(n)])
        y = series[self.window :].reshape(-1, 1)
        return x, y

    def fit(self, series: Sequence[float], epochs: int = 200, lr: float = 0.05) -> list[float]:
        """Ajusta el predictor con error cuadrático medio en lote completo.
        Devuelve la pérdida de cada época."""
        series = np.asarray(series, dtype=np.float64)
        if series.shape[0] <= self.window:
            raise ValueError(
                f"se necesitan más de {self.window} valores para entrenar; hay {series.shape[0]}"
            )
        self.scale = float(np.max(np.abs(series))) or 1.0
        x, y = self._windows(series)
        target = Tensor(y / self.scale)
        optimizer = SGD(lr)
        losses = []
        for _ in range(epochs):
            with ComputationTape():
                diff = sub(self._forward(x), target)
                loss = mean_all(mul(diff, diff))
                grads = backward(loss, self.params)
            updated = optimizer.step(self.params, grads)
            for name, tensor in self.params.items():
                tensor.data = updated[name].data
            losses.append(loss.item())
        logger.debug(f"Predictor LSTM ajustado: pérdida final {losses[-1]:.5f}")
        return losses

    def predict(self, history: Sequence[float]) -> float:
        history = np.asarray(history, dtype=np.float64)
        if history.shape[0] == 0:
            raise ValueError("no se puede predecir la carga sin historia")
        window = history[-self.window :]
        if window.shape[0] < self.window:
            window = np.concatenate([np.full(self.window - window.shape[0], window[0]), window])
        out = self._forward(window.reshape(1, -1)).item() * self.scale
        return max(out, 0.0)

    __call__ = predict


def balance_workloads(
    devices: Sequence[DeviceState], max_transfer: float | None = None
) -> TransferPlan:
    """Plan de transferencias hacia el nivel L = Σ(wᵢ+ŵᵢ)/Σcᵢ.

    Los donantes (por encima de L) ceden a los receptores (por debajo de L),
    ambos ordenados por desvío descendente y luego por id. Sin tope por
    arista la carga normalizada queda en L para todos; con tope ningún
    dispositivo cruza L, así que el máximo nunca sube."""
    plan = TransferPlan()
    if len(devices) <= 1:
        return plan
    ids = [d.id for d in devices]
    if len(set(ids)) != len(ids):
        raise ValueError(f"ids de dispositivo repetidos: {ids!r}")
    if max_transfer is not None and max_transfer < 0:
        raise ValueError(f"el tope por arista no puede ser negativo: {max_transfer!r}")
    level = math.fsum(d.load for d in devices) / math.fsum(d.capacity for d in devices)
    tolerance = _TOLERANCE * max(1.0, max(d.load for d in devices))
    surplus = {d.id: d.load - level * d.capacity for d in devices}
    donors = sorted((d for d in ids if surplus[d] > tolerance), key=lambda d: (-surplus[d], d))
    receivers = sorted(
        (d for d in ids if surplus[d] < -tolerance), key=lambda d: (surplus[d], d)
    )
    remaining = {d: -surplus[d] for d in receivers}
    for donor in donors:
        available = surplus[donor]
        for receiver in receivers:
            if available <= tolerance:
                break
            amount = min(available, remaining[receiver])
            if max_transfer is not None:
                amount = min(amount, max_transfer)
            if amount <= tolerance:
                continue
            plan.add(donor, receiver, amount)
            available -= amount
            remaining[receiver] -= amount
    logger.debug(
        f"Plan de balanceo: nivel {level:.4f}, {len(plan)} transferencias, "
        f"{plan.total():.4f} unidades"
    )
    return plan


def apply_transfers(devices: Sequence[DeviceState], plan: TransferPlan) -> list[DeviceState]:
    """Devuelve los dispositivos con uᵢ como carga pendiente y la predicción
    ya absorbida (ŵ = 0). No modifica los originales."""
    by_id = {d.id: d for d in devices}
    for source, target in plan.flows:
        for device_id in (source, target):
            if device_id not in by_id:
                raise ValueError(f"el plan menciona un dispositivo desconocido: {device_id!r}")
    updated = []
    for device in devices:
        outgoing = plan.outgoing(device.id)
        tolerance = _TOLERANCE * max(1.0, device.load)
        if outgoing > device.load + tolerance:
            raise InfeasiblePlanError(device.id, outgoing, device.load)
        load = device.load + plan.incoming(device.id) - outgoing
        updated.append(
            DeviceState(
                id=device.id,
                workload=max(load, 0.0),
                capacity=device.capacity,
                predicted=0.0,
                history=list(device.history),
            )
        )
    return updated


def contribution_score(
    device_features: Tensor, loss: Tensor, device_id: str = ""
) -> ContributionScore:
    """Norma L2 de ∂pérdida/∂características, por muestra, promediada en el
    lote. Las características deben haber participado en la pérdida."""
    if not device_features.requires_grad:
        raise GradientError("las características no registran gradiente")
    if device_features.ndim == 0 or device_features.shape[0] == 0:
        raise ValueError("las características deben tener al menos una muestra")
    (grad,) = gradients(loss, [device_features])
    norms = np.linalg.norm(grad.reshape(grad.shape[0], -1), axis=1)
    return ContributionScore(device_id, float(np.mean(norms)))


def allocate_resources(scores: Sequence[ContributionScore], budget: float) -> dict[str, float]:
    """Reparte el presupuesto en proporción a los puntajes; con todos los
    puntajes en cero, en partes iguales."""
    if budget < 0:
        raise ValueError(f"el presupuesto no puede ser negativo: {budget!r}")
    if not scores:
        raise ValueError("no hay dispositivos entre los que repartir")
    total = math.fsum(s.score for s in scores)
    if total == 0.0:
        share = budget / len(scores)
        return {s.device_id: share for s in scores}
    return {s.device_id: budget * s.score / total for s in scores}


class JointInferenceResult(NamedTuple):
    logits: Tensor
    local_seconds: float
    global_seconds: float
    raw_dim: int
    transmitted_dim: int
    local_bytes: int
    global_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.local_bytes + self.global_bytes

    @property
    def compression_ratio(self) -> float:
        return self.raw_dim / self.transmitted_dim if self.transmitted_dim else math.inf


def joint_inference(
    pipeline: Pipeline,
    batch: SampleBatch,
    *,
    seed: int = 0,
    draw: int = 0,
    snr1_db: float | None = None,
    snr2_db: float | None = None,
) -> JointInferenceResult:
    """Inferencia en dos fases: local en el dispositivo (transmisor y primer
    salto) y global en el servidor de borde (relé, segundo salto y receptor).

    Los logits coinciden bit a bit con `end_to_end` bajo la misma semilla."""
    config = pipeline.config
    snr1, snr2 = hop_snrs(config, snr1_db, snr2_db, noiseless=False)
    with stopwatch() as local_elapsed:
        frame = device_stage(batch, pipeline, seed=seed, draw=draw, snr_db=snr1)
    with stopwatch() as global_elapsed:
        logits = server_stage(
            frame, batch, pipeline, seed=seed, draw=draw, snr_db=snr2
        )
    transmitted = frame.n_symbols if frame is not None else 0
    return JointInferenceResult(
        logits=logits,
        local_seconds=local_elapsed[0],
        global_seconds=global_elapsed[0],
        raw_dim=config.img_dim if config.mode.reads_image else 0,
        transmitted_dim=transmitted,
        local_bytes=len(batch) * transmitted * BYTES_PER_SYMBOL,
        global_bytes=len(batch) * config.n_sym2 * BYTES_PER_SYMBOL,
    )
