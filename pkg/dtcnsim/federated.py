"""Compartición de parámetros con aprendizaje federado.

Los servidores de borde entrenan copias locales de la cadena con sus
propios datos; el relé semántico, como servidor global, promedia los
parámetros con pesos y difunde el modelo global en cada ronda. El
transporte se simula dentro del proceso y solo se contabilizan los bytes.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas
from loguru import logger

from dtcnsim.data import EmptyDatasetError, MultimodalDataset
from dtcnsim.jscrc import Pipeline
from dtcnsim.numcore import ParameterSet, Tensor
from dtcnsim.training import Phase, TrainConfig, evaluate, fit
from dtcnsim.util import rng_for

BYTES_PER_VALUE = 8
_PARTITION_STREAM = 1


class Partition(enum.Enum):
    IID_EQUAL = "iid_equal"
    LABEL_SKEW = "label_skew"


@dataclasses.dataclass(frozen=True)
class FederatedConfig:
    n_clients: int = 10
    rounds: int | None = None  # por fase; None iguala las épocas del entrenamiento centralizado
    local_epochs: int = 1
    client_weights: tuple[float, ...] | None = None
    partition: Partition = Partition.IID_EQUAL
    classes_per_client: int = 2
    seed: int = 0
    phases: tuple[int, ...] = (1, 2, 3)
    early_stop: bool = False
    workers: int = 1
    # lote de cada cliente; None usa el del entrenamiento centralizado
    local_batch_size: int | None = None

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError(f"se necesita al menos un cliente: {self.n_clients!r}")
        if self.rounds is not None and self.rounds < 1:
            raise ValueError(f"se necesita al menos una ronda por fase: {self.rounds!r}")
        if self.rounds is None and self.local_epochs < 1:
            raise ValueError("sin un número fijo de rondas se necesita al menos una época local")
        if self.local_batch_size is not None and self.local_batch_size < 1:
            raise ValueError(f"el lote local debe ser positivo: {self.local_batch_size!r}")
        if self.client_weights is not None:
            if len(self.client_weights) != self.n_clients:
                raise ValueError(
                    f"hay {len(self.client_weights)} pesos para {self.n_clients} clientes"
                )
            if any(w < 0 for w in self.client_weights):
                raise ValueError("los pesos de los clientes deben ser no negativos")
            if abs(math.fsum(self.client_weights) - 1.0) > 1e-9:
                raise ValueError(
                    f"los pesos de los clientes deben sumar 1: suman {math.fsum(self.client_weights)!r}"
                )

    def rounds_for(self, phase: Phase, train_cfg: TrainConfig) -> int:
        if self.rounds is not None:
            return self.rounds
        return math.ceil(train_cfg.epochs_for(phase) / self.local_epochs)

    def local_batch_for(self, train_cfg: TrainConfig) -> int | None:
        return train_cfg.batch_size if self.local_batch_size is None else self.local_batch_size


@dataclasses.dataclass(frozen=True)
class RoundReport:
    round: int
    phase: int
    client_losses: tuple[float, ...]  # NaN para clientes omitidos
    global_accuracy: float
    bytes_exchanged: int


class LocalUpdate(NamedTuple):
    params: ParameterSet
    loss: float
    n_samples: int


class FederatedResult(NamedTuple):
    params: ParameterSet
    reports: list[RoundReport]


def partition_dataset(data: MultimodalDataset, cfg: FederatedConfig) -> list[MultimodalDataset]:
    """Reparte el conjunto entre los clientes.

    Cada fragmento conserva el orden relativo original de sus muestras."""
    n, k = len(data), cfg.n_clients
    if n < k:
        raise ValueError(f"hay {n} muestras para {k} clientes")
    rng = rng_for(cfg.seed, _PARTITION_STREAM)
    match cfg.partition:
        case Partition.IID_EQUAL:
            shards = np.array_split(rng.permutation(n), k)
        case Partition.LABEL_SKEW:
            n_classes = data.n_classes
            per_client = max(1, min(cfg.classes_per_client, n_classes))
            owners: dict[int, list[int]] = {c: [] for c in range(n_classes)}
            for client in range(k):
                for c in rng.choice(n_classes, size=per_client, replace=False):
                    owners[int(c)].append(client)
            for c, clients in owners.items():
                if not clients:
                    clients.append(c % k)
            pieces: list[list[np.ndarray]] = [[] for _ in range(k)]
            for c in range(n_classes):
                members = rng.permutation(np.flatnonzero(data.labels == c))
                clients = sorted(owners[c])
                for client, piece in zip(clients, np.array_split(members, len(clients))):
                    pieces[client].append(piece)
            shards = [
                np.concatenate(p) if p else np.empty(0, dtype=np.int64) for p in pieces
            ]
    return [data.subset(np.sort(shard)) for shard in shards]


def local_update(
    pipeline: Pipeline,
    global_params: ParameterSet,
    client_data: MultimodalDataset,
    local_epochs: int,
    lr: float,
    *,
    phase: Phase = Phase.JOINT,
    batch_size: int | None = None,
    snr_db: float = 10.0,
    seed: int = 0,
    momentum: float = 0.0,
    epoch_offset: int = 0,
    mask_augment: float = 0.0,
    mask_fraction: float = 0.5,
) -> LocalUpdate:
    """Copia de los parámetros globales avanzada `local_epochs` épocas sobre
    los datos del cliente. `pipeline` solo aporta la arquitectura."""
    if len(client_data) == 0:
        raise EmptyDatasetError("el fragmento del cliente está vacío")
    model = pipeline.clone()
    model.load_parameters(global_params)
    records = fit(
        model,
        client_data,
        phase,
        epochs=local_epochs,
        lr=lr,
        batch_size=batch_size,
        snr_db=snr_db,
        seed=seed,
        momentum=momentum,
        epoch_offset=epoch_offset,
        mask_augment=mask_augment,
        mask_fraction=mask_fraction,
    )
    loss = records[-1].loss if records else math.nan
    return LocalUpdate(model.parameters().copy(), loss, len(client_data))


def weighted_average(locals_: Sequence[tuple[ParameterSet, float]]) -> ParameterSet:
    """Σ wᵢ·paramsᵢ elemento a elemento, en el orden recibido."""
    if not locals_:
        raise ValueError("no hay modelos locales que promediar")
    total = math.fsum(w for _, w in locals_)
    if abs(total - 1.0) > 1e-9 or any(w < 0 for _, w in locals_):
        raise ValueError(f"los pesos deben ser no negativos y sumar 1: suman {total!r}")
    first, _ = locals_[0]
    for params, _ in locals_[1:]:
        first.require_compatible(params, "weighted_average")
    averaged = []
    for name in first:
        acc = locals_[0][1] * locals_[0][0][name].data
        for params, weight in locals_[1:]:
            acc = acc + weight * params[name].data
        averaged.append((name, Tensor(acc, requires_grad=first[name].requires_grad)))
    return ParameterSet(averaged)


def shard_weights(shards: Sequence[MultimodalDataset]) -> tuple[float, ...]:
    total = sum(len(s) for s in shards)
    return tuple(len(s) / total for s in shards)


def run_federated(
    cfg: FederatedConfig,
    pipeline: Pipeline,
    data: MultimodalDataset,
    train_cfg: TrainConfig,
    test_data: MultimodalDataset | None = None,
) -> FederatedResult:
    """Rondas de difusión → actualización local → promedio → evaluación,
    para cada fase de `cfg.phases`. Deja en `pipeline` el modelo global final."""
    shards = partition_dataset(data, cfg)
    weights = cfg.client_weights or shard_weights(shards)
    eval_data = test_data if test_data is not None else data
    n_values = pipeline.parameters().parameter_count()
    global_params = pipeline.parameters().copy()
    reports: list[RoundReport] = []
    local_batch = cfg.local_batch_for(train_cfg)
    logger.info(
        f"Aprendizaje federado: {cfg.n_clients} clientes, {cfg.local_epochs} épocas locales, "
        f"lote local {local_batch}, partición {cfg.partition.value}"
    )
    for phase in map(Phase, cfg.phases):
        accuracies: list[float] = []
        for round_in_phase in range(cfg.rounds_for(phase, train_cfg)):
            active = [k for k, shard in enumerate(shards) if len(shard) > 0 and weights[k] > 0]
            for k in set(range(cfg.n_clients)) - set(active):
                logger.warning(f"Cliente {k} sin datos o sin peso; se omite en la ronda")
            if not active:
                raise EmptyDatasetError("ningún cliente tiene datos para entrenar")

            def client_job(k: int) -> LocalUpdate:
                return local_update(
                    pipeline,
                    global_params,
                    shards[k],
                    cfg.local_epochs,
                    train_cfg.lr_for(phase),
                    phase=phase,
                    batch_size=local_batch,
                    snr_db=train_cfg.train_snr_db,
                    seed=train_cfg.seed,
                    momentum=train_cfg.momentum,
                    epoch_offset=round_in_phase * cfg.local_epochs,
                    mask_augment=train_cfg.mask_augment,
                    mask_fraction=train_cfg.mask_fraction,
                )

            if cfg.workers > 1:
                with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                    updates = dict(zip(active, pool.map(client_job, active)))
            else:
                updates = {k: client_job(k) for k in active}

            active_total = math.fsum(weights[k] for k in active)
            global_params = weighted_average(
                [(updates[k].params, weights[k] / active_total) for k in sorted(updates)]
            )
            pipeline.load_parameters(global_params)
            accuracy = evaluate(pipeline, eval_data, train_cfg.train_snr_db, train_cfg.seed)
            accuracies.append(accuracy)
            report = RoundReport(
                round=len(reports) + 1,
                phase=int(phase),
                client_losses=tuple(
                    updates[k].loss if k in updates else math.nan for k in range(cfg.n_clients)
                ),
                global_accuracy=accuracy,
                bytes_exchanged=BYTES_PER_VALUE * n_values * 2 * len(active),
            )
            reports.append(report)
            logger.debug(
                f"Ronda {report.round} (fase {report.phase}): exactitud global {accuracy:.3f}"
            )
            if (
                cfg.early_stop
                and len(accuracies) > 3
                and accuracies[-1] - accuracies[-4] < 0.001
            ):
                logger.warning(
                    f"Fase {int(phase)}: la exactitud mejoró menos de 0.1 pp en 3 rondas; "
                    "se detiene la fase"
                )
                break
    logger.success(
        f"Aprendizaje federado terminado tras {len(reports)} rondas, "
        f"{sum(r.bytes_exchanged for r in reports)} bytes intercambiados"
    )
    return FederatedResult(global_params, reports)


def rounds_frame(reports: Sequence[RoundReport], n_clients: int) -> pandas.DataFrame:
    rows = []
    for report in reports:
        row = {"round": report.round, "phase": report.phase}
        row.update({f"client_{k}_loss": report.client_losses[k] for k in range(n_clients)})
        row["global_accuracy"] = report.global_accuracy
        row["bytes_exchanged"] = report.bytes_exchanged
        rows.append(row)
    columns = (
        ["round", "phase"]
        + [f"client_{k}_loss" for k in range(n_clients)]
        + ["global_accuracy", "bytes_exchanged"]
    )
    return pandas.DataFrame(rows, columns=columns)


def write_rounds_csv(
    reports: Sequence[RoundReport], n_clients: int, path: str | os.PathLike
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rounds_frame(reports, n_clients).to_csv(path, index=False)
    return path
