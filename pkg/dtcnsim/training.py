"""Entrenamiento centralizado en tres fases y evaluación.

1. Codificación semántica y fusión en el relé, sin canal ni códecs JSC,
   con entropía cruzada.
2. Cada par codificador/decodificador JSC como autocodificador a través de su
   salto AWGN, con pérdida L1 contra la característica previa al canal.
3. Entrenamiento conjunto de todo, de punta a punta con canales, con
   entropía cruzada.

El canal usa la misma SNR en entrenamiento y en evaluación.
"""

from __future__ import annotations

import dataclasses
import enum
import os
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas
from loguru import logger

from dtcnsim.channel import ChannelConfig, HopTag, SemanticFrame, hop_transmit, normalize_power
from dtcnsim.data import EmptyDatasetError, MultimodalDataset, SampleBatch, mask_batch
from dtcnsim.jscrc import (
    Mode,
    Pipeline,
    end_to_end,
    relay_fused_features,
    save_pipeline,
    transmitter_features,
)
from dtcnsim.numcore import (
    SGD,
    ComputationTape,
    DenseNet,
    ParameterSet,
    Tensor,
    backward,
    cross_entropy_loss,
    l1_loss,
)
from dtcnsim.util import derive_seed, rng_for, stopwatch

METRICS_COLUMNS = ["phase", "epoch", "loss", "accuracy", "snr_db", "wall_seconds"]
_AUGMENT_STREAM = 3


class Phase(enum.IntEnum):
    SEMANTIC = 1
    JSC = 2
    JOINT = 3


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    epochs: tuple[int, int, int] = (20, 10, 20)
    learning_rates: tuple[float, float, float] = (0.1, 0.05, 0.05)
    batch_size: int = 32
    train_snr_db: float = 10.0
    seed: int = 0
    momentum: float = 0.0
    # probabilidad de enmascarar la modalidad A de cada muestra en las fases 1 y 3
    mask_augment: float = 0.0
    mask_fraction: float = 0.5

    def epochs_for(self, phase: Phase) -> int:
        return self.epochs[phase - 1]

    def lr_for(self, phase: Phase) -> float:
        return self.learning_rates[phase - 1]

    def with_snr(self, snr_db: float) -> TrainConfig:
        return dataclasses.replace(self, train_snr_db=snr_db)


@dataclasses.dataclass(frozen=True)
class MetricsRecord:
    phase: int
    epoch: int
    loss: float
    accuracy: float
    snr_db: float
    wall_seconds: float


def trainable_networks(pipeline: Pipeline, phase: Phase) -> list[DenseNet]:
    tx, relay, rx = pipeline.transmitter, pipeline.relay, pipeline.receiver
    match Phase(phase):
        case Phase.SEMANTIC:
            nets = [
                tx and tx.semantic_encoder,
                relay.modb_encoder,
                relay.fusion_net,
                rx.fusion_semantic_decoder,
            ]
        case Phase.JSC:
            nets = [
                tx and tx.jsc_encoder,
                relay.jsc_decoder,
                relay.jsc_encoder2,
                rx.jsc_decoder2,
            ]
        case Phase.JOINT:
            nets = list(pipeline.networks())
    return [net for net in nets if net is not None]


def trainable_parameters(pipeline: Pipeline, phase: Phase) -> ParameterSet:
    return ParameterSet(
        (name, tensor)
        for net in trainable_networks(pipeline, phase)
        for name, tensor in net.params.items()
    )


def _jsc_hop(
    target: Tensor,
    encoder: DenseNet,
    decoder: DenseNet,
    hop_tag: HopTag,
    sample_ids: np.ndarray,
    *,
    snr_db: float,
    seed: int,
    draw: int,
) -> Tensor:
    frame = normalize_power(SemanticFrame(encoder(target), hop_tag))
    noisy = hop_transmit(frame, ChannelConfig(snr_db, seed), draw, sample_ids)
    return decoder(noisy.symbols)


def phase_objective(
    pipeline: Pipeline,
    batch: SampleBatch,
    phase: Phase,
    *,
    snr_db: float,
    seed: int,
    draw: int,
) -> tuple[Tensor, np.ndarray]:
    """Pérdida de la fase sobre un lote y los logits con los que se mide la
    exactitud del lote."""
    mode = pipeline.config.mode
    x_txt = batch.x_txt if mode.reads_text else None
    tx, relay, rx = pipeline.transmitter, pipeline.relay, pipeline.receiver
    match Phase(phase):
        case Phase.SEMANTIC:
            sem = transmitter_features(batch.x_img, tx) if tx else None
            fused = relay_fused_features(sem, x_txt, relay, len(batch))
            logits = rx.fusion_semantic_decoder(fused)
            return cross_entropy_loss(logits, batch.labels), logits.data
        case Phase.JSC:
            # los objetivos vienen de las redes congeladas de la fase 1
            losses = []
            sem = None
            if tx:
                sem = transmitter_features(batch.x_img, tx).detach()
                recon = _jsc_hop(
                    sem,
                    tx.jsc_encoder,
                    relay.jsc_decoder,
                    HopTag.DEVICE_TO_RELAY,
                    batch.sample_ids(),
                    snr_db=snr_db,
                    seed=seed,
                    draw=draw,
                )
                losses.append(l1_loss(recon, sem))
            fused = relay_fused_features(sem, x_txt, relay, len(batch)).detach()
            recon2 = _jsc_hop(
                fused,
                relay.jsc_encoder2,
                rx.jsc_decoder2,
                HopTag.RELAY_TO_RECEIVER,
                batch.sample_ids(),
                snr_db=snr_db,
                seed=seed,
                draw=draw,
            )
            losses.append(l1_loss(recon2, fused))
            loss = losses[0] if len(losses) == 1 else losses[0] + losses[1]
            return loss, rx.fusion_semantic_decoder(recon2).data
        case Phase.JOINT:
            logits = end_to_end(
                batch, pipeline, seed=seed, draw=draw, snr1_db=snr_db, snr2_db=snr_db
            )
            return cross_entropy_loss(logits, batch.labels), logits.data


def fit(
    pipeline: Pipeline,
    data: MultimodalDataset,
    phase: Phase,
    *,
    epochs: int,
    lr: float,
    batch_size: int | None,
    snr_db: float,
    seed: int,
    momentum: float = 0.0,
    epoch_offset: int = 0,
    mask_augment: float = 0.0,
    mask_fraction: float = 0.5,
) -> list[MetricsRecord]:
    """Entrena en el lugar los parámetros de la fase durante `epochs` épocas.

    El orden de los lotes depende de (seed, fase, época); el ruido y el
    enmascarado de cada muestra, de (seed, fase, época, id de la muestra).
    Así `epoch_offset` permite continuar una corrida partida en tramos sin
    cambiar el resultado, y un fragmento de los datos ve el mismo ruido que
    en el conjunto completo."""
    if len(data) == 0:
        raise EmptyDatasetError("no se puede entrenar con un conjunto vacío")
    phase = Phase(phase)
    params = trainable_parameters(pipeline, phase)
    optimizer = SGD(lr, momentum)
    noise_seed = derive_seed(seed, phase)
    augment = mask_augment if phase is not Phase.JSC and pipeline.config.mode.reads_image else 0.0
    records = []
    for local_epoch in range(epochs):
        epoch = epoch_offset + local_epoch
        total_loss = 0.0
        correct = 0
        with stopwatch() as elapsed:
            batches = data.batches(batch_size, rng_for(seed, phase, epoch))
            mask_seed = derive_seed(seed, phase, epoch, _AUGMENT_STREAM)
            for batch in batches:
                if augment:
                    batch = mask_batch(batch, mask_fraction, augment, mask_seed)
                with ComputationTape():
                    loss, logits = phase_objective(
                        pipeline,
                        batch,
                        phase,
                        snr_db=snr_db,
                        seed=noise_seed,
                        draw=epoch,
                    )
                    grads = backward(loss, params)
                updated = optimizer.step(params, grads)
                for name, tensor in params.items():
                    tensor.data = updated[name].data
                total_loss += loss.item() * len(batch)
                correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
        record = MetricsRecord(
            phase=int(phase),
            epoch=epoch + 1,
            loss=total_loss / len(data),
            accuracy=correct / len(data),
            snr_db=snr_db,
            wall_seconds=elapsed[0],
        )
        logger.debug(
            f"Fase {record.phase}, época {record.epoch}: pérdida={record.loss:.4f}, "
            f"exactitud={record.accuracy:.3f}"
        )
        records.append(record)
    return records


def _train_phase(
    pipeline: Pipeline, data: MultimodalDataset, cfg: TrainConfig, phase: Phase
) -> list[MetricsRecord]:
    logger.info(
        f"Entrenando fase {int(phase)} ({phase.name.lower()}) de {pipeline.config.mode.label} "
        f"a {cfg.train_snr_db} dB"
    )
    records = fit(
        pipeline,
        data,
        phase,
        epochs=cfg.epochs_for(phase),
        lr=cfg.lr_for(phase),
        batch_size=cfg.batch_size,
        snr_db=cfg.train_snr_db,
        seed=cfg.seed,
        momentum=cfg.momentum,
        mask_augment=cfg.mask_augment,
        mask_fraction=cfg.mask_fraction,
    )
    if records:
        logger.success(
            f"Fase {int(phase)} terminada: pérdida final {records[-1].loss:.4f}, "
            f"exactitud {records[-1].accuracy:.3f}"
        )
    return records


def train_phase1(pipeline: Pipeline, data: MultimodalDataset, cfg: TrainConfig) -> list[MetricsRecord]:
    return _train_phase(pipeline, data, cfg, Phase.SEMANTIC)


def train_phase2(pipeline: Pipeline, data: MultimodalDataset, cfg: TrainConfig) -> list[MetricsRecord]:
    return _train_phase(pipeline, data, cfg, Phase.JSC)


def train_phase3(pipeline: Pipeline, data: MultimodalDataset, cfg: TrainConfig) -> list[MetricsRecord]:
    return _train_phase(pipeline, data, cfg, Phase.JOINT)


def train_pipeline(
    pipeline: Pipeline,
    data: MultimodalDataset,
    cfg: TrainConfig,
    checkpoint_dir: str | os.PathLike | None = None,
) -> list[MetricsRecord]:
    """Las tres fases seguidas, con un punto de control al final de cada una."""
    records: list[MetricsRecord] = []
    for phase, step in zip(Phase, (train_phase1, train_phase2, train_phase3)):
        records.extend(step(pipeline, data, cfg))
        if checkpoint_dir is not None:
            save_pipeline(pipeline, Path(checkpoint_dir) / f"phase{int(phase)}")
    return records


def evaluate(
    pipeline: Pipeline,
    test_data: MultimodalDataset,
    snr_db: float,
    seed: int,
    mode: Mode | None = None,
    *,
    noiseless: bool = False,
    batch_size: int = 256,
) -> float:
    """Fracción de predicciones correctas con el canal sembrado por `seed`."""
    if len(test_data) == 0:
        raise EmptyDatasetError("no se puede evaluar con un conjunto vacío")
    if mode is not None and Mode.parse(mode) is not pipeline.config.mode:
        raise ValueError(
            f"la cadena es {pipeline.config.mode.label!r} y se pidió evaluar {Mode.parse(mode).label!r}"
        )
    correct = 0
    for batch in test_data.batches(batch_size):
        logits = end_to_end(
            batch,
            pipeline,
            seed=seed,
            draw=0,
            snr1_db=snr_db,
            snr2_db=snr_db,
            noiseless=noiseless,
        )
        correct += int(np.sum(np.argmax(logits.data, axis=1) == batch.labels))
    return correct / len(test_data)


def metrics_frame(records: Sequence[MetricsRecord]) -> pandas.DataFrame:
    return pandas.DataFrame([dataclasses.asdict(r) for r in records], columns=METRICS_COLUMNS)


def write_metrics_csv(records: Sequence[MetricsRecord], path: str | os.PathLike) -> Path:
    """Agrega los registros al CSV; la cabecera solo se escribe si el archivo es nuevo."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    exists = path.exists() and path.stat().st_size > 0
    metrics_frame(records).to_csv(path, mode="a", header=not exists, index=False)
    return path
