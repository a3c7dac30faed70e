"""Cadena Deep-JSCRC: transmisor (codificador semántico + codificador JSC),
relé semántico (decodificador JSC + codificador de la modalidad B + fusión +
codificador JSC) y receptor (decodificador JSC + decodificador semántico de
fusión), más las líneas base de una sola modalidad.
"""

from __future__ import annotations

import dataclasses
import enum
import math
import os
from pathlib import Path
from typing import Iterator

import numpy as np
import orjson
from loguru import logger

from dtcnsim.channel import (
    ChannelConfig,
    HopTag,
    SemanticFrame,
    hop_transmit,
    normalize_power,
)
from dtcnsim.data import SampleBatch
from dtcnsim.numcore import (
    DenseNet,
    DimensionError,
    ParameterSet,
    Tensor,
    concat,
    load_parameters,
    save_parameters,
)
from dtcnsim.util import rng_for

MANIFEST_NAME = "dims.json"
ROLES = ("transmitter", "relay", "receiver")


class Mode(enum.IntEnum):
    DTCN = 1
    JSCC_IMAGE_ONLY = 2
    JSCC_TEXT_ONLY = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | Mode) -> Mode:
        if isinstance(value, Mode):
            return value
        try:
            return cls[value.strip().upper()]
        except KeyError:
            raise ValueError(
                f"modo desconocido {value!r}; se esperaba uno de "
                f"{[m.label for m in cls]!r}"
            ) from None

    @property
    def reads_image(self) -> bool:
        return self is not Mode.JSCC_TEXT_ONLY

    @property
    def reads_text(self) -> bool:
        return self is not Mode.JSCC_IMAGE_ONLY


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    img_dim: int
    txt_dim: int
    n_classes: int
    d_sem: int = 16
    d_txt: int = 8
    d_fused: int = 16
    n_sym1: int = 28
    n_sym2: int = 192
    hidden: int = 32
    snr1_db: float = 10.0
    snr2_db: float = 10.0
    mode: Mode = Mode.DTCN

    def with_snr(self, snr_db: float) -> PipelineConfig:
        return dataclasses.replace(self, snr1_db=snr_db, snr2_db=snr_db)

    def to_dict(self) -> dict:
        values = dataclasses.asdict(self)
        values["mode"] = self.mode.label
        return values

    @classmethod
    def from_dict(cls, values: dict) -> PipelineConfig:
        values = dict(values)
        values["mode"] = Mode.parse(values.get("mode", "dtcn"))
        return cls(**values)


class _Role:
    """Base de los tres papeles: expone sus redes y parámetros en orden fijo."""

    def networks(self) -> Iterator[DenseNet]:
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, DenseNet):
                yield value

    def parameters(self) -> ParameterSet:
        return ParameterSet(
            (name, tensor) for net in self.networks() for name, tensor in net.params.items()
        )


@dataclasses.dataclass
class TransmitterModel(_Role):
    semantic_encoder: DenseNet  # img_dim → d_sem
    jsc_encoder: DenseNet  # d_sem → n_sym1


@dataclasses.dataclass
class RelayModel(_Role):
    fusion_net: DenseNet  # d_sem + d_txt → d_fused
    jsc_encoder2: DenseNet  # d_fused → n_sym2
    d_sem: int
    d_txt: int
    jsc_decoder: DenseNet | None = None  # n_sym1 → d_sem, ausente en JSCC-T
    modb_encoder: DenseNet | None = None  # txt_dim → d_txt, ausente en JSCC-I


@dataclasses.dataclass
class ReceiverModel(_Role):
    jsc_decoder2: DenseNet  # n_sym2 → d_fused
    fusion_semantic_decoder: DenseNet  # d_fused → K


@dataclasses.dataclass
class Pipeline:
    config: PipelineConfig
    transmitter: TransmitterModel | None
    relay: RelayModel
    receiver: ReceiverModel

    @classmethod
    def build(cls, config: PipelineConfig, seed: int) -> Pipeline:
        """Construye los tres modelos con pesos iniciales deterministas."""
        rng = rng_for(seed)
        h = config.hidden
        mode = config.mode

        def net(name: str, *sizes: int) -> DenseNet:
            return DenseNet.build(name, sizes, rng)

        transmitter = None
        if mode.reads_image:
            transmitter = TransmitterModel(
                semantic_encoder=net("transmitter.semantic_encoder", config.img_dim, h, config.d_sem),
                jsc_encoder=net("transmitter.jsc_encoder", config.d_sem, h, config.n_sym1),
            )
        relay = RelayModel(
            fusion_net=net("relay.fusion_net", config.d_sem + config.d_txt, h, config.d_fused),
            jsc_encoder2=net("relay.jsc_encoder2", config.d_fused, h, config.n_sym2),
            d_sem=config.d_sem,
            d_txt=config.d_txt,
            jsc_decoder=net("relay.jsc_decoder", config.n_sym1, h, config.d_sem)
            if mode.reads_image
            else None,
            modb_encoder=net("relay.modb_encoder", config.txt_dim, h, config.d_txt)
            if mode.reads_text
            else None,
        )
        receiver = ReceiverModel(
            jsc_decoder2=net("receiver.jsc_decoder2", config.n_sym2, h, config.d_fused),
            fusion_semantic_decoder=net(
                "receiver.fusion_semantic_decoder", config.d_fused, h, config.n_classes
            ),
        )
        return cls(config, transmitter, relay, receiver)

    def roles(self) -> Iterator[tuple[str, _Role]]:
        for role in ROLES:
            model = getattr(self, role)
            if model is not None:
                yield role, model

    def networks(self) -> Iterator[DenseNet]:
        for _, model in self.roles():
            yield from model.networks()

    def parameters(self) -> ParameterSet:
        return ParameterSet(
            (name, tensor) for net in self.networks() for name, tensor in net.params.items()
        )

    def load_parameters(self, params: ParameterSet) -> None:
        self.parameters().require_compatible(params, "Pipeline.load_parameters")
        for net in self.networks():
            net.load(params)

    def clone(self) -> Pipeline:
        copy = Pipeline.build(self.config, seed=0)
        copy.load_parameters(self.parameters())
        return copy


def _as_input(x, expected_dim: int, operation: str) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != expected_dim:
        raise DimensionError(operation, x.shape, (None, expected_dim))
    return x


def transmitter_features(x_img, model: TransmitterModel) -> Tensor:
    x = _as_input(x_img, model.semantic_encoder.in_dim, "transmitter_forward")
    return model.semantic_encoder(x)


def transmitter_forward(x_img, model: TransmitterModel) -> SemanticFrame:
    symbols = model.jsc_encoder(transmitter_features(x_img, model))
    return normalize_power(SemanticFrame(symbols, HopTag.DEVICE_TO_RELAY))


def relay_fused_features(
    sem_features: Tensor | None, x_txt, model: RelayModel, batch: int
) -> Tensor:
    """Fusiona las características de la modalidad A con las de la
    modalidad B.

    Una rama ausente del modelo se reemplaza por un vector nulo a la entrada
    de la fusión; un texto ausente, con el codificador de la modalidad B
    presente, se reemplaza por un texto nulo."""
    if sem_features is None:
        sem_features = Tensor(np.zeros((batch, model.d_sem)))
    if model.modb_encoder is None:
        txt_features = Tensor(np.zeros((batch, model.d_txt)))
    else:
        if x_txt is None:
            x_txt = np.zeros((batch, model.modb_encoder.in_dim))
        x_txt = _as_input(x_txt, model.modb_encoder.in_dim, "relay_forward")
        if x_txt.shape[0] != batch:
            raise DimensionError(
                "relay_forward", (batch,), x_txt.shape, reason="lotes de trama y texto distintos"
            )
        txt_features = model.modb_encoder(x_txt)
    return model.fusion_net(concat([sem_features, txt_features], axis=1))


def relay_forward(rx_frame: SemanticFrame | None, x_txt, model: RelayModel) -> SemanticFrame:
    if rx_frame is not None:
        if model.jsc_decoder is None:
            raise ValueError("el relé no tiene decodificador JSC para la trama recibida")
        if rx_frame.n_symbols != model.jsc_decoder.in_dim:
            raise DimensionError(
                "relay_forward", rx_frame.symbols.shape, (None, model.jsc_decoder.in_dim)
            )
        batch = rx_frame.batch_size
        sem_features = model.jsc_decoder(rx_frame.symbols)
    elif x_txt is not None:
        batch = np.shape(x_txt.data if isinstance(x_txt, Tensor) else x_txt)[0]
        sem_features = None
    else:
        raise ValueError("el relé no recibió ni trama ni texto")
    fused = relay_fused_features(sem_features, x_txt, model, batch)
    symbols = model.jsc_encoder2(fused)
    return normalize_power(SemanticFrame(symbols, HopTag.RELAY_TO_RECEIVER))


def receiver_forward(rx_frame: SemanticFrame, model: ReceiverModel) -> Tensor:
    if rx_frame.n_symbols != model.jsc_decoder2.in_dim:
        raise DimensionError(
            "receiver_forward", rx_frame.symbols.shape, (None, model.jsc_decoder2.in_dim)
        )
    return model.fusion_semantic_decoder(model.jsc_decoder2(rx_frame.symbols))


def hop_snrs(
    config: PipelineConfig, snr1_db: float | None, snr2_db: float | None, noiseless: bool
) -> tuple[float, float]:
    if noiseless:
        return math.inf, math.inf
    return (
        config.snr1_db if snr1_db is None else snr1_db,
        config.snr2_db if snr2_db is None else snr2_db,
    )


def device_stage(
    batch: SampleBatch,
    pipeline: Pipeline,
    *,
    seed: int,
    draw: int,
    snr_db: float,
) -> SemanticFrame | None:
    """Fase local: el dispositivo codifica su imagen y la trama cruza el
    primer salto. En JSCC-T no hay nada que transmitir."""
    if not pipeline.config.mode.reads_image:
        return None
    frame = transmitter_forward(batch.x_img, pipeline.transmitter)
    return hop_transmit(frame, ChannelConfig(snr_db, seed), draw, batch.sample_ids())


def server_stage(
    frame: SemanticFrame | None,
    batch: SampleBatch,
    pipeline: Pipeline,
    *,
    seed: int,
    draw: int,
    snr_db: float,
) -> Tensor:
    """Fase global: el relé fusiona y reenvía, el receptor clasifica."""
    x_txt = batch.x_txt if pipeline.config.mode.reads_text else None
    relayed = relay_forward(frame, x_txt, pipeline.relay)
    received = hop_transmit(relayed, ChannelConfig(snr_db, seed), draw, batch.sample_ids())
    return receiver_forward(received, pipeline.receiver)


def end_to_end(
    batch: SampleBatch,
    pipeline: Pipeline,
    *,
    seed: int = 0,
    draw: int = 0,
    snr1_db: float | None = None,
    snr2_db: float | None = None,
    noiseless: bool = False,
) -> Tensor:
    """transmisor → AWGN → relé → AWGN → receptor; devuelve los logits.

    El ruido de cada muestra depende de (seed, salto, draw, id de la muestra)."""
    snr1, snr2 = hop_snrs(pipeline.config, snr1_db, snr2_db, noiseless)
    frame = device_stage(batch, pipeline, seed=seed, draw=draw, snr_db=snr1)
    return server_stage(
        frame, batch, pipeline, seed=seed, draw=draw, snr_db=snr2
    )


def predict(logits: Tensor) -> np.ndarray:
    return np.argmax(logits.data, axis=1)


def save_pipeline(pipeline: Pipeline, directory: str | os.PathLike) -> Path:
    """Un archivo de parámetros por papel más el manifiesto de dimensiones."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for role, model in pipeline.roles():
        save_parameters(model.parameters(), directory / f"{role}.params")
    (directory / MANIFEST_NAME).write_bytes(
        orjson.dumps(
            pipeline.config.to_dict(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS
        )
    )
    logger.debug(f"Cadena guardada en {str(directory)!r}")
    return directory


def load_pipeline(directory: str | os.PathLike) -> Pipeline:
    directory = Path(directory)
    config = PipelineConfig.from_dict(orjson.loads((directory / MANIFEST_NAME).read_bytes()))
    pipeline = Pipeline.build(config, seed=0)
    entries = []
    for role, _ in pipeline.roles():
        entries.extend(load_parameters(directory / f"{role}.params").items())
    pipeline.load_parameters(ParameterSet(entries))
    return pipeline
