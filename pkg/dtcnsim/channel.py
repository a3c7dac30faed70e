"""Simulación del canal inalámbrico de cada salto (transmisor→relé y
relé→receptor): normalización de potencia y ruido blanco gaussiano aditivo.

Convención: símbolos reales, potencia unitaria por fila (por trama
transmitida) y varianza de ruido por símbolo real σ² = 10^(-snr_db/10).
"""

from __future__ import annotations

import dataclasses
import enum
import math
from typing import NamedTuple

import numpy as np

from dtcnsim.numcore import DimensionError, Tensor, add, rms_normalize_rows
from dtcnsim.util import rng_for


class DegenerateFrameError(ValueError):
    """Una fila de la trama no tiene ningún símbolo distinto de cero."""

    def __init__(self, rows: list[int]) -> None:
        super().__init__(
            f"trama degenerada: las filas {rows!r} son nulas y no se pueden normalizar"
        )
        self.rows = rows


class HopTag(enum.IntEnum):
    DEVICE_TO_RELAY = 1
    RELAY_TO_RECEIVER = 2


class SemanticFrame(NamedTuple):
    symbols: Tensor  # [batch, n_symbols]
    hop_tag: HopTag

    @property
    def batch_size(self) -> int:
        return self.symbols.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.symbols.shape[1]


@dataclasses.dataclass(frozen=True)
class ChannelConfig:
    snr_db: float
    seed: int = 0

    @property
    def noise_variance(self) -> float:
        if math.isinf(self.snr_db) and self.snr_db > 0:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)


def hop_rng(
    master_seed: int, hop_tag: HopTag, draw: int, sample_id: int | None = None
) -> np.random.Generator:
    """Generador del ruido de un salto.

    Se deriva con `SeedSequence([master_seed, hop_tag, draw])`, o con
    `[master_seed, hop_tag, draw, sample_id]` para el ruido de una sola
    muestra, así que los dos saltos y cada tirada tienen ruido independiente
    y reproducible."""
    if sample_id is None:
        return rng_for(master_seed, int(hop_tag), draw)
    return rng_for(master_seed, int(hop_tag), draw, sample_id)


def hop_noise(
    master_seed: int, hop_tag: HopTag, draw: int, sample_ids: np.ndarray, n_symbols: int
) -> np.ndarray:
    """Ruido unitario [muestras, n_symbols]; la fila de cada muestra depende
    solo de su id, no de las demás muestras del lote."""
    noise = np.empty((len(sample_ids), n_symbols))
    for row, sample_id in enumerate(sample_ids):
        noise[row] = hop_rng(master_seed, hop_tag, draw, int(sample_id)).standard_normal(n_symbols)
    return noise


def normalize_power(frame: SemanticFrame) -> SemanticFrame:
    symbols = frame.symbols
    if symbols.ndim != 2:
        raise DimensionError("normalize_power", symbols.shape, reason="se esperaba [lote, símbolos]")
    zero_rows = np.flatnonzero(~np.any(symbols.data != 0.0, axis=1))
    if zero_rows.size:
        raise DegenerateFrameError(zero_rows.tolist())
    return SemanticFrame(rms_normalize_rows(symbols), frame.hop_tag)


def awgn_transmit(
    frame: SemanticFrame,
    cfg: ChannelConfig,
    rng: np.random.Generator | None = None,
    *,
    noise: np.ndarray | None = None,
) -> SemanticFrame:
    """Suma ruido N(0, σ²) independiente a cada símbolo.

    `noise`, si se entrega, es ruido unitario ya sorteado (ver `hop_noise`)
    y reemplaza a `rng`. El ruido entra como constante, así que no participa
    en el gradiente. Con SNR infinita la trama pasa intacta."""
    variance = cfg.noise_variance
    if variance == 0.0:
        return frame
    if noise is None:
        if rng is None:
            rng = hop_rng(cfg.seed, frame.hop_tag, 0)
        noise = rng.standard_normal(frame.symbols.shape)
    elif noise.shape != frame.symbols.shape:
        raise DimensionError("awgn_transmit", frame.symbols.shape, noise.shape)
    noise = noise * math.sqrt(variance)
    return SemanticFrame(add(frame.symbols, Tensor(noise)), frame.hop_tag)


def measure_empirical_snr(clean: SemanticFrame, noisy: SemanticFrame) -> float:
    """10·log10(potencia de la señal / potencia del ruido), en dB.

    Sin ruido devuelve `math.inf`."""
    if clean.symbols.shape != noisy.symbols.shape:
        raise DimensionError(
            "measure_empirical_snr", clean.symbols.shape, noisy.symbols.shape
        )
    signal = clean.symbols.data
    noise = noisy.symbols.data - signal
    noise_power = float(np.mean(noise * noise))
    if noise_power == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.mean(signal * signal)) / noise_power)


def hop_transmit(
    frame: SemanticFrame, cfg: ChannelConfig, draw: int, sample_ids: np.ndarray
) -> SemanticFrame:
    """`awgn_transmit` con el ruido de cada fila sorteado según el id de su
    muestra; así una muestra recibe el mismo ruido viaje en el lote que viaje."""
    if cfg.noise_variance == 0.0:
        return frame
    noise = hop_noise(cfg.seed, frame.hop_tag, draw, sample_ids, frame.n_symbols)
    return awgn_transmit(frame, cfg, noise=noise)
