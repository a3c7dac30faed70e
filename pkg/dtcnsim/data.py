"""Datos multimodales sintéticos: generación, enmascarado y serialización.

Cada clase k tiene un prototipo fijo por modalidad; las muestras son el
prototipo más ruido gaussiano. La modalidad B mezcla el prototipo de su
clase con un prototipo sin información según ρ (ρ=0: la modalidad B es
ruido puro).
"""

from __future__ import annotations

import dataclasses
import math
import os
import struct
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from loguru import logger

from dtcnsim.util import chunks, rng_for

DATASET_MAGIC = b"DTCNDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<HIIII")


class DatasetFormatError(ValueError):
    """El archivo de datos está corrupto o truncado."""

    def __init__(self, path: str | os.PathLike, reason: str) -> None:
        super().__init__(f"archivo de datos {str(path)!r} no es válido: {reason}")
        self.path = Path(path)
        self.reason = reason


class DatasetVersionError(DatasetFormatError):
    def __init__(self, path: str | os.PathLike, found: int) -> None:
        super().__init__(
            path, f"versión {found} no soportada (se esperaba {DATASET_VERSION})"
        )
        self.found = found


class EmptyDatasetError(ValueError):
    """Se pidió entrenar o evaluar con un conjunto de datos vacío."""


class SyntheticSpecError(ValueError):
    pass


class MultimodalSample(NamedTuple):
    x_img: np.ndarray  # modalidad A, [img_dim]
    x_txt: np.ndarray  # modalidad B, [txt_dim]
    label: int


class SampleBatch(NamedTuple):
    x_img: np.ndarray  # [lote, img_dim]
    x_txt: np.ndarray  # [lote, txt_dim]
    labels: np.ndarray  # [lote], int64
    ids: np.ndarray | None = None  # identificador de cada muestra en su conjunto de origen

    def sample_ids(self) -> np.ndarray:
        if self.ids is None:
            return np.arange(len(self), dtype=np.int64)
        return self.ids

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 10
    img_dim: int = 32
    txt_dim: int = 16
    separation: float = 1.0
    sigma_a: float = 0.8
    sigma_b: float = 1.5
    rho: float = 0.8
    n_train: int = 2000
    n_test: int = 1000
    seed: int = 1234


@dataclasses.dataclass(frozen=True, eq=False)
class MultimodalDataset:
    """Conjunto inmutable de muestras multimodales, guardado por columnas."""

    x_img: np.ndarray
    x_txt: np.ndarray
    labels: np.ndarray
    n_classes: int
    ids: np.ndarray | None = None

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.ids is None:
            object.__setattr__(self, "ids", np.arange(n, dtype=np.int64))
        elif self.ids.shape != (n,):
            raise ValueError(f"se esperaban {n} identificadores y hay {self.ids.shape}")
        if self.x_img.ndim != 2 or self.x_txt.ndim != 2:
            raise ValueError("las modalidades deben ser matrices [muestras, dimensión]")
        if self.x_img.shape[0] != n or self.x_txt.shape[0] != n:
            raise ValueError(
                f"cantidades de muestras distintas: {self.x_img.shape[0]}, "
                f"{self.x_txt.shape[0]} y {n} etiquetas"
            )
        for array in (self.x_img, self.x_txt, self.labels, self.ids):
            array.flags.writeable = False

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, idx: int) -> MultimodalSample:
        return MultimodalSample(self.x_img[idx], self.x_txt[idx], int(self.labels[idx]))

    def __iter__(self) -> Iterator[MultimodalSample]:
        return (self[idx] for idx in range(len(self)))

    @property
    def img_dim(self) -> int:
        return self.x_img.shape[1]

    @property
    def txt_dim(self) -> int:
        return self.x_txt.shape[1]

    def subset(self, indices) -> MultimodalDataset:
        indices = np.asarray(indices, dtype=np.int64)
        return MultimodalDataset(
            self.x_img[indices].copy(),
            self.x_txt[indices].copy(),
            self.labels[indices].copy(),
            self.n_classes,
            self.ids[indices].copy(),
        )

    def as_batch(self) -> SampleBatch:
        return SampleBatch(self.x_img, self.x_txt, self.labels, self.ids)

    def batches(
        self, batch_size: int | None = None, rng: np.random.Generator | None = None
    ) -> Iterator[SampleBatch]:
        """Recorre el conjunto en lotes; sin `batch_size` entrega un solo
        lote completo, y con `rng` baraja el orden antes de partir."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for idx in chunks(order, batch_size or max(len(self), 1)):
            yield SampleBatch(self.x_img[idx], self.x_txt[idx], self.labels[idx], self.ids[idx])


def class_prototypes(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Prototipos por clase de cada modalidad y el prototipo sin información."""
    rng = rng_for(spec.seed, 0)
    proto_a = rng.standard_normal((spec.n_classes, spec.img_dim)) * spec.separation
    proto_b = rng.standard_normal((spec.n_classes, spec.txt_dim)) * spec.separation
    uninformative = rng.standard_normal(spec.txt_dim) * spec.separation
    return proto_a, proto_b, uninformative


def generate_synthetic(spec: SyntheticSpec) -> tuple[MultimodalDataset, MultimodalDataset]:
    """Genera los conjuntos de entrenamiento y prueba, deterministas en la semilla."""
    if spec.n_classes < 2:
        raise SyntheticSpecError(f"se necesitan al menos 2 clases, hay {spec.n_classes}")
    if not 0.0 <= spec.rho <= 1.0:
        raise SyntheticSpecError(f"rho debe estar en [0, 1]: {spec.rho!r}")
    if spec.img_dim <= 0 or spec.txt_dim <= 0:
        raise SyntheticSpecError("las dimensiones de las modalidades deben ser positivas")
    proto_a, proto_b, uninformative = class_prototypes(spec)

    def draw(n: int, stream: int) -> MultimodalDataset:
        rng = rng_for(spec.seed, stream)
        labels = np.arange(n, dtype=np.int64) % spec.n_classes
        rng.shuffle(labels)
        x_img = proto_a[labels] + spec.sigma_a * rng.standard_normal((n, spec.img_dim))
        x_txt = (
            spec.rho * proto_b[labels]
            + (1.0 - spec.rho) * uninformative
            + spec.sigma_b * rng.standard_normal((n, spec.txt_dim))
        )
        return MultimodalDataset(x_img, x_txt, labels, spec.n_classes)

    train, test = draw(spec.n_train, 1), draw(spec.n_test, 2)
    logger.debug(
        f"Datos sintéticos generados: {len(train)} de entrenamiento, {len(test)} de prueba, "
        f"K={spec.n_classes}, rho={spec.rho}"
    )
    return train, test


def _masked_coordinates(dim: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"la fracción enmascarada debe estar en [0, 1]: {fraction!r}")
    # redondeo hacia arriba en la mitad, no el del banquero
    count = int(math.floor(fraction * dim + 0.5))
    return rng.choice(dim, size=count, replace=False)


def mask_modality_a(sample: MultimodalSample, fraction: float, seed: int) -> MultimodalSample:
    """Anula round(fraction·img_dim) coordenadas de la modalidad A elegidas
    con la semilla; la etiqueta y la modalidad B no cambian."""
    x_img = np.array(sample.x_img, dtype=np.float64, copy=True)
    x_img[_masked_coordinates(x_img.shape[0], fraction, rng_for(seed))] = 0.0
    return sample._replace(x_img=x_img)


def mask_dataset(dataset: MultimodalDataset, fraction: float, seed: int) -> MultimodalDataset:
    """Aplica `mask_modality_a` a cada muestra con semillas (seed, índice)."""
    x_img = dataset.x_img.copy()
    for idx in range(len(dataset)):
        coords = _masked_coordinates(dataset.img_dim, fraction, rng_for(seed, idx))
        x_img[idx, coords] = 0.0
    return MultimodalDataset(
        x_img,
        dataset.x_txt.copy(),
        dataset.labels.copy(),
        dataset.n_classes,
        dataset.ids.copy(),
    )


def mask_batch(batch: SampleBatch, fraction: float, probability: float, seed: int) -> SampleBatch:
    """Enmascara la modalidad A de cada muestra del lote con probabilidad
    `probability`. La decisión y las coordenadas dependen solo de
    (seed, id de la muestra), no del lote en que viaja."""
    if not 0.0 <= probability <= 1.0:
        raise ValueError(f"la probabilidad de enmascarado debe estar en [0, 1]: {probability!r}")
    if probability == 0.0:
        return batch
    x_img = np.array(batch.x_img, dtype=np.float64, copy=True)
    for row, sample_id in enumerate(batch.sample_ids()):
        rng = rng_for(seed, int(sample_id))
        if rng.random() < probability:
            x_img[row, _masked_coordinates(x_img.shape[1], fraction, rng)] = 0.0
    return batch._replace(x_img=x_img)


def save_dataset(dataset: MultimodalDataset, path: str | os.PathLike) -> Path:
    """Guarda el conjunto: magia, cabecera versionada con dimensiones y los
    valores en little-endian de 64 bits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = DATASET_MAGIC + _HEADER.pack(
        DATASET_VERSION, len(dataset), dataset.img_dim, dataset.txt_dim, dataset.n_classes
    )
    path.write_bytes(
        header
        + np.ascontiguousarray(dataset.x_img, dtype="<f8").tobytes()
        + np.ascontiguousarray(dataset.x_txt, dtype="<f8").tobytes()
        + np.ascontiguousarray(dataset.labels, dtype="<i8").tobytes()
    )
    logger.debug(f"Conjunto de {len(dataset)} muestras guardado en {str(path)!r}")
    return path


def load_dataset(path: str | os.PathLike) -> MultimodalDataset:
    path = Path(path)
    raw = path.read_bytes()
    head_len = len(DATASET_MAGIC) + _HEADER.size
    if len(raw) < head_len:
        raise DatasetFormatError(path, "la cabecera está truncada")
    if raw[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise DatasetFormatError(path, "la cabecera no corresponde")
    version, n, img_dim, txt_dim, n_classes = _HEADER.unpack(raw[len(DATASET_MAGIC) : head_len])
    if version != DATASET_VERSION:
        raise DatasetVersionError(path, version)
    expected = head_len + 8 * (n * img_dim + n * txt_dim + n)
    if len(raw) != expected:
        raise DatasetFormatError(
            path, f"se esperaban {expected} bytes y hay {len(raw)} (archivo truncado o con sobras)"
        )
    cursor = head_len

    def take(count: int, dtype: str) -> np.ndarray:
        nonlocal cursor
        values = np.frombuffer(raw, dtype=dtype, count=count, offset=cursor)
        cursor += 8 * count
        return values

    x_img = take(n * img_dim, "<f8").astype(np.float64).reshape(n, img_dim)
    x_txt = take(n * txt_dim, "<f8").astype(np.float64).reshape(n, txt_dim)
    labels = take(n, "<i8").astype(np.int64)
    if np.any((labels < 0) | (labels >= n_classes)):
        raise DatasetFormatError(path, "hay etiquetas fuera de rango")
    return MultimodalDataset(x_img, x_txt, labels, n_classes)
