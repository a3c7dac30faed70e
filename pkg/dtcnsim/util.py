import enum
import time
from contextlib import contextmanager
from typing import Iterator, Sequence, TypeVar

import numpy as np
from sqlalchemy import Integer, TypeDecorator

S = TypeVar("S", bound=Sequence)


def chunks(seq: S, chunk_size: int) -> Iterator[S]:
    """Devuelve una secuencia partida en partes de un tamaño determinado.

    La última parte entregada puede ser de menor tamaño.
    """
    assert chunk_size > 0
    for idx in range(0, len(seq), chunk_size):
        yield seq[idx : idx + chunk_size]


def derive_seed(*parts: int) -> int:
    """Deriva una semilla de 64 bits estable a partir de enteros no negativos.

    Usa `SeedSequence`, así que la derivación no depende de la plataforma
    ni de la versión de Python."""
    if any(int(part) < 0 for part in parts):
        raise ValueError(f"las partes de una semilla deben ser no negativas: {parts!r}")
    state = np.random.SeedSequence([int(part) for part in parts]).generate_state(
        2, dtype=np.uint32
    )
    return int(state[0]) << 32 | int(state[1])


def rng_for(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


@contextmanager
def stopwatch() -> Iterator[list[float]]:
    """Mide el tiempo de pared del bloque; el resultado queda en `elapsed[0]`."""
    elapsed = [0.0]
    start = time.perf_counter()
    try:
        yield elapsed
    finally:
        elapsed[0] = time.perf_counter() - start


class IntEnum(TypeDecorator):
    _enumtype: type[enum.IntEnum]
    impl = Integer
    cache_ok = True

    def __init__(self, enumtype, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._enumtype = enumtype

    def process_bind_param(self, value: enum.IntEnum | None, dialect):
        return int(value) if value is not None else None

    def process_result_value(self, value: int | None, dialect):
        return self._enumtype(value) if value is not None else None
