from __future__ import annotations

import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

import pandas

TRACE_COLUMNS = ["tick", "device_id", "workload"]


class TraceFormatError(ValueError):
    """Una fila de la traza de carga no tiene el formato esperado."""

    path: Path
    line: int | None
    reason: str

    def __init__(self, path: str | os.PathLike, line: int | None, reason: str) -> None:
        where = f", línea {line}" if line is not None else ""
        super().__init__(f"traza {str(path)!r}{where}: {reason}")
        self.path = Path(path)
        self.line = line
        self.reason = reason


def parse_workload_trace(path: str | os.PathLike) -> pandas.DataFrame:
    """Lee una traza CSV `tick,device_id,workload` y devuelve sus filas
    ordenadas por tick y dispositivo.

    Los números de línea de los errores cuentan la cabecera como línea 1."""
    path = Path(path)
    try:
        raw = pandas.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pandas.errors.EmptyDataError:
        raise TraceFormatError(path, None, "el archivo está vacío") from None
    except pandas.errors.ParserError as err:
        raise TraceFormatError(path, None, f"no se pudo leer como CSV: {err}") from None
    columns = [c.strip() for c in raw.columns]
    if columns != TRACE_COLUMNS:
        raise TraceFormatError(
            path, 1, f"se esperaban las columnas {TRACE_COLUMNS!r} y hay {columns!r}"
        )
    raw.columns = columns

    ticks, devices, workloads = [], [], []
    seen: dict[tuple[int, str], int] = {}
    for idx, row in enumerate(raw.itertuples(index=False)):
        line = idx + 2
        try:
            tick = int(row.tick)
        except ValueError:
            raise TraceFormatError(path, line, f"tick {row.tick!r} no es un entero") from None
        if tick < 0:
            raise TraceFormatError(path, line, f"tick negativo: {tick}")
        device_id = row.device_id.strip()
        if not device_id:
            raise TraceFormatError(path, line, "falta el id del dispositivo")
        try:
            workload = float(row.workload)
        except ValueError:
            raise TraceFormatError(
                path, line, f"carga {row.workload!r} no es un número"
            ) from None
        if not math.isfinite(workload) or workload < 0:
            raise TraceFormatError(path, line, f"carga inválida: {workload!r}")
        if (tick, device_id) in seen:
            raise TraceFormatError(
                path,
                line,
                f"el dispositivo {device_id!r} ya tiene carga en el tick {tick} "
                f"(línea {seen[(tick, device_id)]})",
            )
        seen[(tick, device_id)] = line
        ticks.append(tick)
        devices.append(device_id)
        workloads.append(workload)

    trace = pandas.DataFrame({"tick": ticks, "device_id": devices, "workload": workloads})
    trace = trace.astype({"tick": "int64", "device_id": "object", "workload": "float64"})
    return trace.sort_values(["tick", "device_id"], kind="stable").reset_index(drop=True)


def parse_config_file(path: str | os.PathLike) -> dict[str, Any]:
    """Lee un árbol de configuración TOML."""
    with open(path, "rb") as fp:
        return tomllib.load(fp)
