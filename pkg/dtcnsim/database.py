from __future__ import annotations

from typing import TYPE_CHECKING, Iterable

import sqlalchemy
from loguru import logger
from sqlalchemy import select
from sqlalchemy.orm import Session

from dtcnsim.jscrc import Mode
from dtcnsim.models import Base, PhaseMetric, SweepRow
from dtcnsim.training import MetricsRecord, Phase

if TYPE_CHECKING:
    from dtcnsim.experiments import SweepRecord


def prepare_database(engine: sqlalchemy.Engine) -> None:
    """Crea las tablas, si no están creadas."""
    logger.debug("Creando tablas, si no están creadas")
    Base.metadata.create_all(engine)


# Una misma celda del barrido se sobrescribe al volver a correr el
# experimento; las métricas por época se acumulan.
def merge_sweep_into_db(
    session: Session, experiment: str, rows: Iterable[SweepRecord]
) -> int:
    """Agrega o actualiza las filas del barrido. Devuelve cuántas filas
    nuevas se agregaron."""
    added = 0
    for row in rows:
        mode = Mode.parse(row.mode)
        existing = session.execute(
            select(SweepRow).where(
                SweepRow.experiment == experiment,
                SweepRow.mode == mode,
                SweepRow.snr_db == row.snr_db,
                SweepRow.masked == row.masked,
                SweepRow.fl == row.fl,
                SweepRow.upper_bound == row.upper_bound,
                SweepRow.seed == row.seed,
            )
        ).scalar_one_or_none()
        if existing is not None:
            existing.accuracy = row.accuracy
            existing.checkpoint = row.checkpoint
            continue
        session.add(
            SweepRow(
                experiment=experiment,
                mode=mode,
                snr_db=row.snr_db,
                masked=row.masked,
                fl=row.fl,
                upper_bound=row.upper_bound,
                seed=row.seed,
                accuracy=row.accuracy,
                checkpoint=row.checkpoint,
            )
        )
        added += 1
    return added


def add_phase_metrics(
    session: Session,
    experiment: str,
    mode: Mode,
    seed: int,
    records: Iterable[MetricsRecord],
) -> None:
    for record in records:
        session.add(
            PhaseMetric(
                experiment=experiment,
                mode=Mode.parse(mode),
                seed=seed,
                phase=Phase(record.phase),
                epoch=record.epoch,
                loss=record.loss,
                accuracy=record.accuracy,
                snr_db=record.snr_db,
                wall_seconds=record.wall_seconds,
            )
        )
