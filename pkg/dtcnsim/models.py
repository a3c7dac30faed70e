from __future__ import annotations

from datetime import datetime

import sqlalchemy.sql.functions
from sqlalchemy import MetaData, UniqueConstraint
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column

from dtcnsim.jscrc import Mode
from dtcnsim.training import Phase
from dtcnsim.util import IntEnum


class Base(DeclarativeBase):
    metadata = MetaData(
        naming_convention={
            "ix": "ix_%(column_0_label)s",
            "uq": "uq_%(table_name)s_%(column_0_name)s",
            "ck": "ck_%(table_name)s_%(constraint_name)s",
            "fk": "fk_%(table_name)s_%(column_0_name)s_%(referred_table_name)s",
            "pk": "pk_%(table_name)s",
        }
    )


class WithTimestamps:
    """Mixin para agregar timestamps a las tablas."""

    created_at: Mapped[datetime] = mapped_column(
        server_default=sqlalchemy.sql.functions.now()
    )
    updated_at: Mapped[datetime] = mapped_column(
        server_default=sqlalchemy.sql.functions.now(),
        onupdate=sqlalchemy.sql.functions.now(),
    )


class SweepRow(WithTimestamps, Base):
    """Una celda del barrido: exactitud de un modo a una SNR, con una
    variante y una semilla."""

    __tablename__ = "sweep_row"
    __table_args__ = (
        UniqueConstraint(
            "experiment", "mode", "snr_db", "masked", "fl", "upper_bound", "seed"
        ),
    )

    id: Mapped[int] = mapped_column(primary_key=True)
    experiment: Mapped[str] = mapped_column(index=True)
    mode: Mapped[Mode] = mapped_column(IntEnum(Mode))
    snr_db: Mapped[float] = mapped_column()
    masked: Mapped[bool] = mapped_column(default=False)
    fl: Mapped[bool] = mapped_column(default=False)
    upper_bound: Mapped[bool] = mapped_column(default=False)
    seed: Mapped[int] = mapped_column()
    accuracy: Mapped[float] = mapped_column()
    checkpoint: Mapped[str | None] = mapped_column()

    def __repr__(self):
        return (
            f"SweepRow({self.experiment!r}, {self.mode.label}, snr={self.snr_db!r}, "
            f"seed={self.seed!r}, accuracy={self.accuracy!r})"
        )


class PhaseMetric(WithTimestamps, Base):
    """Métricas de una época de entrenamiento."""

    __tablename__ = "phase_metric"

    id: Mapped[int] = mapped_column(primary_key=True)
    experiment: Mapped[str] = mapped_column(index=True)
    mode: Mapped[Mode] = mapped_column(IntEnum(Mode))
    seed: Mapped[int] = mapped_column()
    phase: Mapped[Phase] = mapped_column(IntEnum(Phase))
    epoch: Mapped[int] = mapped_column()
    loss: Mapped[float] = mapped_column()
    accuracy: Mapped[float] = mapped_column()
    snr_db: Mapped[float] = mapped_column()
    wall_seconds: Mapped[float] = mapped_column()

    def __repr__(self):
        return f"PhaseMetric({self.experiment!r}, fase {int(self.phase)}, época {self.epoch})"
