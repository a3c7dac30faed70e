"""Conductores de experimentos: barrido de SNR por modo y variante,
simulación de balanceo de carga sobre una traza y carga de la
configuración."""

from __future__ import annotations

import dataclasses
import itertools
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Mapping, NamedTuple, Sequence

import orjson
import pandas
from deepmerge import Merger
from loguru import logger

from dtcnsim.const import DEFAULT_CONFIG_PATH
from dtcnsim.data import SyntheticSpec, generate_synthetic, mask_dataset
from dtcnsim.federated import FederatedConfig, Partition, run_federated, write_rounds_csv
from dtcnsim.jscrc import Mode, Pipeline, PipelineConfig, save_pipeline
from dtcnsim.parser import TraceFormatError, parse_config_file, parse_workload_trace
from dtcnsim.scheduler import (
    ContributionScore,
    DeviceState,
    LSTMPredictor,
    Predictor,
    allocate_resources,
    apply_transfers,
    balance_workloads,
    predict_workload,
)
from dtcnsim.training import MetricsRecord, TrainConfig, evaluate, train_pipeline, write_metrics_csv
from dtcnsim.util import derive_seed
from dtcnsim.validators import ConfigValidationError, ValidationError, validate_config_tree

RESULT_COLUMNS = ["mode", "snr_db", "masked", "fl", "upper_bound", "seed", "accuracy", "checkpoint"]
BALANCE_COLUMNS = ["tick", "device_id", "pre_load", "post_load", "allocation"]
RESULTS_CSV = "results.csv"
RESULTS_JSON = "results.json"

# flujos de semillas derivadas de la semilla de cada celda
EVAL_STREAM = 1
MASK_STREAM = 2

# las tablas se mezclan, las listas y los valores se reemplazan
config_merger = Merger([(dict, ["merge"]), (list, ["override"])], ["override"], ["override"])


@dataclasses.dataclass(frozen=True)
class DeviceSpec:
    id: str
    capacity: float
    score: float = 0.0


@dataclasses.dataclass(frozen=True)
class ClusterConfig:
    devices: tuple[DeviceSpec, ...]
    alpha: float = 0.5
    predictor: str = "ewma"
    budget: float = 100.0
    max_transfer: float | None = None
    lstm_window: int = 8
    lstm_hidden: int = 8
    lstm_epochs: int = 200
    lstm_warmup: int = 24

    @classmethod
    def from_tree(cls, section: Mapping[str, Any]) -> ClusterConfig:
        values = dict(section)
        devices = tuple(
            DeviceSpec(d["id"], float(d["capacity"]), float(d.get("score", 0.0)))
            for d in values.pop("devices")
        )
        return cls(devices=devices, **values)


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: SyntheticSpec
    pipeline: PipelineConfig
    train: TrainConfig
    snr_sweep: tuple[float, ...]
    modes: tuple[Mode, ...]
    seeds: tuple[int, ...]
    mask_fraction: float = 0.5
    masked: bool = True
    upper_bound: bool = True
    fl: FederatedConfig = FederatedConfig()
    federated: bool = False
    fl_modes: tuple[Mode, ...] = (Mode.DTCN, Mode.JSCC_IMAGE_ONLY)
    workers: int = 1
    balance: ClusterConfig | None = None

    @classmethod
    def from_tree(cls, tree: Mapping[str, Any]) -> ExperimentConfig:
        """Convierte un árbol ya validado en la configuración del experimento."""
        dataset = SyntheticSpec(**tree["dataset"])
        pipeline = PipelineConfig(
            img_dim=dataset.img_dim,
            txt_dim=dataset.txt_dim,
            n_classes=dataset.n_classes,
            **tree["pipeline"],
        )
        train_tree = tree["train"]
        train = TrainConfig(
            epochs=tuple(train_tree["epochs"]),
            learning_rates=tuple(float(lr) for lr in train_tree["learning_rates"]),
            batch_size=train_tree["batch_size"] or None,
            momentum=float(train_tree["momentum"]),
            mask_augment=float(train_tree["mask_augment"]),
            mask_fraction=float(tree["mask_fraction"]),
        )
        fl_tree = dict(tree["fl"])
        fl_modes = tuple(Mode.parse(m) for m in fl_tree.pop("modes"))
        weights = fl_tree.pop("client_weights", None)
        fl = FederatedConfig(
            client_weights=tuple(weights) if weights is not None else None,
            partition=Partition(fl_tree.pop("partition")),
            phases=tuple(fl_tree.pop("phases")),
            **fl_tree,
        )
        return cls(
            name=tree["name"],
            dataset=dataset,
            pipeline=pipeline,
            train=train,
            snr_sweep=tuple(float(s) for s in tree["snr_sweep"]),
            modes=tuple(Mode.parse(m) for m in tree["modes"]),
            seeds=tuple(tree["seeds"]),
            mask_fraction=float(tree["mask_fraction"]),
            masked=tree["masked"],
            upper_bound=tree["upper_bound"],
            fl=fl,
            federated=tree["federated"],
            fl_modes=fl_modes,
            workers=tree["workers"],
            balance=ClusterConfig.from_tree(tree["balance"]),
        )


def load_config_tree(path: str | os.PathLike | None = None) -> dict[str, Any]:
    """Árbol por omisión con el archivo del usuario mezclado encima."""
    tree = parse_config_file(DEFAULT_CONFIG_PATH)
    if path is not None:
        tree = config_merger.merge(tree, parse_config_file(path))
    return tree


def validate_config(path: str | os.PathLike | None = None) -> list[ValidationError]:
    """Todos los errores del archivo de configuración; lista vacía si es válido."""
    try:
        tree = load_config_tree(path)
    except tomllib.TOMLDecodeError as err:
        return [ValidationError("", str(path), f"no es un TOML válido: {err}")]
    return validate_config_tree(tree)


def load_config(
    path: str | os.PathLike | None = None, *, seed: int | None = None
) -> ExperimentConfig:
    """Carga, valida y convierte la configuración. Con `seed` el barrido usa
    solo esa semilla."""
    tree = load_config_tree(path)
    if seed is not None:
        tree["seeds"] = [seed]
    if errors := validate_config_tree(tree):
        raise ConfigValidationError(errors)
    return ExperimentConfig.from_tree(tree)


class SweepRecord(NamedTuple):
    mode: str
    snr_db: float
    masked: bool
    fl: bool
    upper_bound: bool
    seed: int
    accuracy: float
    checkpoint: str

    def sort_key(self) -> tuple:
        return (
            Mode.parse(self.mode).value,
            self.snr_db,
            self.masked,
            self.fl,
            self.upper_bound,
            self.seed,
        )


@dataclasses.dataclass(frozen=True)
class SweepCell:
    mode: Mode
    snr_db: float
    seed: int

    @property
    def slug(self) -> str:
        return f"{self.mode.label}_snr{self.snr_db:g}_seed{self.seed}"

    @property
    def checkpoint_dir(self) -> Path:
        return Path("checkpoints") / self.mode.label / f"snr{self.snr_db:g}" / f"seed{self.seed}"


class CellOutcome(NamedTuple):
    cell: SweepCell
    rows: list[SweepRecord]
    metrics: list[MetricsRecord]


@dataclasses.dataclass
class SweepResult:
    rows: list[SweepRecord]
    metrics: dict[SweepCell, list[MetricsRecord]] = dataclasses.field(default_factory=dict)
    failed: list[SweepCell] = dataclasses.field(default_factory=list)

    def frame(self) -> pandas.DataFrame:
        return pandas.DataFrame(self.rows, columns=RESULT_COLUMNS)


def sweep_cells(config: ExperimentConfig) -> list[SweepCell]:
    return [
        SweepCell(mode, snr, seed)
        for mode, snr, seed in itertools.product(config.modes, config.snr_sweep, config.seeds)
    ]


def run_cell(config: ExperimentConfig, cell: SweepCell, out_dir: str | os.PathLike) -> CellOutcome:
    """Entrena un modo a la SNR de la celda y evalúa todas sus variantes.

    Todo queda determinado por la configuración y la semilla de la celda."""
    out_dir = Path(out_dir)
    train, test = generate_synthetic(config.dataset)
    pipeline_cfg = dataclasses.replace(config.pipeline, mode=cell.mode).with_snr(cell.snr_db)
    train_cfg = dataclasses.replace(config.train, seed=cell.seed).with_snr(cell.snr_db)
    eval_seed = derive_seed(cell.seed, EVAL_STREAM)
    logger.info(f"Celda {cell.slug}: entrenando")

    pipeline = Pipeline.build(pipeline_cfg, seed=cell.seed)
    metrics = train_pipeline(pipeline, train, train_cfg, checkpoint_dir=out_dir / cell.checkpoint_dir)
    metrics_path = out_dir / "metrics" / f"{cell.slug}.csv"
    metrics_path.unlink(missing_ok=True)
    write_metrics_csv(metrics, metrics_path)
    checkpoint = (cell.checkpoint_dir / "phase3").as_posix()

    def row(accuracy: float, *, masked=False, fl=False, upper_bound=False, ckpt=checkpoint):
        return SweepRecord(
            cell.mode.label, cell.snr_db, masked, fl, upper_bound, cell.seed, accuracy, ckpt
        )

    rows = [row(evaluate(pipeline, test, cell.snr_db, eval_seed))]
    if config.masked:
        masked_test = mask_dataset(test, config.mask_fraction, derive_seed(cell.seed, MASK_STREAM))
        rows.append(row(evaluate(pipeline, masked_test, cell.snr_db, eval_seed), masked=True))
    if config.upper_bound:
        rows.append(
            row(evaluate(pipeline, test, cell.snr_db, eval_seed, noiseless=True), upper_bound=True)
        )
    if config.federated and cell.mode in config.fl_modes:
        fl_pipeline = Pipeline.build(pipeline_cfg, seed=cell.seed)
        fl_cfg = dataclasses.replace(config.fl, seed=cell.seed)
        result = run_federated(fl_cfg, fl_pipeline, train, train_cfg, test_data=test)
        write_rounds_csv(
            result.reports, fl_cfg.n_clients, out_dir / "metrics" / f"{cell.slug}_fl_rounds.csv"
        )
        fl_dir = cell.checkpoint_dir / "fl"
        save_pipeline(fl_pipeline, out_dir / fl_dir)
        rows.append(
            row(evaluate(fl_pipeline, test, cell.snr_db, eval_seed), fl=True, ckpt=fl_dir.as_posix())
        )
    logger.success(
        f"Celda {cell.slug} terminada: exactitud {rows[0].accuracy:.3f}"
    )
    return CellOutcome(cell, rows, metrics)


def write_results(
    rows: Sequence[SweepRecord], out_dir: str | os.PathLike, experiment: str
) -> tuple[Path, Path]:
    """Escribe results.csv y su acompañante results.json con la ruta del
    punto de control de cada fila."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / RESULTS_CSV
    pandas.DataFrame(list(rows), columns=RESULT_COLUMNS).to_csv(csv_path, index=False)
    json_path = out_dir / RESULTS_JSON
    json_path.write_bytes(
        orjson.dumps(
            {"experiment": experiment, "rows": [r._asdict() for r in rows]},
            option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS,
        )
    )
    return csv_path, json_path


def run_sweep(config: ExperimentConfig, out_dir: str | os.PathLike) -> SweepResult:
    """Corre todas las celdas (modo, SNR, semilla), posiblemente en paralelo,
    y escribe las filas ordenadas por su clave."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = sweep_cells(config)
    logger.info(
        f"Barrido {config.name!r}: {len(cells)} celdas "
        f"({len(config.modes)} modos × {len(config.snr_sweep)} SNR × {len(config.seeds)} semillas)"
    )
    outcomes: list[CellOutcome] = []
    failed: list[SweepCell] = []

    def collect(cell: SweepCell, job: Callable[[], CellOutcome]) -> None:
        try:
            outcomes.append(job())
        except Exception as err:
            logger.exception(err)
            logger.warning(f"La celda {cell.slug} falló; se omiten sus filas")
            failed.append(cell)

    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_cell, config, cell, out_dir): cell for cell in cells}
            for future in as_completed(futures):
                collect(futures[future], future.result)
    else:
        for cell in cells:
            collect(cell, lambda cell=cell: run_cell(config, cell, out_dir))

    rows = sorted((r for o in outcomes for r in o.rows), key=SweepRecord.sort_key)
    csv_path, _ = write_results(rows, out_dir, config.name)
    if failed:
        logger.warning(f"{len(failed)} de {len(cells)} celdas fallaron")
    logger.success(f"Barrido terminado: {len(rows)} filas en {str(csv_path)!r}")
    return SweepResult(
        rows,
        {o.cell: o.metrics for o in sorted(outcomes, key=lambda o: o.cell.slug)},
        sorted(failed, key=lambda c: c.slug),
    )


@dataclasses.dataclass(frozen=True)
class LoadSummary:
    max_normalized_load: float
    mean_normalized_load: float
    # media por tick del tiempo en vaciar todo el clúster
    mean_drain_ticks: float


@dataclasses.dataclass(frozen=True)
class BalanceReport:
    ticks: int
    devices: int
    unbalanced: LoadSummary
    balanced: LoadSummary
    max_conservation_error: float
    total_transferred: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class _DevicePredictor:
    """EWMA por omisión; con `lstm`, el predictor recurrente se ajusta una vez
    con los primeros `lstm_warmup` ticks del dispositivo."""

    def __init__(self, cluster: ClusterConfig, seed: int) -> None:
        self.cluster = cluster
        self.seed = seed
        self._lstm: Predictor | None = None

    def __call__(self, history: Sequence[float]) -> float:
        cluster = self.cluster
        if cluster.predictor == "lstm" and len(history) >= cluster.lstm_warmup:
            if self._lstm is None:
                lstm = LSTMPredictor(cluster.lstm_hidden, cluster.lstm_window, self.seed)
                lstm.fit(history[: cluster.lstm_warmup], epochs=cluster.lstm_epochs)
                self._lstm = lstm
            return self._lstm(history)
        return predict_workload(history, cluster.alpha)


def _summary(normalized: list[list[float]]) -> LoadSummary:
    flat = [v for tick in normalized for v in tick]
    if not flat:
        return LoadSummary(0.0, 0.0, 0.0)
    return LoadSummary(
        max_normalized_load=max(flat),
        mean_normalized_load=math.fsum(flat) / len(flat),
        mean_drain_ticks=math.fsum(max(tick) for tick in normalized) / len(normalized),
    )


def run_balance_sim(
    trace_path: str | os.PathLike,
    cluster: ClusterConfig,
    out_path: str | os.PathLike | None = None,
) -> BalanceReport:
    """Recorre la traza tick a tick: instantánea → predicción → plan →
    aplicación.

    Cada fila de la traza es la carga pendiente observada de un dispositivo
    en ese tick; un dispositivo sin fila mantiene su última observación. Se
    compara (w + ŵ)/c sin balanceo con u/c después del plan."""
    trace = parse_workload_trace(trace_path)
    ids = [d.id for d in cluster.devices]
    capacity = {d.id: d.capacity for d in cluster.devices}
    unknown = sorted(set(trace["device_id"]) - set(ids))
    if unknown:
        raise TraceFormatError(trace_path, None, f"dispositivos fuera del clúster: {unknown!r}")
    allocation = allocate_resources(
        [ContributionScore(d.id, d.score) for d in cluster.devices], cluster.budget
    )
    predictors = {
        device_id: _DevicePredictor(cluster, derive_seed(idx)) for idx, device_id in enumerate(ids)
    }
    updates: dict[int, dict[str, float]] = {}
    for tick, device_id, workload in trace.itertuples(index=False):
        updates.setdefault(int(tick), {})[device_id] = float(workload)
    n_ticks = max(updates) + 1 if updates else 0

    snapshot = {device_id: 0.0 for device_id in ids}
    history: dict[str, list[float]] = {device_id: [] for device_id in ids}
    unbalanced, balanced, lines = [], [], []
    conservation = 0.0
    transferred = 0.0
    for tick in range(n_ticks):
        snapshot.update(updates.get(tick, {}))
        devices = []
        for device_id in ids:
            history[device_id].append(snapshot[device_id])
            devices.append(
                DeviceState(
                    id=device_id,
                    workload=snapshot[device_id],
                    capacity=capacity[device_id],
                    predicted=predictors[device_id](history[device_id]),
                    history=list(history[device_id]),
                )
            )
        plan = balance_workloads(devices, cluster.max_transfer)
        after = apply_transfers(devices, plan)
        conservation = max(
            conservation,
            abs(math.fsum(d.load for d in after) - math.fsum(d.load for d in devices)),
        )
        transferred += plan.total()
        unbalanced.append([d.normalized_load for d in devices])
        balanced.append([d.normalized_load for d in after])
        for before, post in zip(devices, after):
            lines.append((tick, before.id, before.load, post.load, allocation[before.id]))
        logger.debug(
            f"Tick {tick}: máximo {max(unbalanced[-1]):.3f} → {max(balanced[-1]):.3f}"
        )

    report = BalanceReport(
        ticks=n_ticks,
        devices=len(ids),
        unbalanced=_summary(unbalanced),
        balanced=_summary(balanced),
        max_conservation_error=conservation,
        total_transferred=transferred,
    )
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        pandas.DataFrame(lines, columns=BALANCE_COLUMNS).to_csv(out_path, index=False)
        out_path.with_suffix(".json").write_bytes(
            orjson.dumps(report.to_dict(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
        )
    logger.success(
        f"Simulación de balanceo: {n_ticks} ticks, carga normalizada máxima "
        f"{report.unbalanced.max_normalized_load:.3f} sin balanceo y "
        f"{report.balanced.max_normalized_load:.3f} con balanceo"
    )
    return report
