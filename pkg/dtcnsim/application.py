from __future__ import annotations

import argparse
import dataclasses
from pathlib import Path

from loguru import logger

from dtcnsim.const import DATABASE_FILENAME, LOG_FILE, OUT_DIR


def connect_database(args):
    """Abre la base de datos de resultados y crea sus tablas."""
    import sqlalchemy
    import sqlalchemy.orm

    from dtcnsim.database import prepare_database

    con_string = args.database or f"sqlite:///{args.out / DATABASE_FILENAME}"
    args.out.mkdir(parents=True, exist_ok=True)
    logger.info(f"Conectado a la base de datos {con_string!r}")
    engine = sqlalchemy.create_engine(con_string)
    prepare_database(engine)
    return sqlalchemy.orm.sessionmaker(engine)


def generate_data(args, config) -> int:
    from dtcnsim.data import generate_synthetic, save_dataset

    train, test = generate_synthetic(config.dataset)
    for name, dataset in (("train", train), ("test", test)):
        path = save_dataset(dataset, args.out / "data" / f"{name}.bin")
        logger.success(f"Conjunto {name!r} de {len(dataset)} muestras guardado en {str(path)!r}")
    return 0


def train(args, config) -> int:
    from dtcnsim.data import generate_synthetic
    from dtcnsim.database import add_phase_metrics
    from dtcnsim.jscrc import Mode, Pipeline
    from dtcnsim.training import train_pipeline, write_metrics_csv

    mode = Mode.parse(args.mode)
    seed = config.seeds[0]
    snr = args.snr if args.snr is not None else config.train.train_snr_db
    train_data, _ = generate_synthetic(config.dataset)
    pipeline = Pipeline.build(
        dataclasses.replace(config.pipeline, mode=mode).with_snr(snr), seed=seed
    )
    train_cfg = dataclasses.replace(config.train, seed=seed).with_snr(snr)
    checkpoint_dir = args.out / "checkpoints" / mode.label
    records = train_pipeline(pipeline, train_data, train_cfg, checkpoint_dir=checkpoint_dir)
    metrics_path = args.out / "metrics" / f"{mode.label}_snr{snr:g}_seed{seed}.csv"
    metrics_path.unlink(missing_ok=True)
    write_metrics_csv(records, metrics_path)
    Session = connect_database(args)
    with Session.begin() as session:
        add_phase_metrics(session, config.name, mode, seed, records)
    logger.success(f"Cadena {mode.label} entrenada; puntos de control en {str(checkpoint_dir)!r}")
    return 0


def evaluate(args, config) -> int:
    from dtcnsim.data import generate_synthetic, mask_dataset
    from dtcnsim.experiments import EVAL_STREAM, MASK_STREAM
    from dtcnsim.jscrc import load_pipeline
    from dtcnsim.training import evaluate as evaluate_pipeline
    from dtcnsim.util import derive_seed

    if args.checkpoint is None:
        ap.error("eval necesita --checkpoint")
    pipeline = load_pipeline(args.checkpoint)
    seed = config.seeds[0]
    snr = args.snr if args.snr is not None else pipeline.config.snr1_db
    _, test_data = generate_synthetic(config.dataset)
    if args.masked:
        test_data = mask_dataset(test_data, config.mask_fraction, derive_seed(seed, MASK_STREAM))
    accuracy = evaluate_pipeline(
        pipeline, test_data, snr, derive_seed(seed, EVAL_STREAM), noiseless=args.noiseless
    )
    logger.success(
        f"Exactitud de {pipeline.config.mode.label} a {snr} dB"
        f"{' con enmascarado' if args.masked else ''}: {accuracy:.4f}"
    )
    return 0


def sweep(args, config) -> int:
    from dtcnsim.database import merge_sweep_into_db
    from dtcnsim.experiments import run_sweep

    result = run_sweep(config, args.out)
    Session = connect_database(args)
    with Session.begin() as session:
        added = merge_sweep_into_db(session, config.name, result.rows)
    logger.info(f"{added} filas nuevas en la base de datos")
    return 1 if result.failed else 0


def federated(args, config) -> int:
    from dtcnsim.data import generate_synthetic
    from dtcnsim.federated import run_federated, write_rounds_csv
    from dtcnsim.jscrc import Mode, Pipeline, save_pipeline

    mode = Mode.parse(args.mode)
    seed = config.seeds[0]
    snr = args.snr if args.snr is not None else config.train.train_snr_db
    train_data, test_data = generate_synthetic(config.dataset)
    pipeline = Pipeline.build(
        dataclasses.replace(config.pipeline, mode=mode).with_snr(snr), seed=seed
    )
    fl_cfg = dataclasses.replace(config.fl, seed=seed)
    train_cfg = dataclasses.replace(config.train, seed=seed).with_snr(snr)
    result = run_federated(fl_cfg, pipeline, train_data, train_cfg, test_data=test_data)
    path = write_rounds_csv(
        result.reports, fl_cfg.n_clients, args.out / "metrics" / f"{mode.label}_fl_rounds.csv"
    )
    save_pipeline(pipeline, args.out / "checkpoints" / mode.label / "fl")
    logger.success(f"Rondas federadas guardadas en {str(path)!r}")
    return 0


def balance_sim(args, config) -> int:
    from dtcnsim.experiments import run_balance_sim

    if args.trace is None:
        ap.error("balance-sim necesita --trace")
    out_path = args.out / "balance" / f"{Path(args.trace).stem}_balance.csv"
    report = run_balance_sim(args.trace, config.balance, out_path)
    logger.info(
        f"Tiempo medio de vaciado: {report.unbalanced.mean_drain_ticks:.3f} ticks sin balanceo, "
        f"{report.balanced.mean_drain_ticks:.3f} con balanceo"
    )
    return 0


def validate_config(args) -> int:
    from dtcnsim.experiments import validate_config as validate

    errors = validate(args.config)
    for err in errors:
        logger.error(str(err))
    if errors:
        logger.error(f"La configuración tiene {len(errors)} errores")
        return 1
    logger.success("La configuración es válida")
    return 0


COMMANDS = {
    "generate-data": generate_data,
    "train": train,
    "eval": evaluate,
    "sweep": sweep,
    "federated": federated,
    "balance-sim": balance_sim,
}


ap = argparse.ArgumentParser("dtcnsim")
ap.add_argument(
    "command",
    choices=list(COMMANDS) + ["validate-config"],
    help="operación a realizar",
)
ap.add_argument(
    "--config", "-c", type=Path, help="archivo TOML que se combina sobre la configuración por omisión"
)
ap.add_argument("--seed", "-s", type=int, help="usar solo esta semilla")
ap.add_argument(
    "--out", "-o", type=Path, default=OUT_DIR, help="carpeta donde se escriben los resultados"
)
ap.add_argument(
    "--database", "-d", type=str, help="string de conexión a la base de datos a usar"
)
ap.add_argument(
    "--mode",
    "-m",
    choices=["dtcn", "jscc_image_only", "jscc_text_only"],
    default="dtcn",
    help="en train y federated: modo de la cadena",
)
ap.add_argument("--snr", type=float, help="en train, eval y federated: SNR en dB de ambos saltos")
ap.add_argument("--checkpoint", type=Path, help="en eval: carpeta del punto de control")
ap.add_argument(
    "--masked",
    action=argparse.BooleanOptionalAction,
    default=False,
    help="en eval: enmascarar la modalidad A del conjunto de prueba",
)
ap.add_argument(
    "--noiseless",
    action=argparse.BooleanOptionalAction,
    default=False,
    help="en eval: evaluar con canales sin ruido (cota superior)",
)
ap.add_argument("--trace", type=Path, help="en balance-sim: traza CSV tick,device_id,workload")


def main(argv=None) -> int:
    args = ap.parse_args(argv)
    sink = logger.add(sink=LOG_FILE)
    try:
        return run(args)
    finally:
        logger.remove(sink)


def run(args) -> int:
    from dtcnsim.experiments import load_config
    from dtcnsim.validators import ConfigValidationError

    if args.command == "validate-config":
        return validate_config(args)

    try:
        config = load_config(args.config, seed=args.seed)
    except ConfigValidationError as err:
        for error in err.errors:
            logger.error(str(error))
        logger.error("La configuración no es válida; no se hizo ningún trabajo")
        return 2
    except Exception as err:
        logger.exception(err)
        logger.error(f"No se pudo leer la configuración {str(args.config)!r}")
        return 2

    try:
        return COMMANDS[args.command](args, config)
    except Exception as err:
        logger.exception(err)
        logger.error(f"Hubo un error al ejecutar {args.command!r}")
        return 1
