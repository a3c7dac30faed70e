import math
from typing import Any, Literal, Mapping, Sequence, TypeVar

from dtcnsim.federated import Partition
from dtcnsim.jscrc import Mode

R = TypeVar("R")
ParseResult = R | Literal[False]

MODE_LABELS = tuple(mode.label for mode in Mode)
PARTITION_LABELS = tuple(p.value for p in Partition)
PREDICTORS = ("ewma", "lstm")
WEIGHT_TOLERANCE = 1e-9

_SECTIONS: dict[str, set[str]] = {
    "": {
        "name",
        "seeds",
        "snr_sweep",
        "modes",
        "mask_fraction",
        "masked",
        "upper_bound",
        "federated",
        "workers",
        "dataset",
        "pipeline",
        "train",
        "fl",
        "balance",
    },
    "dataset": {
        "n_classes",
        "img_dim",
        "txt_dim",
        "separation",
        "sigma_a",
        "sigma_b",
        "rho",
        "n_train",
        "n_test",
        "seed",
    },
    "pipeline": {"d_sem", "d_txt", "d_fused", "n_sym1", "n_sym2", "hidden"},
    "train": {"epochs", "learning_rates", "batch_size", "momentum", "mask_augment"},
    "fl": {
        "n_clients",
        "rounds",
        "local_epochs",
        "partition",
        "classes_per_client",
        "phases",
        "early_stop",
        "workers",
        "modes",
        "client_weights",
        "local_batch_size",
    },
    "balance": {
        "alpha",
        "predictor",
        "budget",
        "max_transfer",
        "lstm_window",
        "lstm_hidden",
        "lstm_epochs",
        "lstm_warmup",
        "devices",
    },
}
_DEVICE_KEYS = {"id", "capacity", "score"}


class ValidationError(Exception):
    """Un campo de la configuración no tiene un valor aceptable."""

    field: str
    value: Any
    reason: str

    def __init__(self, field: str, value: Any, reason: str) -> None:
        super().__init__(f"campo {field or '<raíz>'!r}: {value!r} no es válido, {reason}")
        self.field = field
        self.value = value
        self.reason = reason


class ConfigValidationError(Exception):
    """La configuración tiene uno o más campos inválidos."""

    errors: list[ValidationError]

    def __init__(self, errors: Sequence[ValidationError]) -> None:
        listing = "\n".join(f"  - {err}" for err in errors)
        super().__init__(f"la configuración tiene {len(errors)} errores:\n{listing}")
        self.errors = list(errors)


def _throw_leniently(
    errors: list[ValidationError] | None, field: str, value: Any, reason: str
) -> Literal[False]:
    error = ValidationError(field, value, reason)
    if errors is None:
        raise error
    errors.append(error)
    return False


def validate_number(
    value: Any,
    field: str,
    errors: list[ValidationError] | None = None,
    *,
    integer: bool = False,
    low: float | None = None,
    high: float | None = None,
    low_open: bool = False,
    high_open: bool = False,
) -> ParseResult[float]:
    """Valida un número dentro de un intervalo; con `errors` acumula el
    error en vez de lanzarlo."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return _throw_leniently(errors, field, value, "se esperaba un número")
    if integer and not isinstance(value, int):
        return _throw_leniently(errors, field, value, "se esperaba un entero")
    if math.isnan(value):
        return _throw_leniently(errors, field, value, "no es un número")
    if low is not None and (value <= low if low_open else value < low):
        bound = "mayor que" if low_open else "al menos"
        return _throw_leniently(errors, field, value, f"debe ser {bound} {low}")
    if high is not None and (value >= high if high_open else value > high):
        bound = "menor que" if high_open else "a lo más"
        return _throw_leniently(errors, field, value, f"debe ser {bound} {high}")
    return value


def validate_choice(
    value: Any, field: str, choices: Sequence, errors: list[ValidationError] | None = None
) -> ParseResult[Any]:
    if value not in choices:
        return _throw_leniently(errors, field, value, f"se esperaba uno de {list(choices)!r}")
    return value


def validate_bool(
    value: Any, field: str, errors: list[ValidationError] | None = None
) -> ParseResult[bool]:
    if not isinstance(value, bool):
        return _throw_leniently(errors, field, value, "se esperaba true o false")
    return value


def validate_list(
    value: Any,
    field: str,
    errors: list[ValidationError] | None = None,
    *,
    length: int | None = None,
    nonempty: bool = True,
) -> ParseResult[list]:
    if not isinstance(value, list):
        return _throw_leniently(errors, field, value, "se esperaba una lista")
    if nonempty and not value:
        return _throw_leniently(errors, field, value, "la lista está vacía")
    if length is not None and len(value) != length:
        return _throw_leniently(
            errors, field, value, f"se esperaban {length} elementos y hay {len(value)}"
        )
    return value


def _join(section: str, key: str) -> str:
    return f"{section}.{key}" if section else key


def _section(tree: Mapping, name: str, errors: list[ValidationError]) -> Mapping:
    section = tree if not name else tree.get(name, {})
    if not isinstance(section, Mapping):
        _throw_leniently(errors, name, section, "se esperaba una tabla")
        return {}
    for key in sorted(set(section) - _SECTIONS[name]):
        _throw_leniently(errors, _join(name, key), section[key], "campo desconocido")
    return section


def _require(section: Mapping, name: str, key: str, errors: list[ValidationError]) -> Any:
    if key not in section:
        _throw_leniently(errors, _join(name, key), None, "falta el campo")
        return None
    return section[key]


def _numbers(
    section: Mapping,
    name: str,
    keys: Sequence[str],
    errors: list[ValidationError],
    **bounds,
) -> None:
    for key in keys:
        if (value := _require(section, name, key, errors)) is not None:
            validate_number(value, _join(name, key), errors, **bounds)


def _list_items(
    values: list, field: str, errors: list[ValidationError], **bounds
) -> None:
    for idx, item in enumerate(values):
        validate_number(item, f"{field}[{idx}]", errors, **bounds)


def _modes(value: Any, field: str, errors: list[ValidationError]) -> None:
    if validate_list(value, field, errors) is False:
        return
    for idx, item in enumerate(value):
        validate_choice(item, f"{field}[{idx}]", MODE_LABELS, errors)
    if len(set(map(str, value))) != len(value):
        _throw_leniently(errors, field, value, "hay modos repetidos")


def _dataset_value(tree: Mapping, key: str) -> Any:
    dataset = tree.get("dataset")
    return dataset.get(key) if isinstance(dataset, Mapping) else None


def _validate_top(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "", errors)
    if not isinstance(section.get("name", ""), str):
        _throw_leniently(errors, "name", section["name"], "se esperaba un texto")
    seeds = _require(section, "", "seeds", errors)
    if seeds is not None and validate_list(seeds, "seeds", errors):
        _list_items(seeds, "seeds", errors, integer=True, low=0)
    sweep = _require(section, "", "snr_sweep", errors)
    if sweep is not None and validate_list(sweep, "snr_sweep", errors):
        _list_items(sweep, "snr_sweep", errors)
    if (modes := _require(section, "", "modes", errors)) is not None:
        _modes(modes, "modes", errors)
    _numbers(section, "", ["mask_fraction"], errors, low=0.0, high=1.0)
    _numbers(section, "", ["workers"], errors, integer=True, low=1)
    for key in ("masked", "upper_bound", "federated"):
        if (value := _require(section, "", key, errors)) is not None:
            validate_bool(value, key, errors)


def _validate_dataset(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "dataset", errors)
    _numbers(section, "dataset", ["n_classes"], errors, integer=True, low=2)
    _numbers(
        section, "dataset", ["img_dim", "txt_dim", "n_train", "n_test"], errors, integer=True, low=1
    )
    _numbers(section, "dataset", ["seed"], errors, integer=True, low=0)
    _numbers(section, "dataset", ["separation", "sigma_a", "sigma_b"], errors, low=0.0)
    _numbers(section, "dataset", ["rho"], errors, low=0.0, high=1.0)


def _validate_pipeline(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "pipeline", errors)
    keys = ["d_sem", "d_txt", "d_fused", "n_sym1", "n_sym2", "hidden"]
    _numbers(section, "pipeline", keys, errors, integer=True, low=1)
    img_dim = _dataset_value(tree, "img_dim")
    n_sym1 = section.get("n_sym1")
    if (
        isinstance(img_dim, int)
        and isinstance(n_sym1, int)
        and not isinstance(n_sym1, bool)
        and n_sym1 >= img_dim
    ):
        _throw_leniently(
            errors,
            "pipeline.n_sym1",
            n_sym1,
            f"debe ser menor que la dimensión de la modalidad A ({img_dim}) para comprimir",
        )


def _validate_train(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "train", errors)
    epochs = _require(section, "train", "epochs", errors)
    if epochs is not None and validate_list(epochs, "train.epochs", errors, length=3):
        _list_items(epochs, "train.epochs", errors, integer=True, low=1)
    rates = _require(section, "train", "learning_rates", errors)
    if rates is not None and validate_list(rates, "train.learning_rates", errors, length=3):
        _list_items(rates, "train.learning_rates", errors, low=0.0)
    _numbers(section, "train", ["batch_size"], errors, integer=True, low=0)
    _numbers(section, "train", ["momentum"], errors, low=0.0, high=1.0, high_open=True)
    _numbers(section, "train", ["mask_augment"], errors, low=0.0, high=1.0)


def _validate_fl(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "fl", errors)
    _numbers(
        section,
        "fl",
        ["n_clients", "local_epochs", "classes_per_client", "workers"],
        errors,
        integer=True,
        low=1,
    )
    for key in ("rounds", "local_batch_size"):
        if key in section:
            validate_number(section[key], f"fl.{key}", errors, integer=True, low=1)
    if (partition := _require(section, "fl", "partition", errors)) is not None:
        validate_choice(partition, "fl.partition", PARTITION_LABELS, errors)
    phases = _require(section, "fl", "phases", errors)
    if phases is not None and validate_list(phases, "fl.phases", errors):
        for idx, phase in enumerate(phases):
            validate_choice(phase, f"fl.phases[{idx}]", (1, 2, 3), errors)
    if (early_stop := _require(section, "fl", "early_stop", errors)) is not None:
        validate_bool(early_stop, "fl.early_stop", errors)
    if (modes := _require(section, "fl", "modes", errors)) is not None:
        _modes(modes, "fl.modes", errors)

    n_clients = section.get("n_clients")
    n_train = _dataset_value(tree, "n_train")
    if isinstance(n_clients, int) and isinstance(n_train, int) and n_clients > n_train:
        _throw_leniently(
            errors, "fl.n_clients", n_clients, f"hay más clientes que muestras ({n_train})"
        )
    if "client_weights" in section:
        weights = section["client_weights"]
        length = n_clients if isinstance(n_clients, int) else None
        if validate_list(weights, "fl.client_weights", errors, length=length) is False:
            return
        before = len(errors)
        _list_items(weights, "fl.client_weights", errors, low=0.0)
        if len(errors) == before:
            total = math.fsum(weights)
            if abs(total - 1.0) > WEIGHT_TOLERANCE:
                _throw_leniently(
                    errors,
                    "fl.client_weights",
                    weights,
                    f"los pesos suman {total!r} y deben estar normalizados (sumar 1)",
                )


def _validate_balance(tree: Mapping, errors: list[ValidationError]) -> None:
    section = _section(tree, "balance", errors)
    _numbers(section, "balance", ["alpha"], errors, low=0.0, low_open=True, high=1.0)
    if (predictor := _require(section, "balance", "predictor", errors)) is not None:
        validate_choice(predictor, "balance.predictor", PREDICTORS, errors)
    _numbers(section, "balance", ["budget"], errors, low=0.0)
    if "max_transfer" in section:
        validate_number(section["max_transfer"], "balance.max_transfer", errors, low=0.0)
    _numbers(section, "balance", ["lstm_window", "lstm_hidden"], errors, integer=True, low=1)
    _numbers(section, "balance", ["lstm_epochs"], errors, integer=True, low=0)
    window = section.get("lstm_window")
    warmup = _require(section, "balance", "lstm_warmup", errors)
    if (
        warmup is not None
        and validate_number(warmup, "balance.lstm_warmup", errors, integer=True, low=1) is not False
        and isinstance(window, int)
        and warmup <= window
    ):
        _throw_leniently(
            errors, "balance.lstm_warmup", warmup, f"debe superar la ventana ({window})"
        )
    devices = _require(section, "balance", "devices", errors)
    if devices is None or validate_list(devices, "balance.devices", errors) is False:
        return
    seen: set[str] = set()
    for idx, device in enumerate(devices):
        field = f"balance.devices[{idx}]"
        if not isinstance(device, Mapping):
            _throw_leniently(errors, field, device, "se esperaba una tabla")
            continue
        for key in sorted(set(device) - _DEVICE_KEYS):
            _throw_leniently(errors, f"{field}.{key}", device[key], "campo desconocido")
        device_id = device.get("id")
        if not isinstance(device_id, str) or not device_id:
            _throw_leniently(errors, f"{field}.id", device_id, "se esperaba un texto no vacío")
        elif device_id in seen:
            _throw_leniently(errors, f"{field}.id", device_id, "id repetido")
        else:
            seen.add(device_id)
        validate_number(device.get("capacity"), f"{field}.capacity", errors, low=0.0, low_open=True)
        validate_number(device.get("score", 0.0), f"{field}.score", errors, low=0.0)


def validate_config_tree(tree: Mapping) -> list[ValidationError]:
    """Revisa el árbol completo de configuración y devuelve todos los
    errores encontrados, cada uno con la ruta del campo."""
    errors: list[ValidationError] = []
    _validate_top(tree, errors)
    _validate_dataset(tree, errors)
    _validate_pipeline(tree, errors)
    _validate_train(tree, errors)
    _validate_fl(tree, errors)
    _validate_balance(tree, errors)
    return errors
