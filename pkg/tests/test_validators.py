import pytest

from dtcnsim.experiments import load_config_tree
from dtcnsim.validators import (
    ValidationError,
    validate_bool,
    validate_choice,
    validate_config_tree,
    validate_list,
    validate_number,
)


@pytest.fixture
def tree():
    return load_config_tree()


def fields(errors):
    return [e.field for e in errors]


def test_validate_number_raises_without_error_list():
    with pytest.raises(ValidationError) as excinfo:
        validate_number(-1, "train.momentum", low=0.0)
    assert excinfo.value.field == "train.momentum"
    assert validate_number(0.5, "x", low=0.0, high=1.0) == 0.5


def test_validate_number_accumulates_errors():
    errors = []
    assert validate_number("3", "a", errors) is False
    assert validate_number(True, "b", errors) is False
    assert validate_number(1.5, "c", errors, integer=True) is False
    assert validate_number(0.0, "d", errors, low=0.0, low_open=True) is False
    assert validate_number(1.0, "e", errors, high=1.0, high_open=True) is False
    assert fields(errors) == ["a", "b", "c", "d", "e"]


def test_other_validators():
    errors = []
    assert validate_choice("x", "mode", ["dtcn"], errors) is False
    assert validate_bool(1, "masked", errors) is False
    assert validate_list([], "seeds", errors) is False
    assert validate_list([1, 2], "train.epochs", errors, length=3) is False
    assert len(errors) == 4
    assert validate_list([1, 2, 3], "train.epochs", length=3) == [1, 2, 3]


def test_default_tree_has_no_errors(tree):
    assert validate_config_tree(tree) == []


def test_every_problem_is_reported_at_once(tree):
    tree["modes"] = ["dtcn", "jscc"]
    tree["train"]["momentum"] = 1.0
    tree["dataset"]["rho"] = 2.0
    tree["balance"]["predictor"] = "arima"
    assert fields(validate_config_tree(tree)) == [
        "modes[1]",
        "dataset.rho",
        "train.momentum",
        "balance.predictor",
    ]


def test_unknown_and_missing_fields(tree):
    tree["pipeline"]["depth"] = 3
    del tree["train"]["epochs"]
    errors = validate_config_tree(tree)
    assert fields(errors) == ["pipeline.depth", "train.epochs"]
    assert "desconocido" in str(errors[0])
    assert "falta" in str(errors[1])


def test_symbols_must_compress_modality_a(tree):
    tree["pipeline"]["n_sym1"] = tree["dataset"]["img_dim"]
    assert fields(validate_config_tree(tree)) == ["pipeline.n_sym1"]


def test_more_clients_than_samples(tree):
    tree["dataset"]["n_train"] = 5
    assert fields(validate_config_tree(tree)) == ["fl.n_clients"]


def test_client_weights_length_and_sum(tree):
    tree["fl"]["client_weights"] = [0.5, 0.5]
    assert fields(validate_config_tree(tree)) == ["fl.client_weights"]
    tree["fl"]["n_clients"] = 2
    assert validate_config_tree(tree) == []
    tree["fl"]["client_weights"] = [0.7, 0.7]
    (error,) = validate_config_tree(tree)
    assert "normalizados" in str(error)
    tree["fl"]["client_weights"] = [1.2, -0.2]
    assert fields(validate_config_tree(tree)) == ["fl.client_weights[1]"]


def test_cluster_devices(tree):
    tree["balance"]["devices"][1]["id"] = "dev-0"
    tree["balance"]["devices"][2]["capacity"] = 0.0
    tree["balance"]["lstm_warmup"] = 4
    assert fields(validate_config_tree(tree)) == [
        "balance.lstm_warmup",
        "balance.devices[1].id",
        "balance.devices[2].capacity",
    ]
