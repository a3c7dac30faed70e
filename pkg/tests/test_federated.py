import math

import numpy as np
import pandas
import pytest

from dtcnsim.federated import (
    FederatedConfig,
    Partition,
    partition_dataset,
    run_federated,
    weighted_average,
    write_rounds_csv,
)
from dtcnsim.jscrc import Pipeline
from dtcnsim.numcore import ParameterSet, Tensor
from dtcnsim.training import Phase, TrainConfig, fit


@pytest.mark.parametrize("phase", list(Phase))
def test_one_round_of_full_batch_averaging_is_a_centralized_step(phase, small_data, small_pipeline_config):
    train, _ = small_data
    train_cfg = TrainConfig(
        epochs=(1, 1, 1),
        learning_rates=(0.1, 0.1, 0.1),
        batch_size=None,
        train_snr_db=10.0,
        mask_augment=0.5,
    )
    central = Pipeline.build(small_pipeline_config(), seed=3)
    federated = Pipeline.build(small_pipeline_config(), seed=3)
    fit(
        central,
        train,
        phase,
        epochs=1,
        lr=0.1,
        batch_size=None,
        snr_db=10.0,
        seed=0,
        mask_augment=0.5,
        mask_fraction=0.5,
    )
    cfg = FederatedConfig(n_clients=4, rounds=1, local_epochs=1, phases=(int(phase),))
    result = run_federated(cfg, federated, train, train_cfg)
    for name, tensor in central.parameters().items():
        np.testing.assert_allclose(result.params[name].data, tensor.data, rtol=0, atol=1e-12)


def test_single_client_matches_centralized_training(small_data, small_pipeline_config, quick_train_config):
    train, _ = small_data
    central = Pipeline.build(small_pipeline_config(), seed=3)
    for phase in Phase:
        fit(
            central,
            train,
            phase,
            epochs=2,
            lr=quick_train_config.lr_for(phase),
            batch_size=quick_train_config.batch_size,
            snr_db=quick_train_config.train_snr_db,
            seed=quick_train_config.seed,
        )
    federated = Pipeline.build(small_pipeline_config(), seed=3)
    cfg = FederatedConfig(n_clients=1, rounds=2, local_epochs=1)
    result = run_federated(cfg, federated, train, quick_train_config)
    assert result.params.equals(central.parameters())
    assert federated.parameters().equals(central.parameters())
    assert [r.round for r in result.reports] == [1, 2, 3, 4, 5, 6]
    assert [r.phase for r in result.reports] == [1, 1, 2, 2, 3, 3]


def test_client_weights_must_be_normalized():
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=2, client_weights=(0.5, 0.4))
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=3, client_weights=(0.5, 0.5))
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=2, client_weights=(1.5, -0.5))
    with pytest.raises(ValueError):
        FederatedConfig(n_clients=0)
    FederatedConfig(n_clients=3, client_weights=(0.1, 0.2, 0.7))


def test_weighted_average_combines_elementwise():
    a = ParameterSet({"w": Tensor([1.0, 2.0])})
    b = ParameterSet({"w": Tensor([3.0, 6.0])})
    averaged = weighted_average([(a, 0.25), (b, 0.75)])
    np.testing.assert_allclose(averaged["w"].data, [2.5, 5.0])
    with pytest.raises(ValueError):
        weighted_average([(a, 0.5), (b, 0.6)])
    with pytest.raises(ValueError):
        weighted_average([])


def test_iid_partition_is_balanced_and_disjoint(small_data):
    train, _ = small_data
    shards = partition_dataset(train, FederatedConfig(n_clients=5, seed=1))
    sizes = [len(s) for s in shards]
    assert sum(sizes) == len(train)
    assert max(sizes) - min(sizes) <= 1


def test_label_skew_partition_covers_every_sample(small_data):
    train, _ = small_data
    cfg = FederatedConfig(n_clients=4, partition=Partition.LABEL_SKEW, classes_per_client=1, seed=2)
    shards = partition_dataset(train, cfg)
    assert sum(len(s) for s in shards) == len(train)
    merged = np.sort(np.concatenate([s.x_img[:, 0] for s in shards]))
    np.testing.assert_array_equal(merged, np.sort(train.x_img[:, 0]))
    assert any(len(np.unique(s.labels)) < train.n_classes for s in shards)


def test_partition_needs_enough_samples(small_data):
    train, _ = small_data
    with pytest.raises(ValueError):
        partition_dataset(train.subset(range(3)), FederatedConfig(n_clients=4))


def test_zero_weight_clients_are_skipped(tmp_path, small_data, small_pipeline_config, quick_train_config):
    train, test = small_data
    pipeline = Pipeline.build(small_pipeline_config(), seed=3)
    cfg = FederatedConfig(n_clients=2, rounds=1, client_weights=(1.0, 0.0), phases=(1,))
    result = run_federated(cfg, pipeline, train, quick_train_config, test_data=test)
    (report,) = result.reports
    assert not math.isnan(report.client_losses[0])
    assert math.isnan(report.client_losses[1])
    n_values = pipeline.parameters().parameter_count()
    assert report.bytes_exchanged == 8 * n_values * 2 * 1

    path = write_rounds_csv(result.reports, cfg.n_clients, tmp_path / "rounds.csv")
    frame = pandas.read_csv(path)
    assert list(frame.columns) == [
        "round", "phase", "client_0_loss", "client_1_loss", "global_accuracy", "bytes_exchanged"
    ]


def test_early_stop_ends_a_flat_phase(small_data, small_pipeline_config):
    train, _ = small_data
    pipeline = Pipeline.build(small_pipeline_config(), seed=3)
    # tasa nula: la exactitud no cambia entre rondas
    train_cfg = TrainConfig(epochs=(1, 1, 1), learning_rates=(0.0, 0.0, 0.0), batch_size=32)
    cfg = FederatedConfig(n_clients=2, rounds=8, phases=(1,), early_stop=True)
    result = run_federated(cfg, pipeline, train, train_cfg)
    assert len(result.reports) == 4


def test_round_budget_and_local_batch_follow_the_centralized_run():
    train_cfg = TrainConfig(epochs=(3, 1, 5), learning_rates=(0.1, 0.1, 0.1), batch_size=32)
    cfg = FederatedConfig(n_clients=4, local_epochs=2)
    assert [cfg.rounds_for(phase, train_cfg) for phase in Phase] == [2, 1, 3]
    assert FederatedConfig(rounds=7).rounds_for(Phase.JSC, train_cfg) == 7
    assert cfg.local_batch_for(train_cfg) == 32
    assert FederatedConfig(local_batch_size=8).local_batch_for(train_cfg) == 8
    full_batch = TrainConfig(epochs=(1, 1, 1), learning_rates=(0.1, 0.1, 0.1), batch_size=None)
    assert cfg.local_batch_for(full_batch) is None
    with pytest.raises(ValueError):
        FederatedConfig(rounds=0)
    with pytest.raises(ValueError):
        FederatedConfig(local_batch_size=0)
