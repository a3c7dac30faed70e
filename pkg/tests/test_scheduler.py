import math

import numpy as np
import pytest

from dtcnsim.jscrc import Mode, Pipeline, end_to_end
from dtcnsim.numcore import ComputationTape, GradientError, Tensor, mul, sum_all
from dtcnsim.scheduler import (
    ContributionScore,
    DeviceState,
    InfeasiblePlanError,
    LSTMPredictor,
    TransferPlan,
    allocate_resources,
    apply_transfers,
    balance_workloads,
    contribution_score,
    joint_inference,
    predict_workload,
)


def devices(loads, capacities=None):
    capacities = capacities or [1.0] * len(loads)
    return [
        DeviceState(id=f"dev-{k}", workload=w, capacity=c)
        for k, (w, c) in enumerate(zip(loads, capacities))
    ]


def max_normalized(states):
    return max(d.normalized_load for d in states)


def test_ewma_prediction():
    assert predict_workload([4.0]) == 4.0
    assert predict_workload([10.0, 20.0], alpha=0.5) == 15.0
    assert predict_workload([10.0, 20.0, 0.0], alpha=0.5) == 7.5
    assert predict_workload([3.0, 9.0, 1.0], alpha=1.0) == 1.0
    with pytest.raises(ValueError):
        predict_workload([])
    with pytest.raises(ValueError):
        predict_workload([1.0], alpha=0.0)


def test_two_devices_meet_halfway():
    states = devices([10.0, 0.0])
    plan = balance_workloads(states)
    assert plan.flows == {("dev-0", "dev-1"): 5.0}
    balanced = apply_transfers(states, plan)
    assert [d.workload for d in balanced] == [5.0, 5.0]


def test_predicted_load_counts_towards_the_level():
    states = [
        DeviceState("a", workload=2.0, capacity=1.0, predicted=4.0),
        DeviceState("b", workload=0.0, capacity=2.0),
    ]
    balanced = apply_transfers(states, balance_workloads(states))
    assert [d.normalized_load for d in balanced] == pytest.approx([2.0, 2.0])
    assert all(d.predicted == 0.0 for d in balanced)


def test_three_devices_reach_the_water_level():
    states = devices([9.0, 3.0, 0.0], [1.0, 1.0, 2.0])
    plan = balance_workloads(states)
    assert plan.flows == {("dev-0", "dev-2"): 6.0}
    balanced = apply_transfers(states, plan)
    assert [d.normalized_load for d in balanced] == pytest.approx([3.0, 3.0, 3.0])


def min_max_oracle(loads, capacities, step=0.25):
    """Menor carga normalizada máxima entre todos los repartos de la rejilla."""
    total = sum(loads)
    grid = np.arange(0.0, total + step / 2, step)
    best = math.inf
    for first in grid:
        for second in grid[grid <= total - first + 1e-12]:
            third = total - first - second
            level = max(first / capacities[0], second / capacities[1], third / capacities[2])
            best = min(best, level)
    return best


@pytest.mark.parametrize(
    "loads, capacities", [([9.0, 3.0, 0.0], [1.0, 1.0, 2.0]), ([5.0, 1.0, 2.0], [1.0, 2.0, 1.0])]
)
def test_three_device_plan_matches_the_grid_oracle(loads, capacities):
    states = devices(loads, capacities)
    balanced = apply_transfers(states, balance_workloads(states))
    assert max_normalized(balanced) == pytest.approx(min_max_oracle(loads, capacities), abs=1e-6)
    assert sum(d.workload for d in balanced) == pytest.approx(sum(loads), abs=1e-12)


def test_single_device_and_balanced_cluster_need_no_plan():
    assert len(balance_workloads(devices([7.0]))) == 0
    assert len(balance_workloads(devices([2.0, 4.0], [1.0, 2.0]))) == 0


def test_duplicate_ids_are_rejected():
    states = [DeviceState("a", 1.0, 1.0), DeviceState("a", 2.0, 1.0)]
    with pytest.raises(ValueError):
        balance_workloads(states)


def test_invalid_device_states_are_rejected():
    with pytest.raises(ValueError):
        DeviceState("a", workload=-1.0, capacity=1.0)
    with pytest.raises(ValueError):
        DeviceState("a", workload=1.0, capacity=0.0)


@pytest.mark.parametrize("max_transfer", [None, 0.5, 3.0])
def test_random_clusters_conserve_load_and_never_raise_the_maximum(max_transfer):
    rng = np.random.default_rng(21)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        loads = rng.uniform(0.0, 20.0, size=n) * (rng.random(n) < 0.8)
        capacities = rng.uniform(0.5, 4.0, size=n)
        states = devices(loads.tolist(), capacities.tolist())
        plan = balance_workloads(states, max_transfer=max_transfer)
        balanced = apply_transfers(states, plan)
        before = math.fsum(d.load for d in states)
        after = math.fsum(d.load for d in balanced)
        assert after == pytest.approx(before, rel=1e-9, abs=1e-9)
        assert max_normalized(balanced) <= max_normalized(states) + 1e-9
        level = before / math.fsum(capacities)
        if max_transfer is None:
            for device in balanced:
                assert device.normalized_load == pytest.approx(level, rel=1e-9, abs=1e-9)
        else:
            assert all(amount <= max_transfer + 1e-12 for amount in plan.flows.values())
            for old, new in zip(states, balanced):
                if old.normalized_load >= level:
                    assert new.normalized_load >= level - 1e-9
                else:
                    assert new.normalized_load <= level + 1e-9


def test_negative_edge_cap_is_rejected():
    with pytest.raises(ValueError):
        balance_workloads(devices([1.0, 2.0]), max_transfer=-1.0)


def test_overdrawn_plan_is_infeasible():
    states = devices([10.0, 0.0])
    with pytest.raises(InfeasiblePlanError) as excinfo:
        apply_transfers(states, TransferPlan({("dev-0", "dev-1"): 20.0}))
    assert excinfo.value.source == "dev-0"
    with pytest.raises(ValueError):
        apply_transfers(states, TransferPlan({("dev-0", "nowhere"): 1.0}))


def test_transfer_plan_validation_and_totals():
    plan = TransferPlan()
    plan.add("a", "b", 2.0)
    plan.add("a", "b", 1.0)
    plan.add("b", "c", 0.5)
    assert plan.outgoing("a") == 3.0
    assert plan.incoming("b") == 3.0
    assert plan.net("a", "b") == 3.0
    assert plan.net("b", "a") == -3.0
    assert plan.total() == 3.5
    with pytest.raises(ValueError):
        plan.add("a", "a", 1.0)
    with pytest.raises(ValueError):
        plan.add("a", "b", -1.0)


def test_contribution_score_is_the_mean_gradient_norm():
    d = 5
    features = Tensor(np.random.default_rng(0).normal(size=(3, d)), requires_grad=True)
    with ComputationTape():
        loss = sum_all(features)
        score = contribution_score(features, loss, "dev-0")
    assert score.device_id == "dev-0"
    assert score.score == pytest.approx(math.sqrt(d))

    with ComputationTape():
        loss = sum_all(mul(features, 0.0))
        assert contribution_score(features, loss).score == 0.0


def test_contribution_score_needs_tracked_features():
    features = Tensor(np.ones((2, 2)))
    with ComputationTape():
        loss = sum_all(features)
        with pytest.raises(GradientError):
            contribution_score(features, loss)


def test_allocation_is_proportional_to_scores():
    scores = [ContributionScore("a", 3.0), ContributionScore("b", 1.0)]
    assert allocate_resources(scores, 8.0) == {"a": 6.0, "b": 2.0}
    scaled = [ContributionScore(s.device_id, s.score * 4.0) for s in scores]
    assert allocate_resources(scaled, 8.0) == allocate_resources(scores, 8.0)
    zeros = [ContributionScore("a", 0.0), ContributionScore("b", 0.0)]
    assert allocate_resources(zeros, 10.0) == {"a": 5.0, "b": 5.0}
    with pytest.raises(ValueError):
        allocate_resources(scores, -1.0)
    with pytest.raises(ValueError):
        allocate_resources([], 1.0)
    with pytest.raises(ValueError):
        ContributionScore("a", -0.1)


@pytest.mark.parametrize("mode", list(Mode))
def test_joint_inference_matches_end_to_end(mode, small_data, small_pipeline_config):
    train, _ = small_data
    batch = train.subset(range(10)).as_batch()
    pipeline = Pipeline.build(small_pipeline_config(mode, snr_db=2.0), seed=6)
    result = joint_inference(pipeline, batch, seed=3, draw=2)
    expected = end_to_end(batch, pipeline, seed=3, draw=2)
    np.testing.assert_array_equal(result.logits.data, expected.data)
    assert result.global_bytes == 10 * 4 * 8
    assert result.local_seconds >= 0.0 and result.global_seconds >= 0.0
    if mode is Mode.JSCC_TEXT_ONLY:
        assert result.local_bytes == 0
        assert result.compression_ratio == math.inf
    else:
        assert result.local_bytes == 10 * 4 * 8
        assert result.compression_ratio == 8 / 4
    assert result.total_bytes == result.local_bytes + result.global_bytes


def test_lstm_predictor_learns_a_periodic_series():
    series = [10.0 if t % 2 == 0 else 2.0 for t in range(40)]
    predictor = LSTMPredictor(hidden=4, window=4, seed=1)
    losses = predictor.fit(series, epochs=150, lr=0.5)
    assert losses[-1] < losses[0]
    prediction = predictor(series)
    assert prediction >= 0.0
    assert math.isfinite(prediction)
    assert predictor.predict([3.0]) >= 0.0
    with pytest.raises(ValueError):
        predictor.fit(series[:4])
    with pytest.raises(ValueError):
        predictor.predict([])
