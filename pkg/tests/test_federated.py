from __future__ import annotations

import numpy as np
import pytest

from robust_bci.errors import DimensionError, ValidationError
from robust_bci.models.training import ClientUpdate, FedConfig, TrainConfig
from robust_bci.models.trial import TrialSet
from robust_bci.services.alignment import mean_covariance
from robust_bci.services.federated import (
    FederatedClient,
    aggregate,
    client_round,
    federated_pretrain,
    local_train_config,
    partition_by_user,
)
from robust_bci.services.network import init_params
from robust_bci.services.training import train
from robust_bci.utils.seeding import derive_seed

LOCAL = TrainConfig(batch_size=8)


def fed_config(**overrides) -> FedConfig:
    values = dict(rounds=2, local_epochs=1, seed=4, train=LOCAL)
    values.update(overrides)
    return FedConfig(**values)


def update(client_id, params, n_samples=10) -> ClientUpdate:
    return ClientUpdate(client_id=client_id, params=params, n_samples=n_samples)


def test_partition_by_user(small_set):
    parts = partition_by_user(small_set)
    assert sorted(parts) == [1, 2, 3]
    assert all(len(p) == 12 and set(p.users.tolist()) == {u} for u, p in parts.items())
    joined = TrialSet.concatenate([parts[u] for u in sorted(parts)])
    assert joined.signals.tobytes() == small_set.signals.tobytes()
    with pytest.raises(ValidationError):
        partition_by_user(small_set.subset([]))


def test_client_seeding():
    per_client = fed_config()
    assert local_train_config(per_client, 1, 1).seed != local_train_config(per_client, 2, 1).seed
    assert local_train_config(per_client, 1, 1).seed != local_train_config(per_client, 1, 2).seed
    assert local_train_config(per_client, 1, 1).epochs == 1
    shared = fed_config(client_seeding="shared")
    assert local_train_config(shared, 1, 1).seed == local_train_config(shared, 2, 1).seed


# --- Client updates ---

def test_client_round_without_epochs_returns_global(tiny_params, tiny_cfg, small_set):
    out = client_round(tiny_params, small_set.subset(range(12)), fed_config(local_epochs=0), tiny_cfg)
    assert out.client_id == 1 and out.n_samples == 12
    assert out.params.bit_equal(tiny_params)


def test_client_round_is_deterministic(tiny_params, tiny_cfg, small_set):
    local = small_set.subset(range(12, 24))
    first = client_round(tiny_params, local, fed_config(), tiny_cfg, round_idx=1)
    second = client_round(tiny_params, local, fed_config(), tiny_cfg, round_idx=1)
    assert first.client_id == 2
    assert first.params.bit_equal(second.params)
    assert first.local_loss == second.local_loss


def test_client_round_needs_data(tiny_params, tiny_cfg, small_set):
    with pytest.raises(ValidationError):
        client_round(tiny_params, small_set.subset([]), fed_config(), tiny_cfg)
    with pytest.raises(ValidationError):
        update(1, tiny_params, n_samples=0)


def test_client_aligns_its_own_data(tiny_cfg, small_set):
    client = FederatedClient(2, small_set.subset(range(12, 24)), tiny_cfg, fed_config())
    assert client.n_samples == 12
    assert np.abs(mean_covariance(client._data.signals) - np.eye(4)).max() < 1e-4


# --- Aggregation ---

def test_identical_updates_aggregate_to_themselves(tiny_params):
    out = aggregate([update(1, tiny_params, 5), update(2, tiny_params, 7)], "include_all")
    assert out.bit_equal(tiny_params)


def test_equal_weights_give_midpoint(tiny_cfg):
    a, b = init_params(tiny_cfg, 0), init_params(tiny_cfg, 1)
    out = aggregate([update(1, a), update(2, b)], "include_all")
    for name in a.names():
        expected = (0.5 * a.weights[name].data.astype(np.float64)
                    + 0.5 * b.weights[name].data.astype(np.float64)).astype(np.float32)
        assert out.weights[name].data.tobytes() == expected.tobytes()


def test_sample_weighting_matches_scalar_oracle(tiny_cfg):
    a, b = init_params(tiny_cfg, 0), init_params(tiny_cfg, 1)
    out = aggregate([update(1, a, 10), update(2, b, 30)])
    wa, wb = a.weights["dense.weight"].data, b.weights["dense.weight"].data
    expected = np.empty_like(wa)
    for idx in np.ndindex(*wa.shape):
        expected[idx] = np.float32(0.25 * float(wa[idx]) + 0.75 * float(wb[idx]))
    assert np.array_equal(out.weights["dense.weight"].data, expected)


def test_aggregate_is_a_convex_combination(tiny_cfg):
    members = [init_params(tiny_cfg, seed) for seed in range(3)]
    out = aggregate([update(i + 1, p, n) for i, (p, n) in enumerate(zip(members, (3, 11, 6)))])
    for name in out.names():
        stack = np.stack([p.weights[name].data for p in members])
        value = out.weights[name].data
        assert np.all(value >= stack.min(axis=0)) and np.all(value <= stack.max(axis=0))


def test_aggregate_ignores_arrival_order(tiny_cfg):
    ua, ub, uc = (update(i, init_params(tiny_cfg, i), 4 + i) for i in (1, 2, 3))
    assert aggregate([uc, ua, ub]).bit_equal(aggregate([ua, ub, uc]))


def test_batch_norm_statistics_are_not_averaged(tiny_params, tiny_cfg, small_set):
    trained = train(tiny_params, tiny_cfg, small_set, LOCAL.model_copy(update={"epochs": 1}))
    global_params = init_params(tiny_cfg, 9)
    global_params.bn_stats["bn2"].running_mean = np.full(4, 0.25, dtype=np.float32)
    out = aggregate([update(1, trained), update(2, tiny_params)], "exclude_bn_stats", global_params)
    for layer, stats in global_params.bn_stats.items():
        assert out.bn_stats[layer].running_mean.tobytes() == stats.running_mean.tobytes()
        assert out.bn_stats[layer].running_var.tobytes() == stats.running_var.tobytes()
    fresh = aggregate([update(1, trained)], "exclude_bn_stats")
    assert not np.any(fresh.bn_stats["bn1"].running_mean)
    assert np.all(fresh.bn_stats["bn1"].running_var == 1.0)


def test_aggregate_errors(tiny_params, tiny_cfg):
    with pytest.raises(ValidationError):
        aggregate([])
    with pytest.raises(ValidationError):
        aggregate([update(1, tiny_params), update(1, tiny_params)])
    wider = tiny_cfg.model_copy(update={"K": 3})
    with pytest.raises(DimensionError):
        aggregate([update(1, tiny_params), update(2, init_params(wider, 0))])
    with pytest.raises(ValidationError):
        aggregate([update(1, tiny_params)], "average_everything")


# --- Pretraining ---

def _identical_clients(small_set) -> TrialSet:
    user = small_set.subset(np.flatnonzero(small_set.users == 1))
    return TrialSet(
        signals=np.concatenate([user.signals] * 3),
        labels=np.concatenate([user.labels] * 3),
        users=np.repeat([1, 2, 3], len(user)),
        n_classes=2,
        n_users=3,
    )


def test_identical_clients_match_a_single_client(tiny_cfg, small_set):
    fed = fed_config(client_seeding="shared", bn_policy="include_all")
    three = federated_pretrain(_identical_clients(small_set), fed, tiny_cfg, align_clients=False, workers=1)
    one = federated_pretrain(small_set.subset(range(12)), fed, tiny_cfg, align_clients=False, workers=1)
    assert three.bit_equal(one)


def test_single_client_equals_centralised_training(tiny_cfg, small_set):
    fed = fed_config(rounds=1, bn_policy="include_all")
    data = small_set.subset(range(12))
    federated = federated_pretrain(data, fed, tiny_cfg, align_clients=False, workers=1)
    centralised = train(init_params(tiny_cfg, derive_seed(fed.seed, "init")), tiny_cfg, data,
                        local_train_config(fed, 1, 1))
    assert federated.bit_equal(centralised)
    assert federated.bn_mode_override == "batch"


def test_round_log_and_probe(tiny_cfg, small_set):
    log = []
    federated_pretrain(small_set, fed_config(client_fraction=0.5), tiny_cfg, round_log=log, probe=small_set,
                       workers=1)
    assert [entry.round for entry in log] == [1, 2]
    for entry in log:
        assert len(entry.selected_clients) == 2
        assert set(entry.selected_clients) <= {1, 2, 3}
        assert sorted(entry.local_loss) == entry.selected_clients
        assert 0.0 <= entry.global_metric <= 100.0


def test_pretraining_is_deterministic(tiny_cfg, small_set):
    fed = fed_config()
    serial = federated_pretrain(small_set, fed, tiny_cfg, workers=1)
    assert serial.bit_equal(federated_pretrain(small_set, fed, tiny_cfg, workers=1))
    assert serial.bit_equal(federated_pretrain(small_set, fed, tiny_cfg, workers=3))


def test_global_batch_norm_stays_identity_when_excluded(tiny_cfg, small_set):
    out = federated_pretrain(small_set, fed_config(), tiny_cfg, workers=1)
    for stats in out.bn_stats.values():
        assert not np.any(stats.running_mean)
        assert np.all(stats.running_var == 1.0)
