import numpy as np
import pytest

from fedleak.data import generate_toy
from fedleak.federated import (
    ClientDataset,
    ConfigError,
    DpSgd,
    FLConfig,
    MessageLog,
    aggregate,
    client_rng,
    clip_per_sample,
    load_message_log,
    local_update_dpsgd,
    local_update_fedavg,
    noise_rng,
    run_training,
    save_message_log,
)
from fedleak.models import (
    Linear,
    ModelParams,
    ShapeError,
    mean_loss,
    sgd_stability_bound,
    solve_least_squares,
)


def small_dataset(seed=0, n=16, d=3):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    return ClientDataset(X, y)


def test_client_dataset_validation():
    with pytest.raises(ValueError):
        ClientDataset(np.array([[1.0, np.nan]]), np.array([0.0]))
    with pytest.raises(ValueError):
        ClientDataset(np.array([[1.0, 0.5]]), np.array([0.0]), sensitive_col=1)
    ds = ClientDataset(np.array([[1.0, 1.0], [2.0, 0.0]]), np.zeros(2), sensitive_col=1)
    assert ds.public_cols == [0]
    assert np.array_equal(ds.sensitive, [1.0, 0.0])
    assert ds.public_X.shape == (2, 1)


def test_fedavg_one_full_batch_step_closed_form():
    # 2x2 instance checked by hand: theta - eta * (2/S) X^T (X theta - y)
    X = np.array([[1.0, 0.0], [0.0, 2.0]])
    y = np.array([1.0, 2.0])
    ds = ClientDataset(X, y)
    theta = ModelParams(np.array([0.5, 0.5]), Linear(2))
    eta = 0.1
    cfg = FLConfig(num_rounds=1, batch_size=2, learning_rate=eta, local_epochs=1)
    # residuals: [0.5 - 1, 1.0 - 2] = [-0.5, -1.0]
    # X^T r = [-0.5, -2.0]; grad = (2/2) X^T r = [-0.5, -2.0]
    expected = np.array([0.5 + 0.05, 0.5 + 0.2])
    out = local_update_fedavg(theta, ds, cfg, client_rng(0, 0))
    assert np.allclose(out.values, expected, atol=1e-14)


def test_fedavg_fixed_point_at_local_optimum():
    ds = small_dataset(1)
    opt = solve_least_squares(ds.X, ds.y)
    cfg = FLConfig(num_rounds=1, batch_size=ds.num_samples, learning_rate=0.01,
                   local_epochs=3)
    out = local_update_fedavg(opt, ds, cfg, client_rng(0, 0))
    assert np.max(np.abs(out.values - opt.values)) <= 1e-12


def test_fedavg_zero_learning_rate_is_identity():
    ds = small_dataset(2)
    theta = ModelParams(np.arange(3, dtype=float), Linear(3))
    cfg = FLConfig(num_rounds=1, batch_size=4, learning_rate=0.0, local_epochs=5)
    out = local_update_fedavg(theta, ds, cfg, client_rng(0, 0))
    assert np.array_equal(out.values, theta.values)


def test_dpsgd_disabled_matches_fedavg_bitwise():
    ds = small_dataset(3, n=20)
    theta = ModelParams(np.zeros(3), Linear(3))
    cfg = FLConfig(num_rounds=1, batch_size=6, learning_rate=0.05, local_epochs=2)
    plain = local_update_fedavg(theta, ds, cfg, client_rng(7, 0))
    defended = local_update_dpsgd(theta, ds, cfg, DpSgd(clip_norm=np.inf, noise_std=0.0),
                                  client_rng(7, 0), noise_rng(7, 0))
    assert np.array_equal(plain.values, defended.values)


def test_clip_per_sample_norms():
    rng = np.random.default_rng(4)
    per = rng.standard_normal((50, 6)) * 3.0
    clipped = clip_per_sample(per, 0.5)
    norms = np.linalg.norm(clipped, axis=1)
    assert np.all(norms <= 0.5 + 1e-12)
    small = clip_per_sample(per * 1e-6, 0.5)
    assert np.array_equal(small, per * 1e-6)  # below the clip: untouched


def test_dpsgd_seed_determinism():
    ds = small_dataset(5, n=24)
    theta = ModelParams(np.zeros(3), Linear(3))
    cfg = FLConfig(num_rounds=1, batch_size=8, learning_rate=0.05)
    defense = DpSgd(clip_norm=1.0, noise_std=0.5)
    a = local_update_dpsgd(theta, ds, cfg, defense, client_rng(1, 0), noise_rng(1, 0))
    b = local_update_dpsgd(theta, ds, cfg, defense, client_rng(1, 0), noise_rng(1, 0))
    c = local_update_dpsgd(theta, ds, cfg, defense, client_rng(2, 0), noise_rng(2, 0))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)


def test_aggregate_rules():
    p = lambda v: ModelParams(np.array(v), Linear(len(v)))
    single = aggregate([(1.0, p([1.0, 2.0]))])
    assert np.array_equal(single.values, [1.0, 2.0])
    same = aggregate([(0.3, p([1.0])), (0.7, p([1.0]))])
    assert np.array_equal(same.values, [1.0])
    weighted = aggregate([(1.0, p([0.0])), (3.0, p([4.0]))])
    assert np.allclose(weighted.values, [3.0])
    with pytest.raises(ShapeError):
        aggregate([(1.0, p([0.0])), (1.0, p([0.0, 1.0]))])
    with pytest.raises(ConfigError):
        aggregate([])


def test_aggregate_weight_scaling_invariance():
    rng = np.random.default_rng(6)
    models = [(w, ModelParams(rng.standard_normal(4), Linear(4)))
              for w in (0.2, 0.5, 1.3)]
    scaled = [(17.0 * w, p) for w, p in models]
    assert np.allclose(aggregate(models).values, aggregate(scaled).values, atol=1e-15)


def test_run_training_single_client_equals_local_update():
    ds = small_dataset(7)
    cfg = FLConfig(num_rounds=1, batch_size=4, learning_rate=0.05, seed=3)
    result = run_training([ds], cfg, taps=(0,))
    direct = local_update_fedavg(ModelParams(np.zeros(3), Linear(3)), ds, cfg,
                                 client_rng(3, 0))
    assert np.array_equal(result.final.values, direct.values)
    log = result.logs[0]
    assert log.rounds == [0]
    assert np.array_equal(log.entries[0].theta_out.values, direct.values)


def test_run_training_identical_clients_match_single_client():
    ds = small_dataset(8)
    twin = ClientDataset(ds.X.copy(), ds.y.copy())
    cfg = FLConfig(num_rounds=5, batch_size=ds.num_samples, learning_rate=0.02, seed=0)
    solo = run_training([ds], cfg)
    pair = run_training([ds, twin], cfg)
    # full-batch updates are deterministic, so equal clients give equal updates
    assert np.allclose(pair.final.values, solo.final.values, atol=1e-12)


def test_run_training_empty_clients_rejected():
    cfg = FLConfig(num_rounds=1, batch_size=1, learning_rate=0.1)
    with pytest.raises(ConfigError):
        run_training([], cfg)


def test_training_deterministic_and_taps_do_not_perturb():
    clients, _ = generate_toy(3, 32, rng=np.random.default_rng(0))
    cfg = FLConfig(num_rounds=8, batch_size=8, learning_rate=0.03, seed=11)
    bare = run_training(clients, cfg)
    tapped = run_training(clients, cfg, taps=(0, 2))
    again = run_training(clients, cfg, taps=(0, 2))
    assert np.array_equal(bare.final.values, tapped.final.values)
    assert np.array_equal(tapped.final.values, again.final.values)
    for cid, log in tapped.logs.items():
        for e, e2 in zip(log.entries, again.logs[cid].entries):
            assert np.array_equal(e.theta_in.values, e2.theta_in.values)
            assert np.array_equal(e.theta_out.values, e2.theta_out.values)


def test_log_rounds_subset_of_participation():
    clients, _ = generate_toy(4, 24, rng=np.random.default_rng(1))
    cfg = FLConfig(num_rounds=30, batch_size=24, learning_rate=0.02, seed=5,
                   participation=2)
    result = run_training(clients, cfg, taps=(1,))
    rounds = result.logs[1].rounds
    assert len(rounds) < 30           # sampled out sometimes, with high probability
    assert sorted(rounds) == rounds   # strictly increasing by construction


def test_single_client_full_batch_loss_non_increasing_under_stability_bound():
    clients, _ = generate_toy(1, 64, rng=np.random.default_rng(2))
    ds = clients[0]
    eta = sgd_stability_bound(ds.X)    # exactly at the bound
    cfg = FLConfig(num_rounds=20, batch_size=64, learning_rate=eta, seed=0)
    theta = ModelParams(np.zeros(ds.width), Linear(ds.width))
    losses = []
    rng = client_rng(0, 0)
    for _ in range(cfg.num_rounds):
        losses.append(mean_loss(theta, ds.X, ds.y))
        theta = local_update_fedavg(theta, ds, cfg, rng)
    losses.append(mean_loss(theta, ds.X, ds.y))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_toy_two_client_training_approaches_pooled_least_squares():
    clients, _ = generate_toy(2, 1024, rng=np.random.default_rng(3))
    eta = min(sgd_stability_bound(c.X) for c in clients)
    cfg = FLConfig(num_rounds=300, batch_size=1024, learning_rate=eta, seed=0)
    result = run_training(clients, cfg)
    X = np.vstack([c.X for c in clients])
    y = np.concatenate([c.y for c in clients])
    pooled = solve_least_squares(X, y)
    final_loss = mean_loss(result.final, X, y)
    best_loss = mean_loss(pooled, X, y)
    assert final_loss <= 1.05 * best_loss


def test_message_log_roundtrip_exact(tmp_path):
    clients, _ = generate_toy(2, 32, rng=np.random.default_rng(4))
    cfg = FLConfig(num_rounds=6, batch_size=8, learning_rate=0.03, seed=9)
    result = run_training(clients, cfg, taps=(1,))
    log = result.logs[1]
    path = tmp_path / "client1.jsonl"
    save_message_log(log, path)
    loaded = load_message_log(path, Linear(clients[0].width), client_id=1)
    assert loaded.rounds == log.rounds
    for a, b in zip(log.entries, loaded.entries):
        assert np.array_equal(a.theta_in.values, b.theta_in.values)
        assert np.array_equal(a.theta_out.values, b.theta_out.values)


def test_message_log_validation():
    log = MessageLog(0)
    p = ModelParams(np.zeros(2), Linear(2))
    log.append(3, p, p)
    with pytest.raises(ValueError):
        log.append(3, p, p)   # rounds strictly increasing
    with pytest.raises(KeyError):
        log.entry_for(5)
