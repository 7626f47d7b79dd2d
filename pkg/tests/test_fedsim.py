import numpy as np
import pytest

from fedtrap.fedsim import (ClientConfig, FedClient, ServerConfig, aggregate,
                            client_train, load_parameter_vector, run_protocol,
                            save_parameter_vector, select_fixed, select_fraction,
                            server_round)
from fedtrap.network import small_conv_net
from fedtrap.optim import AdamConfig, SGDConfig, sgd_step
from fedtrap.trap import craft_parameters, epsilon_flat_index


def make_batch(rng, n, shape=(1, 14, 14), classes=10):
    xs = rng.uniform(-1, 1, size=(n, *shape)).astype(np.float32)
    ys = rng.integers(1, classes + 1, size=n)
    return xs, ys


def test_client_train_rejects_size_mismatch():
    net = small_conv_net()
    net.init_random(0)
    rng = np.random.default_rng(0)
    xs, ys = make_batch(rng, 7)
    cfg = ClientConfig(batch_size=4, num_batches=2, epochs=1)
    with pytest.raises(ValueError, match="dataset size"):
        client_train(net, net.flatten(), xs, ys, cfg)


def test_client_train_rejects_layout_mismatch():
    net = small_conv_net()
    net.init_random(0)
    rng = np.random.default_rng(0)
    xs, ys = make_batch(rng, 4)
    cfg = ClientConfig(batch_size=4, num_batches=1, epochs=1)
    with pytest.raises(ValueError, match="length"):
        client_train(net, np.zeros(10, dtype=np.float32), xs, ys, cfg)


def test_client_train_does_not_mutate_theta():
    net = small_conv_net()
    net.init_random(1)
    theta = net.flatten()
    keep = theta.copy()
    rng = np.random.default_rng(1)
    xs, ys = make_batch(rng, 8)
    client_train(net, theta, xs, ys, ClientConfig(8, 1, 2))
    assert np.array_equal(theta, keep)


@pytest.mark.parametrize("opt", [SGDConfig(), AdamConfig()])
def test_non_triggering_data_leaves_trap_parameters_bit_exact(opt):
    net = small_conv_net()
    rng = np.random.default_rng(5)
    x_t = rng.uniform(-1, 1, size=(1, 14, 14)).astype(np.float32)
    theta, spec = craft_parameters(net, (x_t, 4), 4, 1e-3, seed=9)
    xs, ys = make_batch(rng, 16)
    work = net.copy()
    work.set_flat(theta)
    feats = work.forward_features(xs)[:, list(spec.component_indices)]
    assert (np.abs(feats - np.array(spec.etas, np.float32)).sum(axis=1)
            > spec.epsilon).all()
    phi = client_train(net, theta, xs, ys,
                       ClientConfig(4, 4, 2, optimizer=opt, shuffle_seed=3))
    final_bias = net.layout.slice_of(net.head_linear_indices()[2], "bias")
    changed = np.nonzero(phi != theta)[0]
    assert len(changed) > 0
    assert changed.min() >= final_bias.start and changed.max() < final_bias.stop
    assert phi[epsilon_flat_index(net, spec)] == theta[epsilon_flat_index(net, spec)]


def test_single_epoch_single_batch_is_one_sgd_step():
    net = small_conv_net(dtype=np.float64)
    net.init_random(11)
    theta = net.flatten()
    rng = np.random.default_rng(11)
    xs, ys = make_batch(rng, 8)
    work = net.copy()
    work.set_flat(theta)
    expected = sgd_step(theta, work.backward(xs, ys), 0.05)
    # fixed order: the composition is bit-identical
    phi = client_train(net, theta, xs, ys,
                       ClientConfig(8, 1, 1, optimizer=SGDConfig(lr=0.05),
                                    shuffle_per_epoch=False))
    assert np.array_equal(phi, expected)
    # shuffled order only permutes the in-batch summation
    phi_shuffled = client_train(net, theta, xs, ys,
                                ClientConfig(8, 1, 1, optimizer=SGDConfig(lr=0.05)))
    np.testing.assert_allclose(phi_shuffled, expected, rtol=1e-12)


def test_two_epochs_match_hand_loop_with_recomputed_gradients():
    net = small_conv_net(dtype=np.float64)
    net.init_random(13)
    theta = net.flatten()
    rng = np.random.default_rng(13)
    xs, ys = make_batch(rng, 8)
    cfg = ClientConfig(8, 1, 2, optimizer=SGDConfig(lr=0.05),
                       shuffle_per_epoch=False)
    phi = client_train(net, theta, xs, ys, cfg)
    params = theta
    work = net.copy()
    for _ in range(2):
        work.set_flat(params)
        params = sgd_step(params, work.backward(xs, ys), 0.05)
    assert np.array_equal(phi, params)


def test_single_step_identity_holds_in_float32():
    net = small_conv_net()
    net.init_random(12)
    theta = net.flatten()
    rng = np.random.default_rng(12)
    xs, ys = make_batch(rng, 16)
    work = net.copy()
    work.set_flat(theta)
    grad = work.backward(xs, ys)
    phi = client_train(net, theta, xs, ys,
                       ClientConfig(16, 1, 1, optimizer=SGDConfig(lr=0.01),
                                    shuffle_per_epoch=False))
    # the composition form is bit-exact even in float32
    assert np.array_equal(phi, sgd_step(theta, grad, 0.01))
    # the literal subtraction form cancels ~|theta| down to ~|lr*grad|,
    # amplifying float32 rounding by their norm ratio
    delta = theta.astype(np.float64) - phi.astype(np.float64)
    lr_grad = (np.float32(0.01) * grad).astype(np.float64)
    err = np.linalg.norm(delta - lr_grad)
    assert err <= 1e-4 * np.linalg.norm(lr_grad)


def test_client_train_is_deterministic():
    net = small_conv_net()
    net.init_random(17)
    theta = net.flatten()
    rng = np.random.default_rng(17)
    xs, ys = make_batch(rng, 12)
    cfg = ClientConfig(4, 3, 2, optimizer=AdamConfig(), shuffle_seed=77)
    a = client_train(net, theta, xs, ys, cfg)
    b = client_train(net, theta, xs, ys, cfg)
    assert np.array_equal(a, b)
    c = client_train(net, theta, xs, ys,
                     ClientConfig(4, 3, 2, optimizer=AdamConfig(), shuffle_seed=78))
    assert not np.array_equal(a, c)


def test_adam_state_is_fresh_per_call():
    # two identical queries must return identical answers: no moment carryover
    net = small_conv_net()
    net.init_random(19)
    theta = net.flatten()
    rng = np.random.default_rng(19)
    xs, ys = make_batch(rng, 8)
    cfg = ClientConfig(4, 2, 1, optimizer=AdamConfig(), shuffle_seed=5)
    client = FedClient(net, xs, ys, cfg)
    assert np.array_equal(client.respond(theta), client.respond(theta))


# -- aggregation ------------------------------------------------------------


def test_aggregate_single_answer_unchanged():
    v = np.array([1.0, -2.0, 3.5], dtype=np.float32)
    assert np.array_equal(aggregate([v]), v)


def test_aggregate_opposite_vectors_cancel():
    v = np.random.default_rng(0).normal(size=20)
    np.testing.assert_array_equal(aggregate([v, -v]), np.zeros(20))


def test_aggregate_matches_scalar_mean():
    rng = np.random.default_rng(1)
    vs = [rng.normal(size=15) for _ in range(3)]
    got = aggregate(vs)
    for i in range(15):
        assert got[i] == pytest.approx((vs[0][i] + vs[1][i] + vs[2][i]) / 3,
                                       abs=1e-12)


def test_aggregate_rejects_empty_and_mismatched():
    with pytest.raises(ValueError, match="no answers"):
        aggregate([])
    with pytest.raises(ValueError, match="mismatch"):
        aggregate([np.zeros(3), np.zeros(4)])


# -- server round ---------------------------------------------------------------


def build_clients(n, seed, same_data=False):
    net = small_conv_net()
    net.init_random(seed)
    rng = np.random.default_rng(seed)
    cfg = ClientConfig(4, 2, 1, shuffle_seed=1)
    clients = []
    xs, ys = make_batch(rng, 8)
    for _ in range(n):
        if not same_data:
            xs, ys = make_batch(rng, 8)
        clients.append(FedClient(net, xs, ys, cfg))
    return net, clients


def test_server_round_single_client_equals_client_train():
    net, clients = build_clients(1, seed=23)
    theta = net.flatten()
    assert np.array_equal(server_round(theta, clients), clients[0].respond(theta))


def test_server_round_identical_clients_equals_any_answer():
    net, clients = build_clients(3, seed=29, same_data=True)
    theta = net.flatten()
    out = server_round(theta, clients)
    np.testing.assert_allclose(out, clients[0].respond(theta), rtol=1e-6)


def test_server_round_two_clients_is_mean_of_answers():
    net, clients = build_clients(2, seed=31)
    theta = net.flatten()
    answers = [c.respond(theta) for c in clients]
    np.testing.assert_array_equal(server_round(theta, clients),
                                  aggregate(answers))


def test_server_round_rejects_empty_selection():
    net, clients = build_clients(2, seed=37)
    with pytest.raises(ValueError, match="no clients"):
        server_round(net.flatten(), clients, select=select_fixed([]))


def test_run_protocol_iterates_and_subsamples():
    net, clients = build_clients(4, seed=41)
    theta = net.flatten()
    out = run_protocol(theta, clients,
                       ServerConfig(iterations=2, select=select_fraction(0.5, seed=3)))
    assert out.shape == theta.shape
    assert not np.array_equal(out, theta)


# -- parameter blob ----------------------------------------------------------------


def test_blob_round_trip(tmp_path):
    vec = np.random.default_rng(2).normal(size=257).astype(np.float32)
    path = tmp_path / "vec.tfpv"
    save_parameter_vector(path, vec)
    assert np.array_equal(load_parameter_vector(path), vec)
    raw = path.read_bytes()
    assert raw[:4] == b"TFPV"
    assert len(raw) == 16 + 4 * 257


def test_blob_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "vec.tfpv"
    save_parameter_vector(path, np.arange(5, dtype=np.float32))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    bad = tmp_path / "bad.tfpv"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="magic"):
        load_parameter_vector(bad)
    trunc = tmp_path / "trunc.tfpv"
    trunc.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError, match="length"):
        load_parameter_vector(trunc)
