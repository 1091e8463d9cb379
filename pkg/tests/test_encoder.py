import numpy as np
import pytest

from capsevade import autodiff as ad
from capsevade import encoder as enc
from capsevade.autodiff import ShapeError


def zero_params(k=10, m=24, height=4, width=5):
    n = height * width
    return enc.EncoderParams(
        w1=np.zeros((n, enc.HIDDEN)),
        b1=np.zeros((1, enc.HIDDEN)),
        w2=np.zeros((enc.HIDDEN, k)),
        b2=np.zeros((1, k)),
        w3=np.zeros((enc.HIDDEN, k * m)),
        b3=np.zeros((1, k * m)),
        k=k,
        m=m,
        height=height,
        width=width,
    )


def test_zero_params_give_half_prior():
    params = zero_params()
    out = enc.encode(params, np.random.default_rng(0).uniform(size=(4, 5)))
    assert np.allclose(out.prior, 0.5)


def test_output_shapes():
    params = zero_params(k=10, m=24)
    out = enc.encode(params, np.zeros((4, 5)))
    assert out.prior.shape == (10,)
    assert out.posterior.shape == (10, 24)


def test_encode_is_pure():
    rng = np.random.default_rng(3)
    params = enc.EncoderParams(
        w1=rng.normal(size=(20, enc.HIDDEN)),
        b1=rng.normal(size=(1, enc.HIDDEN)),
        w2=rng.normal(size=(enc.HIDDEN, 3)),
        b2=rng.normal(size=(1, 3)),
        w3=rng.normal(size=(enc.HIDDEN, 6)),
        b3=rng.normal(size=(1, 6)),
        k=3,
        m=2,
        height=4,
        width=5,
    )
    x = rng.uniform(size=(4, 5))
    a, b = enc.encode(params, x), enc.encode(params, x)
    assert np.array_equal(a.prior, b.prior)
    assert np.array_equal(a.posterior, b.posterior)


def test_wrong_pixel_count_raises_shape_error():
    params = zero_params()
    with pytest.raises(ShapeError):
        enc.encode(params, np.zeros((3, 3)))


def test_presence_modes_match_encode(small_pipeline):
    params, _, train_set, _ = small_pipeline
    x = train_set.images[0]
    out = enc.encode(params, x)
    assert np.array_equal(enc.presence_for(params, x, enc.PRIOR), out.prior)
    assert np.allclose(
        enc.presence_for(params, x, enc.POSTERIOR), out.posterior.sum(axis=1)
    )


def test_posterior_row_sums():
    mat = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(mat.sum(axis=1), [3.0, 7.0])
    # the flat-to-row-sum matrix used inside the graph agrees
    r = enc._row_sum_matrix(2, 2)
    assert np.array_equal(mat.reshape(1, 4) @ r, [[3.0, 7.0]])


def test_presence_bounds(small_pipeline):
    params, _, train_set, _ = small_pipeline
    for x in train_set.images[:20]:
        prior = enc.presence_for(params, x, enc.PRIOR)
        reduced = enc.presence_for(params, x, enc.POSTERIOR)
        assert prior.min() >= 0.0 and prior.max() <= 1.0
        assert reduced.min() >= 0.0


def test_prior_gradient_matches_finite_differences(small_pipeline):
    params, _, train_set, _ = small_pipeline
    presence, leaf_name = enc.presence_graph(params, enc.PRIOR)
    indicator = np.zeros((1, params.k))
    indicator[0, 1] = 1.0
    root = ad.reduce_sum(ad.mul(presence, ad.const(indicator)))
    x_row = train_set.images[0].reshape(1, -1)
    assert ad.check_gradient(root, leaf_name, {leaf_name: x_row}, 1e-5) < 1e-4


def test_graph_and_numpy_forward_agree(small_pipeline):
    params, _, train_set, _ = small_pipeline
    x_row = train_set.images[3].reshape(1, -1)
    for mode in (enc.PRIOR, enc.POSTERIOR):
        node, leaf_name = enc.presence_graph(params, mode)
        from_graph = ad.evaluate(node, {leaf_name: x_row})[0]
        assert np.array_equal(from_graph, enc.presence_for(params, x_row, mode))


def test_rmsprop_first_step_hand_values():
    config = enc.TrainConfig(learning_rate=1.0, momentum=0.0, epsilon=0.0)
    params = {"p": np.array([0.0])}
    grads = {"p": np.array([2.0])}
    state = enc.init_rmsprop(params)
    state, updated = enc.rmsprop_step(state, params, grads, config)
    assert state.square_avg["p"] == pytest.approx([0.4])
    assert updated["p"] == pytest.approx([-2.0 / np.sqrt(0.4)])


def test_rmsprop_zero_gradient_is_noop():
    config = enc.TrainConfig()
    params = {"p": np.array([1.0, -2.0])}
    state = enc.init_rmsprop(params)
    state, updated = enc.rmsprop_step(state, params, {"p": np.zeros(2)}, config)
    assert np.array_equal(updated["p"], params["p"])


def test_rmsprop_learning_rate_decay_staircase():
    config = enc.TrainConfig(learning_rate=3e-5, momentum=0.0, epsilon=0.0)
    params = {"p": np.array([0.0])}
    grads = {"p": np.array([1.0])}

    state = enc.init_rmsprop(params)
    state.step = 9999
    _, before = enc.rmsprop_step(state, params, grads, config)

    state = enc.init_rmsprop(params)
    state.step = 10000
    _, after = enc.rmsprop_step(state, params, grads, config)

    # with zero state the update is lr * g / sqrt(0.1 * g^2) = lr / sqrt(0.1)
    assert before["p"] == pytest.approx([-3e-5 / np.sqrt(0.1)])
    assert after["p"] == pytest.approx([-3e-5 * 0.96 / np.sqrt(0.1)])


def test_training_is_deterministic(small_data):
    train_set, _ = small_data
    config = enc.TrainConfig(epochs=3, batch_size=60, seed=5)
    a = enc.train(config, train_set.images, train_set.labels, 4, n_parts=6)
    b = enc.train(config, train_set.images, train_set.labels, 4, n_parts=6)
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_training_single_class_activates_its_capsule(small_data):
    train_set, _ = small_data
    keep = train_set.labels == 2
    config = enc.TrainConfig(epochs=60, batch_size=30, seed=1)
    params = enc.train(config, train_set.images[keep], train_set.labels[keep], 4, n_parts=6)
    mean_presence = np.mean(
        [enc.presence_for(params, x, enc.PRIOR) for x in train_set.images[keep]],
        axis=0,
    )
    assert mean_presence.argmax() == 2
    assert all(mean_presence[2] > mean_presence[j] for j in (0, 1, 3))


def test_training_rejects_bad_inputs(small_data):
    train_set, _ = small_data
    config = enc.TrainConfig(epochs=1)
    with pytest.raises(ValueError):
        enc.train(config, np.zeros((0, 4, 4)), np.zeros(0, dtype=int), 4)
    with pytest.raises(ValueError):
        enc.train(config, train_set.images, train_set.labels + 7, 4)


def test_class_selective_diagonal_dominance(small_pipeline):
    params, _, _, test_set = small_pipeline
    presences = np.stack(
        [enc.presence_for(params, x, enc.PRIOR) for x in test_set.images]
    )
    means = np.stack(
        [presences[test_set.labels == c].mean(axis=0) for c in range(4)]
    )
    for c in range(4):
        others = np.delete(means[c], c)
        assert means[c, c] > others.max()


def test_train_config_validation():
    with pytest.raises(ValueError):
        enc.TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        enc.TrainConfig(batch_size=0)


def test_serialization_roundtrip_bit_exact(tmp_path, small_pipeline):
    params = small_pipeline[0]
    path = tmp_path / "model.cenc"
    enc.save_encoder(params, path)
    loaded = enc.load_encoder(path)
    assert (loaded.k, loaded.m, loaded.height, loaded.width) == (
        params.k, params.m, params.height, params.width,
    )
    for name in ("w1", "b1", "w2", "b2", "w3", "b3"):
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
    # writing the loaded model reproduces the file byte for byte
    second = tmp_path / "model2.cenc"
    enc.save_encoder(loaded, second)
    assert path.read_bytes() == second.read_bytes()


def test_load_encoder_rejects_bad_files(tmp_path):
    bad_magic = tmp_path / "bad.cenc"
    bad_magic.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(enc.ModelFormatError, match="magic"):
        enc.load_encoder(bad_magic)

    params = zero_params(k=2, m=2, height=2, width=2)
    good = tmp_path / "good.cenc"
    enc.save_encoder(params, good)
    truncated = tmp_path / "trunc.cenc"
    truncated.write_bytes(good.read_bytes()[:-10])
    with pytest.raises(enc.ModelFormatError):
        enc.load_encoder(truncated)
