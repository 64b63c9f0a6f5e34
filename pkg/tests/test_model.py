import numpy as np
import pytest
from oracle import fixed_small_weights, reference_forward

from cgnn import autodiff as ad
from cgnn.autodiff import Tape, Tensor
from cgnn.graph import ConceptGraphSpec, ConceptNodeSpec, EmissionSpec, HyperedgeSpec, preset_cvs, preset_pgs
from cgnn.gradcheck import pair_spec
from cgnn.model import (
    DropoutConfig,
    LSTMCell,
    ModelConfig,
    aggregate_edges_for_node,
    aggregate_nodes_for_edge,
    edge_update,
    emit,
    emissions_to_numpy,
    encode_frame,
    forward_sequence,
    graph_update,
    init_model,
    initial_state,
    lstm_step,
    node_update,
    sample_masks,
    with_precision,
)

F64 = ModelConfig(embed_dim=4, lstm_input_dim=4, encoder_hidden=4, precision="f64")


def t64(x):
    return Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def zero_cell(in_dim, hid):
    W = Tensor(np.zeros((in_dim + hid, 4 * hid)), requires_grad=True, name="W")
    b = Tensor(np.zeros((1, 4 * hid)), requires_grad=True, name="b")
    return LSTMCell(W, b, in_dim, hid)


def zero_model(spec, config=F64):
    model = init_model(spec, config)
    for t in model.params.values():
        t.data[...] = 0
    return model


# -- lstm_step ---------------------------------------------------------------


def test_lstm_zero_fixed_point():
    h, c = lstm_step(zero_cell(3, 2), t64([0, 0]), t64([0, 0]), t64([0.7, -2, 5]))
    assert h.data.tolist() == [[0, 0]] and c.data.tolist() == [[0, 0]]


def test_lstm_forget_bias_hand_value():
    cell = zero_cell(2, 1)
    cell.b.data[0, 1] = 10.0
    h, c = lstm_step(cell, t64([0.0]), t64([1.0]), t64([3.0, -1.0]))
    f = 1 / (1 + np.exp(-10.0))
    assert c.data[0, 0] == pytest.approx(f, abs=1e-15)
    assert c.data[0, 0] == pytest.approx(0.99995, abs=5e-6)
    assert h.data[0, 0] == pytest.approx(0.5 * np.tanh(f), abs=1e-15)
    assert h.data[0, 0] == pytest.approx(0.38079, abs=1e-5)


def test_lstm_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    cell = zero_cell(3, 4)
    cell.W.data[...] = rng.normal(size=cell.W.shape)
    cell.b.data[...] = rng.normal(size=cell.b.shape)
    h, c, x = t64(rng.normal(size=4)), t64(rng.normal(size=4)), t64(rng.normal(size=3))

    def f():
        return ad.sum_reduce(lstm_step(cell, h, c, x)[0])

    with Tape() as tape:
        loss = f()
    analytic = ad.backpropagate(loss, tape, wrt=[cell.W, cell.b])
    numeric = ad.finite_difference_gradient(lambda _: float(f().data), {"W": cell.W.data, "b": cell.b.data})
    for k in ("W", "b"):
        assert ad.relative_error(analytic[k], numeric[k]).max() <= 1e-4


def test_lstm_shape_mismatch():
    with pytest.raises(ad.ShapeError, match="lstm_step"):
        lstm_step(zero_cell(3, 2), t64([0, 0]), t64([0, 0]), t64([1, 2]))


# -- aggregation -------------------------------------------------------------


def test_node_aggregation_examples():
    assert aggregate_nodes_for_edge([t64([1, 2]), t64([3, 4])]).data.tolist() == [[2, 3]]
    assert aggregate_nodes_for_edge([t64([1.5, -2])]).data.tolist() == [[1.5, -2]]
    assert aggregate_nodes_for_edge([t64([1, 2]), t64([3, 4])], "sum").data.tolist() == [[4, 6]]
    with pytest.raises(ValueError):
        aggregate_nodes_for_edge([])


def test_edge_aggregation_examples():
    assert aggregate_edges_for_node([t64([0, 2]), t64([4, 6])], 2).data.tolist() == [[2, 4]]
    assert aggregate_edges_for_node([t64([7, 8])], 2).data.tolist() == [[7, 8]]
    assert aggregate_edges_for_node([], 3, batch=2).data.tolist() == [[0, 0, 0], [0, 0, 0]]


def test_node_aggregation_ignores_member_order():
    rng = np.random.default_rng(0)
    states = [t64(rng.normal(size=5)) for _ in range(6)]
    base = aggregate_nodes_for_edge(states).data
    for _ in range(20):
        perm = rng.permutation(6)
        assert np.abs(aggregate_nodes_for_edge([states[i] for i in perm]).data - base).max() <= 1e-12


# -- init_model --------------------------------------------------------------


def test_init_is_deterministic_per_seed():
    a, b, c = (init_model(preset_pgs(), seed=s) for s in (4, 4, 5))
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


def test_cvs_inventory():
    model = init_model(preset_cvs())
    lstms = sorted(k[: -len(".lstm.W")] for k in model.params if k.endswith(".lstm.W"))
    assert sum(k.startswith("node.") for k in lstms) == 6
    assert sum(k.startswith("edge.") for k in lstms) == 1
    assert "global" in lstms and len(lstms) == 8
    assert model.params["node.cvs.lstm.W"].shape == (64 + 64, 256)
    assert model.params["global.h0"].shape == (1, 64)


def test_init_ranges_and_forget_bias():
    model = init_model(pair_spec(4), F64, seed=1)
    b = model.params["node.a.lstm.b"].data[0]
    assert np.all(b[4:8] == 1.0)
    W = model.params["frame.W"].data
    assert np.abs(W).max() <= 1 / np.sqrt(W.shape[0])
    assert model.params["global.h0"].data.tolist() == [[0, 0, 0, 0]]


def test_directed_modes_create_role_and_member_weights():
    directed = init_model(pair_spec(4, "directed-encoders"), F64)
    assert {"edge.ab.enc.msg_W.input", "edge.ab.enc.msg_W.output"} <= set(directed.params)
    individual = init_model(pair_spec(4, "individual-encoders"), F64)
    assert {"edge.ab.enc.msg_W.a", "edge.ab.enc.msg_W.b", "node.a.enc.msg_W.ab"} <= set(individual.params)


# -- encode_frame / emit -----------------------------------------------------


def test_encode_frame_zero_parameters_and_determinism():
    model = zero_model(pair_spec(4))
    assert np.all(encode_frame(model, [1.0, 2.0, 3.0]).data == 0)
    model = init_model(pair_spec(4), F64)
    x = [0.3, -1.2, 2.0]
    assert encode_frame(model, x).data.tobytes() == encode_frame(model, x).data.tobytes()
    with pytest.raises(ad.ShapeError):
        encode_frame(model, [1.0, 2.0])


def test_encode_frame_gradient():
    model = init_model(pair_spec(4), F64, seed=2)
    x = np.array([[0.3, -1.2, 2.0]])
    f = lambda: ad.sum_reduce(ad.hadamard(encode_frame(model, x), t64([1, -2, 3, 0.5])))  # noqa: E731
    with Tape() as tape:
        loss = f()
    g = ad.backpropagate(loss, tape, wrt=[model.frame_W, model.frame_b])
    n = ad.finite_difference_gradient(lambda _: float(f().data), {"frame.W": model.frame_W.data, "frame.b": model.frame_b.data})
    for k in g:
        assert ad.relative_error(g[k], n[k]).max() <= 1e-4


def test_emission_heads():
    spec = ConceptGraphSpec(
        nodes=(
            ConceptNodeSpec("b", 3, EmissionSpec("binary", "b")),
            ConceptNodeSpec("c", 3, EmissionSpec("categorical", "c", 4)),
            ConceptNodeSpec("o", 3, EmissionSpec("ordinal", "o", 5)),
        ),
        hyperedges=(),
        input_dim=2,
    )
    model = zero_model(spec)
    h = t64([0.4, -1, 2])
    assert emit(model.heads["b"], h).data.tolist() == [[0.5]]
    assert emit(model.heads["o"], h).data.tolist() == [[0.5] * 5]
    model = init_model(spec, F64, seed=3)
    p = emit(model.heads["c"], t64([5.0, -3, 2])).data
    assert abs(p.sum() - 1) <= 1e-6 and np.all(p > 0)
    q = emit(model.heads["o"], t64([5.0, -3, 2])).data
    assert np.all((q > 0) & (q < 1))


# -- edge / node updates -----------------------------------------------------


def test_zero_parameter_updates_stay_at_zero():
    model = zero_model(pair_spec(4))
    with Tape():
        state = initial_state(model)
        emb = encode_frame(model, [1.0, 2.0, 3.0])
        u = state.global_[0]
        members = {"a": t64([1, 1, 1, 1]), "b": t64([2, 0, 0, 2])}
        h, c = edge_update(model, "ab", members, u, emb, state)
        assert h.shape == (1, 4) and np.all(h.data == 0) and np.all(c.data == 0)
        h, c = node_update(model, "a", {"ab": t64([5, 5, 5, 5])}, u, emb, state)
        assert h.shape == (1, 4) and np.all(h.data == 0)


def test_zero_parameter_model_emits_one_half():
    model = zero_model(preset_cvs().with_dims(4, 4, 24), ModelConfig(4, 4, 4, precision="f64"))
    frames = np.random.default_rng(0).normal(size=(5, 24))
    ems, state = forward_sequence(model, frames)
    for em in ems:
        assert all(v.data.tolist() == [[0.5]] for v in em.values())
    assert all(np.all(h.data == 0) for h, _ in state.nodes.values())


# -- graph_update against the independent reference --------------------------


def oracle_model(spec, seed=None):
    config = ModelConfig(embed_dim=spec.global_dim, lstm_input_dim=spec.global_dim, encoder_hidden=spec.global_dim, precision="f64")
    model = init_model(spec, config, seed or 0)
    if seed is None:
        fixed_small_weights(model)
    else:
        rng = np.random.default_rng(seed)
        for t in model.params.values():
            t.data[...] = rng.uniform(-1, 1, t.shape)
    return model


def compare_with_reference(model, frames):
    ems, _ = forward_sequence(model, frames)
    ref = reference_forward(model.param_arrays(), model.spec, frames)
    worst = 0.0
    for got, want in zip(ems, ref):
        assert got.keys() == want.keys()
        for k in want:
            worst = max(worst, float(np.abs(got[k].data[0] - want[k]).max()))
    return worst


def test_one_frame_matches_reference_d2():
    model = oracle_model(pair_spec(2))
    frame = np.array([[0.5, -1.0, 0.25]])
    assert compare_with_reference(model, frame) <= 1e-10


def test_sequence_matches_reference_on_larger_graph():
    spec = ConceptGraphSpec(
        nodes=(
            ConceptNodeSpec("a", 3, EmissionSpec("binary", "a")),
            ConceptNodeSpec("b", 3, EmissionSpec("categorical", "b", 3)),
            ConceptNodeSpec("c", 3, EmissionSpec("ordinal", "c", 4)),
            ConceptNodeSpec("d", 3, EmissionSpec("binary", "d")),
            ConceptNodeSpec("lonely", 3, EmissionSpec("binary", "lonely")),
        ),
        hyperedges=(
            HyperedgeSpec("abc", (("a", "undirected"), ("b", "undirected"), ("c", "undirected")), 5),
            HyperedgeSpec("cd", (("c", "undirected"), ("d", "undirected")), 5),
        ),
        global_dim=3,
        input_dim=4,
    )
    model = oracle_model(spec, seed=11)
    frames = np.random.default_rng(12).normal(size=(6, 4))
    assert compare_with_reference(model, frames) <= 1e-10


# -- sequence-level properties -----------------------------------------------


def test_graph_update_deterministic_without_dropout():
    model = init_model(preset_pgs().with_dims(4, 4, 24), ModelConfig(4, 4, 4, precision="f64"), seed=1)
    x = np.random.default_rng(1).normal(size=(1, 24))
    s0 = initial_state(model)
    _, a = graph_update(model, s0, x)
    _, b = graph_update(model, s0, x)
    assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)


def test_dropout_reproducible_under_seed():
    model = init_model(pair_spec(4), F64, seed=1)
    frames = np.random.default_rng(2).normal(size=(4, 3, 3))
    drop = DropoutConfig(0.3, 0.3, 0.4)
    run = lambda s: emissions_to_numpy(forward_sequence(model, frames, rng=np.random.default_rng(s), dropout=drop)[0])  # noqa: E731
    a, b, c = run(5), run(5), run(6)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_dropped_node_sends_and_receives_nothing():
    model = init_model(pair_spec(4), F64, seed=4)
    drop = DropoutConfig(node=0.5, edge=0.0, modality=0.0)
    x = np.random.default_rng(0).normal(size=(8, 3))
    state = initial_state(model, 8)
    state.nodes = {k: (t64(np.random.default_rng(i).normal(size=(8, 4))), c) for i, (k, (h, c)) in enumerate(state.nodes.items())}
    # find a seed where node a is dropped in some rows and kept in others
    for seed in range(50):
        masks = sample_masks(model, 8, np.random.default_rng(seed), drop)
        keep_a = masks.nodes["a"].data[:, 0] > 0
        if keep_a.any() and not keep_a.all():
            break
    new, _ = graph_update(model, state, x, np.random.default_rng(seed), drop)
    u, emb = state.global_[0], encode_frame(model, x)
    sent = {k: ad.hadamard(state.nodes[k][0], masks.nodes[k]) for k in ("a", "b")}
    assert np.all(sent["a"].data[~keep_a] == 0)
    edge_h, _ = edge_update(model, "ab", sent, u, emb, state)
    assert np.array_equal(new.edges["ab"][0].data, edge_h.data)
    # rows where a was dropped: its update sees a zero message but still runs
    silent, _ = node_update(model, "a", {"ab": t64(np.zeros((8, 4)))}, u, emb, state)
    got = new.nodes["a"][0].data
    assert np.allclose(got[~keep_a], silent.data[~keep_a], atol=1e-14)
    assert not np.allclose(got[keep_a], silent.data[keep_a])
    assert not np.allclose(got[~keep_a], state.nodes["a"][0].data[~keep_a])


def test_single_frame_equals_graph_update():
    model = init_model(pair_spec(4), F64, seed=2)
    x = np.random.default_rng(0).normal(size=(1, 3))
    ems, _ = forward_sequence(model, x)
    _, em = graph_update(model, initial_state(model), x[0])
    assert all(ems[0][k].data.tobytes() == em[k].data.tobytes() for k in em)


def test_state_threading_equals_single_call():
    model = init_model(preset_cvs().with_dims(4, 4, 24), ModelConfig(4, 4, 4, precision="f64"), seed=3)
    frames = np.random.default_rng(3).normal(size=(8, 2, 24))
    whole, _ = forward_sequence(model, frames)
    first, state = forward_sequence(model, frames[:4])
    second, _ = forward_sequence(model, frames[4:], state)
    for a, b in zip(whole, first + second):
        assert all(np.abs(a[k].data - b[k].data).max() <= 1e-12 for k in a)


def test_mode_consistency_with_tied_weights():
    base = init_model(pair_spec(4), F64, seed=8)
    frames = np.random.default_rng(8).normal(size=(3, 2, 3))
    want = emissions_to_numpy(forward_sequence(base, frames)[0])
    for mode in ("directed-encoders", "individual-encoders"):
        other = init_model(pair_spec(4, mode), F64, seed=0)
        arrays = {}
        for name in other.params:
            root = name.split(".msg_W")[0] + ".msg_W" if ".msg_W" in name else name
            arrays[name] = base.params[root].data
        other.load_arrays(arrays)
        got = emissions_to_numpy(forward_sequence(other, frames)[0])
        assert all(np.abs(got[k] - want[k]).max() <= 1e-12 for k in want)


def test_batch_rows_are_independent():
    model = init_model(pair_spec(4), F64, seed=5)
    frames = np.random.default_rng(5).normal(size=(3, 4, 3))
    batched = emissions_to_numpy(forward_sequence(model, frames)[0])
    for r in range(4):
        single = emissions_to_numpy(forward_sequence(model, frames[:, r])[0])
        assert all(np.abs(batched[k][:, r] - single[k][:, 0]).max() <= 1e-12 for k in single)


def test_input_errors():
    model = init_model(pair_spec(4), F64)
    with pytest.raises(ValueError, match="empty"):
        forward_sequence(model, np.zeros((0, 3)))
    with pytest.raises(ad.ShapeError):
        graph_update(model, initial_state(model), np.zeros(5))


def test_default_precision_is_32_bit_and_convertible():
    model = init_model(pair_spec(4))
    assert model.params["frame.W"].dtype == np.float32
    ems, _ = forward_sequence(model, np.ones((2, 3)))
    assert ems[0]["a"].dtype == np.float32
    wide = with_precision(model, "f64")
    assert wide.params["frame.W"].dtype == np.float64
    assert np.array_equal(wide.params["frame.W"].data, model.params["frame.W"].data.astype(np.float64))
