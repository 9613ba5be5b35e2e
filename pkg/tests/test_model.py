import numpy as np
import pytest

import hypersde.sde as sde_mod
from hypersde import losses, model as mdl
from hypersde.autodiff import Tape, constant
from hypersde.model import (Model, ModelConfig, evolve_weights, forward_subject, hconv,
                            load_checkpoint, prepare_subject, refine_weights,
                            save_checkpoint, sparse_forward)
from hypersde.reconstruction import VisitFeatures

from conftest import rel_err


def toy_config(**overrides):
    base = dict(n_rois=5, embed_dim=3, n_neighbors=2, temporal_mode="ode",
                sparsity=True, solver_steps=4, drift_hidden=6, mlp_hidden=5, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def random_visits(rng, n_visits, n=5, times=None):
    times = times or [float(10 * k) for k in range(n_visits)]
    return [VisitFeatures(X=rng.normal(size=(n, n)), visit_time_months=t)
            for t in times[:n_visits]]


def test_evolve_zero_interval_returns_previous_state():
    w = constant(np.random.default_rng(0).normal(size=(4, 3)))
    out = evolve_weights(w, 0.0, lambda z, t: -z, None, "sde", 10)
    assert out is w


def test_evolve_rnn_mode_passes_through():
    w = constant(np.ones((2, 2)))
    out = evolve_weights(w, 5.0, lambda z, t: -z, None, "rnn", 10)
    assert out is w


def test_evolve_ode_zero_drift_is_identity():
    w = constant(np.random.default_rng(1).normal(size=(3, 2)))
    zero = lambda z, t: z * 0.0
    out = evolve_weights(w, 7.0, zero, None, "ode", 8)
    np.testing.assert_array_equal(out.data, w.data)


def test_evolve_ode_linear_decay():
    w0 = np.random.default_rng(2).normal(size=(4, 2))
    out = evolve_weights(constant(w0), 1.0, lambda z, t: -z, None, "ode", 1000)
    assert np.max(np.abs(out.data - np.exp(-1.0) * w0)) < 1e-3


def test_evolve_negative_interval_rejected():
    with pytest.raises(ValueError, match="nonnegative"):
        evolve_weights(constant(np.ones((2, 2))), -1.0, None, None, "ode", 4)


def test_refine_output_shape_and_forced_gate_identity():
    cfg = toy_config()
    model = Model(cfg)
    # force both update gates to 1: output must be exactly W' + W0
    model.store.arrays["gru_a.bz"][:] = 50.0
    model.store.arrays["gru_b.bz"][:] = 50.0
    tape = Tape()
    p = model.store.bind(tape)
    rng = np.random.default_rng(3)
    w_prime = constant(rng.normal(size=(cfg.feat_dim, cfg.embed_dim)))
    context = constant(rng.normal(size=cfg.feat_dim))
    out = refine_weights(p, context, w_prime, p["w0"], (cfg.feat_dim, cfg.embed_dim))
    assert out.shape == (cfg.feat_dim, cfg.embed_dim)
    np.testing.assert_array_equal(out.data, w_prime.data + model.store.arrays["w0"])


def test_hconv_identity_propagation_and_zero_input():
    x = np.abs(np.random.default_rng(4).normal(size=(4, 4)))
    out = hconv(constant(np.eye(4)), constant(x), constant(np.eye(4)))
    np.testing.assert_allclose(out.data, x, atol=1e-15)
    out = hconv(constant(np.eye(4)), constant(np.zeros((4, 4))), constant(np.eye(4)))
    np.testing.assert_array_equal(out.data, np.zeros((4, 4)))


def test_hconv_matches_hand_loops():
    rng = np.random.default_rng(5)
    S, X, W = rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    expect = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = 0.0
            for a in range(3):
                for b in range(3):
                    acc += S[i, a] * X[a, b] * W[b, j]
            expect[i, j] = max(acc, 0.0)
    out = hconv(constant(S), constant(X), constant(W))
    assert np.max(np.abs(out.data - expect)) < 1e-12


def test_sparse_forward_limits():
    cfg = toy_config()
    model = Model(cfg)
    rng = np.random.default_rng(6)
    visits = random_visits(rng, 1)
    prepared = prepare_subject("s0", visits, cfg).visits[0]

    # P_X -> 1 and v = 0: masked path equals dense conv (edge weights cancel)
    model.store.arrays["mask.logits_x"][:] = 50.0
    model.store.arrays["mask.v"][:] = 0.0
    tape = Tape()
    p = model.store.bind(tape)
    w = constant(rng.normal(size=(cfg.feat_dim, cfg.embed_dim)))
    z_hat, p_edge, _ = sparse_forward(prepared, p, w)
    np.testing.assert_array_equal(p_edge.data, np.full(cfg.n_rois, 0.5))
    dense = hconv(constant(prepared.dense_sx), constant(np.eye(cfg.feat_dim)), w)
    assert np.max(np.abs(z_hat.data - dense.data)) < 1e-8

    # P_X -> 0: masked output collapses to zero
    model.store.arrays["mask.logits_x"][:] = -50.0
    tape = Tape()
    p = model.store.bind(tape)
    z_hat, _, _ = sparse_forward(prepared, p, w)
    assert np.max(np.abs(z_hat.data)) < 1e-12


def test_mask_logits_receive_gradient_from_classification_loss():
    cfg = toy_config()
    model = Model(cfg)
    rng = np.random.default_rng(7)
    prepared = prepare_subject("s0", random_visits(rng, 2), cfg)
    tape = Tape()
    p = model.store.bind(tape)
    result = forward_subject(p, model, prepared)
    loss = losses.bce_with_logit(result.masked_logit, 1)
    tape.backward(loss)
    assert p["mask.logits_x"].grad is not None
    assert np.linalg.norm(p["mask.logits_x"].grad) > 0
    assert p["mask.v"].grad is not None


def test_forward_single_visit_and_sensitivity():
    cfg = toy_config()
    model = Model(cfg)
    rng = np.random.default_rng(8)
    visits = random_visits(rng, 1)
    base = forward_subject(model.store.bind(Tape()), model,
                           prepare_subject("s0", visits, cfg))
    doubled = [VisitFeatures(X=2.0 * visits[0].X, visit_time_months=0.0)]
    out2 = forward_subject(model.store.bind(Tape()), model,
                           prepare_subject("s0", doubled, cfg))
    assert abs(base.logit.item() - out2.logit.item()) > 0


def test_forward_empty_or_unordered_visits_rejected():
    cfg = toy_config()
    with pytest.raises(ValueError, match="empty"):
        prepare_subject("s0", [], cfg)
    rng = np.random.default_rng(9)
    visits = random_visits(rng, 2, times=[10.0, 5.0])
    with pytest.raises(ValueError, match="nondecreasing"):
        prepare_subject("s0", visits, cfg)


def test_forward_permutation_invariance():
    cfg = toy_config(n_rois=8, n_neighbors=3)
    rng = np.random.default_rng(10)
    for trial in range(5):
        model = Model(toy_config(n_rois=8, n_neighbors=3, seed=trial))
        model.store.arrays["mask.logits_x"][:] = rng.normal(size=(8, 8)) * 0.3
        visits = random_visits(rng, 2, n=8)
        perm = rng.permutation(8)

        out = forward_subject(model.store.bind(Tape()), model,
                              prepare_subject("s0", visits, model.config))
        # relabel nodes: permute feature rows and the node-indexed mask rows
        model.store.arrays["mask.logits_x"][:] = model.store.arrays["mask.logits_x"][perm]
        permuted = [VisitFeatures(X=v.X[perm], visit_time_months=v.visit_time_months)
                    for v in visits]
        out_p = forward_subject(model.store.bind(Tape()), model,
                                prepare_subject("s0", permuted, model.config))
        assert abs(out.logit.item() - out_p.logit.item()) < 1e-8


def test_rnn_mode_without_sparsity_never_calls_solver(monkeypatch):
    calls = {"n": 0}
    real = sde_mod.sde_solve

    def counting(*args, **kwargs):
        calls["n"] += 1
        return real(*args, **kwargs)

    monkeypatch.setattr(sde_mod, "sde_solve", counting)
    cfg = toy_config(temporal_mode="rnn", sparsity=False)
    model = Model(cfg)
    rng = np.random.default_rng(11)
    prepared = prepare_subject("s0", random_visits(rng, 3), cfg)
    result = forward_subject(model.store.bind(Tape()), model, prepared)
    assert calls["n"] == 0
    assert result.masked_logit is None and result.edge_probs == []

    cfg_sde = toy_config(temporal_mode="sde")
    model2 = Model(cfg_sde)
    forward_subject(model2.store.bind(Tape()), model2,
                    prepare_subject("s0", random_visits(rng, 3), cfg_sde))
    assert calls["n"] == 2  # visits after the first trigger one solve each


def test_sparsity_disabled_masks_get_no_gradient_and_no_influence():
    cfg = toy_config(sparsity=False)
    model = Model(cfg)
    rng = np.random.default_rng(12)
    prepared = prepare_subject("s0", random_visits(rng, 2), cfg)
    tape = Tape()
    p = model.store.bind(tape)
    result = forward_subject(p, model, prepared)
    tape.backward(losses.bce_with_logit(result.logit, 0))
    assert p["mask.logits_x"].grad is None
    assert p["mask.v"].grad is None
    before = result.logit.item()
    model.store.arrays["mask.logits_x"][:] = 3.3
    after = forward_subject(model.store.bind(Tape()), model, prepared).logit.item()
    assert before == after


def test_edge_probabilities_strictly_inside_unit_interval():
    cfg = toy_config()
    model = Model(cfg)
    rng = np.random.default_rng(13)
    prepared = prepare_subject("s0", random_visits(rng, 3), cfg)
    result = forward_subject(model.store.bind(Tape()), model, prepared)
    for p_e in result.edge_probs:
        assert np.all(p_e.data > 0.0) and np.all(p_e.data < 1.0)


def subject_loss_value(model, prepared, y, weights):
    tape = Tape()
    p = model.store.bind(tape)
    result = forward_subject(p, model, prepared)
    ce = losses.bce_with_logit(result.dense_logit, y)
    mi = losses.bce_with_logit(result.masked_logit, y)
    sp = losses.loss_sparsity(p["mask.logits_x"].sigmoid(), result.edge_probs)
    en = losses.loss_entropy_from_logits(p["mask.logits_x"], result.edge_logits)
    loss = losses.total_loss(ce, mi, sp, en, weights)
    return tape, p, loss


def test_end_to_end_gradients_match_finite_differences():
    cfg = toy_config(temporal_mode="ode")
    weights = losses.LossWeights()
    model = Model(cfg)
    rng = np.random.default_rng(14)
    prepared = prepare_subject("s0", random_visits(rng, 2, times=[0.0, 12.0]), cfg)

    tape, p, loss = subject_loss_value(model, prepared, 1, weights)
    tape.backward(loss)
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in p.items()}

    h = 1e-5
    check_rng = np.random.default_rng(15)
    worst = 0.0
    for name, arr in model.store.arrays.items():
        flat = arr.reshape(-1)
        n_checks = min(6, flat.size)
        for idx in check_rng.choice(flat.size, size=n_checks, replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            _, _, up = subject_loss_value(model, prepared, 1, weights)
            flat[idx] = orig - h
            _, _, down = subject_loss_value(model, prepared, 1, weights)
            flat[idx] = orig
            numeric = (up.item() - down.item()) / (2 * h)
            worst = max(worst, rel_err(analytic[name].reshape(-1)[idx], numeric))
    assert worst < 1e-3, f"worst relative gradient error {worst:.2e}"


def test_checkpoint_roundtrip(tmp_path):
    cfg = toy_config(temporal_mode="sde", seed=21)
    model = Model(cfg)
    path = tmp_path / "model.bin"
    save_checkpoint(path, cfg, model.store.state())
    loaded_cfg, state = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert set(state) == set(model.store.arrays)
    for name, arr in model.store.arrays.items():
        np.testing.assert_array_equal(state[name], arr)
    # header check
    assert path.read_bytes()[:8] == b"SDEHGNN1"


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)
