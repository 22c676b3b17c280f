import json

import numpy as np
import pytest

from sidemoe import side_network as sn
from sidemoe.errors import ConfigError, DimensionError, NumericError
from sidemoe.numerics import GradTape

TINY = dict(dim=8, seq_len=4, layers=2, r=2, n_classes=3, source_classes=3)


def _setup(seed=0, batch=6, **kw):
    arch = sn.Architecture(**{**TINY, **kw})
    bb = sn.BackboneStub.init(arch, seed)
    bb.quantize(8)
    side = sn.SideNetwork.init(arch, seed)
    rng = np.random.default_rng(seed + 100)
    x = rng.normal(size=(batch, arch.seq_len, arch.dim))
    y = rng.integers(0, arch.n_classes, batch)
    return arch, bb, side, x, y


def test_full_gradients_match_finite_differences_k1():
    _, bb, side, x, y = _setup(n_experts=3, top_k=1)
    errs = sn.gradient_check(x, y, bb, side)
    assert {"B0.gate.w", "B1.reps", "backbone.L0.ln.gamma"} <= errs.keys()
    assert max(errs.values()) < 1e-4


def test_full_gradients_match_finite_differences_k2_softmax_post_mask():
    # with k=2 the task loss also reaches the gate through the mixing weights
    _, bb, side, x, y = _setup(seed=3, n_experts=3, top_k=2, post_mask="softmax")
    assert max(sn.gradient_check(x, y, bb, side, beta=0.1).values()) < 1e-4


def test_gate_receives_task_gradient_only_when_k_exceeds_one():
    _, bb, side, x, y = _setup(n_experts=3, top_k=1)
    _, g, _ = sn.loss_and_grads(x, y, bb, side, beta=0.0)
    assert not np.any(g["B0.gate.w"])
    _, bb, side, x, y = _setup(n_experts=3, top_k=2)
    _, g, _ = sn.loss_and_grads(x, y, bb, side, beta=0.0)
    assert np.any(g["B0.gate.w"])


def test_single_expert_moe_matches_dense_forward_and_backward():
    _, bb, moe, x, y = _setup(n_experts=1, top_k=1, use_correlation=False)
    dense_arch = sn.Architecture(**TINY, use_moe=False)
    dense = sn.SideNetwork(dense_arch, {k: v for k, v in moe.params.items() if ".gate." not in k})
    lm, gm, rm = sn.loss_and_grads(x, y, bb, moe, beta=0.0)
    ld, gd, rd = sn.loss_and_grads(x, y, bb, dense, beta=0.0)
    np.testing.assert_allclose(rm.logits.value, rd.logits.value, rtol=0, atol=1e-12)
    assert abs(lm.task - ld.task) <= 1e-12
    for k, v in gd.items():
        np.testing.assert_allclose(gm[k], v, rtol=0, atol=1e-12)


def test_dense_build_matches_single_expert_init():
    moe = sn.SideNetwork.init(sn.Architecture(**TINY, n_experts=1, top_k=1), 5)
    dense = sn.SideNetwork.init(sn.Architecture(**TINY, use_moe=False), 5)
    for k, v in dense.params.items():
        np.testing.assert_array_equal(moe.params[k], v)


def test_zero_ladder_makes_logits_ignore_backbone_content():
    # without the correlation prior the ladder is the only path from the backbone
    arch = sn.Architecture(**TINY, use_correlation=False)
    bb = sn.BackboneStub.init(arch, 0)
    other = sn.BackboneStub.init(arch, 99)
    side = sn.SideNetwork.init(arch, 0)
    for k in side.params:
        if ".ladder." in k:
            side.params[k][...] = 0
    x = np.random.default_rng(0).normal(size=(3, arch.seq_len, arch.dim))
    np.testing.assert_array_equal(sn.predict(x, bb, side), sn.predict(x, other, side))


def test_default_network_is_deterministic():
    arch = sn.Architecture(dim=32, seq_len=8, layers=4, r=2, n_experts=6, top_k=1)
    x = np.random.default_rng(0).normal(size=(3, 8, 32))
    outs = []
    for _ in range(2):
        bb = sn.BackboneStub.init(arch, 0)
        bb.quantize(8)
        outs.append(sn.predict(x, bb, sn.SideNetwork.init(arch, 0)).tobytes())
    assert outs[0] == outs[1]


def test_side_width_and_block_count():
    arch, bb, side, x, _ = _setup(dim=9, r=2, layers=3, layer_drop=(1,))
    res = side.forward(GradTape(enabled=False), np.zeros((2, 4, 9)), sn.BackboneStub.init(arch, 0))
    assert len(res.side_states) == 2
    assert all(s.shape[1] == 4 for s in res.side_states)
    assert res.logits.shape == (2, arch.n_classes)


def test_width_mismatch_is_dimension_error():
    _, bb, side, _, _ = _setup()
    with pytest.raises(DimensionError):
        sn.predict(np.zeros((2, 4, 7)), bb, side)


def test_parameter_count_matches_closed_form():
    for kw in ({}, dict(n_experts=6), dict(use_correlation=False), dict(use_moe=False), dict(layer_drop=(0,))):
        arch = sn.Architecture(**{**TINY, **kw})
        side = sn.SideNetwork.init(arch, 0)
        assert sum(v.size for v in side.params.values()) == sn.side_param_count(arch)
        bb = sn.BackboneStub.init(arch, 0)
        view = sn.trainable_parameters(side, bb)
        assert sn.flatten(view).size == sn.side_param_count(arch) + 2 * arch.dim * arch.layers
    assert sn.trainable_parameters(None, None) == {}


def test_expert_count_difference():
    a6 = sn.Architecture(**TINY, n_experts=6)
    a3 = sn.Architecture(**TINY, n_experts=3)
    blocks = len(a6.retained)
    d, D = a6.side_dim, a6.dim
    routing = blocks * 3 * (d + 1 + D)  # gate columns, gate bias, representative rows
    assert sn.side_param_count(a6) - sn.side_param_count(a3) == blocks * 3 * sn.expert_param_count(a6) + routing


def test_beta_zero_total_is_task_and_single_expert_balance_is_one():
    _, bb, side, x, y = _setup()
    losses, _, _ = sn.loss_and_grads(x, y, bb, side, beta=0.0)
    assert losses.total == losses.task
    _, bb, side, x, y = _setup(n_experts=1)
    losses, _, _ = sn.loss_and_grads(x, y, bb, side, alpha=1.0, beta=1e-3)
    assert losses.balance == 1.0
    assert losses.total == pytest.approx(losses.task + 1e-3, abs=1e-15)


def test_training_leaves_frozen_weights_bit_identical():
    _, bb, side, x, y = _setup()
    before = {k: g.q for k, g in bb.groups.items()}
    ln_before = {k: v.copy() for k, v in bb.ln.items()}
    opt = sn.AdamW(lr=1e-2)
    for _ in range(5):
        sn.train_step(x, y, bb, side, opt)
    assert all(bb.groups[k].q is q for k, q in before.items())
    assert any(not np.array_equal(bb.ln[k], v) for k, v in ln_before.items())


def test_loss_decreases_over_every_ten_step_window():
    arch = sn.Architecture(**TINY)
    bb = sn.BackboneStub.init(arch, 1)
    bb.quantize(8)
    side = sn.SideNetwork.init(arch, 1)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(32, arch.seq_len, arch.dim))
    w = rng.normal(size=(arch.dim, arch.n_classes))
    y = (x.mean(axis=1) @ w).argmax(axis=1)  # linearly separable in the sequence mean
    opt = sn.AdamW(lr=3e-3)
    losses = [sn.train_step(x, y, bb, side, opt).total for _ in range(50)]
    assert all(losses[i + 10] < losses[i] for i in range(40))


def test_numeric_error_names_component():
    _, bb, side, x, y = _setup()
    side.params["head.w"][...] = np.nan
    with pytest.raises(NumericError, match="task"):
        sn.loss_and_grads(x, y, bb, side)
    with pytest.raises(ConfigError):
        sn.train_step(x[:0], y[:0], bb, side, sn.AdamW())


def test_architecture_validation():
    with pytest.raises(ConfigError):
        sn.Architecture(**{**TINY, "r": 9})
    with pytest.raises(ConfigError):
        sn.Architecture(**TINY, top_k=7)
    with pytest.raises(ConfigError):
        sn.Architecture(**TINY, layer_drop=(0, 1))


def test_adamw_decays_matrices_only():
    opt = sn.AdamW(lr=0.1, weight_decay=0.5)
    params = {"w": np.ones((2, 2)), "b": np.ones(2)}
    opt.step(params, {"w": np.zeros((2, 2)), "b": np.zeros(2)})
    np.testing.assert_allclose(params["w"], 0.95)
    np.testing.assert_array_equal(params["b"], 1.0)


def test_checkpoint_roundtrip(tmp_path):
    arch, bb, side, x, _ = _setup()
    manifest = sn.save_checkpoint(tmp_path / "c.npz", bb, side, {"seed": 0})
    bb2, side2, cfg = sn.load_checkpoint(tmp_path / "c.npz", arch)
    assert cfg == {"seed": 0}
    np.testing.assert_array_equal(sn.predict(x, bb, side), sn.predict(x, bb2, side2))
    assert {g["name"] for g in manifest["quantized"]} == set(bb.groups)
    on_disk = json.loads((tmp_path / "c.npz.manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))


def test_expert_call_counts_are_sparse():
    _, bb, side, x, _ = _setup(n_experts=3, top_k=1)
    res = side.forward(GradTape(enabled=False), x, bb)
    for j, d in enumerate(res.decisions):
        used = set(d.indices[:, 0].tolist())
        called = {e for (b, e), n in side.expert_calls.items() if b == j and n}
        assert called == used
