import math

import numpy as np
import pytest

from stackalign.alignment import YMS_ACTIONS, AlignmentState, GoldAlignment, derive_oracle_actions, execute
from stackalign.gradcheck import _micro_model, check_model
from stackalign.layers import LstmParams, lstm_forward
from stackalign.model import (AlignmentModel, ModelConfig, load_checkpoint, make_batch, masked_softmax,
                              positional_features, save_checkpoint, smoothed_cross_entropy, smoothing_target)
from stackalign.optim import LarsConfig, Optimizer
from stackalign.tensorcore import ContractError, ParameterError, Rng, ShapeError


def tiny_config(**kw):
    base = dict(video_in_dim=5, text_in_dim=6, projected_dim=4, stack_hidden=6, matched_hidden=3,
                action_hidden=3, fc_hidden=8)
    base.update(kw)
    return ModelConfig(**base)


def test_default_state_dim():
    assert ModelConfig().state_dim == 638


def test_config_validation():
    with pytest.raises(ParameterError):
        ModelConfig(normalization="batch")
    with pytest.raises(ParameterError):
        ModelConfig(label_smoothing=1.0)
    with pytest.raises(ParameterError):
        ModelConfig.from_dict({"hidden": 3})


def test_positional_features_values():
    np.testing.assert_allclose(positional_features(3, 1, 2),
                               [0.03, 0.01, 0.02, 1.5, 0.25, 0.5, 1.0, 0.25, 0.5, 1 / 3], rtol=1e-15)
    assert np.all(np.isfinite(positional_features(0, 0, 0)))


def test_smoothing_target_and_loss():
    np.testing.assert_allclose(smoothing_target(0, 0.03, 3), [0.98, 0.01, 0.01], rtol=1e-15)
    p = np.array([0.7, 0.2, 0.1])
    assert smoothed_cross_entropy(p, 1, 0.0) == pytest.approx(-math.log(0.2), rel=1e-15)
    for k in (2, 3, 5):
        assert smoothed_cross_entropy(np.full(k, 1 / k), 0, 0.03) == pytest.approx(math.log(k), rel=1e-12)
    with pytest.raises(ParameterError):
        smoothing_target(0, -0.1, 3)


def test_masked_softmax():
    p = masked_softmax(np.array([5.0, -3.0, 100.0]), np.array([False, True, False]))
    np.testing.assert_array_equal(p, [0.0, 1.0, 0.0])
    np.testing.assert_allclose(masked_softmax(np.zeros(3), np.ones(3, bool)), np.full(3, 1 / 3), rtol=1e-15)
    z = np.random.default_rng(0).standard_normal((4, 5))
    valid = np.array([[1, 1, 0, 1, 1]] * 4, bool)
    p = masked_softmax(z, valid)
    assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)
    np.testing.assert_array_equal(p.argmax(-1), masked_softmax(z + 7.5, valid).argmax(-1))
    with pytest.raises(ContractError):
        masked_softmax(z, np.zeros_like(valid))


def test_length_one_backward_equals_forward():
    p = LstmParams.create("l", 3, 4, Rng(0), num_layers=2, direction="backward")
    q = LstmParams(p.layers, 4, "forward")
    x = np.random.default_rng(0).standard_normal((2, 1, 3))
    np.testing.assert_array_equal(lstm_forward(p, x)[0], lstm_forward(q, x)[0])


def test_encode_shapes_and_sbn_moments():
    model = AlignmentModel(tiny_config())
    rng = np.random.default_rng(1)
    v = rng.standard_normal((3, 7, 5))
    s = rng.standard_normal((3, 4, 6))
    vm = np.ones((3, 7), bool)
    vm[2, 5:] = False
    sm = np.ones((3, 4), bool)
    pv, ps = model.prepare_inputs(v, s)
    ev, es = model.encode_sequences(pv, vm, ps, sm)
    assert ev.shape == (3, 7, 6) and es.shape == (3, 4, 6)
    sel = ev[vm]
    assert np.all(np.abs(sel.mean(0)) < 1e-10)
    sbn = model.sbn["video"]
    batch_var = (sbn.running_var - (1 - sbn.momentum)) / sbn.momentum
    np.testing.assert_allclose(sel.var(0), batch_var / (batch_var + sbn.eps), rtol=1e-9)
    with pytest.raises(ShapeError):
        model.prepare_inputs(np.zeros((1, 4)), np.zeros((1, 6)))


def test_build_state_empty_history_and_slot_average():
    model = AlignmentModel(tiny_config(normalization="none"))
    rng = np.random.default_rng(2)
    enc_v, enc_s = rng.standard_normal((5, 6)), rng.standard_normal((3, 6))
    sv = model.build_state(AlignmentState.initial(5, 3), enc_v, enc_s)
    assert sv.shape == (model.config.state_dim,)
    np.testing.assert_array_equal(sv[12:18], 0.0)
    slot = (frozenset([2, 3]), frozenset([1]))
    np.testing.assert_array_equal(model._slot_input(enc_v, enc_s, slot),
                                  np.concatenate([(enc_v[2] + enc_v[3]) / 2, enc_s[1]]))
    with pytest.raises(ContractError):
        model.build_state(execute(["pop_video"] * 5, 5, 3), enc_v, enc_s)


def test_classify():
    model = AlignmentModel(tiny_config())
    sv = np.random.default_rng(3).standard_normal(model.config.state_dim)
    acts = model.config.actions
    np.testing.assert_array_equal(model.classify(sv, {acts[1]}), [0.0, 1.0, 0.0])
    model.head2[0].value[...] = 0.0
    model.head2[1].value[...] = 0.0
    np.testing.assert_allclose(model.classify(sv, set(acts)), np.full(3, 1 / 3), rtol=1e-15)
    with pytest.raises(ContractError):
        model.classify(sv, set())


@pytest.mark.parametrize("kind", ["sbn", "ln2", "ln4", "none"])
def test_forced_decode_matches_batched_forward(kind):
    model, inputs, plans = _micro_model(kind)
    model.eval()
    batch = make_batch(inputs, plans, 3)
    loss, probs, _ = model.forward(batch)
    assert np.isfinite(loss) and loss > 0
    golds = [GoldAlignment.from_lists([[0, 1], [2]], 3), GoldAlignment.from_lists([[1], [2, 3]], 4)]
    for b, ((v, s), g) in enumerate(zip(inputs, golds)):
        oracle = derive_oracle_actions(g, YMS_ACTIONS)
        pred, taken, step_probs = model.decode(v, s, forced=oracle)
        assert pred == g and taken == oracle
        np.testing.assert_allclose(step_probs, probs[b, :len(oracle)], rtol=1e-12, atol=1e-14)


def test_single_step_episode_loss():
    model = AlignmentModel(tiny_config())
    rng = np.random.default_rng(4)
    v, s = model.prepare_inputs(rng.standard_normal((1, 5)), rng.standard_normal((1, 6)))
    oracle = derive_oracle_actions(GoldAlignment.from_lists([[0]], 1), YMS_ACTIONS)
    assert len(oracle) == 1
    batch = make_batch([(v, s)], [model.plan(1, 1, oracle)], 3)
    model.eval()
    loss, probs, _ = model.forward(batch)
    k = model.config.actions.index(oracle[0])
    assert loss == pytest.approx(smoothed_cross_entropy(probs[0, 0], k, 0.03), rel=1e-12)


def test_decode_requires_eval_with_sbn():
    model, inputs, _ = _micro_model("sbn")
    with pytest.raises(ContractError):
        model.decode(*inputs[0])


def test_end_to_end_gradcheck_all_normalizations():
    assert check_model(seed=0) < 1e-3


def test_overfit_one_episode():
    cfg = tiny_config(normalization="ln4", use_rp=False, label_smoothing=0.03)
    model = AlignmentModel(cfg)
    rng = np.random.default_rng(5)
    gold = GoldAlignment.from_lists([[0, 2], [3], [5]], 6)
    v, s = model.prepare_inputs(rng.standard_normal((6, 5)), rng.standard_normal((3, 6)))
    oracle = derive_oracle_actions(gold, YMS_ACTIONS)
    batch = make_batch([(v, s)], [model.plan(6, 3, oracle)], 3)
    opt = Optimizer(model.params(), 0.01, LarsConfig(enabled=False))
    for _ in range(300):
        opt.zero_grad()
        loss, _, c = model.forward(batch)
        model.backward(c)
        opt.clip_grads()
        opt.step()
    floor = -np.sum(smoothing_target(0, 0.03, 3) * np.log(smoothing_target(0, 0.03, 3)))
    assert floor <= loss < floor + 0.05
    model.eval()
    pred, taken, _ = model.decode(v, s)
    assert taken == oracle and pred == gold
    again = model.decode(v, s)
    assert again[1] == taken
    pred.validate()


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model, inputs, plans = _micro_model("sbn")
    batch = make_batch(inputs, plans, 3)
    model.forward(batch)  # moves running statistics
    model.eval()
    save_checkpoint(tmp_path / "m.npz", model, {"epoch": 3})
    loaded, extra = load_checkpoint(tmp_path / "m.npz", expect=model.config)
    loaded.eval()
    assert extra == {"epoch": 3}
    a = model.forward(batch)[1]
    b = loaded.forward(batch)[1]
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(model.decode(*inputs[1])[2], loaded.decode(*inputs[1])[2])
    with pytest.raises(ShapeError):
        load_checkpoint(tmp_path / "m.npz", expect=tiny_config())
