"""Loss values, Adam arithmetic, and the training loop contract."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from seunet_trans.arch import SeUNetTrans, build_variant
from seunet_trans.tensor import AutodiffError, Parameter, ShapeError, Tape, Tensor, backward_accumulate
from seunet_trans.train import Adam, bce_loss, evaluate_model, train_loop

THIN = dict(
    encoder_widths=(4, 8, 16, 32),
    bottleneck_width=64,
    embed_dim=8,
    bridge_channels=8,
    num_heads=2,
    depth=1,
    cbr_widths=(8, 4),
)


def _synthetic_pairs(n, size, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        image = rng.random((3, size, size)).astype(np.float32)
        mask = (rng.random((1, size, size)) > 0.5).astype(np.float32)
        samples.append((image, mask))
    return samples


# ---------------------------------------------------------------------------
# binary cross-entropy
# ---------------------------------------------------------------------------


def test_bce_saturated_correct_logits_vanish():
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = Tensor(np.where(y == 1, 30.0, -30.0))
    assert bce_loss(logits, y).item() < 1e-8


def test_bce_uncertain_prediction_is_log_two():
    assert_allclose(bce_loss(Tensor(np.zeros((2, 2))), np.ones((2, 2))).item(), np.log(2.0), rtol=1e-12)
    assert_allclose(bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 2))).item(), np.log(2.0), rtol=1e-12)


def test_bce_matches_naive_probability_form_in_interior():
    rng = np.random.default_rng(0)
    z = rng.uniform(-12.0, 12.0, size=(4, 1, 8, 8))
    y = (rng.random((4, 1, 8, 8)) > 0.5).astype(np.float64)
    p = 1.0 / (1.0 + np.exp(-z))
    naive = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    assert_allclose(bce_loss(Tensor(z), y).item(), naive, atol=1e-6)


def test_bce_rejects_bad_targets_and_shapes():
    with pytest.raises(ShapeError, match="shape mismatch"):
        bce_loss(Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
    with pytest.raises(ValueError, match="only 0 and 1"):
        bce_loss(Tensor(np.zeros((2, 2))), np.full((2, 2), 0.5))


def test_bce_gradient_is_sigmoid_minus_target_over_n():
    y = np.array([[1.0, 0.0]])
    logits = Tensor(np.zeros((1, 2)))
    with Tape() as tape:
        loss = bce_loss(logits, y)
        backward_accumulate(tape, loss)
    assert_allclose(logits.grad, np.array([[-0.25, 0.25]]), atol=1e-12)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_zero_decay_is_fixed_point():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    p.grad = np.zeros(2)
    Adam([p], weight_decay=0.0).step()
    assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_hand_value():
    p = Parameter(np.array([0.0]), name="p")
    p.grad = np.array([1.0])
    opt = Adam([p], lr=1e-4, weight_decay=0.0)
    opt.step()
    # bias-corrected first step: -lr * 1 / (1 + eps)
    assert_allclose(p.data, [-1e-4 / (1.0 + 1e-8)], rtol=1e-9)
    assert p.grad is None  # cleared after the step


def test_adam_weight_decay_pulls_toward_zero():
    p = Parameter(np.array([1.0]), name="p")
    p.grad = np.array([0.0])
    Adam([p], lr=1e-4, weight_decay=1e-4).step()
    assert p.data[0] < 1.0


def test_adam_step_without_gradients_errors():
    p = Parameter(np.array([1.0]), name="p")
    with pytest.raises(AutodiffError, match="no populated gradients"):
        Adam([p]).step()


def test_adam_is_invariant_to_enumeration_order():
    rng = np.random.default_rng(0)
    values = [rng.normal(size=3), rng.normal(size=2)]
    grads = [rng.normal(size=3), rng.normal(size=2)]

    def run(order):
        params = [Parameter(v.copy(), name=f"p{i}") for i, v in enumerate(values)]
        for p, g in zip(params, grads):
            p.grad = g.copy()
        opt = Adam([params[i] for i in order], lr=1e-3)
        opt.step()
        return [p.data for p in params]

    forward_order = run([0, 1])
    reverse_order = run([1, 0])
    for a, b in zip(forward_order, reverse_order):
        assert_array_equal(a, b)


def test_adam_state_roundtrip():
    p = Parameter(np.array([1.0, 2.0], dtype=np.float32), name="w")
    p.grad = np.array([0.5, -0.5], dtype=np.float32)
    opt = Adam([p], lr=3e-4, weight_decay=0.0)
    opt.step()
    state = opt.state_dict()
    fresh = Adam([p], lr=1e-4)
    fresh.load_state_dict(state)
    assert fresh.step_count == 1 and fresh.lr == 3e-4
    assert_array_equal(fresh.m[0], opt.m[0])
    assert_array_equal(fresh.v[0], opt.v[0])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def test_train_loop_step_count_16_samples_batch_8():
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    opt = Adam(model.parameters())
    train_loop(model, _synthetic_pairs(16, 32), epochs=1, batch_size=8, seed=0,
               optimizer=opt, metrics_every=0)
    assert opt.step_count == 2


def test_train_loop_keeps_last_partial_batch():
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    opt = Adam(model.parameters())
    train_loop(model, _synthetic_pairs(10, 32), epochs=1, batch_size=8, seed=0,
               optimizer=opt, metrics_every=0)
    assert opt.step_count == 2  # 8 + 2


def test_train_loop_checkpoint_cadence(tmp_path):
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    logs = train_loop(
        model,
        _synthetic_pairs(4, 32),
        epochs=25,
        batch_size=4,
        seed=1,
        checkpoint_dir=tmp_path,
        metrics_every=0,
    )
    names = sorted(p.name for p in tmp_path.glob("*.seut"))
    assert names == ["epoch_0010.seut", "epoch_0020.seut", "epoch_0025.seut"]
    assert [log.epoch for log in logs] == list(range(1, 26))


def test_train_loop_rejects_empty_dataset():
    model = SeUNetTrans(build_variant("M", **THIN), seed=0)
    with pytest.raises(ValueError, match="non-empty"):
        train_loop(model, [], epochs=1)


def test_train_loop_logs_metrics_and_loss():
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    lines = []
    logs = train_loop(model, _synthetic_pairs(4, 32), epochs=2, batch_size=4, seed=0,
                      metrics_every=1, log_fn=lines.append)
    assert len(logs) == 2
    assert all(log.mdc is not None for log in logs)
    assert all(0.0 <= log.mdc <= 1.0 for log in logs)
    assert lines and lines[0].startswith("epoch 1/2 loss")


def test_evaluate_model_scores_in_order():
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    samples = _synthetic_pairs(5, 32)
    report = evaluate_model(model, samples, batch_size=2)
    assert report.image_count == 5


def test_all_gradients_finite_after_full_backward():
    spec = build_variant("M", **THIN)
    model = SeUNetTrans(spec, seed=0)
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((2, 3, 32, 32)).astype(np.float32))
    y = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float32)
    model.train()
    with Tape() as tape:
        loss = bce_loss(model.forward_logits(x), y)
        backward_accumulate(tape, loss)
    assert np.isfinite(loss.data).all()
    for name, p in model.named_parameters():
        assert p.grad is not None and np.isfinite(p.grad).all(), name
        assert p.grad.shape == p.data.shape, name
