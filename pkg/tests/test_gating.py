import math

import numpy as np
import pytest
import torch

from general.encoders import ChorusEncoders
from general.errors import ConfigurationError, ContractViolation
from general.gating import (METHODS, ChorusHead, GateStats, balance_loss, customize_loss, feature_mask,
                            fuse_and_classify, gate_features, gate_weights, head_inputs, predict,
                            run_customize, stratified_split)
from general.models import CustomizeConfig, GateDecision, ModelDims, OptimizerConfig
from general.numerics import RngState, grad_check, module_graph, tensor_digest
from general.shiftlab import generate_dataset


def _unit_dims() -> ModelDims:
    return ModelDims(channels=1, length=4, latent=2, text_dim=4, hidden=2, num_classes=2,
                     conv_channels=(2, 2), kernel=3, stride=2, decoder_hidden=3,
                     context_hidden=3, controller_hidden=2)


def _fixed_gate(head: ChorusHead, logits) -> ChorusHead:
    with torch.no_grad():
        head.controller[2].weight.zero_()
        head.controller[2].bias.copy_(torch.as_tensor(logits, dtype=torch.float32))
    return head


def test_cosine_feature_for_equal_and_orthogonal_embeddings():
    segment = np.ones((2, 8))
    z = np.array([0.6, 0.8, 0.0])
    assert gate_features(z, z, segment)[0].item() == pytest.approx(1.0)
    assert gate_features(z, np.array([0.8, -0.6, 0.0]), segment)[0].item() == pytest.approx(0.0, abs=1e-7)
    assert gate_features(np.zeros(3), z, segment)[0].item() == 0.0


def test_constant_segment_has_zero_stds():
    segment = np.full((3, 10), 2.5)
    r = gate_features(np.ones(4), np.ones(4), segment)
    assert r.shape == (2 + 2 * 3 + 1,)
    assert torch.count_nonzero(r[5:8]).item() == 0
    assert torch.allclose(r[2:5], torch.full((3,), 2.5))
    assert r[1].item() == pytest.approx(2.0)


def test_feature_masks():
    assert feature_mask("align", 2).tolist() == [1, 1, 0, 0, 0, 0, 0]
    assert feature_mask("dyn", 2).tolist() == [0, 0, 1, 1, 1, 1, 1]
    assert feature_mask("full", 2).tolist() == [1] * 7
    with pytest.raises(ConfigurationError):
        feature_mask("half", 2)


def test_gate_stats_standardize_and_round_trip():
    raw = torch.tensor([[1.0, 5.0], [3.0, 5.0]])
    stats = GateStats.fit(raw)
    out = stats.apply(raw)
    assert out[:, 0].tolist() == pytest.approx([-1.0, 1.0])
    assert out[:, 1].tolist() == [0.0, 0.0]
    again = GateStats.from_dict(stats.to_dict())
    assert torch.equal(again.apply(raw), out)


@pytest.mark.parametrize("logits,expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(3.0), 0.0], [0.75, 0.25]),
])
def test_gate_weights_closed_forms(logits, expected):
    head = _fixed_gate(ChorusHead(_unit_dims()), logits)
    alpha = gate_weights(torch.zeros(1, _unit_dims().gate_features), head.controller)
    assert alpha[0].tolist() == pytest.approx(expected, abs=1e-6)


def test_gate_weights_saturate():
    head = _fixed_gate(ChorusHead(_unit_dims()), [20.0, 0.0])
    alpha = gate_weights(torch.zeros(1, _unit_dims().gate_features), head.controller)
    assert alpha[0, 0].item() > 0.999999


def test_gate_weights_reject_wrong_feature_length():
    head = ChorusHead(_unit_dims())
    with pytest.raises(ContractViolation):
        gate_weights(torch.zeros(1, 3), head.controller)


def _identity_head(method: str = "chorus") -> ChorusHead:
    head = ChorusHead(_unit_dims(), method, dropout_rate=0.3)
    with torch.no_grad():
        for proj in (head.sensor_proj, head.context_proj):
            if proj is not None:
                proj.weight.copy_(torch.eye(2))
                proj.bias.zero_()
    return head


def test_convex_fusion_example():
    head = _fixed_gate(_identity_head(), [0.0, 0.0])
    decision = fuse_and_classify(np.array([2.0, 0.0]), np.array([0.0, 2.0]), np.ones((1, 4)), head)
    assert decision.h_sensor[0].tolist() == [2.0, 0.0]
    assert decision.h_context[0].tolist() == [0.0, 2.0]
    assert decision.h_final[0].tolist() == pytest.approx([1.0, 1.0])


def test_saturated_gate_returns_sensor_branch_exactly():
    head = _fixed_gate(_identity_head(), [1000.0, 0.0])
    decision = fuse_and_classify(np.array([2.0, 0.5]), np.array([0.3, 2.0]), np.ones((1, 4)), head)
    assert decision.alpha[0].tolist() == [1.0, 0.0]
    assert torch.equal(decision.h_final, decision.h_sensor)


def test_tied_logits_predict_lowest_index():
    head = _identity_head()
    with torch.no_grad():
        head.classifier.weight.zero_()
        head.classifier.bias.zero_()
    decision = fuse_and_classify(np.ones(2), np.ones(2), np.ones((1, 4)), head)
    assert decision.y_hat.tolist() == [0]


@pytest.mark.parametrize("method", sorted(METHODS))
def test_every_method_yields_simplex_alpha(tiny_dims, method):
    head = ChorusHead.initialized(tiny_dims, method, 0.3, RngState(0))
    gen = np.random.default_rng(1)
    z_x = gen.normal(size=(6, tiny_dims.latent))
    z_c = gen.normal(size=(6, tiny_dims.latent))
    segments = gen.normal(size=(6, tiny_dims.channels, tiny_dims.length))
    decision = fuse_and_classify(z_x, z_c, segments, head, rng=RngState(2), training=True)
    alpha = decision.alpha
    assert torch.all(alpha >= 0)
    assert torch.allclose(alpha.sum(dim=1), torch.ones(6, dtype=alpha.dtype), atol=1e-6)
    assert decision.logits.shape == (6, tiny_dims.num_classes)
    if head.mode != "concat":
        fused = alpha[:, :1] * decision.h_sensor + alpha[:, 1:] * decision.h_context
        assert torch.allclose(decision.h_final, fused, atol=1e-6)
    if method == "sensor_only":
        assert alpha[:, 0].tolist() == [1.0] * 6


def test_gated_head_requires_features(tiny_dims):
    head = ChorusHead.initialized(tiny_dims, "chorus", 0.3, RngState(0))
    with pytest.raises(ContractViolation):
        head(torch.zeros(2, tiny_dims.latent), torch.zeros(2, tiny_dims.latent))


def test_unknown_method_is_a_configuration_error(tiny_dims):
    with pytest.raises(ConfigurationError):
        ChorusHead(tiny_dims, "attention")


def test_balance_loss_values():
    assert balance_loss(torch.tensor([[0.5, 0.5]])).item() == 0.0
    assert balance_loss(torch.tensor([[1.0, 0.0]]), 2).item() == pytest.approx(1.0)
    assert balance_loss(torch.tensor([[1.0, 0.0], [0.0, 1.0]])).item() == 0.0
    with pytest.raises(ContractViolation):
        balance_loss(torch.zeros(0, 2))


def _decision(logits: torch.Tensor, alpha: torch.Tensor) -> GateDecision:
    h = torch.zeros(len(logits), 2)
    return GateDecision(alpha, h, h, h, logits, torch.argmax(logits, dim=1))


def test_customize_loss_uniform_logits():
    decision = _decision(torch.zeros(4, 6), torch.tensor([[1.0, 0.0]] * 4))
    total, comps = customize_loss(decision, [0, 1, 2, 5], lambda_balance=0.0)
    assert total.item() == pytest.approx(math.log(6), abs=1e-6)
    assert comps["L_custom"] == comps["L_CE"]
    total, comps = customize_loss(decision, [0, 1, 2, 5], lambda_balance=0.01)
    assert comps["L_balance"] == pytest.approx(1.0)
    assert total.item() == pytest.approx(math.log(6) + 0.01, abs=1e-6)


def test_customize_loss_saturated_logits_approach_zero():
    logits = torch.full((2, 3), -50.0)
    logits[0, 1] = 50.0
    logits[1, 2] = 50.0
    decision = _decision(logits, torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    total, _ = customize_loss(decision, [1, 2], lambda_balance=0.01)
    assert total.item() < 1e-12


def test_customize_loss_rejects_out_of_range_labels():
    decision = _decision(torch.zeros(2, 3), torch.full((2, 2), 0.5))
    with pytest.raises(ContractViolation):
        customize_loss(decision, [0, 3])
    with pytest.raises(ContractViolation):
        customize_loss(decision, [-1, 0])


@pytest.mark.parametrize("method", ["chorus", "fix_add", "fix_concat", "sensor_only"])
def test_customize_loss_gradient_matches_finite_differences(tiny_dims, smooth_init, method):
    gen = np.random.default_rng(0)
    z_x = torch.as_tensor(gen.uniform(-1, 1, (5, tiny_dims.latent)))
    z_c = torch.as_tensor(gen.uniform(-1, 1, (5, tiny_dims.latent)))
    raw = torch.as_tensor(gen.uniform(-1, 1, (5, tiny_dims.gate_features)))
    labels = [0, 1, 2, 1, 0]
    head = smooth_init(ChorusHead(tiny_dims, method), 3)

    def loss(h):
        total, _ = customize_loss(h(z_x, z_c, raw), labels, lambda_balance=1.0, gated=h.gated)
        return total

    assert grad_check(module_graph([head], loss), h=1e-5, floor=1e-4) < 1e-4


def test_stratified_split_keeps_every_class_in_training():
    labels = np.array([0] * 10 + [1] * 5 + [2])
    train, val = stratified_split(labels, 0.2, RngState(0))
    assert not set(train) & set(val)
    assert len(train) + len(val) == len(labels)
    assert set(labels[train]) == {0, 1, 2}
    assert list(labels[val]).count(0) == 2


@pytest.fixture
def labeled(tiny_spec):
    return generate_dataset(tiny_spec)


def _config(**overrides) -> CustomizeConfig:
    return CustomizeConfig(optimizer=OptimizerConfig(lr=1e-3, batch_size=16, max_epochs=3, patience=5),
                           **overrides)


def test_run_customize_keeps_encoders_frozen(tiny_dims, labeled):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    before = tensor_digest(encoders.state_dict())
    head, report = run_customize(encoders, labeled, _config(), RngState(1))
    assert tensor_digest(encoders.state_dict()) == before
    assert report.extra["encoder_digest"] == before
    assert head.gate_stats is not None
    last = report.history[-1]
    for key in ("train_L_CE", "train_L_balance", "val_L_custom", "alpha_sensor", "alpha_context"):
        assert key in last
    assert last["alpha_sensor"] + last["alpha_context"] == pytest.approx(1.0)


@pytest.mark.parametrize("method,mask", [("align_only", "align"), ("dyn_only", "dyn")])
def test_run_customize_reports_gate_mask(tiny_dims, labeled, method, mask):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    head, report = run_customize(encoders, labeled, _config(), RngState(1), method=method)
    assert report.extra["gate_mask"] == mask
    assert report.extra["method"] == method
    decision = predict(head, head_inputs(encoders, labeled))
    assert torch.allclose(decision.alpha.sum(dim=1), torch.ones(len(labeled)), atol=1e-6)


def test_run_customize_needs_k_labels(tiny_dims, labeled):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    with pytest.raises(ConfigurationError) as info:
        run_customize(encoders, labeled.subset([0, 1]), _config(), RngState(1))
    assert info.value.key == "customize.budget"


def test_run_customize_is_deterministic(tiny_dims, labeled):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    a, _ = run_customize(encoders, labeled, _config(), RngState(7))
    b, _ = run_customize(encoders, labeled, _config(), RngState(7))
    assert tensor_digest(a.state_dict()) == tensor_digest(b.state_dict())


def test_run_customize_tops_up_small_epochs(tiny_dims, labeled):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    single = _config()
    topped = CustomizeConfig(optimizer=single.optimizer.model_copy(update={"steps_per_epoch": 20}))
    _, one_pass = run_customize(encoders, labeled, single, RngState(1))
    _, cycled = run_customize(encoders, labeled, topped, RngState(1))
    assert one_pass.extra["train_size"] == 96
    assert one_pass.history[1]["steps"] == 6
    assert cycled.history[1]["steps"] == 24


def test_run_customize_default_optimizer_learns_from_few_labels(tiny_dims, labeled):
    encoders = ChorusEncoders.initialized(tiny_dims, RngState(0))
    config = CustomizeConfig()
    config = config.model_copy(update={"optimizer": config.optimizer.model_copy(update={"max_epochs": 20})})
    assert config.optimizer.lr == 1e-4 and config.optimizer.steps_per_epoch == 25
    _, report = run_customize(encoders, labeled, config, RngState(1))
    assert report.best_epoch > 0
    assert report.best_value < report.history[0]["val_L_custom"]
