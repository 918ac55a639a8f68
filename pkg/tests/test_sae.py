import numpy as np
import pytest

from services.classifiers import LinearHead
from services.errors import ConfigError, DataFormatError, NumericError
from services.numeric_core import finite_difference_gradient, make_rng, relative_error
from services.sae import (
    ActivityTracker,
    ConceptMask,
    MaskConfig,
    SaeConfig,
    SaeModel,
    compute_loss_terms,
    dead_fraction,
    init_sae,
    learn_concept_mask,
    load_sae,
    mask_intersection_stats,
    masked_loss_and_grads,
    sae_encode,
    sae_forward,
    sae_loss_and_grads,
    save_sae,
    sparsity_at,
    top_k_activation,
    top_k_mask,
    train_sae,
)


def _identity_model(d: int, s: int) -> SaeModel:
    return SaeModel(encoder=np.eye(d), decoder=np.eye(d), bias=np.zeros(d), s=s)


def _random_model(rng, d1=6, d2=4, s=2, variant="topk") -> SaeModel:
    thresholds = rng.uniform(-0.2, 0.2, size=d1) if variant == "threshold" else None
    return SaeModel(encoder=rng.standard_normal((d1, d2)), decoder=rng.standard_normal((d2, d1)),
                    bias=0.1 * rng.standard_normal(d1), s=s, variant=variant,
                    thresholds=thresholds)


def test_top_k_mask_keeps_largest_values():
    mask = top_k_mask([[3.0, 1.0, 3.0, 2.0], [-1.0, -5.0, 0.0, -2.0]], 2)
    np.testing.assert_array_equal(mask, [[True, False, True, False], [True, False, True, False]])


def test_top_k_mask_tie_prefers_lower_index():
    np.testing.assert_array_equal(top_k_mask([1.0, 1.0, 1.0], 1), [[True, False, False]])


@pytest.mark.parametrize("s", [0, 5])
def test_top_k_mask_rejects_bad_sparsity(s):
    with pytest.raises(ConfigError):
        top_k_mask(np.ones(4), s)


def test_top_k_activation_sparse_vector():
    vector = top_k_activation([0.2, -1.0, 0.9, 0.5], 2)
    assert vector.dim == 4
    np.testing.assert_array_equal(vector.indices, [2, 3])
    np.testing.assert_allclose(vector.values, [0.9, 0.5])


def test_forward_identity_model():
    codes, reconstruction = sae_forward(_identity_model(4, 2), [0.5, -1.0, 2.0, 0.1])
    np.testing.assert_array_equal(codes.indices, [0, 2])
    np.testing.assert_allclose(reconstruction, [0.5, 0.0, 2.0, 0.0])
    assert codes.nnz == 2


def test_forward_rejects_non_finite_input():
    with pytest.raises(NumericError):
        sae_forward(_identity_model(3, 1), [1.0, np.nan, 0.0])


def test_encode_matches_forward(rng):
    model = _random_model(rng)
    batch = rng.standard_normal((5, 4))
    codes = sae_encode(model, batch)
    for row, psi in zip(codes, batch):
        vector, _ = sae_forward(model, psi)
        np.testing.assert_allclose(row, vector.to_dense())
    assert np.all(np.count_nonzero(codes, axis=1) <= 2)


@pytest.mark.parametrize("name", ["encoder", "decoder", "bias"])
def test_reconstruction_gradient_matches_finite_differences(rng, name):
    model = _random_model(rng)
    batch = rng.standard_normal((5, 4))
    terms = compute_loss_terms(model, batch)
    assert terms.loss == pytest.approx(terms.reconstruction)

    def loss(value):
        params = model.params()
        params[name] = value
        return compute_loss_terms(model.with_params(params), batch).loss

    numeric = finite_difference_gradient(loss, model.params()[name], h=1e-6)
    assert relative_error(terms.grads[name], numeric) < 1e-6


def test_threshold_gradient_matches_finite_differences(rng):
    model = _random_model(rng, variant="threshold")
    batch = rng.standard_normal((5, 4))
    terms = compute_loss_terms(model, batch)

    def loss(value):
        params = model.params()
        params["thresholds"] = value
        return compute_loss_terms(model.with_params(params), batch).loss

    numeric = finite_difference_gradient(loss, model.thresholds, h=1e-6)
    assert relative_error(terms.grads["thresholds"], numeric) < 1e-6


def test_ghost_gradient_on_dead_feature_rows(rng):
    model = _random_model(rng)
    # 第 5 个概念永远不会进入 top-2
    model.bias[5] = -100.0
    batch = rng.standard_normal((6, 4))
    dead = np.zeros(6, dtype=bool)
    dead[5] = True
    terms = compute_loss_terms(model, batch, dead, ghost_weight=1.0)
    assert terms.ghost > 0.0
    assert terms.codes[:, 5].max() == 0.0

    def loss(row):
        encoder = model.encoder.copy()
        encoder[5] = row
        params = model.params()
        params["encoder"] = encoder
        return compute_loss_terms(model.with_params(params), batch, dead, ghost_weight=1.0).loss

    numeric = finite_difference_gradient(loss, model.encoder[5], h=1e-6)
    assert relative_error(terms.grads["encoder"][5], numeric) < 1e-6


def test_ghost_term_vanishes_without_dead_features(rng):
    model = _random_model(rng)
    batch = rng.standard_normal((3, 4))
    tracker = ActivityTracker(6)
    loss, _ = sae_loss_and_grads(model, batch, tracker, ghost_weight=1e6)
    assert loss == pytest.approx(compute_loss_terms(model, batch).reconstruction)


def test_activity_tracker_recomputes_dead_set_every_update():
    tracker = ActivityTracker(3, threshold=0.3)
    assert not tracker.dead_mask().any()
    tracker.update([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    np.testing.assert_array_equal(tracker.dead_mask(), [False, True, True])
    tracker.update([[0.0, 1.0, 0.0], [0.0, 3.0, 0.0]])
    np.testing.assert_allclose(tracker.frequencies, [0.5, 0.5, 0.0])
    np.testing.assert_array_equal(tracker.dead_mask(), [False, False, True])
    # 长时间不激活的概念随累计样本数增加而变为死特征
    tracker.update(np.zeros((4, 3)))
    assert tracker.total == 8
    np.testing.assert_array_equal(tracker.dead_mask(), [True, True, True])


class _RecordingTracker(ActivityTracker):
    def __post_init__(self):
        super().__post_init__()
        self.seen: list[np.ndarray] = []

    def dead_mask(self) -> np.ndarray:
        mask = super().dead_mask()
        self.seen.append(mask.copy())
        return mask


def test_training_queries_a_fresh_dead_set_each_step():
    rng = make_rng(31)
    data = np.eye(8)[rng.integers(8, size=256)] * rng.uniform(0.5, 1.5, size=(256, 1))
    tracker = _RecordingTracker(16, threshold=0.05)
    train_sae(_training_config(s=1, k0=1, horizon=20, ghost_weight=1.0), data, make_rng(32),
              tracker=tracker)
    assert len(tracker.seen) == 20
    assert tracker.total == 20 * 64
    assert not tracker.seen[0].any()
    # 单概念数据上最多 8 个原子胜出，第一批之后至少一半原子为死特征
    assert tracker.seen[1].sum() >= 8
    assert any(not np.array_equal(a, b) for a, b in zip(tracker.seen, tracker.seen[1:]))


def test_sparsity_ramp():
    config = SaeConfig(d1=64, s=4, k0=128, ramp_steps=10)
    assert sparsity_at(config, 0) == 64
    assert sparsity_at(config, 10) == 4
    assert sparsity_at(config, 50) == 4
    assert 4 < sparsity_at(config, 8) < 64


def test_dead_fraction_counts_unused_concepts():
    model = _identity_model(4, 1)
    model.bias[:] = [0.0, 0.0, -10.0, -10.0]
    data = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])
    assert dead_fraction(model, data) == 0.5


def test_train_rejects_bad_inputs(rng):
    with pytest.raises(ConfigError):
        train_sae(SaeConfig(d1=4, s=5), np.ones((3, 2)), rng)
    with pytest.raises(DataFormatError):
        train_sae(SaeConfig(d1=4, s=1), np.ones((0, 2)), rng)


def _training_config(**updates) -> SaeConfig:
    base = dict(d1=16, s=2, k0=2, ramp_steps=0, peak_lr=1e-2, warmup_steps=10, horizon=500,
                batch_size=64, dropout=0.0, ghost_weight=0.0)
    base.update(updates)
    return SaeConfig(**base)


def test_training_reduces_reconstruction_on_low_rank_data():
    rng = make_rng(11)
    data = rng.standard_normal((512, 2)) @ rng.standard_normal((2, 8))
    model = train_sae(_training_config(), data, make_rng(12))
    assert len(model.history) == 500
    assert np.mean(model.history[-20:]) < 0.5 * np.mean(model.history[:5])
    np.testing.assert_allclose(np.linalg.norm(model.decoder, axis=0), 1.0)


def test_training_is_reproducible():
    data = make_rng(3).standard_normal((128, 4))
    config = _training_config(d1=8, horizon=30, batch_size=32, dropout=0.5)
    a = train_sae(config, data, make_rng(4))
    b = train_sae(config, data, make_rng(4))
    np.testing.assert_array_equal(a.encoder, b.encoder)
    np.testing.assert_array_equal(a.decoder, b.decoder)


def test_planted_dictionary_recovery():
    rng = make_rng(21)
    atoms = np.eye(8)
    which = rng.integers(8, size=2000)
    data = atoms[which] * rng.uniform(0.5, 1.5, size=(2000, 1))
    config = _training_config(d1=8, s=1, k0=1, init="kmeans", horizon=300)
    model = train_sae(config, data, make_rng(22))
    cosines = np.abs(atoms.T @ model.decoder)
    assert cosines.max(axis=1).min() >= 0.99


@pytest.mark.parametrize("init", ["uniform", "kmeans++", "kmeans"])
def test_init_ties_encoder_to_normalized_decoder(init, rng):
    data = rng.standard_normal((64, 5)) * 3.0
    model = init_sae(SaeConfig(d1=6, s=2, init=init, init_restarts=2), data, make_rng(2))
    np.testing.assert_allclose(np.linalg.norm(model.decoder, axis=0), 1.0)
    np.testing.assert_array_equal(model.encoder, model.decoder.T)
    assert not np.any(model.bias)


@pytest.mark.parametrize("init", ["kmeans++", "kmeans"])
def test_data_init_needs_enough_samples(init):
    with pytest.raises(ConfigError):
        init_sae(SaeConfig(d1=8, s=1, init=init), np.ones((4, 2)), make_rng(0))


@pytest.mark.parametrize("variant", ["topk", "threshold"])
def test_reconstruction_invariant_to_decoder_rescaling(rng, variant):
    model = _random_model(rng, variant=variant)
    # s = d₁ 时 top-k 不做选择
    model.s = model.d1
    batch = rng.standard_normal((5, 4))
    scale = np.array([0.5, 2.0, 3.0, 1.0, 0.25, 4.0])
    params = model.params()
    params["decoder"] = model.decoder / scale
    params["encoder"] = model.encoder * scale[:, None]
    params["bias"] = model.bias * scale
    if variant == "threshold":
        params["thresholds"] = model.thresholds * scale
    rescaled = model.with_params(params)
    assert compute_loss_terms(rescaled, batch).reconstruction == pytest.approx(
        compute_loss_terms(model, batch).reconstruction, rel=1e-12)
    np.testing.assert_allclose(sae_encode(rescaled, batch) / scale, sae_encode(model, batch))


def test_checkpoint_save_load(tmp_path, rng):
    model = _random_model(rng, variant="threshold")
    path = save_sae(model, tmp_path / "model.sae")
    loaded = load_sae(path)
    assert (loaded.d1, loaded.d2, loaded.s, loaded.variant) == (6, 4, 2, "threshold")
    np.testing.assert_array_equal(loaded.encoder, model.encoder)
    np.testing.assert_array_equal(loaded.thresholds, model.thresholds)
    batch = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(sae_encode(loaded, batch), sae_encode(model, batch))


def test_checkpoint_truncated(tmp_path, rng):
    path = save_sae(_random_model(rng), tmp_path / "model.sae")
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataFormatError):
        load_sae(path)


def test_masked_head_gradient_matches_finite_differences(rng):
    head = LinearHead(rng.standard_normal((3, 5)), rng.standard_normal(3))
    mask = ConceptMask(logits=np.array([1.0, -1.0, 0.5, 2.0, -0.3]), lam=0.1)
    concepts = rng.standard_normal((7, 5))
    labels = rng.integers(3, size=7)
    _, grads = masked_loss_and_grads(head, mask, concepts, labels, weight_decay=0.05)

    def loss(weights):
        return masked_loss_and_grads(LinearHead(weights, head.bias), mask, concepts, labels,
                                     weight_decay=0.05)[0]

    numeric = finite_difference_gradient(loss, head.weights, h=1e-6)
    assert relative_error(grads["weights"], numeric) < 1e-6
    # 被屏蔽的概念只受权重衰减
    np.testing.assert_allclose(grads["weights"][:, [1, 4]], 0.1 * head.weights[:, [1, 4]])


def test_mask_penalty_gradient_is_lambda_for_closed_concepts():
    head = LinearHead.zeros(2, 3)
    mask = ConceptMask(logits=np.array([0.5, -0.5, -2.0]), tau=0.5, lam=0.2)
    concepts = np.array([[1.0, 2.0, 0.0], [0.0, -1.0, 0.0]])
    _, grads = masked_loss_and_grads(head, mask, concepts, np.array([0, 1]))
    # 零初始化的头没有交叉熵梯度，只剩 λ·σ'(θ/τ)/τ
    np.testing.assert_allclose(grads["logits"], 0.2 * mask.surrogate_grad())
    assert np.all(grads["logits"] > 0.0)


def test_large_penalty_closes_the_mask():
    rng = make_rng(7)
    concepts = rng.standard_normal((100, 5))
    labels = (concepts[:, 0] > 0).astype(np.int64)
    mask, head = learn_concept_mask(concepts, labels, 2, MaskConfig(lam=10.0, steps=100, lr=0.05),
                                    make_rng(8))
    assert mask.size == 0
    # 输入全被屏蔽，头退化为常数预测
    assert np.unique(head.predict(concepts * mask.mask)).size == 1


def test_learned_mask_keeps_predictive_concept():
    rng = make_rng(5)
    concepts = rng.standard_normal((200, 6))
    labels = (concepts[:, 0] > 0).astype(np.int64)
    config = MaskConfig(lam=1e-3, steps=200, lr=0.05)
    mask, head = learn_concept_mask(concepts, labels, 2, config, make_rng(6))
    assert mask.mask[0] == 1.0
    accuracy = np.mean(head.predict(concepts * mask.mask) == labels)
    assert accuracy > 0.9


def test_fixed_mask_is_not_trained():
    rng = make_rng(8)
    concepts = rng.standard_normal((50, 4))
    labels = (concepts[:, 1] > 0).astype(np.int64)
    fixed = np.array([True, True, False, False])
    mask, _ = learn_concept_mask(concepts, labels, 2, MaskConfig(steps=20), make_rng(9),
                                 fixed_mask=fixed)
    np.testing.assert_array_equal(mask.mask, fixed.astype(float))


def test_mask_intersection_stats():
    stats = mask_intersection_stats(
        mask=[1, 1, 0, 0, 1],
        test_active=[1, 0, 1, 0, 0],
        neighbor_active=[[1, 0, 0, 1, 0], [0, 1, 1, 0, 0]],
    )
    assert stats == {
        "neighbor_union": 4,
        "mask_size": 3,
        "test_and_mask": 1,
        "neighbor_and_mask_union": 2,
        "neighbor_and_test_union": 2,
    }
