"""Model tests: forward/score contracts, attention rollout and normalization,
slice-order sensitivity, channel handling, and checkpoint round-trips.
The finite-difference gradient check and the large normalization sweeps are
in test_acceptance.py."""

import numpy as np
import pytest
import torch

from conftest import SMALL_MODEL
from mst_triage.model import (
    IMAGE_SIZE,
    ModelConfig,
    MstClassifier,
    N_SLICES,
    ViTSliceEncoder,
    attention_rollout,
    load_checkpoint,
    save_checkpoint,
)
from mst_triage.volume import SequenceStack, TARGET_SHAPE


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    m = MstClassifier(SMALL_MODEL)
    m.eval()
    return m


def _stack_array(rng, c=1):
    return rng.random((c,) + TARGET_SHAPE).astype(np.float32)


def test_forward_two_finite_logits_softmax_sums(model, rng):
    x = torch.from_numpy(_stack_array(rng)).unsqueeze(0)
    with torch.no_grad():
        logits = model(x)
    assert logits.shape == (1, 2)
    assert torch.isfinite(logits).all()
    assert float(torch.softmax(logits, dim=-1).sum()) == pytest.approx(1.0, abs=1e-6)


def test_zero_head_gives_score_half(rng):
    torch.manual_seed(1)
    m = MstClassifier(SMALL_MODEL)
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    score = m.scores(torch.from_numpy(_stack_array(rng)).unsqueeze(0))
    assert float(score) == pytest.approx(0.5, abs=1e-7)


def test_eval_determinism(model, rng):
    x = torch.from_numpy(_stack_array(rng)).unsqueeze(0)
    with torch.no_grad():
        a = model(x)
        b = model(x.clone())
    assert torch.equal(a, b)


def test_slice_order_sensitivity(model, rng):
    emb = torch.from_numpy(rng.normal(size=(1, N_SLICES, SMALL_MODEL.embed_dim)).astype(np.float32))
    perm = torch.from_numpy(np.random.default_rng(3).permutation(N_SLICES))
    with torch.no_grad():
        logits_a, _ = model.aggregate(emb)
        logits_b, _ = model.aggregate(emb[:, perm])
    assert not torch.allclose(logits_a, logits_b)


def test_channel_replication_eager_equals_lazy(model, rng):
    one = _stack_array(rng, c=1)
    three = np.repeat(one, 3, axis=0)
    with torch.no_grad():
        a = model(torch.from_numpy(one).unsqueeze(0))
        b = model(torch.from_numpy(three).unsqueeze(0))
    assert torch.allclose(a, b, atol=1e-6)


def test_two_channel_mapping(model, rng):
    two = _stack_array(rng, c=2)
    mapped = two[[0, 1, 0]]
    with torch.no_grad():
        a = model(torch.from_numpy(two).unsqueeze(0))
        b = model(torch.from_numpy(mapped).unsqueeze(0))
    assert torch.allclose(a, b, atol=1e-6)


def test_uniform_attention_rollout_gives_uniform_slice_weights():
    t = N_SLICES + 1
    uniform = torch.full((1, 2, t, t), 1.0 / t)
    rollout = attention_rollout([uniform])
    w = rollout[:, 0, 1:]
    w = w / w.sum(dim=-1, keepdim=True)
    assert torch.allclose(w, torch.full((1, N_SLICES), 1.0 / N_SLICES), atol=1e-7)


def test_rollout_rows_are_distributions(rng):
    layers = []
    for _ in range(3):
        logits = torch.from_numpy(rng.normal(size=(2, 4, 10, 10)))
        layers.append(torch.softmax(logits, dim=-1))
    out = attention_rollout(layers)
    assert torch.allclose(out.sum(dim=-1), torch.ones(2, 10).double(), atol=1e-9)
    last = attention_rollout(layers, mode="last_layer")
    assert not torch.allclose(out, last)


def test_slice_attention_normalized(model, rng):
    stack = SequenceStack(channels=_stack_array(rng), channel_map=("T1_sub",))
    w = model.slice_attention(stack)
    assert w.shape == (1, N_SLICES)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-6)
    assert (w >= 0).all()


def test_area_attention_contract(model, rng):
    stack = SequenceStack(channels=_stack_array(rng), channel_map=("T1_sub",))
    heat = model.area_attention(stack, 5)
    assert heat.shape == (IMAGE_SIZE, IMAGE_SIZE)
    assert float(heat.min()) >= 0.0 and float(heat.max()) <= 1.0
    with pytest.raises(ValueError, match="slice_idx"):
        model.area_attention(stack, N_SLICES)


def test_attention_bundle_shapes(model, rng):
    stack = SequenceStack(channels=_stack_array(rng), channel_map=("T1_sub",))
    bundle = model.attention_bundle(stack)
    assert bundle.slice_weights.shape == (N_SLICES,)
    assert bundle.area_maps.shape == (N_SLICES, IMAGE_SIZE, IMAGE_SIZE)
    assert bundle.slice_weights.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.isfinite(bundle.area_maps).all()


def test_encoder_patch_attention_normalized(rng):
    torch.manual_seed(2)
    enc = ViTSliceEncoder(patch_size=56, embed_dim=32, depth=1, heads=2)
    imgs = torch.from_numpy(rng.random((4, 3, 224, 224)).astype(np.float32))
    with torch.no_grad():
        emb, attn = enc.encode(imgs)
    assert emb.shape == (4, 32)
    assert attn.shape == (4, 16)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(4), atol=1e-6)


def test_config_validation():
    with pytest.raises(ValueError, match="divide"):
        ViTSliceEncoder(patch_size=30)
    with pytest.raises(ValueError, match="divisible"):
        MstClassifier(ModelConfig(embed_dim=30, encoder_heads=4))


def test_frozen_encoder_excluded_from_trainable():
    m = MstClassifier(SMALL_MODEL)  # frozen_encoder=True by default
    trainable = set(id(p) for p in m.trainable_parameters())
    assert all(id(p) not in trainable for p in m.encoder.parameters())
    m.set_encoder_frozen(False)
    assert all(p.requires_grad for p in m.encoder.parameters())


def test_set_embedding_stats_validation(model):
    d = SMALL_MODEL.embed_dim
    with pytest.raises(ValueError, match="shape"):
        model.set_embedding_stats(torch.zeros(d + 1), torch.ones(d + 1))
    with pytest.raises(ValueError, match="positive"):
        model.set_embedding_stats(torch.zeros(d), torch.zeros(d))


def test_checkpoint_round_trip(tmp_path, rng):
    torch.manual_seed(4)
    m = MstClassifier(SMALL_MODEL)
    m.set_embedding_stats(torch.randn(SMALL_MODEL.embed_dim),
                          torch.rand(SMALL_MODEL.embed_dim) + 0.5)
    m.eval()
    manifest = save_checkpoint(m, tmp_path, channel_map=("T1_sub",),
                               config_hash="abc", fold=2)
    assert manifest["channel_map"] == ["T1_sub"]
    assert manifest["fold"] == "2"
    restored, loaded_manifest = load_checkpoint(tmp_path)
    assert loaded_manifest["config_hash"] == "abc"
    assert restored.config == SMALL_MODEL
    x = torch.from_numpy(_stack_array(rng)).unsqueeze(0)
    assert torch.equal(m.scores(x), restored.scores(x))
