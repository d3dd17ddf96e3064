"""Dual-tower encoder: determinism, frozen-path identity, feature splitting."""

import numpy as np
import pytest
import torch

from defit import (BackboneConfig, DualEncoder, ProjectionHeads,
                   class_text_embeddings, decouple)
from defit.encoder import ClassEmbeddings, class_prompt_text, TEMPLATE_PREFIX
from defit.errors import (CompatibilityError, ContextLengthError,
                          DegenerateEmbeddingError, DimensionError,
                          ParameterError, UnknownClassError)


def _images(n, cfg, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n, cfg.channels, cfg.image_size, cfg.image_size,
                      generator=gen)


# ----------------------------------------------------------------- templates

def test_class_prompt_text():
    assert TEMPLATE_PREFIX == "a photo of a"
    assert class_prompt_text("dog") == "a photo of a dog"
    assert (class_prompt_text("dog", "a small brown dog")
            == "a photo of a dog, a small brown dog")


# ----------------------------------------------------------------- determinism

def test_encoder_is_deterministic(tiny_backbone):
    m1 = DualEncoder(tiny_backbone, theta_seed=7)
    m2 = DualEncoder(tiny_backbone, theta_seed=7)
    x = _images(2, tiny_backbone)
    assert torch.equal(m1.encode_images(x).detach(),
                       m2.encode_images(x).detach())
    ids = m1.tokenize("a photo of a cat")
    assert torch.equal(m1.encode_text(ids).detach(),
                       m2.encode_text(ids).detach())


def test_theta_seed_changes_trainables_not_backbone(tiny_backbone):
    m1 = DualEncoder(tiny_backbone, theta_seed=7)
    m2 = DualEncoder(tiny_backbone, theta_seed=8)
    assert m1.backbone_fingerprint() == m2.backbone_fingerprint()
    # the trainable set must differ somewhere (prompt init draws differ)
    s1, s2 = m1.trainable_state_dict(), m2.trainable_state_dict()
    assert any(not torch.equal(s1[k], s2[k]) for k in s1)


def test_backbone_seed_changes_fingerprint(tiny_backbone):
    other = BackboneConfig.tiny(seed=1)
    m1 = DualEncoder(tiny_backbone)
    m2 = DualEncoder(other)
    assert m1.backbone_fingerprint() != m2.backbone_fingerprint()


# ----------------------------------------------------------------- frozen path

def test_fresh_adapters_and_no_prompts_match_frozen(model, tiny_backbone):
    # LoRA A matrices start at zero, so disabling prompts must reproduce the
    # frozen backbone exactly.
    x = _images(3, tiny_backbone, seed=4)
    adapted = model.encode_images(x, adapted=True, prompted=False).detach()
    frozen = model.frozen_encode_images(x).detach()
    np.testing.assert_allclose(adapted.numpy(), frozen.numpy(),
                               rtol=0, atol=1e-6)

    ids = model.tokenize("a photo of a bird")
    t_adapted = model.encode_text(ids, adapted=True, prompted=False).detach()
    t_frozen = model.frozen_encode_text(ids).detach()
    np.testing.assert_allclose(t_adapted.numpy(), t_frozen.numpy(),
                               rtol=0, atol=1e-6)


def test_depth_zero_model_matches_frozen(tiny_backbone):
    bare = DualEncoder(tiny_backbone, prompt_depth=0, theta_seed=7)
    x = _images(2, tiny_backbone, seed=9)
    out = bare.encode_images(x, adapted=True, prompted=True).detach()
    np.testing.assert_allclose(out.numpy(),
                               bare.frozen_encode_images(x).detach().numpy(),
                               rtol=0, atol=1e-6)


def test_prompting_changes_output(model, tiny_backbone):
    x = _images(2, tiny_backbone, seed=5)
    with_prompts = model.encode_images(x, prompted=True).detach()
    without = model.encode_images(x, prompted=False).detach()
    assert not torch.allclose(with_prompts, without)


# ----------------------------------------------------------------- gradients

def test_image_gradients_touch_only_vision_trainables(model, tiny_backbone):
    out = model.encode_images(_images(2, tiny_backbone))
    out.sum().backward()
    saw_vision_adapter = False
    for name, p in model.named_parameters():
        if not p.requires_grad:
            assert p.grad is None, name
            continue
        if "vision" in name and p.grad is not None and p.grad.abs().sum() > 0:
            saw_vision_adapter = True
        if name.startswith("text."):
            assert p.grad is None or p.grad.abs().sum() == 0, name
    assert saw_vision_adapter


def test_trainable_set_is_adapters_prompts_heads(model):
    names = sorted(model.trainable_state_dict())
    assert all(("adapter" in n or "prompts." in n or "heads." in n)
               for n in names), names
    assert any("adapter" in n for n in names)
    assert any("prompts." in n for n in names)
    assert any("heads." in n for n in names)
    # adapters attach to query and key projections only
    adapter_names = [n for n in names if "adapter" in n]
    assert all((".q.adapter" in n or ".k.adapter" in n)
               for n in adapter_names)


# ----------------------------------------------------------------- decoupling

def test_decouple_identity_heads_is_normalization(rng):
    heads = ProjectionHeads.identity(8)
    z = torch.tensor(rng.normal(size=(5, 8)), dtype=torch.float32)
    dec = decouple(z, heads, "vision")
    expected = (z / z.norm(dim=-1, keepdim=True)).numpy()
    np.testing.assert_allclose(dec.invariant.detach().numpy(), expected,
                               rtol=0, atol=1e-6)
    np.testing.assert_allclose(dec.spurious.detach().numpy(), expected,
                               rtol=0, atol=1e-6)
    assert dec.modality == "vision"


def test_decouple_rows_are_unit_norm(model, tiny_backbone, rng):
    z = model.encode_images(_images(4, tiny_backbone)).detach()
    dec = decouple(z, model.heads, "vision")
    np.testing.assert_allclose(dec.invariant.norm(dim=-1).detach().numpy(),
                               np.ones(4), rtol=0, atol=1e-5)
    np.testing.assert_allclose(dec.spurious.norm(dim=-1).detach().numpy(),
                               np.ones(4), rtol=0, atol=1e-5)
    # invariant and spurious branches use different projections
    assert not torch.allclose(dec.invariant, dec.spurious)


def test_decouple_single_vector(model, tiny_backbone):
    z = model.encode_images(_images(1, tiny_backbone)).detach()[0]
    dec = decouple(z, model.heads, "vision")
    assert dec.invariant.shape == (model.config.joint_dim,)


def test_decouple_degenerate_embedding():
    heads = ProjectionHeads.identity(4)
    with pytest.raises(DegenerateEmbeddingError):
        decouple(torch.zeros(4), heads, "vision")


def test_decouple_dimension_mismatch(model):
    with pytest.raises(DimensionError):
        decouple(torch.randn(3, model.config.joint_dim + 1), model.heads,
                 "vision")


def test_projection_heads_validation():
    heads = ProjectionHeads(8)
    with pytest.raises(ParameterError):
        heads.head("audio", "invariant")
    with pytest.raises(ParameterError):
        heads.head("vision", "mixed")


# ----------------------------------------------------------------- class rows

def test_class_embeddings_index_of():
    rows = torch.eye(2)
    emb = ClassEmbeddings(("cat", "dog"), rows, rows)
    assert emb.index_of("dog") == 1
    with pytest.raises(UnknownClassError) as exc:
        emb.index_of("bird")
    assert "cat" in str(exc.value) and "dog" in str(exc.value)


def test_class_text_embeddings_shape_and_captions(model):
    plain = class_text_embeddings(model, ["cat", "dog"])
    assert plain.invariant.shape == (2, model.config.joint_dim)
    assert plain.class_names == ("cat", "dog")
    with_cap = class_text_embeddings(model, ["cat", "dog"],
                                     {"cat": "sleeping on a mat"})
    # the caption alters the encoded text for that class only
    assert not torch.allclose(plain.invariant[0], with_cap.invariant[0])
    np.testing.assert_allclose(plain.invariant[1].detach().numpy(),
                               with_cap.invariant[1].detach().numpy(),
                               rtol=0, atol=0)


def test_class_text_embeddings_requires_two_unique(model):
    with pytest.raises(ParameterError):
        class_text_embeddings(model, ["solo"])
    with pytest.raises(ParameterError):
        class_text_embeddings(model, ["dup", "dup"])


# ----------------------------------------------------------------- limits

def test_tokenize_context_length(model):
    ok = model.tokenize("word " * 50)  # 50 tokens + specials fits 64
    assert ok[0].item() == 1 and ok[-1].item() == 2
    with pytest.raises(ContextLengthError):
        model.tokenize("word " * 80)


def test_prompt_depth_exceeding_towers(tiny_backbone):
    with pytest.raises(ParameterError):
        DualEncoder(tiny_backbone, prompt_depth=4)  # tiny towers have 3 layers


def test_image_shape_validation(model, tiny_backbone):
    with pytest.raises(DimensionError):
        model.encode_images(torch.rand(2, 3, 16, 16))  # wrong spatial size
    with pytest.raises(DimensionError):
        model.encode_images(torch.rand(2, 1, 32, 32))  # wrong channels
    with pytest.raises(DimensionError):
        model.encode_image(torch.rand(2, 3, 32, 32))   # batch into single-image


# ----------------------------------------------------------------- state dicts

def test_trainable_state_round_trip(model, tiny_backbone):
    x = _images(2, tiny_backbone, seed=2)
    state = model.trainable_state_dict()
    with torch.no_grad():
        for p in model.trainable_parameters():
            p.add_(0.05)
    moved = model.encode_images(x).detach()
    model.load_trainable_state_dict(state)
    restored = model.encode_images(x).detach()
    fresh = DualEncoder(tiny_backbone, theta_seed=7).encode_images(x).detach()
    assert torch.equal(restored, fresh)
    assert not torch.equal(moved, fresh)


def test_load_trainable_state_rejects_bad_keys(model):
    state = model.trainable_state_dict()
    state.pop(sorted(state)[0])
    with pytest.raises(CompatibilityError):
        model.load_trainable_state_dict(state)


def test_load_trainable_state_rejects_bad_shape(model):
    state = model.trainable_state_dict()
    key = sorted(state)[0]
    state[key] = torch.zeros(state[key].numel() + 1)
    with pytest.raises(CompatibilityError):
        model.load_trainable_state_dict(state)


def test_load_backbone_state_dict(model):
    frozen = {n: p.detach().clone() for n, p in model.named_parameters()
              if not p.requires_grad}
    model.load_backbone_state_dict(frozen)  # no-op reload succeeds
    with pytest.raises(CompatibilityError):
        model.load_backbone_state_dict({"no.such.parameter": torch.zeros(1)})
