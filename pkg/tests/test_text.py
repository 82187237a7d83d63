import pytest
import torch

from mgreid.config import GRANULARITIES
from mgreid.text import TEMPLATES, VOCAB, TextEncoder, build_description, encode_text, init_prompts


@pytest.fixture(scope="module")
def encoder():
    return TextEncoder(dim=16, out_dim=8, depth=2, num_heads=2, seed=0)


@pytest.fixture
def prompts():
    return init_prompts(num_ids=3, length=4, dim=16, seed=0)


def test_description_words(encoder, prompts):
    d = build_description(1, "upper", prompts, encoder)
    assert d.words == ["<sos>", "a", "photo", "of", "a", "[U]1", "[U]2", "[U]3", "[U]4",
                       "upper", "body", "of", "a", "person", "<eos>"]
    assert d.embeddings.shape == (len(d.words), 16)
    assert torch.equal(d.embeddings[5:9], prompts.prompts[1][GRANULARITIES.index("upper")])
    legs = build_description(0, "legs", prompts, encoder)
    assert " ".join(legs.words[1:4]) == "a photo of" and legs.words[4] == "[L]1"


def test_templates_use_only_vocabulary_words():
    words = {w for prefix, suffix in TEMPLATES.values() for w in (prefix + " " + suffix).split()}
    assert words <= set(VOCAB)


def test_prompt_init_statistics():
    p = init_prompts(num_ids=50, length=4, dim=64, seed=1).as_tensor()
    assert p.shape == (50, 4, 4, 64)
    assert p.std().item() == pytest.approx(0.002, rel=0.05)


def test_text_tokens_are_unit_and_deterministic(encoder, prompts):
    a = encode_text(encoder, prompts, 2)
    b = encode_text(encoder, prompts, 2)
    assert torch.equal(a, b)
    assert a.norm().item() == pytest.approx(1.0, abs=1e-6)


def test_text_token_is_normalized_mean_of_granularities(encoder, prompts):
    per = torch.stack([encoder.encode_granularity(prompts, [0], g)[0] for g in GRANULARITIES])
    expected = per.mean(0) / per.mean(0).norm()
    assert torch.allclose(encode_text(encoder, prompts, 0), expected, atol=1e-6)


def test_prompts_change_the_text_token(encoder, prompts):
    before = encode_text(encoder, prompts, 0)
    with torch.no_grad():
        prompts.prompts[0].add_(torch.randn(prompts.prompts[0].shape) * 0.5)
    assert not torch.allclose(before, encode_text(encoder, prompts, 0))


def test_eos_output_depends_on_earlier_tokens(encoder, prompts):
    seq = encoder.build_sequences(prompts, [0], "global")
    changed = seq.clone()
    changed[0, -2] += torch.randn(seq.shape[-1])  # not constant: LayerNorm removes shifts
    x1 = encoder.encode_sequences(seq)
    x2 = encoder.encode_sequences(changed)
    assert not torch.allclose(x1, x2)


def test_text_encoder_is_frozen(encoder):
    assert not any(p.requires_grad for p in encoder.parameters())


def test_gradient_reaches_only_the_selected_identity(encoder, prompts):
    prompts.requires_grad_(True)
    encode_text(encoder, prompts, 1).sum().backward()
    assert prompts.prompts[1].grad is not None and prompts.prompts[1].grad.abs().sum() > 0
    assert prompts.prompts[0].grad is None and prompts.prompts[2].grad is None


def test_unknown_granularity(encoder, prompts):
    with pytest.raises(ValueError):
        build_description(0, "feet", prompts, encoder)
