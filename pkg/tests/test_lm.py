import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from iadlmm.lm import (
    EOS,
    SPECIALS,
    Template,
    TemplateBank,
    TinyLM,
    TokenizerError,
    Vocabulary,
    assemble_prompt,
    generate,
    generate_ids,
    lm_loss,
    pad_batch,
    parse_response,
    with_response,
)


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.load()


@pytest.fixture(scope="module")
def bank():
    return TemplateBank.load()


@pytest.fixture(scope="module")
def lm(vocab):
    torch.manual_seed(0)
    return TinyLM(len(vocab)).double().eval()


def _blocks(n_v=57, n_e=9, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n_v, 128, generator=g, dtype=torch.float64), torch.randn(n_e, 128, generator=g, dtype=torch.float64)


def test_specials_at_fixed_ids(vocab):
    assert vocab.tokens[: len(SPECIALS)] == list(SPECIALS)
    assert len(set(vocab.tokens)) == len(vocab)


def test_round_trip_for_every_template_and_response(vocab, bank):
    texts = [t.text for ts in bank.templates.values() for t in ts] + list(bank.responses.values())
    for text in texts:
        assert vocab.detokenize(vocab.tokenize(text)) == text


def test_empty_and_oov(vocab):
    assert vocab.tokenize("") == []
    with pytest.raises(TokenizerError, match="flange"):
        vocab.tokenize("is there a flange defect")


def test_paraphrase_pool_size(bank):
    for mode in ("joint", "expert_only", "image_only"):
        assert len(bank.templates[mode]) >= 4


def test_template_placeholder_contract():
    with pytest.raises(ValueError):
        Template("image <Img> <ImageFeature> </Img> only", "joint")
    with pytest.raises(ValueError):
        Template("expert <Img> <ExpertFeature> </Img> <ExpertFeature>", "expert_only")


def test_joint_prompt_length(vocab, bank, lm):
    tpl = bank.templates["joint"][0]
    assert len(vocab.tokenize(tpl.text)) == 20
    t_v, t_e = _blocks()
    p = assemble_prompt(lm, vocab, tpl, t_v, t_e)
    assert len(p) == 20 - 2 + 57 + 9 == 84
    kinds = [k for k, _, _ in p.spans]
    assert kinds.count("image") == 1 and kinds.count("expert") == 1
    a, b = p.span("image")
    assert torch.equal(p.embeds[a:b], t_v) and (p.ids[a:b] == -1).all()
    a, b = p.span("expert")
    assert torch.equal(p.embeds[a:b], t_e)
    # spans tile the sequence exactly
    edges = sorted((a, b) for _, a, b in p.spans)
    assert edges[0][0] == 0 and edges[-1][1] == len(p)
    assert all(x[1] == y[0] for x, y in zip(edges, edges[1:]))


def test_expert_only_prompt_has_no_image_span(vocab, bank, lm):
    _, t_e = _blocks()
    p = assemble_prompt(lm, vocab, bank.templates["expert_only"][0], None, t_e)
    assert p.span("image") is None
    assert torch.equal(p.embeds, assemble_prompt(lm, vocab, bank.templates["expert_only"][0], None, t_e).embeds)


def test_missing_block_is_an_error(vocab, bank, lm):
    t_v, _ = _blocks()
    with pytest.raises(ValueError):
        assemble_prompt(lm, vocab, bank.templates["joint"][0], t_v, None)


def test_causality(vocab, bank, lm):
    t_v, t_e = _blocks()
    p = assemble_prompt(lm, vocab, bank.templates["joint"][1], t_v, t_e)
    x = p.embeds[None]
    cut = 40
    y = x.clone()
    y[:, cut:] += torch.randn_like(y[:, cut:])
    with torch.no_grad():
        a, b = lm(x), lm(y)
    assert torch.equal(a[:, :cut], b[:, :cut])
    assert not torch.equal(a[:, cut:], b[:, cut:])


def test_context_overflow(lm):
    with pytest.raises(ValueError):
        lm(torch.zeros(1, 129, 128, dtype=torch.float64))


def test_loss_ignores_prompt_side_tokens(vocab, bank, lm):
    t_v, t_e = _blocks()
    resp = bank.response(True)
    p = with_response(lm, vocab, assemble_prompt(lm, vocab, bank.templates["joint"][0], t_v, t_e), resp)
    base = lm_loss(lm, p)
    # rewrite every prompt-side id; only the embeddings feed the model, the ids are never targets
    q = type(p)(p.embeds, p.ids.clone(), list(p.spans))
    a, _ = q.span("response")
    q.ids[:a] = torch.randint(0, len(vocab), (a,))
    assert torch.equal(base, lm_loss(lm, q))
    _, targets, mask = pad_batch([p])
    assert mask.sum() == len(vocab.tokenize(resp)) + 1
    assert targets[0, mask[0]].tolist() == vocab.tokenize(resp) + [vocab[EOS]]


def test_uniform_logits_give_log_vocab(vocab, bank):
    lm = TinyLM(len(vocab)).double()
    with torch.no_grad():
        lm.head.weight.zero_()
        lm.head.bias.zero_()
    _, t_e = _blocks()
    p = with_response(lm, vocab, assemble_prompt(lm, vocab, bank.templates["expert_only"][0], None, t_e), "Yes")
    assert lm_loss(lm, p).item() == pytest.approx(math.log(len(vocab)), abs=1e-12)


def test_peaked_logits_drive_loss_to_zero(vocab, bank):
    lm = TinyLM(len(vocab)).double()
    target = vocab.tokenize("Yes")[0]
    with torch.no_grad():
        lm.head.weight.zero_()
        lm.head.bias.zero_()
        lm.head.bias[target] = 60.0
    _, t_e = _blocks()
    p = assemble_prompt(lm, vocab, bank.templates["expert_only"][0], None, t_e)
    # single-token target without EOS, built by hand
    seq = type(p)(torch.cat([p.embeds, lm.embed_tokens([target])]), torch.cat([p.ids, torch.tensor([target])]),
                  p.spans + [("response", len(p), len(p) + 1)])
    assert lm_loss(lm, seq).item() < 1e-20


def test_loss_is_reproducible_bit_for_bit(vocab, bank):
    def run():
        torch.manual_seed(123)
        lm = TinyLM(len(vocab), 32, 1, 2, 128).double()
        g = torch.Generator().manual_seed(5)
        p = assemble_prompt(lm, vocab, bank.templates["joint"][2], torch.randn(10, 32, generator=g, dtype=torch.float64),
                            torch.randn(9, 32, generator=g, dtype=torch.float64))
        return lm_loss(lm, with_response(lm, vocab, p, bank.response(False))).item()

    a, b = run(), run()
    assert a == b
    # golden value recorded from this implementation
    assert a == pytest.approx(GOLDEN_LOSS, rel=1e-12)


GOLDEN_LOSS = 4.3790764284712544


def test_generation_terminates_and_is_deterministic(vocab, bank, lm):
    t_v, t_e = _blocks()
    p = assemble_prompt(lm, vocab, bank.templates["joint"][0], t_v, t_e)
    a = generate(lm, vocab, p, max_tokens=5)
    assert a == generate(lm, vocab, p, max_tokens=5)
    assert len(generate_ids(lm, vocab, [p], 5)[0]) <= 5
    assert parse_response(a) in ("abnormal", "normal", "unparseable")
    with pytest.raises(ValueError):
        generate_ids(lm, vocab, [p], 0)


@pytest.mark.parametrize(
    "text, want",
    [
        ("Yes, anomalies exist in this image.", "abnormal"),
        ("no, there are no anomalies in this image.", "normal"),
        ("NO", "normal"),
        ("  yes", "abnormal"),
        ("maybe", "unparseable"),
        ("yesterday", "unparseable"),
        ("", "unparseable"),
        ("there are no defects", "unparseable"),
    ],
)
def test_parse_response(text, want):
    assert parse_response(text) == want


@given(st.text(max_size=30))
def test_parse_response_total(text):
    assert parse_response(text) in ("abnormal", "normal", "unparseable")
