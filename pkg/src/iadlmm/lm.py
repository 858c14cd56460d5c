"""Tiny causal language model, word-level tokenizer and instruction templating.

Prompts are sequences of embeddings: text tokens go through the embedding
table, while ``<ImageFeature>`` / ``<ExpertFeature>`` placeholders are replaced
by continuous token blocks from the vision encoder and the textual prompt
generator. Loss is taken on response positions only.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import Block

PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE = "<pad>", "<s>", "</s>", "<Img>", "</Img>"
IMAGE_PH, EXPERT_PH = "<ImageFeature>", "<ExpertFeature>"
SPECIALS = (PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE)
MODES = ("joint", "expert_only", "image_only")
ASSETS = Path(__file__).parent / "assets"

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[A-Za-z0-9]+|[^\sA-Za-z0-9]")
_NO_SPACE_BEFORE = set(",.?!:;")


class TokenizerError(ValueError):
    pass


class Vocabulary:
    def __init__(self, tokens: list[str], version: str = "vocab-1"):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"first tokens must be the reserved specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        self.version = version

    @classmethod
    def load(cls) -> "Vocabulary":
        text = (ASSETS / "vocab.txt").read_text()
        lines = text.splitlines()
        version = lines[0].lstrip("# ").split(":")[0] if lines and lines[0].startswith("#") else "vocab"
        return cls([ln for ln in lines if ln and not ln.startswith("#")], version)

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def tokenize(self, text: str) -> list[int]:
        words = _TOKEN_RE.findall(text)
        missing = [w for w in words if w not in self.index]
        if missing:
            raise TokenizerError(f"out-of-vocabulary word(s): {', '.join(dict.fromkeys(missing))}")
        return [self.index[w] for w in words]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            tok = self.tokens[int(i)]
            if out and tok not in _NO_SPACE_BEFORE:
                out.append(" ")
            out.append(tok)
        return "".join(out)


@dataclass(frozen=True)
class Template:
    text: str
    mode: str

    def __post_init__(self):
        n_img, n_exp = self.text.count(IMAGE_PH), self.text.count(EXPERT_PH)
        want = {"joint": (1, 1), "expert_only": (0, 1), "image_only": (1, 0)}[self.mode]
        if (n_img, n_exp) != want:
            raise ValueError(f"{self.mode} template needs placeholders {want}, got {(n_img, n_exp)}: {self.text!r}")


@dataclass(frozen=True)
class TemplateBank:
    templates: dict[str, tuple[Template, ...]]
    responses: dict[str, str]
    version: str

    @classmethod
    def load(cls) -> "TemplateBank":
        doc = json.loads((ASSETS / "templates.json").read_text())
        templates = {m: tuple(Template(t, m) for t in doc["templates"][m]) for m in MODES}
        return cls(templates, dict(doc["responses"]), doc["version"])

    def response(self, abnormal: bool) -> str:
        return self.responses["abnormal" if abnormal else "normal"]


@dataclass
class PromptEmbedding:
    embeds: torch.Tensor  # (T, D)
    ids: torch.Tensor  # (T,) token ids, -1 where the position holds a continuous block
    spans: list[tuple[str, int, int]] = field(default_factory=list)  # (kind, start, stop)

    def __len__(self) -> int:
        return self.embeds.shape[0]

    def span(self, kind: str) -> tuple[int, int] | None:
        for k, a, b in self.spans:
            if k == kind:
                return a, b
        return None


class TinyLM(nn.Module):
    """Decoder-only transformer operating on embedding sequences."""

    def __init__(self, vocab_size: int, dim: int = 128, depth: int = 2, heads: int = 4, context: int = 128):
        super().__init__()
        self.context = context
        self.tok_emb = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.tok_emb.weight, std=0.5)
        self.pos_emb = nn.Parameter(torch.randn(context, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size)

    def embed_tokens(self, ids) -> torch.Tensor:
        return self.tok_emb(torch.as_tensor(ids, dtype=torch.long))

    def forward(self, embeds: torch.Tensor) -> torch.Tensor:
        """``(B, T, D)`` embeddings -> ``(B, T, V)`` next-token logits."""
        T = embeds.shape[1]
        if T > self.context:
            raise ValueError(f"sequence length {T} exceeds context {self.context}")
        x = embeds + self.pos_emb[:T]
        for blk in self.blocks:
            x = blk(x, causal=True)
        return self.head(self.ln_f(x))


def assemble_prompt(
    lm: TinyLM,
    vocab: Vocabulary,
    template: Template,
    t_v: torch.Tensor | None = None,
    t_e: torch.Tensor | None = None,
) -> PromptEmbedding:
    """Embed ``template`` with placeholders replaced by the given token blocks."""
    blocks = {IMAGE_PH: ("image", t_v), EXPERT_PH: ("expert", t_e)}
    ids = vocab.tokenize(template.text)
    pieces, id_pieces, spans = [], [], []
    pos = 0
    run: list[int] = []

    def flush():
        nonlocal pos, run
        if run:
            pieces.append(lm.embed_tokens(run))
            id_pieces.append(torch.tensor(run, dtype=torch.long))
            spans.append(("text", pos, pos + len(run)))
            pos += len(run)
            run = []

    for i in ids:
        tok = vocab.tokens[i]
        if tok in blocks:
            kind, block = blocks[tok]
            if block is None:
                raise ValueError(f"{template.mode} template requires the {kind} token block")
            flush()
            pieces.append(block.to(lm.tok_emb.weight.dtype))
            id_pieces.append(torch.full((block.shape[0],), -1, dtype=torch.long))
            spans.append((kind, pos, pos + block.shape[0]))
            pos += block.shape[0]
        else:
            run.append(i)
    flush()
    return PromptEmbedding(torch.cat(pieces), torch.cat(id_pieces), spans)


def with_response(lm: TinyLM, vocab: Vocabulary, prompt: PromptEmbedding, response: str | list[int]) -> PromptEmbedding:
    """Append response tokens plus ``</s>``; the appended span is the supervised part."""
    ids = vocab.tokenize(response) if isinstance(response, str) else list(response)
    if not ids:
        raise ValueError("target response is empty")
    ids = ids + [vocab[EOS]]
    n = len(prompt)
    return PromptEmbedding(
        torch.cat([prompt.embeds, lm.embed_tokens(ids)]),
        torch.cat([prompt.ids, torch.tensor(ids, dtype=torch.long)]),
        prompt.spans + [("response", n, n + len(ids))],
    )


def pad_batch(seqs: list[PromptEmbedding]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad to a batch: embeddings, target ids and a supervised-position mask.

    ``targets[b, t]`` is the token to be predicted from position ``t``. Right
    padding is harmless under causal attention.
    """
    T = max(len(s) for s in seqs)
    D = seqs[0].embeds.shape[1]
    dtype = seqs[0].embeds.dtype
    emb = torch.zeros(len(seqs), T, D, dtype=dtype)
    targets = torch.zeros(len(seqs), T, dtype=torch.long)
    mask = torch.zeros(len(seqs), T, dtype=torch.bool)
    for b, s in enumerate(seqs):
        n = len(s)
        emb[b, :n] = s.embeds
        span = s.span("response")
        if span is None:
            continue
        a, z = span
        # logits at position p-1 predict the token at p
        targets[b, a - 1 : z - 1] = s.ids[a:z]
        mask[b, a - 1 : z - 1] = True
    return emb, targets, mask


def lm_loss(lm: TinyLM, seqs: PromptEmbedding | list[PromptEmbedding]) -> torch.Tensor:
    """Mean cross-entropy over response positions of each sequence."""
    if isinstance(seqs, PromptEmbedding):
        seqs = [seqs]
    emb, targets, mask = pad_batch(seqs)
    if not mask.any():
        raise ValueError("no supervised (response) positions in batch")
    logits = lm(emb)
    return F.cross_entropy(logits[mask], targets[mask])


@torch.no_grad()
def generate_ids(lm: TinyLM, vocab: Vocabulary, prompts: list[PromptEmbedding], max_tokens: int = 12) -> list[list[int]]:
    """Greedy decoding for a batch of equal-length prompts."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    lengths = {len(p) for p in prompts}
    if len(lengths) != 1:
        raise ValueError("generate_ids needs prompts of equal length")
    x = torch.stack([p.embeds for p in prompts])
    out: list[list[int]] = [[] for _ in prompts]
    done = [False] * len(prompts)
    eos = vocab[EOS]
    for _ in range(max_tokens):
        if x.shape[1] >= lm.context:
            break
        nxt = lm(x)[:, -1].argmax(-1)
        for b, t in enumerate(nxt.tolist()):
            if not done[b]:
                if t == eos:
                    done[b] = True
                else:
                    out[b].append(t)
        if all(done):
            break
        x = torch.cat([x, lm.embed_tokens(nxt)[:, None]], dim=1)
    return out


def generate(lm: TinyLM, vocab: Vocabulary, prompt: PromptEmbedding, max_tokens: int = 12) -> str:
    return vocab.detokenize(generate_ids(lm, vocab, [prompt], max_tokens)[0])


def parse_response(text: str) -> str:
    """``"abnormal"`` for a leading yes, ``"normal"`` for a leading no, else ``"unparseable"``."""
    m = re.match(r"\s*(yes|no)\b", text, flags=re.IGNORECASE)
    if not m:
        return "unparseable"
    return "abnormal" if m.group(1).lower() == "yes" else "normal"


__all__ = [
    "Vocabulary",
    "TokenizerError",
    "Template",
    "TemplateBank",
    "PromptEmbedding",
    "TinyLM",
    "assemble_prompt",
    "with_response",
    "pad_batch",
    "lm_loss",
    "generate_ids",
    "generate",
    "parse_response",
    "MODES",
]
