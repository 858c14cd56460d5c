"""The full model as named parameter groups, plus checkpoint IO.

Checkpoint layout (little-endian)::

    b"IADCKPT\\0" | u64 header length | JSON header | raw tensor bytes

The header is compact JSON with sorted keys and lists every tensor's dtype,
shape, byte offset and group, a sha256 per group and free-form metadata. With
tensors stored in name order, loading and re-saving reproduces the same bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
import torch.nn as nn

from .config import ModelConfig
from .encoder import VisionEncoder
from .lm import PromptEmbedding, Template, TemplateBank, TinyLM, Vocabulary, assemble_prompt
from .prompts import textual_prompt_generator

GROUPS = ("backbone", "query_base", "resampler", "projection", "lorra", "vpg", "tpg", "lm")
# groups standing in for pretrained components; never updated after the foundation step
FOUNDATION_GROUPS = ("backbone", "query_base", "resampler", "projection")

MAGIC = b"IADCKPT\0"
FORMAT_VERSION = 1

_DTYPES = {torch.float32: "float32", torch.float64: "float64"}


def group_of(name: str) -> str:
    if name == "encoder.resampler.base_queries":
        return "query_base"
    prefix = {
        "encoder.backbone.": "backbone",
        "encoder.resampler.": "resampler",
        "encoder.projection.": "projection",
        "encoder.lorra.": "lorra",
        "encoder.vpg.": "vpg",
        "tpg.": "tpg",
        "lm.": "lm",
    }
    for p, g in prefix.items():
        if name.startswith(p):
            return g
    raise KeyError(f"parameter {name!r} belongs to no group")


@dataclasses.dataclass(frozen=True)
class Flags:
    use_tpg: bool = True
    use_lorra: bool = True
    use_vpg: bool = True

    @property
    def name(self) -> str:
        on = [n for n, f in (("tpg", self.use_tpg), ("lorra", self.use_lorra), ("vpg", self.use_vpg)) if f]
        return "+".join(on) or "none"


class ModelBundle(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, flags: Flags | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.flags = flags or Flags()
        self.vocab = Vocabulary.load()
        self.bank = TemplateBank.load()
        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.init_seed)
            self.encoder = VisionEncoder(self.cfg)
            self.tpg = textual_prompt_generator(self.cfg)
            self.lm = TinyLM(len(self.vocab), self.cfg.d_llm, self.cfg.lm_blocks, self.cfg.lm_heads, self.cfg.context)

    # -- parameter groups ----------------------------------------------------

    def group_params(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        out: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[group_of(name)].append((name, p))
        return out

    def set_trainable(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        for name, p in self.named_parameters():
            p.requires_grad_(group_of(name) in groups)

    def trainable_groups(self) -> list[str]:
        return [g for g, ps in self.group_params().items() if ps and all(p.requires_grad for _, p in ps)]

    def checksums(self) -> dict[str, str]:
        return {g: _sha(ps) for g, ps in self.group_params().items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for g, s in sorted(self.checksums().items()):
            h.update(f"{g}:{s};".encode())
        return h.hexdigest()

    # -- forward helpers -----------------------------------------------------

    @property
    def dtype(self) -> torch.dtype:
        return self.lm.tok_emb.weight.dtype

    def needs(self, mode: str) -> tuple[bool, bool]:
        """(needs visual tokens, needs expert tokens) for a template mode."""
        return mode in ("joint", "image_only"), mode in ("joint", "expert_only")

    def prompt_blocks(self, feats: torch.Tensor | None, maps: torch.Tensor, mode: str):
        """Visual and expert token blocks for a batch (either may be None)."""
        want_v, want_e = self.needs(mode)
        maps = maps.to(self.dtype)
        t_v = (
            self.encoder.encode_features(feats, maps, self.flags.use_lorra, self.flags.use_vpg)
            if want_v
            else None
        )
        t_e = self.tpg(maps) if want_e else None
        return t_v, t_e

    def prompts(self, feats, maps, templates: list[Template]) -> list[PromptEmbedding]:
        modes = {t.mode for t in templates}
        if len(modes) != 1:
            raise ValueError("a batch must use a single template mode")
        t_v, t_e = self.prompt_blocks(feats, maps, modes.pop())
        return [
            assemble_prompt(
                self.lm,
                self.vocab,
                tpl,
                None if t_v is None else t_v[i],
                None if t_e is None else t_e[i],
            )
            for i, tpl in enumerate(templates)
        ]

    def inference_mode(self) -> str:
        return "joint" if self.flags.use_tpg else "image_only"


def _sha(params) -> str:
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# -- checkpoint IO -------------------------------------------------------------


def save_checkpoint(bundle: ModelBundle, path: str | Path, frozen: Iterable[str] = (), meta: dict | None = None) -> str:
    """Write ``bundle`` to ``path``; returns the whole-model checksum."""
    state = {k: v.detach().cpu().contiguous() for k, v in bundle.state_dict().items()}
    frozen = set(frozen)
    tensors, blobs, offset = {}, [], 0
    for name in sorted(state):
        t = state[name]
        if t.dtype not in _DTYPES:
            raise TypeError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(t.numpy().dtype.newbyteorder("<"), copy=False).tobytes()
        tensors[name] = {
            "dtype": _DTYPES[t.dtype],
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": len(raw),
            "group": group_of(name),
        }
        blobs.append(raw)
        offset += len(raw)
    sums = bundle.checksums()
    header = {
        "format": "iadlmm-checkpoint",
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(bundle.cfg),
        "flags": dataclasses.asdict(bundle.flags),
        "groups": {g: {"frozen": g in frozen, "sha256": sums[g]} for g in GROUPS},
        "model_sha256": bundle.checksum(),
        "vocab_version": bundle.vocab.version,
        "templates_version": bundle.bank.version,
        "meta": meta or {},
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)
    return header["model_sha256"]


class CheckpointError(RuntimeError):
    pass


def read_checkpoint(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    base = 16 + n
    tensors = {}
    for name, info in header["tensors"].items():
        start = base + info["offset"]
        arr = np.frombuffer(data, dtype="<" + {"float32": "f4", "float64": "f8"}[info["dtype"]],
                            count=int(np.prod(info["shape"], dtype=np.int64)), offset=start)
        tensors[name] = torch.from_numpy(arr.reshape(info["shape"]).copy())
    return header, tensors


def load_checkpoint(path: str | Path, flags: Flags | None = None) -> tuple[ModelBundle, dict[str, Any]]:
    header, tensors = read_checkpoint(path)
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["model_config"].items()})
    bundle = ModelBundle(cfg, flags or Flags(**header["flags"]))
    bundle.to(next(iter(tensors.values())).dtype)
    load_groups(bundle, tensors, GROUPS)
    return bundle, header


def load_groups(bundle: ModelBundle, tensors: dict[str, torch.Tensor], groups: Iterable[str]) -> None:
    """Copy the named groups from ``tensors`` into ``bundle`` in place."""
    groups = set(groups)
    state = bundle.state_dict()
    missing = [k for k in state if group_of(k) in groups and k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing[:3]}...")
    with torch.no_grad():
        for k, v in state.items():
            if group_of(k) in groups:
                if tensors[k].shape != v.shape:
                    raise CheckpointError(f"shape mismatch for {k}: {tuple(tensors[k].shape)} vs {tuple(v.shape)}")
                v.copy_(tensors[k])


__all__ = [
    "GROUPS",
    "FOUNDATION_GROUPS",
    "Flags",
    "ModelBundle",
    "group_of",
    "save_checkpoint",
    "read_checkpoint",
    "load_checkpoint",
    "load_groups",
    "CheckpointError",
]
