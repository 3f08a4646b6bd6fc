"""Expandable dual-embedding extractor.

The extractor pairs a frozen pretrained encoder with an adaptable encoder
split into a shared shallow stack and a list of specialized last-block
branches.  Each incremental session freezes the current branch and appends a
trainable clone of it.  Inference uses the pretrained embedding concatenated
with the newest branch, so the prototype dimension never changes.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import encoder as enc
from .encoder import EncoderConfig, ParamSet
from .errors import IncompatibleBranch, InvalidVariant, NoSuchBranch
from .utils import atomic_write_text, canonical_json

P_ONLY = "P_ONLY"
F_ONLY = "F_ONLY"
P_PLUS_F = "P_PLUS_F"
P_PLUS_EXPANDED_F = "P_PLUS_EXPANDED_F"
VARIANTS = (P_ONLY, F_ONLY, P_PLUS_F, P_PLUS_EXPANDED_F)

# per-branch forward counts, keyed "pre" or "branch<j>"
branch_calls: Counter = Counter()


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise InvalidVariant(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return variant


@dataclass
class EDEState:
    cfg: EncoderConfig
    psi_pre: ParamSet
    psi_g: ParamSet
    branches: list = field(default_factory=list)

    @property
    def active(self) -> int:
        return len(self.branches) - 1

    @property
    def dims(self) -> tuple[int, int]:
        return self.cfg.model_dim, self.cfg.model_dim

    @property
    def embed_dim(self) -> int:
        return sum(self.dims)

    def frozen_params(self) -> ParamSet:
        """Every tensor that must stay fixed: pretrained, shallow and non-active branches."""
        parts = [self.psi_pre.prefixed("pre."), self.psi_g.prefixed("g.")]
        parts += [b.prefixed(f"s{j}.") for j, b in enumerate(self.branches[:-1])]
        return parts[0].merged(*parts[1:])


def _check_shapes(params: ParamSet, cfg: EncoderConfig, what: str):
    expected = enc.init_params(cfg).shapes()
    if params.shapes() != expected:
        missing = set(expected) - set(params.shapes())
        detail = f"missing {sorted(missing)[:2]}" if missing else "shape mismatch"
        raise IncompatibleBranch(f"{what} does not match encoder config ({detail})")


def build_base(pretrained: ParamSet, finetuned: ParamSet, cfg: EncoderConfig) -> EDEState:
    _check_shapes(pretrained, cfg, "pretrained encoder")
    _check_shapes(finetuned, cfg, "finetuned encoder")
    shallow = set(enc.shallow_names(cfg))
    deep = set(enc.deep_names(cfg))
    psi_pre = pretrained.clone().freeze()
    psi_g = finetuned.select(lambda n: n in shallow).clone().freeze()
    branch0 = finetuned.select(lambda n: n in deep).clone().unfreeze()
    return EDEState(cfg, psi_pre, psi_g, [branch0])


def expand(state: EDEState) -> EDEState:
    """Freeze the active branch and append a trainable deep copy of it."""
    old = [b if j < state.active else b.clone().freeze() for j, b in enumerate(state.branches)]
    new = state.branches[-1].clone().unfreeze()
    return EDEState(state.cfg, state.psi_pre, state.psi_g, old + [new])


# --------------------------------------------------------------------------
# forward passes (no grad; training builds its own differentiable graph)


@torch.no_grad()
def pre_embed(state: EDEState, x) -> torch.Tensor:
    branch_calls["pre"] += 1
    return enc.encode_batch(x, state.psi_pre, state.cfg)


@torch.no_grad()
def shallow_tokens(state: EDEState, x) -> torch.Tensor:
    return enc.shallow_forward(x, state.psi_g, state.cfg)


@torch.no_grad()
def branch_from_tokens(state: EDEState, tokens, branch_index: int) -> torch.Tensor:
    if not 0 <= branch_index <= state.active:
        raise NoSuchBranch(f"branch {branch_index} not in [0, {state.active}]")
    branch_calls[f"branch{branch_index}"] += 1
    return enc.deep_forward(tokens, state.branches[branch_index], state.cfg)


def embed_branch(state: EDEState, x, branch_index: int) -> np.ndarray:
    if not 0 <= branch_index <= state.active:
        raise NoSuchBranch(f"branch {branch_index} not in [0, {state.active}]")
    out = branch_from_tokens(state, shallow_tokens(state, x), branch_index).numpy()
    return out[0] if np.ndim(getattr(x, "values", x)) == 2 else out


def variant_embed(state: EDEState, x, variant: str = P_PLUS_EXPANDED_F, pre=None, tokens=None) -> np.ndarray:
    """Embedding used by one ablation variant.

    ``pre`` and ``tokens`` may carry precomputed pretrained embeddings and
    shallow tokens for the same batch (both branches' inputs are frozen).
    """
    check_variant(variant)
    single = x is not None and np.ndim(getattr(x, "values", x)) == 2
    parts = []
    if variant != F_ONLY:
        parts.append(pre if pre is not None else pre_embed(state, x))
    if variant != P_ONLY:
        branch = 0 if variant in (F_ONLY, P_PLUS_F) else state.active
        toks = tokens if tokens is not None else shallow_tokens(state, x)
        parts.append(branch_from_tokens(state, toks, branch))
    out = torch.cat([torch.as_tensor(p) for p in parts], dim=-1).numpy()
    return out[0] if single else out


def embed(state: EDEState, x) -> np.ndarray:
    return variant_embed(state, x, P_PLUS_EXPANDED_F)


# --------------------------------------------------------------------------
# persistence


def save_ede(state: EDEState, directory, variant: str = P_PLUS_EXPANDED_F) -> Path:
    directory = Path(directory)
    digest = state.cfg.digest()
    enc.save_checkpoint(state.psi_pre, directory / "pre.ckpt", digest)
    enc.save_checkpoint(state.psi_g, directory / "shallow.ckpt", digest)
    for j, b in enumerate(state.branches):
        enc.save_checkpoint(b, directory / f"branch_{j}.ckpt", digest)
    manifest = {
        "branches": [f"branch_{j}.ckpt" for j in range(len(state.branches))],
        "active": state.active,
        "dims": list(state.dims),
        "variant": variant,
        "config_digest": digest,
        "encoder": json.loads(canonical_json(state.cfg.__dict__)),
    }
    atomic_write_text(directory / "ede.json", canonical_json(manifest) + "\n")
    return directory


def load_ede(directory) -> tuple[EDEState, str]:
    directory = Path(directory)
    manifest = json.loads((directory / "ede.json").read_text())
    cfg = EncoderConfig(**manifest["encoder"])
    pre = enc.load_checkpoint(directory / "pre.ckpt")
    g = enc.load_checkpoint(directory / "shallow.ckpt")
    branches = [enc.load_checkpoint(directory / name) for name in manifest["branches"]]
    state = EDEState(cfg, pre, g, branches)
    if state.active != manifest["active"]:
        raise IncompatibleBranch("active index does not match branch list")
    return state, manifest["variant"]
