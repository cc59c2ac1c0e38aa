from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from avaction.numerics import ConfigurationError, Tensor

OWNERS = ("E", "T", "D", "D'", "G", "S")
HEADS = {"caption": "D", "action": "D'"}


@dataclass
class ModelConfig:
    d_audio: int = 32
    d_visual: int = 48
    d_text: int = 16
    d_model_av: int = 32
    d_model_text: int = 16
    d_model_dec: int = 32
    ff_mult: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    word_vocab: int = 70
    action_vocab: int = 35
    max_len: int = 40
    max_frames: int = 256
    classifier_hidden: int = 64
    proposal_kernels: tuple[int, ...] = (3, 5)
    share_embeddings: bool = False

    @classmethod
    def full_scale(cls, word_vocab: int, action_vocab: int = 4 + 97 + 300) -> "ModelConfig":
        """Widths of the full-size model: 768/1024/300 features, 768/300 model dims."""
        return cls(
            d_audio=768, d_visual=1024, d_text=300,
            d_model_av=768, d_model_text=300, d_model_dec=300,
            word_vocab=word_vocab, action_vocab=action_vocab, classifier_hidden=300,
        )

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v <= 0:
                raise ConfigurationError(f"{f.name} must be positive, got {v}")
        for name in ("d_model_av", "d_model_text", "d_model_dec"):
            if getattr(self, name) % self.heads:
                raise ConfigurationError(f"{name}={getattr(self, name)} not divisible by heads={self.heads}")
        if self.share_embeddings and self.word_vocab != self.action_vocab:
            raise ConfigurationError("shared decoder embeddings need equal vocabulary sizes")

    def vocab(self, head: str) -> int:
        return self.word_vocab if head == "caption" else self.action_vocab

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["proposal_kernels"] = list(self.proposal_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["proposal_kernels"] = tuple(d.get("proposal_kernels", (3, 5)))
        return cls(**d)


class ModelParams:
    """Named parameter tensors, each owned by exactly one submodule."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.tensors: dict[str, Tensor] = {}
        self.owner: dict[str, str] = {}
        self._groups: dict[str, dict[str, Tensor]] = {}
        self.flags: set[str] = set()  # completed training phases

    def add(self, owner: str, name: str, value: np.ndarray) -> None:
        if owner not in OWNERS:
            raise ValueError(f"unknown owner {owner!r}")
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self.tensors[name] = Tensor(value, requires_grad=True, name=name)
        self.owner[name] = owner
        self._groups.clear()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, owners=None) -> list[str]:
        if owners is None:
            return list(self.tensors)
        owners = {owners} if isinstance(owners, str) else set(owners)
        return [n for n in self.tensors if self.owner[n] in owners]

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Tensors under ``prefix.``, keyed by the remaining suffix."""
        if prefix not in self._groups:
            p = prefix + "."
            self._groups[prefix] = {n[len(p):]: t for n, t in self.tensors.items() if n.startswith(p)}
        return self._groups[prefix]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self, owners=None) -> dict[str, np.ndarray]:
        """Accumulated gradients (zeros where none arrived)."""
        return {
            n: (self.tensors[n].grad if self.tensors[n].grad is not None else np.zeros_like(self.tensors[n].data))
            for n in self.names(owners)
        }

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for n, t in self.tensors.items():
            out.add(self.owner[n], n, t.data.copy())
        out.flags = set(self.flags)
        return out

    def count(self, owners=None) -> int:
        return sum(self.tensors[n].data.size for n in self.names(owners))


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape if shape is not None else (fan_in, fan_out))


def _add_linear(p: ModelParams, rng, owner, name, d_in, d_out) -> None:
    p.add(owner, f"{name}.w", _xavier(rng, d_in, d_out))
    p.add(owner, f"{name}.b", np.zeros(d_out))


def _add_norm(p: ModelParams, owner, name, d) -> None:
    p.add(owner, f"{name}.gain", np.ones(d))
    p.add(owner, f"{name}.shift", np.zeros(d))


def _add_attention(p: ModelParams, rng, owner, name, d) -> None:
    for k in ("q", "k", "v", "o"):
        p.add(owner, f"{name}.w{k}", _xavier(rng, d, d))
        p.add(owner, f"{name}.b{k}", np.zeros(d))


def _add_ff(p: ModelParams, rng, owner, name, d, mult) -> None:
    _add_linear(p, rng, owner, f"{name}.in", d, mult * d)
    _add_linear(p, rng, owner, f"{name}.out", mult * d, d)


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    config.validate()
    rng = np.random.default_rng([seed, 2024])
    c = config
    p = ModelParams(c)
    # audio-visual encoder E
    _add_linear(p, rng, "E", "E.in_audio", c.d_audio, c.d_model_av)
    _add_linear(p, rng, "E", "E.in_visual", c.d_visual, c.d_model_av)
    for i in range(c.enc_layers):
        for m in ("audio", "visual"):
            pre = f"E.{i}.{m}"
            _add_norm(p, "E", f"{pre}.self_norm", c.d_model_av)
            _add_attention(p, rng, "E", f"{pre}.self", c.d_model_av)
            _add_norm(p, "E", f"{pre}.cross_norm", c.d_model_av)
            _add_norm(p, "E", f"{pre}.cross_mem_norm", c.d_model_av)
            _add_attention(p, rng, "E", f"{pre}.cross", c.d_model_av)
            _add_norm(p, "E", f"{pre}.ff_norm", c.d_model_av)
            _add_ff(p, rng, "E", f"{pre}.ff", c.d_model_av, c.ff_mult)
    _add_norm(p, "E", "E.out_audio", c.d_model_av)
    _add_norm(p, "E", "E.out_visual", c.d_model_av)
    # text encoder T
    _add_linear(p, rng, "T", "T.in", c.d_text, c.d_model_text)
    for i in range(c.enc_layers):
        _add_norm(p, "T", f"T.{i}.self_norm", c.d_model_text)
        _add_attention(p, rng, "T", f"T.{i}.self", c.d_model_text)
        _add_norm(p, "T", f"T.{i}.ff_norm", c.d_model_text)
        _add_ff(p, rng, "T", f"T.{i}.ff", c.d_model_text, c.ff_mult)
    _add_norm(p, "T", "T.out", c.d_model_text)
    # caption decoder D and action decoder D'
    for head, owner in HEADS.items():
        pre = owner
        V = c.vocab(head)
        if not (c.share_embeddings and head == "action"):
            p.add(owner, f"{pre}.embed", rng.normal(0.0, 1.0, (V, c.d_model_dec)))
        _add_linear(p, rng, owner, f"{pre}.mem_audio", c.d_model_av, c.d_model_dec)
        _add_linear(p, rng, owner, f"{pre}.mem_visual", c.d_model_av, c.d_model_dec)
        _add_linear(p, rng, owner, f"{pre}.mem_text", c.d_model_text, c.d_model_dec)
        for i in range(c.dec_layers):
            _add_norm(p, owner, f"{pre}.{i}.self_norm", c.d_model_dec)
            _add_attention(p, rng, owner, f"{pre}.{i}.self", c.d_model_dec)
            _add_norm(p, owner, f"{pre}.{i}.cross_norm", c.d_model_dec)
            _add_attention(p, rng, owner, f"{pre}.{i}.cross", c.d_model_dec)
            _add_norm(p, owner, f"{pre}.{i}.ff_norm", c.d_model_dec)
            _add_ff(p, rng, owner, f"{pre}.{i}.ff", c.d_model_dec, c.ff_mult)
        _add_norm(p, owner, f"{pre}.out_norm", c.d_model_dec)
        _add_linear(p, rng, owner, f"{pre}.vocab", c.d_model_dec, V)
    # proposal generator G: one bank per modality and kernel size
    for m in ("audio", "visual"):
        for k in c.proposal_kernels:
            p.add("G", f"G.{m}.k{k}.kernel", _xavier(rng, k * c.d_model_av, 3, (k, c.d_model_av, 3)))
            p.add("G", f"G.{m}.k{k}.bias", np.zeros(3))
    # semantic classifier S
    _add_linear(p, rng, "S", "S.hidden", 2 * c.d_text, c.classifier_hidden)
    _add_linear(p, rng, "S", "S.out", c.classifier_hidden, 1)
    return p
