"""Forward passes of the encoders, decoders, proposal generator and classifier.

All functions take padded batches. Sequence masks are boolean ``[B, T]``
arrays with True on real positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from avaction.data import EOS, PAD, SOS, FeatureBundle
from avaction.model.params import HEADS, ModelConfig, ModelParams
from avaction.numerics import (
    ConfigurationError,
    Tensor,
    causal_mask,
    concat,
    conv1d_time,
    embedding,
    gelu,
    layer_norm,
    linear,
    multi_head_attention,
    sinusoidal_positions,
)


class SequenceLengthError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


@dataclass
class Batch:
    audio: np.ndarray
    visual: np.ndarray
    text: np.ndarray
    audio_mask: np.ndarray
    visual_mask: np.ndarray
    text_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.audio)


@dataclass
class Encodings:
    h_audio: Tensor  # [B, T_A, d_model_av]
    h_visual: Tensor  # [B, T_V, d_model_av]
    h_text: Tensor  # [B, T_T, d_model_text]
    audio_mask: np.ndarray
    visual_mask: np.ndarray
    text_mask: np.ndarray

    def __len__(self) -> int:
        return self.h_audio.shape[0]

    def select(self, idx) -> "Encodings":
        """Rows ``idx`` of the batch (differentiable)."""
        idx = np.asarray(idx)
        return Encodings(
            self.h_audio[idx], self.h_visual[idx], self.h_text[idx],
            self.audio_mask[idx], self.visual_mask[idx], self.text_mask[idx],
        )

    def repeat(self, n: int) -> "Encodings":
        """Each row repeated ``n`` times consecutively (for beam search)."""
        return self.select(np.repeat(np.arange(len(self)), n))


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    T = max(len(s) for s in seqs)
    d = seqs[0].shape[1]
    out = np.zeros((len(seqs), T, d))
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        mask[i, : len(s)] = True
    return out, mask


def collate(bundles: list[FeatureBundle]) -> Batch:
    a, am = _pad([b.audio for b in bundles])
    v, vm = _pad([b.visual for b in bundles])
    t, tm = _pad([b.text for b in bundles])
    return Batch(a, v, t, am, vm, tm)


def _ff(p: dict[str, Tensor], x: Tensor) -> Tensor:
    h = gelu(linear(x, p["in.w"], p["in.b"]))
    return linear(h, p["out.w"], p["out.b"])


def _norm(p: dict[str, Tensor], x: Tensor) -> Tensor:
    return layer_norm(x, p["gain"], p["shift"])


def _attn(p: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: p[k] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def _key_mask(mask: np.ndarray) -> np.ndarray:
    return mask[:, None, :]  # [B, 1, Tk]


def _positions(n: int, d: int) -> np.ndarray:
    return sinusoidal_positions(n, d)


def encode(batch: Batch | FeatureBundle | list[FeatureBundle], params: ModelParams) -> Encodings:
    """Audio-visual encoder E and text encoder T."""
    if isinstance(batch, FeatureBundle):
        batch = collate([batch])
    elif isinstance(batch, list):
        batch = collate(batch)
    c = params.config
    for name, arr, d in (("audio", batch.audio, c.d_audio), ("visual", batch.visual, c.d_visual),
                         ("text", batch.text, c.d_text)):
        if arr.shape[-1] != d:
            raise ConfigurationError(f"{name} feature width {arr.shape[-1]} != configured {d}")
    g = params.group
    h = {}
    masks = {"audio": batch.audio_mask, "visual": batch.visual_mask}
    for m, x in (("audio", batch.audio), ("visual", batch.visual)):
        lin = g(f"E.in_{m}")
        h[m] = linear(Tensor(x), lin["w"], lin["b"]) + _positions(x.shape[1], c.d_model_av)
    for i in range(c.enc_layers):
        for m in ("audio", "visual"):
            y = _norm(g(f"E.{i}.{m}.self_norm"), h[m])
            h[m] = h[m] + multi_head_attention(y, y, y, c.heads, _attn(g(f"E.{i}.{m}.self")), _key_mask(masks[m]))
        # each modality attends to the other one
        new = {}
        for m, o in (("audio", "visual"), ("visual", "audio")):
            q = _norm(g(f"E.{i}.{m}.cross_norm"), h[m])
            kv = _norm(g(f"E.{i}.{m}.cross_mem_norm"), h[o])
            new[m] = h[m] + multi_head_attention(q, kv, kv, c.heads, _attn(g(f"E.{i}.{m}.cross")), _key_mask(masks[o]))
        for m in ("audio", "visual"):
            h[m] = new[m] + _ff(g(f"E.{i}.{m}.ff"), _norm(g(f"E.{i}.{m}.ff_norm"), new[m]))
    h_a = _norm(g("E.out_audio"), h["audio"])
    h_v = _norm(g("E.out_visual"), h["visual"])

    lin = g("T.in")
    t = linear(Tensor(batch.text), lin["w"], lin["b"]) + _positions(batch.text.shape[1], c.d_model_text)
    for i in range(c.enc_layers):
        y = _norm(g(f"T.{i}.self_norm"), t)
        t = t + multi_head_attention(y, y, y, c.heads, _attn(g(f"T.{i}.self")), _key_mask(batch.text_mask))
        t = t + _ff(g(f"T.{i}.ff"), _norm(g(f"T.{i}.ff_norm"), t))
    h_t = _norm(g("T.out"), t)
    return Encodings(h_a, h_v, h_t, batch.audio_mask, batch.visual_mask, batch.text_mask)


def _memory(enc: Encodings, params: ModelParams, owner: str) -> tuple[Tensor, np.ndarray]:
    g = params.group
    parts = []
    for m, h in (("audio", enc.h_audio), ("visual", enc.h_visual), ("text", enc.h_text)):
        lin = g(f"{owner}.mem_{m}")
        parts.append(linear(h, lin["w"], lin["b"]))
    mem = concat(parts, axis=1)
    mask = np.concatenate([enc.audio_mask, enc.visual_mask, enc.text_mask], axis=1)
    return mem, mask


def embedding_table(params: ModelParams, head: str) -> Tensor:
    owner = HEADS[head]
    if params.config.share_embeddings:
        return params["D.embed"]
    return params[f"{owner}.embed"]


def embed_tokens(params: ModelParams, head: str, ids: np.ndarray) -> Tensor:
    return embedding(embedding_table(params, head), ids)


def decoder_forward(
    enc: Encodings,
    inputs: Tensor,
    head: str,
    params: ModelParams,
    input_mask: np.ndarray | None = None,
) -> Tensor:
    """Run decoder D or D' over embedded inputs ``[B, L, d]``; returns logits ``[B, L, V]``."""
    c = params.config
    if head not in HEADS:
        raise ConfigurationError(f"unknown decoder head {head!r}")
    owner = HEADS[head]
    L = inputs.shape[1]
    if L > c.max_len:
        raise SequenceLengthError(f"decoder input length {L} exceeds max_len {c.max_len}")
    g = params.group
    mem, mem_mask = _memory(enc, params, owner)
    x = inputs + _positions(L, c.d_model_dec)
    self_mask = causal_mask(L)[None]
    if input_mask is not None:
        self_mask = self_mask & input_mask[:, None, :]
    cross_mask = _key_mask(mem_mask)
    for i in range(c.dec_layers):
        y = _norm(g(f"{owner}.{i}.self_norm"), x)
        x = x + multi_head_attention(y, y, y, c.heads, _attn(g(f"{owner}.{i}.self")), self_mask)
        y = _norm(g(f"{owner}.{i}.cross_norm"), x)
        x = x + multi_head_attention(y, mem, mem, c.heads, _attn(g(f"{owner}.{i}.cross")), cross_mask)
        x = x + _ff(g(f"{owner}.{i}.ff"), _norm(g(f"{owner}.{i}.ff_norm"), x))
    x = _norm(g(f"{owner}.out_norm"), x)
    lin = g(f"{owner}.vocab")
    return linear(x, lin["w"], lin["b"])


def decoder_logits(enc: Encodings, tokens: np.ndarray, head: str, params: ModelParams) -> Tensor:
    """Teacher-forced logits for token prefixes ``[B, L]`` (padding = PAD)."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    return decoder_forward(enc, embed_tokens(params, head, tokens), head, params, tokens != PAD)


def decode_step(enc: Encodings, prefix, head: str, params: ModelParams) -> Tensor:
    """Next-token logits after ``prefix`` (which starts with ``<sos>``).

    ``prefix`` is one id list or a ``[B, L]`` array aligned with ``enc``.
    Returns ``[V]`` for a single prefix, else ``[B, V]``.
    """
    arr = np.asarray(prefix, dtype=np.int64)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    if arr.shape[1] == 0 or np.any(arr[:, 0] != SOS):
        raise PreconditionError("decoder prefix must start with <sos>")
    logits = decoder_logits(enc, arr, head, params)[:, -1, :]
    return logits[0] if single else logits


def teacher_forcing_arrays(sequences: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Decoder inputs ``[<sos>, y...]`` and targets ``[y..., <eos>]``, PAD-padded."""
    L = max(len(s) for s in sequences) + 1
    inp = np.full((len(sequences), L), PAD, dtype=np.int64)
    tgt = np.full((len(sequences), L), PAD, dtype=np.int64)
    for i, s in enumerate(sequences):
        inp[i, 0] = SOS
        inp[i, 1 : len(s) + 1] = s
        tgt[i, : len(s)] = s
        tgt[i, len(s)] = EOS
    return inp, tgt


# --------------------------------------------------------------------------
# proposal generator


def propose_segments(
    enc: Encodings,
    params: ModelParams,
    threshold: float = 0.5,
    frame_hop: float = 1.0,
) -> list[list[tuple[float, float, float]]]:
    """Score anchors with multi-scale temporal convolutions over each stream.

    Each kernel bank of size ``k`` emits, per window, a confidence logit, a
    centre shift and a log-length change relative to the window. Returns, per
    batch row, ``(onset, offset, confidence)`` tuples in seconds with
    confidence strictly above ``threshold``, most confident first.
    """
    out = []
    for b in range(len(enc)):
        props = []
        for m, h, mask in (("audio", enc.h_audio, enc.audio_mask), ("visual", enc.h_visual, enc.visual_mask)):
            T = int(mask[b].sum())
            x = h.data[b, :T]
            for k in params.config.proposal_kernels:
                if T < k:
                    continue
                kern = params[f"G.{m}.k{k}.kernel"]
                bias = params[f"G.{m}.k{k}.bias"]
                o = conv1d_time(Tensor(x), kern, bias=bias).data
                conf = 1.0 / (1.0 + np.exp(-o[:, 0]))
                centre = np.arange(len(o)) + k / 2.0 + np.tanh(o[:, 1]) * k / 2.0
                length = k * np.exp(np.clip(o[:, 2], -3.0, 3.0))
                centre = np.clip(centre, 0.0, T)
                on = np.maximum(centre - length / 2.0, 0.0)
                off = np.minimum(centre + length / 2.0, float(T))
                for i in np.nonzero(conf > threshold)[0]:
                    props.append((on[i] * frame_hop, off[i] * frame_hop, float(conf[i])))
        props.sort(key=lambda p: (-p[2], p[0], p[1]))
        out.append(props)
    return out


# --------------------------------------------------------------------------
# semantic classifier


def mean_pool(x: Tensor, weights: np.ndarray | Tensor | None = None) -> Tensor:
    """Weighted mean over axis 1 of ``x[B, T, d]``; weights ``[B, T]``."""
    if weights is None:
        return x.mean(axis=1)
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
    num = (x * w.reshape(*w.shape, 1)).sum(axis=1)
    den = w.sum(axis=1, keepdims=True) + 1e-6
    return num / den


def classify_semantic(
    y_embedding: Tensor,
    c_embedding: Tensor,
    params: ModelParams,
    y_weights=None,
    c_weights=None,
) -> Tensor:
    """Probability that sequence ``y`` and caption ``c`` share semantic content.

    Inputs are ``[B, T, d]`` (or unbatched ``[T, d]``); returns ``[B]`` (or a
    scalar). Optional weights mark padding or soft sequence lengths.
    """
    y_embedding = y_embedding if isinstance(y_embedding, Tensor) else Tensor(y_embedding)
    c_embedding = c_embedding if isinstance(c_embedding, Tensor) else Tensor(c_embedding)
    single = y_embedding.ndim == 2
    if single:
        y_embedding = y_embedding.reshape(1, *y_embedding.shape)
        c_embedding = c_embedding.reshape(1, *c_embedding.shape)
    if y_embedding.shape[1] == 0 or c_embedding.shape[1] == 0:
        raise PreconditionError("semantic classifier needs non-empty sequences")
    pooled = concat([mean_pool(y_embedding, y_weights), mean_pool(c_embedding, c_weights)], axis=-1)
    g = params.group
    hid = linear(pooled, g("S.hidden")["w"], g("S.hidden")["b"]).relu()
    logit = linear(hid, g("S.out")["w"], g("S.out")["b"])
    prob = logit.reshape(logit.shape[0]).sigmoid()
    return prob.reshape(()) if single else prob


def soft_token_embedding(soft: Tensor, table: np.ndarray | Tensor) -> Tensor:
    """Expected embedding rows under soft token weights ``[..., V]``."""
    return soft @ table
