"""Synthetic kitchen-world datasets and the on-disk manifest format.

A dataset is a header (feature dims, vocabularies, the fixed word-embedding
lexicon) plus a list of :class:`SegmentRecord`. Features are generated from a
latent action sequence per segment: the visual stream encodes the verb motion
and the objects, the audio stream weakly encodes the verb, and the text
stream holds embedded subtitle words or a single ``<unk>`` row.

On-disk layout written by :func:`write_dataset`::

    manifest.jsonl      header line, then one SegmentRecord per line
    lexicon.f64         word and action semantic-embedding tables
    features/<video>_<segment>.f64

``.f64`` files are a little-endian uint32 array count, then per array a
uint32 ndim, ndim uint32 extents and the float64 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MANIFEST_SCHEMA = "avaction.manifest"
MANIFEST_VERSION = 1
SPECIALS = ("<pad>", "<sos>", "<eos>", "<unk>")
PAD, SOS, EOS, UNK = range(4)


class DataError(ValueError):
    """A record or dataset violates its contract."""


class ManifestParseError(DataError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class SchemaError(DataError):
    pass


class MissingFeatureFileError(DataError, FileNotFoundError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# action sequences


@dataclass(frozen=True)
class Step:
    verb: str
    nouns: tuple[str, ...] = ()

    def key(self) -> tuple[str, frozenset]:
        return self.verb, frozenset(self.nouns)

    def __str__(self) -> str:
        return " ".join([self.verb, *self.nouns])


@dataclass(frozen=True)
class ActionSequence:
    steps: tuple[Step, ...] = ()

    def tokens(self) -> list[str]:
        """Verb first, then its nouns, steps in order."""
        out = []
        for s in self.steps:
            out.append(s.verb)
            out.extend(s.nouns)
        return out

    def to_json(self) -> list:
        return [[s.verb, list(s.nouns)] for s in self.steps]

    @classmethod
    def from_json(cls, obj) -> "ActionSequence":
        return cls(tuple(Step(v, tuple(n)) for v, n in obj))

    @classmethod
    def parse(cls, text: str) -> "ActionSequence":
        """Parse ``"place bowl, pour cereal"`` style text (verb first in each step)."""
        steps = []
        for chunk in text.split(","):
            words = chunk.split()
            if words:
                steps.append(Step(words[0], tuple(words[1:])))
        return cls(tuple(steps))

    def __len__(self) -> int:
        return len(self.steps)

    def __str__(self) -> str:
        return ", ".join(map(str, self.steps))


# --------------------------------------------------------------------------
# records and features


@dataclass
class FeatureBundle:
    audio: np.ndarray  # [T_A, d_audio]
    visual: np.ndarray  # [T_V, d_visual]
    text: np.ndarray  # [T_T, d_text]; a single <unk> row when no subtitle

    def check(self, dims: dict) -> None:
        for name, arr in (("audio", self.audio), ("visual", self.visual), ("text", self.text)):
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] != dims[name]:
                raise SchemaError(f"{name} features have shape {arr.shape}, expected [T>=1, {dims[name]}]")


@dataclass
class SegmentRecord:
    video_id: str
    segment: int
    onset: float
    offset: float
    caption: list[str] | None = None
    actions: ActionSequence | None = None
    subtitle: list[str] | None = None
    bench: list[str] | None = None
    feature_ref: str | None = None
    features: FeatureBundle | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.onset < self.offset:
            raise DataError(f"{self.video_id}/{self.segment}: onset {self.onset} >= offset {self.offset}")

    @property
    def key(self) -> tuple[str, int]:
        return self.video_id, self.segment

    def check_trainable(self) -> None:
        if self.caption is None and self.actions is None:
            raise DataError(f"{self.video_id}/{self.segment}: record has neither caption nor actions")

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "segment": self.segment,
            "onset": self.onset,
            "offset": self.offset,
            "caption": self.caption,
            "actions": None if self.actions is None else self.actions.to_json(),
            "subtitle": self.subtitle,
            "bench": self.bench,
            "features": self.feature_ref,
        }


@dataclass
class Lexicon:
    """Vocabularies plus the fixed semantic embedding of every token.

    Action tokens share the embedding space of words (a verb or noun class
    embeds like the word naming it), which is what lets the semantic
    classifier compare an action sequence against a caption.
    """

    words: list[str]
    actions: list[str]
    verbs: list[str]
    nouns: list[str]
    word_embedding: np.ndarray  # [len(words), d_text]
    action_embedding: np.ndarray  # [len(actions), d_text]

    def __post_init__(self):
        self.word_index = {w: i for i, w in enumerate(self.words)}
        self.action_index = {a: i for i, a in enumerate(self.actions)}

    @property
    def verb_ids(self) -> list[int]:
        return [self.action_index[v] for v in self.verbs]

    @property
    def noun_ids(self) -> list[int]:
        return [self.action_index[n] for n in self.nouns]

    def encode_words(self, words: list[str]) -> list[int]:
        return [self.word_index.get(w, UNK) for w in words]

    def encode_actions(self, seq: ActionSequence) -> list[int]:
        return [self.action_index.get(t, UNK) for t in seq.tokens()]

    def decode_words(self, ids) -> list[str]:
        return [self.words[i] for i in ids if i >= len(SPECIALS)]

    def decode_actions(self, ids) -> list[str]:
        return [self.actions[i] for i in ids]

    def embed_words(self, words: list[str] | None) -> np.ndarray:
        if not words:
            return self.word_embedding[UNK : UNK + 1].copy()
        return self.word_embedding[self.encode_words(words)]


@dataclass
class Dataset:
    dims: dict
    lexicon: Lexicon
    records: list[SegmentRecord]

    def __len__(self) -> int:
        return len(self.records)

    def videos(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.video_id, None)
        return list(seen)

    def subset(self, records: list[SegmentRecord]) -> "Dataset":
        return Dataset(self.dims, self.lexicon, records)

    def by_videos(self, video_ids) -> "Dataset":
        keep = set(video_ids)
        return self.subset([r for r in self.records if r.video_id in keep])


# --------------------------------------------------------------------------
# synthetic world


@dataclass
class WorldSpec:
    verbs: list[str]
    noun_categories: dict[str, list[str]]
    grammar: dict[str, list[tuple[str, ...]]]  # verb -> noun-category patterns
    caption_templates: dict[str, dict[int, list[str]]]  # verb -> n_nouns -> templates
    verb_forms: dict[str, str]  # verb -> caption surface form
    subtitle_fillers: list[str]
    confusable: list[tuple[str, str]]
    noise: float = 0.3
    embedding_seed: int = 1234
    dims: dict = field(default_factory=lambda: {"audio": 32, "visual": 48, "text": 16})

    @property
    def nouns(self) -> list[str]:
        out: list[str] = []
        for group in self.noun_categories.values():
            out.extend(n for n in group if n not in out)
        return out

    def validate(self) -> None:
        if not self.verbs or not self.nouns:
            raise ConfigError("world needs a non-empty verb and noun inventory")
        for verb, patterns in self.grammar.items():
            if verb not in self.verbs:
                raise ConfigError(f"grammar verb {verb!r} not in inventory")
            for pat in patterns:
                for cat in pat:
                    if cat not in self.noun_categories:
                        raise ConfigError(f"grammar for {verb!r} uses unknown category {cat!r}")
        for verb in self.verbs:
            if verb not in self.caption_templates:
                raise ConfigError(f"no caption template for verb {verb!r}")

    def productions(self) -> list[Step]:
        """Every step the grammar can produce."""
        out = []
        for verb in self.verbs:
            for pat in self.grammar.get(verb, []):
                for nouns in _expand(pat, self.noun_categories):
                    out.append(Step(verb, nouns))
        return out


def _expand(pattern, categories):
    if not pattern:
        yield ()
        return
    for n in categories[pattern[0]]:
        for rest in _expand(pattern[1:], categories):
            if n not in rest:
                yield (n, *rest)


def kitchen_world(**overrides) -> WorldSpec:
    """Default desk-scale cooking world (10 verbs, 20 nouns)."""
    spec = WorldSpec(
        verbs=["take", "put", "place", "pour", "wash", "cut", "open", "close", "turn-on", "turn-off"],
        noun_categories={
            "liquid": ["milk", "coffee", "water", "orange-juice", "strawberry-juice"],
            "granular": ["cereal", "sugar"],
            "container": ["bowl", "cup", "pan"],
            "food": ["celery", "onion", "tomato", "egg"],
            "surface": ["tray", "plate"],
            "appliance": ["fridge", "cupboard"],
            "faucet": ["tap"],
            "tool": ["knife", "spoon"],
        },
        grammar={
            "take": [("food",), ("tool",), ("container",)],
            "put": [("food", "container"), ("tool", "surface")],
            "place": [("container",), ("liquid", "surface")],
            "pour": [("granular",), ("liquid",), ("liquid", "container"), ("granular", "container")],
            "wash": [("food",), ("container",)],
            "cut": [("food",)],
            "open": [("appliance",)],
            "close": [("appliance",)],
            "turn-on": [("faucet",)],
            "turn-off": [("faucet",)],
        },
        caption_templates={
            "take": {1: ["the person takes the {0}", "the person picks up a {0}"]},
            "put": {2: ["the person puts the {0} in the {1}", "the {0} goes onto the {1}"]},
            "place": {1: ["the person places the {0}"], 2: ["the person places the {0} on the {1}"]},
            "pour": {1: ["the person pours the {0}", "some {0} is poured"],
                     2: ["the person pours the {0} into the {1}"]},
            "wash": {1: ["the person washes the {0}", "the {0} is rinsed"]},
            "cut": {1: ["the person cuts the {0}", "the {0} is sliced"]},
            "open": {1: ["the person opens the {0}"]},
            "close": {1: ["the person closes the {0}"]},
            "turn-on": {1: ["the person turns-on the {0}"]},
            "turn-off": {1: ["the person turns-off the {0}"]},
        },
        verb_forms={
            "take": "takes", "put": "puts", "place": "places", "pour": "pours", "wash": "washes",
            "cut": "cuts", "open": "opens", "close": "closes", "turn-on": "turns-on", "turn-off": "turns-off",
        },
        subtitle_fillers=["okay", "so", "now", "we", "just", "um", "you", "gonna"],
        confusable=[
            ("milk", "water"), ("orange-juice", "strawberry-juice"), ("cereal", "sugar"),
            ("bowl", "cup"), ("celery", "onion"), ("tomato", "egg"), ("tray", "plate"),
            ("fridge", "cupboard"), ("knife", "spoon"),
        ],
    )
    return replace(spec, **overrides)


# surface words that realize each verb in captions, beyond ``verb_forms``
_SYNONYMS = {"picks": "take", "rinsed": "wash", "sliced": "cut", "poured": "pour", "goes": "put"}
_FILLERS = ["the", "person", "a", "some", "is", "in", "into", "on", "onto", "up", "and", "then"]


def build_lexicon(world: WorldSpec) -> Lexicon:
    world.validate()
    d = world.dims["text"]
    rng = np.random.default_rng([world.embedding_seed, 0])
    base = {}
    for w in [*world.verbs, *world.nouns, *_FILLERS, *world.subtitle_fillers]:
        if w not in base:
            base[w] = rng.normal(0.0, 1.0, d)
    for form, verb in [*((f, v) for v, f in world.verb_forms.items()), *_SYNONYMS.items()]:
        if verb in base and form not in base:
            base[form] = base[verb] + 0.3 * rng.normal(0.0, 1.0, d)
    words = [*SPECIALS, *base]
    word_emb = np.zeros((len(words), d))
    word_emb[UNK] = rng.normal(0.0, 1.0, d)
    for i, w in enumerate(words[len(SPECIALS):], start=len(SPECIALS)):
        word_emb[i] = base[w]
    actions = [*SPECIALS, *world.verbs, *world.nouns]
    act_emb = np.zeros((len(actions), d))
    act_emb[UNK] = word_emb[UNK]
    for i, a in enumerate(actions[len(SPECIALS):], start=len(SPECIALS)):
        act_emb[i] = base[a]
    return Lexicon(words, actions, list(world.verbs), world.nouns, word_emb, act_emb)


@dataclass
class _FeatureTables:
    video: dict[str, np.ndarray]
    image: dict[str, np.ndarray]
    audio: dict[str, np.ndarray]
    projection: np.ndarray


def _feature_tables(world: WorldSpec) -> _FeatureTables:
    dv = world.dims["visual"]
    d_video = dv // 2
    d_image = dv - d_video
    rng = np.random.default_rng([world.embedding_seed, 1])
    video = {v: rng.normal(0.0, 1.0, d_video) for v in world.verbs}
    audio = {v: rng.normal(0.0, 1.0, world.dims["audio"]) for v in world.verbs}
    image: dict[str, np.ndarray] = {}
    partner = {}
    for a, b in world.confusable:
        partner[a], partner[b] = b, a
    for n in world.nouns:
        own = rng.normal(0.0, 1.0, d_image)
        if n in partner and partner[n] in image:
            image[n] = 0.8 * image[partner[n]] + 0.6 * own
        else:
            image[n] = own
    q, _ = np.linalg.qr(rng.normal(size=(dv, dv)))
    return _FeatureTables(video, image, audio, q)


def fuse_visual(video: np.ndarray, image: np.ndarray, projection: np.ndarray) -> np.ndarray:
    """Concatenate video and image features and project to one visual stream."""
    return np.concatenate([video, image], axis=-1) @ projection


def step_visual(tables: _FeatureTables, step: Step) -> np.ndarray:
    img = sum(tables.image[n] for n in step.nouns) / np.sqrt(max(len(step.nouns), 1))
    if not step.nouns:
        img = np.zeros_like(next(iter(tables.image.values())))
    return fuse_visual(tables.video[step.verb], img, tables.projection)


def render_caption(world: WorldSpec, seq: ActionSequence, rng: np.random.Generator) -> list[str]:
    parts = []
    for i, step in enumerate(seq.steps):
        options = world.caption_templates[step.verb][len(step.nouns)]
        text = options[rng.integers(len(options))].format(*step.nouns)
        if i:
            parts.append("and then")
        parts.append(text)
    return " ".join(parts).split()


def render_subtitle(world: WorldSpec, seq: ActionSequence, rng: np.random.Generator) -> list[str]:
    words = []
    for step in seq.steps:
        fill = rng.choice(world.subtitle_fillers, size=rng.integers(1, 3), replace=False)
        words.extend(fill.tolist())
        words.append(step.verb)
        for j, n in enumerate(step.nouns):
            words.extend(["the", n] if j == 0 else ["into" if step.verb == "pour" else "on", "the", n])
    return words


def synthesize_features(
    world: WorldSpec,
    tables: _FeatureTables,
    lexicon: Lexicon,
    seq: ActionSequence,
    subtitle: list[str] | None,
    rng: np.random.Generator,
    frames_per_step: tuple[int, int] = (2, 4),
) -> FeatureBundle:
    vis, aud = [], []
    for step in seq.steps:
        n = int(rng.integers(frames_per_step[0], frames_per_step[1] + 1))
        v = step_visual(tables, step)
        a = 0.5 * tables.audio[step.verb]
        vis.extend([v] * n)
        aud.extend([a] * n)
    vis = np.array(vis)
    aud = np.array(aud)
    vis = vis + world.noise * rng.normal(size=vis.shape)
    aud = aud + world.noise * rng.normal(size=aud.shape)
    return FeatureBundle(aud, vis, lexicon.embed_words(subtitle))


def sample_sequence(world: WorldSpec, rng: np.random.Generator, n_steps: int,
                    allowed: list[Step] | None = None) -> ActionSequence:
    prods = allowed if allowed is not None else world.productions()
    steps: list[Step] = []
    while len(steps) < n_steps:
        s = prods[rng.integers(len(prods))]
        if steps and s == steps[-1]:
            continue
        steps.append(s)
    return ActionSequence(tuple(steps))


def generate_dataset(
    world: WorldSpec,
    n_videos: int,
    segments_per_video: int,
    mix: dict | None = None,
    seed: int = 0,
    steps_per_segment: tuple[int, int] = (1, 2),
    bench_extra: int = 2,
) -> Dataset:
    """Generate a dataset of ``n_videos`` clips.

    ``mix`` gives the per-segment probabilities of carrying an action
    annotation, a caption and a subtitle (keys ``actions``, ``captions``,
    ``subtitles``). Each video gets a workbench: the nouns its segments use
    plus ``bench_extra`` random extra objects.
    """
    mix = {"actions": 1.0, "captions": 1.0, "subtitles": 0.5, **(mix or {})}
    for k, v in mix.items():
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"annotation fraction {k}={v} outside [0, 1]")
    world.validate()
    lexicon = build_lexicon(world)
    tables = _feature_tables(world)
    records = []
    for vi in range(n_videos):
        rng = np.random.default_rng([seed, vi])
        vid = f"v{vi:04d}"
        seqs = [
            sample_sequence(world, rng, int(rng.integers(steps_per_segment[0], steps_per_segment[1] + 1)))
            for _ in range(segments_per_video)
        ]
        used = {n for s in seqs for st in s.steps for n in st.nouns}
        others = [n for n in world.nouns if n not in used]
        extra = rng.choice(others, size=min(bench_extra, len(others)), replace=False).tolist() if others else []
        bench = sorted(used | set(extra))
        t = 0.0
        for si, seq in enumerate(seqs):
            records.append(_make_record(world, tables, lexicon, vid, si, t, seq, mix, bench, rng))
            t = records[-1].offset
    return Dataset(dict(world.dims), lexicon, records)


def _make_record(world, tables, lexicon, vid, si, t, seq, mix, bench, rng) -> SegmentRecord:
    has_a = rng.random() < mix["actions"]
    has_c = rng.random() < mix["captions"]
    has_s = rng.random() < mix["subtitles"]
    caption = render_caption(world, seq, rng)
    subtitle = render_subtitle(world, seq, rng) if has_s else None
    feats = synthesize_features(world, tables, lexicon, seq, subtitle, rng)
    dur = float(len(feats.visual))
    return SegmentRecord(
        video_id=vid,
        segment=si,
        onset=t,
        offset=t + dur,
        caption=caption if has_c else None,
        actions=seq if has_a else None,
        subtitle=subtitle,
        bench=bench,
        features=feats,
    )


def generate_task_videos(
    world: WorldSpec,
    tasks: list[ActionSequence],
    n_per_task: int,
    seed: int = 0,
    bench_extra: int = 2,
    mix: dict | None = None,
) -> Dataset:
    """Clips that each perform one whole task, one step per segment."""
    mix = {"actions": 1.0, "captions": 1.0, "subtitles": 0.5, **(mix or {})}
    lexicon = build_lexicon(world)
    tables = _feature_tables(world)
    records = []
    for ti, task in enumerate(tasks):
        for k in range(n_per_task):
            rng = np.random.default_rng([seed, 1_000_000 + ti, k])
            vid = f"task{ti}_{k:03d}"
            used = {n for st in task.steps for n in st.nouns}
            others = [n for n in world.nouns if n not in used]
            extra = rng.choice(others, size=min(bench_extra, len(others)), replace=False).tolist()
            bench = sorted(used | set(extra))
            t = 0.0
            for si, step in enumerate(task.steps):
                seq = ActionSequence((step,))
                records.append(_make_record(world, tables, lexicon, vid, si, t, seq, mix, bench, rng))
                t = records[-1].offset
    return Dataset(dict(world.dims), lexicon, records)


def nearest_neighbor_steps(world: WorldSpec, visual: np.ndarray) -> ActionSequence:
    """Decode steps by matching each frame to the closest grammar production.

    Consecutive frames with the same match collapse into one step.
    """
    tables = _feature_tables(world)
    prods = world.productions()
    protos = np.array([step_visual(tables, s) for s in prods])
    d2 = ((visual[:, None, :] - protos[None]) ** 2).sum(-1)
    best = d2.argmin(axis=1)
    steps = []
    for i, b in enumerate(best):
        if i == 0 or b != best[i - 1]:
            steps.append(prods[b])
    return ActionSequence(tuple(steps))


# --------------------------------------------------------------------------
# binary feature files


def write_arrays(path: Path, arrays: list[np.ndarray]) -> None:
    parts = [struct.pack("<I", len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path: Path) -> list[np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingFeatureFileError(f"feature file not found: {path}")
    buf = path.read_bytes()
    (count,) = struct.unpack_from("<I", buf, 0)
    pos = 4
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape))
        out.append(np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
        pos += 8 * n
    if pos != len(buf):
        raise SchemaError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


# --------------------------------------------------------------------------
# manifest I/O


def write_dataset(dataset: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lex = dataset.lexicon
    write_arrays(out / "lexicon.f64", [lex.word_embedding, lex.action_embedding])
    header = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "dims": dataset.dims,
        "lexicon": "lexicon.f64",
        "words": lex.words,
        "actions": lex.actions,
        "verbs": lex.verbs,
        "nouns": lex.nouns,
        "n_segments": len(dataset.records),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for r in dataset.records:
        ref = f"features/{r.video_id}_{r.segment:03d}.f64"
        if r.features is not None:
            write_arrays(out / ref, [r.features.audio, r.features.visual, r.features.text])
        rec = r.to_json()
        rec["features"] = ref
        lines.append(json.dumps(rec, sort_keys=True))
    path = out / "manifest.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path, load_features: bool = True) -> Dataset:
    """Read a manifest written by :func:`write_dataset` (or by hand, same schema)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ManifestParseError(path, 1, "empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestParseError(path, 1, f"invalid JSON: {e}") from None
    if header.get("schema") != MANIFEST_SCHEMA or header.get("version") != MANIFEST_VERSION:
        raise SchemaError(f"{path}: unsupported schema {header.get('schema')!r} v{header.get('version')}")
    dims = header["dims"]
    word_emb, act_emb = read_arrays(root / header["lexicon"])
    if word_emb.shape[1] != dims["text"] or act_emb.shape[1] != dims["text"]:
        raise SchemaError(f"lexicon width {word_emb.shape[1]} != text dim {dims['text']}")
    lexicon = Lexicon(header["words"], header["actions"], header["verbs"], header["nouns"], word_emb, act_emb)
    records = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = SegmentRecord(
                video_id=str(obj["video_id"]),
                segment=int(obj["segment"]),
                onset=float(obj["onset"]),
                offset=float(obj["offset"]),
                caption=obj.get("caption"),
                actions=None if obj.get("actions") is None else ActionSequence.from_json(obj["actions"]),
                subtitle=obj.get("subtitle"),
                bench=obj.get("bench"),
                feature_ref=obj.get("features"),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ManifestParseError(path, line_no, f"{type(e).__name__}: {e}") from None
        if load_features and rec.feature_ref is not None:
            arrays = read_arrays(root / rec.feature_ref)
            if len(arrays) != 3:
                raise SchemaError(f"{rec.feature_ref}: expected 3 arrays, found {len(arrays)}")
            rec.features = FeatureBundle(*arrays)
            try:
                rec.features.check(dims)
            except SchemaError as e:
                raise SchemaError(f"{path}:{line_no}: {e}") from None
        records.append(rec)
    return Dataset(dims, lexicon, records)


# --------------------------------------------------------------------------
# splits


def split_dataset(dataset: Dataset, folds: int, seed: int = 0) -> list[Dataset]:
    """Partition at video level into ``folds`` subsets whose sizes differ by at most one."""
    videos = dataset.videos()
    if folds < 2 or len(videos) < folds:
        raise ConfigError(f"cannot split {len(videos)} videos into {folds} folds")
    order = np.random.default_rng([seed, 7]).permutation(len(videos))
    groups = np.array_split(order, folds)
    return [dataset.by_videos([videos[i] for i in sorted(g)]) for g in groups]


def cross_validation_rounds(folds: list[Dataset]):
    """Yield ``(test, validation)`` pairs: each fold tests once, the rest validate."""
    for i, test in enumerate(folds):
        rest = [r for j, f in enumerate(folds) if j != i for r in f.records]
        yield test, test.subset(rest)


def with_annotations(dataset: Dataset, actions: float = 1.0, captions: float = 1.0, seed: int = 0) -> Dataset:
    """Copy of ``dataset`` keeping exactly ``round(fraction * n)`` of each annotation.

    Kept records are drawn at random per annotation type; features and the
    latent sequences are unchanged.
    """
    n = len(dataset.records)
    rng = np.random.default_rng([seed, 11])
    keep_a = set(rng.permutation(n)[: int(round(actions * n))].tolist())
    keep_c = set(rng.permutation(n)[: int(round(captions * n))].tolist())
    out = [
        replace(r, actions=r.actions if i in keep_a else None, caption=r.caption if i in keep_c else None)
        for i, r in enumerate(dataset.records)
    ]
    return dataset.subset(out)
