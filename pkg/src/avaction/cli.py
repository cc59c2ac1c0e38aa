"""Command-line entry point: ``avaction <command> [options]``.

Every run resolves a configuration (defaults, then an optional JSON file
given with ``--config``, then flags), validates it, writes it to
``config.json`` in the run directory and records a ``manifest.json`` listing
input and output digests and the configuration hash. Without ``--out`` the
run directory is ``$AVACTION_OUTPUT_ROOT/<command>-<hash>`` (root defaults
to ``./runs``).

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
configuration or input.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from avaction import __version__

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "AVACTION_OUTPUT_ROOT"
COMMANDS = ("gen-data", "train", "pretrain-classifier", "finetune-weak", "eval", "decode", "exec-sim")

log = logging.getLogger("avaction")


@dataclass
class DataConfig:
    videos: int = 200
    segments: int = 4
    noise: float = 0.3
    action_fraction: float = 1.0
    caption_fraction: float = 1.0
    subtitle_fraction: float = 0.5
    folds: int = 10
    test_folds: int = 2
    val_folds: int = 1
    task_clips: int = 0
    bench_extra: int = 4

    def validate(self) -> None:
        from avaction.numerics import ConfigurationError

        for name in ("action_fraction", "caption_fraction", "subtitle_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"data.{name} must lie in [0, 1], got {v}")
        if self.videos < self.folds or self.folds < self.test_folds + self.val_folds + 1:
            raise ConfigurationError("need videos >= folds > test_folds + val_folds")
        if min(self.segments, self.test_folds, self.val_folds) < 1 or self.noise < 0:
            raise ConfigurationError("segments, test_folds and val_folds must be >= 1 and noise >= 0")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    paths: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)  # ModelConfig overrides; dims and vocab come from the data
    train: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "paths": dict(sorted(self.paths.items())),
            "data": dataclasses.asdict(self.data),
            "model": self.model,
            "train": self.train,
            "decode": self.decode,
            "version": __version__,
        }

    def train_config(self):
        from avaction.training import TrainConfig

        return TrainConfig(**{**self.train, "seed": self.seed})

    def decode_config(self):
        from avaction.decode import DecodeConfig

        d = {k: v for k, v in self.decode.items() if k != "mask"}
        return DecodeConfig(**d)

    def validate(self) -> None:
        from avaction.decode import DecodeConfig
        from avaction.model import ModelConfig
        from avaction.numerics import ConfigurationError
        from avaction.training import TrainConfig

        def check(section: str, cls, values: dict, extra=()):
            known = {f.name for f in dataclasses.fields(cls)} | set(extra)
            unknown = sorted(set(values) - known)
            if unknown:
                raise ConfigurationError(f"unknown {section} settings: {unknown}")

        check("model", ModelConfig, self.model)
        check("train", TrainConfig, self.train)
        check("decode", DecodeConfig, self.decode, ("mask",))
        self.data.validate()
        self.train_config().validate()
        self.decode_config().validate()
        if self.model:
            ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.model.items()}).validate()


# --------------------------------------------------------------------------
# argument parsing


def _add(p, flag, dest, **kw):
    p.add_argument(flag, dest=dest, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file; flags override its values")
    common.add_argument("--out", type=Path, help="run directory (default: $%s/<command>-<hash>)" % OUTPUT_ROOT_ENV)
    _add(common, "--seed", "seed", type=int, help="random seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    def train_flags(p, phase=True):
        if phase:
            _add(p, "--phase", "phase", choices=("baseline", "multitask", "finetune-weak"))
        _add(p, "--train", "paths.train", type=Path, help="training dataset directory")
        _add(p, "--val", "paths.val", type=Path, help="validation dataset directory")
        _add(p, "--init", "paths.init", type=Path, help="checkpoint to start from")
        for flag, typ in (("--steps", int), ("--lr", float), ("--batch-size", int), ("--eval-every", int),
                          ("--temperature", float), ("--samples", int), ("--weight-caption", float),
                          ("--weight-action", float), ("--weight-weak", float)):
            _add(p, flag, "train." + flag[2:].replace("-", "_"), type=typ)

    parser = argparse.ArgumentParser(prog="avaction", description="Action sequence generation from instruction videos.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic kitchen dataset with splits")
    for flag, typ in (("--videos", int), ("--segments", int), ("--noise", float), ("--action-fraction", float),
                      ("--caption-fraction", float), ("--subtitle-fraction", float), ("--folds", int),
                      ("--test-folds", int), ("--val-folds", int), ("--task-clips", int), ("--bench-extra", int)):
        _add(p, flag, "data." + flag[2:].replace("-", "_"), type=typ)

    p = sub.add_parser("train", parents=[common], help="run a training phase")
    train_flags(p)

    p = sub.add_parser("finetune-weak", parents=[common], help="weakly-supervised fine-tuning (train --phase finetune-weak)")
    train_flags(p, phase=False)

    p = sub.add_parser("pretrain-classifier", parents=[common], help="pre-train the semantic classifier")
    _add(p, "--train", "paths.train", type=Path)
    _add(p, "--init", "paths.init", type=Path)
    _add(p, "--steps", "train.classifier_steps", type=int)
    _add(p, "--lr", "train.lr", type=float)
    _add(p, "--batch-size", "train.batch_size", type=int)

    p = sub.add_parser("decode", parents=[common], help="decode action sequences for a dataset")
    _add(p, "--checkpoint", "paths.checkpoint", type=Path)
    _add(p, "--data", "paths.data", type=Path)
    _add(p, "--strategy", "decode.strategy", choices=("greedy", "beam"))
    _add(p, "--beam-width", "decode.beam_width", type=int)
    _add(p, "--max-length", "decode.max_length", type=int)
    _add(p, "--length-penalty", "decode.length_penalty", type=float)
    p.add_argument("--mask", dest="decode.mask", action="store_const", const=True, default=None,
                   help="restrict nouns to each clip's workbench objects")

    p = sub.add_parser("eval", parents=[common], help="score decoded sequences against references")
    p.add_argument("--ref", dest="paths.ref", type=Path, default=None, help="dataset directory or decoded JSONL")
    p.add_argument("--hyp", dest="hyps", type=Path, action="append", default=None, help="decoded JSONL (repeatable)")
    p.add_argument("--label", dest="labels", action="append", default=None, help="row label per --hyp")

    p = sub.add_parser("exec-sim", parents=[common], help="execute action sequences in the simulated kitchen")
    _add(p, "--decoded", "paths.decoded", type=Path, help="decoded JSONL; clips run their segments in order")
    _add(p, "--actions", "actions", help='comma-separated steps, e.g. "place bowl, pour cereal"')
    _add(p, "--task", "task", help="task name from the task file")
    _add(p, "--data", "paths.data", type=Path, help="dataset whose records give each clip's workbench")
    _add(p, "--library", "paths.library", type=Path, help="primitive library JSON (default: shipped)")
    _add(p, "--tasks", "paths.tasks", type=Path, help="task specification JSON (default: shipped)")
    _add(p, "--distractors", "distractors", type=int, help="extra bench objects when no dataset is given")
    return parser


def resolve(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    """Merge defaults, the config file and explicit flags."""
    from avaction.numerics import ConfigurationError

    command = "train" if args.command == "finetune-weak" else args.command
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{args.config}: invalid JSON at line {e.lineno}: {e.msg}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{args.config}: expected a JSON object")
    allowed = {"seed", "paths", "data", "model", "train", "decode", "extra", "command", "version"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {unknown}")
    sections = {k: dict(raw.get(k, {})) for k in ("paths", "data", "model", "train", "decode", "extra")}
    seed = raw.get("seed", 0)
    for dest, value in vars(args).items():
        if value is None or dest in ("config", "out", "verbose", "command"):
            continue
        if dest == "seed":
            seed = value
        elif "." in dest:
            sec, key = dest.split(".", 1)
            sections[sec][key] = str(value) if isinstance(value, Path) else value
        else:
            sections["extra"][dest] = [str(v) for v in value] if isinstance(value, list) else value
    if args.command == "finetune-weak":
        sections["extra"]["phase"] = "finetune-weak"
    try:
        data = DataConfig(**sections["data"])
    except TypeError as e:
        raise ConfigurationError(f"data settings: {e}") from None
    cfg = RunConfig(command, int(seed), sections["paths"], data, sections["model"], sections["train"], sections["decode"])
    cfg.validate()
    return cfg, sections["extra"]


# --------------------------------------------------------------------------
# run bookkeeping


def _digest_path(path: Path) -> str:
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(str(f.relative_to(path) if path.is_dir() else f.name).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


class Run:
    def __init__(self, cfg: RunConfig, extra: dict, out: Path | None):
        self.cfg, self.extra = cfg, extra
        full = {**cfg.to_dict(), "extra": dict(sorted(extra.items()))}
        self.config_json = json.dumps(full, sort_keys=True, indent=1) + "\n"
        self.hash = hashlib.sha256(self.config_json.encode()).hexdigest()
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        self.dir = out if out is not None else root / f"{cfg.command}-{self.hash[:12]}"
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []

    def input(self, key: str, required: bool = True) -> Path | None:
        from avaction.numerics import ConfigurationError

        value = self.cfg.paths.get(key)
        if value is None:
            if required:
                raise ConfigurationError(f"missing required path '{key}' (flag --{key} or paths.{key} in the config)")
            return None
        p = Path(value)
        if not p.exists():
            raise ConfigurationError(f"{key}: no such file or directory: {p}")
        self.inputs.append(p)
        return p

    def start(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(self.config_json, encoding="utf-8")

    def output(self, path: Path) -> Path:
        self.outputs.append(path)
        return path

    def finish(self) -> None:
        manifest = {
            "command": self.cfg.command,
            "config_hash": self.hash,
            "version": __version__,
            "inputs": [{"path": str(p), "sha256": _digest_path(p)} for p in self.inputs],
            "outputs": [{"path": str(p.relative_to(self.dir)), "sha256": _digest_path(p)} for p in self.outputs],
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run) -> None:
    from avaction.data import generate_dataset, generate_task_videos, kitchen_world, split_dataset, with_annotations, write_dataset
    from avaction.dmp import kitchen_tasks

    d, seed = run.cfg.data, run.cfg.seed
    world = kitchen_world(noise=d.noise)
    mix = {"actions": 1.0, "captions": 1.0, "subtitles": d.subtitle_fraction}
    ds = generate_dataset(world, n_videos=d.videos, segments_per_video=d.segments, seed=seed, mix=mix)
    folds = split_dataset(ds, d.folds, seed=seed)
    t, v = d.test_folds, d.val_folds
    merge = lambda fs: ds.subset([r for f in fs for r in f.records])
    test, val, train = merge(folds[:t]), merge(folds[t : t + v]), merge(folds[t + v :])
    train = with_annotations(train, d.action_fraction, d.caption_fraction, seed=seed)
    for name, part in (("train", train), ("val", val), ("test", test)):
        write_dataset(part, run.dir / name)
        run.output(run.dir / name)
        log.info("%s: %d segments", name, len(part.records))
    if d.task_clips:
        tasks = generate_task_videos(world, [t.subtasks for t in kitchen_tasks()], d.task_clips, seed=seed,
                                     bench_extra=d.bench_extra, mix=mix)
        write_dataset(tasks, run.dir / "tasks")
        run.output(run.dir / "tasks")


def _load_init(run: Run):
    from avaction.model import load_checkpoint

    p = run.input("init", required=False)
    return None if p is None else load_checkpoint(p)[0]


def cmd_train(run: Run) -> None:
    from avaction.data import load_manifest
    from avaction.model import ModelConfig
    from avaction.numerics import ConfigurationError
    from avaction.training import train

    phase = run.extra.get("phase")
    if phase is None:
        raise ConfigurationError("train needs --phase")
    train_set = load_manifest(run.input("train"))
    val_path = run.input("val", required=False)
    val_set = load_manifest(val_path) if val_path else None
    params = _load_init(run)
    if phase == "finetune-weak" and params is None:
        raise ConfigurationError("finetune-weak needs --init with a multitask checkpoint whose classifier is pre-trained")
    mc = ModelConfig(d_audio=train_set.dims["audio"], d_visual=train_set.dims["visual"], d_text=train_set.dims["text"],
                     word_vocab=len(train_set.lexicon.words), action_vocab=len(train_set.lexicon.actions),
                     **{k: tuple(v) if isinstance(v, list) else v for k, v in run.cfg.model.items()})
    result = train(train_set, val_set, phase, run.cfg.train_config(), params=params, model_config=mc,
                   out_dir=run.dir)
    for p in result.checkpoints:
        run.output(p)
    run.output(run.dir / "best.ckpt")
    run.output(run.dir / "train_log.jsonl")
    print(f"phase {phase}: selected step {result.best_step} (validation METEOR {result.best_meteor:.4f})")


def cmd_pretrain_classifier(run: Run) -> None:
    from avaction.data import load_manifest
    from avaction.model import ModelConfig, init_params, save_checkpoint
    from avaction.training import pretrain_classifier, stream

    ds = load_manifest(run.input("train"))
    params = _load_init(run)
    if params is None:
        params = init_params(ModelConfig(d_audio=ds.dims["audio"], d_visual=ds.dims["visual"], d_text=ds.dims["text"],
                                         word_vocab=len(ds.lexicon.words), action_vocab=len(ds.lexicon.actions)),
                             seed=run.cfg.seed)
    cfg = run.cfg.train_config()
    pretrain_classifier(ds, params, cfg, log_path=run.output(run.dir / "train_log.jsonl"))
    save_checkpoint(run.output(run.dir / "classifier.ckpt"), params, stream(cfg.seed, 10),
                    meta={"phase": "pretrain-classifier", "steps": cfg.classifier_steps})
    print(f"classifier pre-trained for {cfg.classifier_steps} steps")


def cmd_decode(run: Run) -> None:
    from avaction.data import load_manifest
    from avaction.decode import DecodedSegment, TaskKnowledge, write_decoded
    from avaction.model import load_checkpoint
    from avaction.training import decode_actions

    params = load_checkpoint(run.input("checkpoint"))[0]
    ds = load_manifest(run.input("data"))
    masks = None
    if run.cfg.decode.get("mask"):
        masks = {}
        for r in ds.records:
            if r.bench is not None:
                masks[r.video_id] = TaskKnowledge.from_names(ds.lexicon, [n for n in r.bench if n in ds.lexicon.action_index],
                                                             name=r.video_id)
    rows = []
    for r, h, seq in decode_actions(params, ds, run.cfg.decode_config(), masks):
        rows.append(DecodedSegment(r.video_id, r.segment, [ds.lexicon.actions[t] for t in h.tokens], seq, h.score,
                                   h.truncated, r.video_id if masks and r.video_id in masks else None))
    write_decoded(run.output(run.dir / "decoded.jsonl"), rows)
    print(f"decoded {len(rows)} segments")


def _references(path: Path) -> dict:
    from avaction.data import ActionSequence, load_manifest
    from avaction.decode import read_decoded

    if path.is_dir():
        ds = load_manifest(path, load_features=False)
        return {(r.video_id, r.segment): r.actions for r in ds.records if r.actions is not None}
    return {(d["video_id"], d["segment"]): ActionSequence.from_json(d["steps"]) for d in read_decoded(path)}


def cmd_eval(run: Run) -> None:
    from avaction.data import ActionSequence
    from avaction.decode import read_decoded
    from avaction.metrics import evaluate, format_table
    from avaction.numerics import ConfigurationError

    refs = _references(run.input("ref"))
    hyps = run.extra.get("hyps") or []
    if not hyps:
        raise ConfigurationError("eval needs at least one --hyp")
    labels = run.extra.get("labels") or [Path(h).stem for h in hyps]
    if len(labels) != len(hyps):
        raise ConfigurationError(f"{len(hyps)} --hyp files but {len(labels)} --label values")
    reports = []
    for h, label in zip(hyps, labels):
        p = Path(h)
        if not p.exists():
            raise ConfigurationError(f"hyp: no such file: {p}")
        run.inputs.append(p)
        got = {(d["video_id"], d["segment"]): ActionSequence.from_json(d["steps"]) for d in read_decoded(p)}
        pairs = [(v, s, got.get((v, s), ActionSequence()), ref) for (v, s), ref in sorted(refs.items())]
        reports.append(evaluate(pairs, label))
    doc = {"reports": [r.to_json() for r in reports]}
    (run.dir / "report.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    run.output(run.dir / "report.json")
    table = format_table(reports, "quality") + "\n\n" + format_table(reports, "task") + "\n"
    (run.dir / "table.txt").write_text(table, encoding="utf-8")
    run.output(run.dir / "table.txt")
    print(table, end="")


def cmd_exec_sim(run: Run) -> None:
    from avaction.data import ActionSequence, load_manifest
    from avaction.decode import read_decoded
    from avaction.dmp import DmpLibrary, align_and_execute, default_library, default_tasks, kitchen_scene, load_tasks
    from avaction.numerics import ConfigurationError

    lib_path = run.input("library", required=False)
    library = DmpLibrary.load(lib_path) if lib_path else default_library()
    tasks_path = run.input("tasks", required=False)
    tasks = {t.name: t for t in (load_tasks(tasks_path) if tasks_path else default_tasks())}
    name = run.extra.get("task")
    if name is None or name not in tasks:
        raise ConfigurationError(f"--task must be one of {sorted(tasks)}")
    task = tasks[name]
    clips: dict[str, list] = {}
    decoded = run.input("decoded", required=False)
    if decoded is not None:
        for d in sorted(read_decoded(decoded), key=lambda d: (d["video_id"], d["segment"])):
            clips.setdefault(d["video_id"], []).extend(ActionSequence.from_json(d["steps"]).steps)
    elif run.extra.get("actions"):
        clips["actions"] = list(ActionSequence.parse(run.extra["actions"]).steps)
    else:
        raise ConfigurationError("exec-sim needs --decoded or --actions")
    benches: dict[str, list] = {}
    data = run.input("data", required=False)
    if data is not None:
        for r in load_manifest(data, load_features=False).records:
            if r.bench is not None:
                benches[r.video_id] = list(r.bench)
    n_extra = int(run.extra.get("distractors", 4))
    pool = sorted({n for (_, ns) in library.entries for n in ns} - set(task.required_objects()))
    results = []
    traj_dir = run.dir / "trajectories"
    for i, (clip, steps) in enumerate(sorted(clips.items())):
        bench = benches.get(clip) or task.required_objects() + pool[:n_extra]
        state = kitchen_scene(sorted(set(bench) | set(task.bench)), seed=run.cfg.seed + i)
        final, ok, elog = align_and_execute(ActionSequence(tuple(steps)), library, state, task)
        if elog.trajectories:
            run.output(elog.to_csv(traj_dir / f"{clip}.csv"))
        results.append({"clip": clip, "success": ok, "steps": [str(s) for s in steps],
                        "log": elog.entries, "final_state": final.to_json()})
    rate = 100.0 * sum(r["success"] for r in results) / len(results)
    doc = {"task": name, "success_rate": rate, "clips": results}
    (run.dir / "exec.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    run.output(run.dir / "exec.json")
    print(f"task {name}: {sum(r['success'] for r in results)}/{len(results)} clips succeeded ({rate:.1f}%)")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "pretrain-classifier": cmd_pretrain_classifier,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "exec-sim": cmd_exec_sim,
}


def _config_errors() -> tuple[type, ...]:
    from avaction.data import ConfigError, DataError
    from avaction.dmp import LibraryError
    from avaction.model import CheckpointError
    from avaction.numerics import ConfigurationError

    return ConfigurationError, ConfigError, DataError, LibraryError, CheckpointError


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    config_errors = _config_errors()
    try:
        cfg, extra = resolve(args)
        r = Run(cfg, extra, args.out)
        r.start()
        HANDLERS[cfg.command](r)
        r.finish()
    except config_errors as e:
        print(f"avaction: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - reported and mapped to the runtime exit code
        print(f"avaction: error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    print(f"run directory: {r.dir}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
