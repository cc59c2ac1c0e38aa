"""Primitive library, task specifications and a kinematic kitchen executor.

Poses are 4-vectors ``(x, y, z, tilt)`` in metres and radians. Physics is
kinematic: a grasped object's pose is copied from the gripper at every
integration step, pouring sets a containment flag when the held object tilts
past a threshold over the target container, and placing records where an
object rests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from avaction.data import ActionSequence, Step, WorldSpec
from avaction.dmp.primitive import DmpPrimitive, Trajectory, fit_dmp, rollout, write_trajectory_csv

LIBRARY_SCHEMA = "avaction.dmp-library"
TASKS_SCHEMA = "avaction.task-specs"
SCHEMA_VERSION = 1
POSE_LABELS = ["x", "y", "z", "tilt"]
EFFECTS = ("grasp", "release", "pour", "none")

GRASP_TOLERANCE = 0.01  # m
POUR_TILT = 1.0  # rad
POUR_RADIUS = 0.05  # m
POUR_HEIGHT = 0.15  # m above the container
SLOT_SPACING = 0.08  # m between objects on a surface


class LibraryError(ValueError):
    """Malformed library or task document."""


class ExecutionError(RuntimeError):
    kind = "execution"


class CoverageError(ExecutionError):
    kind = "coverage"


class GroundingError(ExecutionError):
    kind = "grounding"


# --------------------------------------------------------------------------
# library


@dataclass(frozen=True)
class Invocation:
    """One primitive applied to one object.

    ``goal`` is ``object`` (the object's own pose), ``home`` (where the object
    was when the step began), ``site:<name>``, ``slot:<surface>`` (next free
    place on a surface) or ``over:<container>``.
    """

    primitive: str
    object: str
    goal: str
    effect: str = "none"

    def referenced(self) -> list[str]:
        kind, _, arg = self.goal.partition(":")
        return [self.object] + ([arg] if kind in ("slot", "over") else [])

    def to_json(self) -> dict:
        return {"primitive": self.primitive, "object": self.object, "goal": self.goal, "effect": self.effect}

    @classmethod
    def from_json(cls, d: dict) -> "Invocation":
        return cls(d["primitive"], d["object"], d["goal"], d.get("effect", "none"))


def _key(verb: str, nouns) -> tuple[str, frozenset]:
    return verb, frozenset(nouns)


@dataclass
class DmpLibrary:
    primitives: dict[str, DmpPrimitive]
    entries: dict[tuple[str, frozenset], list[Invocation]]

    def lookup(self, step: Step) -> list[Invocation]:
        try:
            return self.entries[step.key()]
        except KeyError:
            raise CoverageError(f"no primitives for step '{step}'") from None

    def covers(self, step: Step) -> bool:
        return step.key() in self.entries

    def validate(self, verbs=None, nouns=None) -> None:
        for (verb, ns), invs in self.entries.items():
            if verbs is not None and verb not in verbs:
                raise LibraryError(f"verb {verb!r} is not in the action vocabulary")
            if nouns is not None and not set(ns) <= set(nouns):
                raise LibraryError(f"nouns {sorted(set(ns) - set(nouns))} are not in the action vocabulary")
            if not invs:
                raise LibraryError(f"empty primitive list for {verb} {sorted(ns)}")
            for inv in invs:
                if inv.primitive not in self.primitives:
                    raise LibraryError(f"unknown primitive {inv.primitive!r}")
                if inv.effect not in EFFECTS:
                    raise LibraryError(f"unknown effect {inv.effect!r}")

    def to_json(self) -> dict:
        rows = sorted(self.entries.items(), key=lambda kv: (kv[0][0], sorted(kv[0][1])))
        return {
            "schema": LIBRARY_SCHEMA,
            "version": SCHEMA_VERSION,
            "primitives": [self.primitives[n].to_json() for n in sorted(self.primitives)],
            "entries": [
                {"verb": v, "nouns": sorted(ns), "invocations": [i.to_json() for i in invs]}
                for (v, ns), invs in rows
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DmpLibrary":
        _check_schema(d, LIBRARY_SCHEMA)
        prims = {p["name"]: DmpPrimitive.from_json(p) for p in d["primitives"]}
        entries = {}
        for e in d["entries"]:
            key = _key(e["verb"], e["nouns"])
            if key in entries:
                raise LibraryError(f"duplicate library key {e['verb']} {sorted(e['nouns'])}")
            entries[key] = [Invocation.from_json(i) for i in e["invocations"]]
        lib = cls(prims, entries)
        lib.validate()
        return lib

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DmpLibrary":
        return cls.from_json(_read_json(path))


def _check_schema(d: dict, schema: str) -> None:
    if d.get("schema") != schema:
        raise LibraryError(f"expected schema {schema!r}, found {d.get('schema')!r}")
    if d.get("version") != SCHEMA_VERSION:
        raise LibraryError(f"unsupported {schema} version {d.get('version')!r}")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise LibraryError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from None


# --------------------------------------------------------------------------
# tasks


@dataclass
class TaskSpec:
    """A named task: its subtasks, the objects it needs and its end-state predicate.

    Conditions are ``{"contains": container, "items": [...]}``,
    ``{"on": surface, "items": [...]}``, ``{"at": object, "site": name}`` and
    ``{"hand_empty": true}``.
    """

    name: str
    subtasks: ActionSequence
    goal: list[dict]
    bench: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.subtasks.steps:
            raise LibraryError(f"task {self.name!r} has no subtasks")

    def required_objects(self) -> list[str]:
        used = {n for s in self.subtasks.steps for n in s.nouns}
        return sorted(used | set(self.bench))

    def satisfied(self, state: "KitchenState") -> bool:
        return all(_condition(c, state) for c in self.goal)

    def to_json(self) -> dict:
        return {"name": self.name, "subtasks": self.subtasks.to_json(), "goal": self.goal, "bench": self.bench}

    @classmethod
    def from_json(cls, d: dict) -> "TaskSpec":
        return cls(d["name"], ActionSequence.from_json(d["subtasks"]), list(d["goal"]), list(d.get("bench", [])))


def _condition(c: dict, state: "KitchenState") -> bool:
    if "contains" in c:
        return set(c["items"]) <= set(state.contents.get(c["contains"], []))
    if "on" in c:
        return all(state.resting.get(o) == f"slot:{c['on']}" for o in c["items"])
    if "at" in c:
        return state.resting.get(c["at"]) == f"site:{c['site']}"
    if "hand_empty" in c:
        return (state.held is None) == bool(c["hand_empty"])
    raise LibraryError(f"unknown goal condition {c}")


def save_tasks(path, tasks: list[TaskSpec]) -> Path:
    path = Path(path)
    doc = {"schema": TASKS_SCHEMA, "version": SCHEMA_VERSION, "tasks": [t.to_json() for t in tasks]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_tasks(path) -> list[TaskSpec]:
    d = _read_json(path)
    _check_schema(d, TASKS_SCHEMA)
    return [TaskSpec.from_json(t) for t in d["tasks"]]


# --------------------------------------------------------------------------
# simulator


@dataclass
class KitchenState:
    poses: dict[str, np.ndarray]
    gripper: np.ndarray
    sites: dict[str, np.ndarray]
    held: str | None = None
    contents: dict[str, list[str]] = field(default_factory=dict)
    resting: dict[str, str] = field(default_factory=dict)  # object -> "bench" | "site:..." | "slot:..."

    @property
    def closed(self) -> bool:
        return self.held is not None

    @property
    def bench(self) -> frozenset[str]:
        return frozenset(self.poses)

    def copy(self) -> "KitchenState":
        return KitchenState(
            poses={k: v.copy() for k, v in self.poses.items()},
            gripper=self.gripper.copy(),
            sites={k: v.copy() for k, v in self.sites.items()},
            held=self.held,
            contents={k: list(v) for k, v in self.contents.items()},
            resting=dict(self.resting),
        )

    def check_invariants(self) -> None:
        if self.held is not None and not np.array_equal(self.poses[self.held], self.gripper):
            raise ExecutionError(f"held object {self.held} does not track the gripper")
        seen = {}
        for k, p in self.poses.items():
            t = tuple(p.tolist())
            if t in seen:
                raise ExecutionError(f"objects {seen[t]} and {k} share a pose")
            seen[t] = k

    def to_json(self) -> dict:
        return {
            "poses": {k: self.poses[k].tolist() for k in sorted(self.poses)},
            "gripper": self.gripper.tolist(),
            "closed": self.closed,
            "held": self.held,
            "contents": {k: v for k, v in sorted(self.contents.items())},
            "resting": dict(sorted(self.resting.items())),
        }


HOME = np.array([0.0, 0.2, 0.3, 0.0])
WORKSPACE = np.array([0.0, 0.35, 0.0, 0.0])


def kitchen_scene(bench, seed: int = 0) -> KitchenState:
    """Objects laid out on a shelf row behind the work area, order shuffled by ``seed``."""
    names = sorted(set(bench))
    order = np.random.default_rng([seed, 5]).permutation(len(names))
    poses = {}
    for slot, i in enumerate(order):
        row, col = divmod(slot, 6)
        poses[names[i]] = np.array([-0.375 + 0.15 * col, 0.6 + 0.15 * row, 0.0, 0.0])
    return KitchenState(poses=poses, gripper=HOME.copy(), sites={"workspace": WORKSPACE.copy()},
                        resting={n: "bench" for n in names})


@dataclass
class ExecutionLog:
    entries: list[dict] = field(default_factory=list)
    trajectories: list[Trajectory] = field(default_factory=list)

    def errors(self) -> list[dict]:
        return [e for e in self.entries if e["status"] != "ok"]

    def to_csv(self, path) -> Path:
        return write_trajectory_csv(path, self.trajectories, POSE_LABELS)


def _goal_pose(inv: Invocation, state: KitchenState, home: dict[str, np.ndarray]) -> np.ndarray:
    kind, _, arg = inv.goal.partition(":")
    if kind == "object":
        return state.poses[inv.object].copy()
    if kind == "home":
        return home[inv.object].copy()
    if kind == "site":
        if arg not in state.sites:
            raise GroundingError(f"unknown site {arg!r}")
        return state.sites[arg].copy()
    if kind == "slot":
        n = sum(1 for o, r in state.resting.items() if r == f"slot:{arg}" and o != inv.object)
        return state.poses[arg] + np.array([SLOT_SPACING * (n + 1) - 0.04, 0.0, 0.02, 0.0])
    if kind == "over":
        return state.poses[arg] + np.array([0.0, 0.0, POUR_HEIGHT, 0.0])
    raise LibraryError(f"unknown goal {inv.goal!r}")


def _run(inv: Invocation, prim: DmpPrimitive, state: KitchenState, home, rest, dt: float, horizon: float,
         monitor=None):
    goal = _goal_pose(inv, state, home)
    if inv.effect == "grasp" and state.held is not None:
        raise ExecutionError(f"cannot grasp {inv.object}: already holding {state.held}")
    if inv.effect in ("release", "pour") and state.held != inv.object:
        raise ExecutionError(f"cannot {inv.effect} {inv.object}: not holding it")
    target = inv.goal.partition(":")[2] if inv.goal.startswith("over:") else None
    poured = False

    def track(t, y):
        nonlocal poured
        state.gripper = y.copy()
        if state.held is not None:
            state.poses[state.held] = state.gripper  # same array: the pose tracks the gripper
        if target is not None and y[3] > POUR_TILT:
            if np.linalg.norm(y[:2] - state.poses[target][:2]) < POUR_RADIUS:
                poured = True
        if monitor is not None:
            monitor(t, state)

    traj = rollout(prim, state.gripper.copy(), goal, dt=dt, T=horizon * prim.tau, callback=track)
    traj.name = f"{inv.primitive} {inv.object}"
    if inv.effect == "grasp":
        miss = np.linalg.norm(state.gripper[:3] - state.poses[inv.object][:3])
        if miss > GRASP_TOLERANCE:
            raise ExecutionError(f"grasp of {inv.object} missed by {miss:.4f} m")
        state.held = inv.object
        state.poses[inv.object] = state.gripper
        state.resting.pop(inv.object, None)
    elif inv.effect == "release":
        state.poses[inv.object] = state.gripper.copy()
        state.held = None
        kind = inv.goal.partition(":")[0]
        state.resting[inv.object] = rest.get(inv.object, "bench") if kind == "home" else inv.goal
    elif inv.effect == "pour":
        if not poured:
            raise ExecutionError(f"pour of {inv.object} missed {target}")
        items = state.contents.setdefault(target, [])
        if inv.object not in items:
            items.append(inv.object)
    return traj


def align_and_execute(
    actions: ActionSequence,
    library: DmpLibrary,
    state: KitchenState,
    task: TaskSpec | None = None,
    dt: float = 0.01,
    horizon: float = 3.0,
    strict: bool = False,
    monitor=None,
) -> tuple[KitchenState, bool, ExecutionLog]:
    """Execute each step's primitives in order and test the task's end state.

    The input state is not modified. The first step that cannot be aligned
    (coverage), names an object missing from the bench (grounding) or fails
    kinematically halts execution; the failure is the last log entry, or is
    raised with ``strict``. ``horizon`` is the rollout length in units of
    each primitive's time constant. ``monitor(t, state)``, if given, sees the
    live state after every integration step.
    """
    state = state.copy()
    log = ExecutionLog()
    failed = False
    for i, step in enumerate(actions.steps):
        entry = {"index": i, "step": str(step)}
        try:
            invs = library.lookup(step)
            missing = sorted({o for inv in invs for o in inv.referenced()} - state.bench)
            if missing:
                raise GroundingError(f"step '{step}' needs objects not on the bench: {missing}")
            home = {o: state.poses[o].copy() for o in step.nouns}
            rest = {o: state.resting.get(o, "bench") for o in step.nouns}
            prims = []
            for inv in invs:
                log.trajectories.append(_run(inv, library.primitives[inv.primitive], state, home, rest, dt,
                                            horizon, monitor))
                prims.append(inv.primitive)
            state.check_invariants()
            log.entries.append({**entry, "status": "ok", "primitives": prims})
        except ExecutionError as e:
            log.entries.append({**entry, "status": e.kind, "error": str(e)})
            failed = True
            if strict:
                raise
            break
    success = not failed and (task.satisfied(state) if task is not None else True)
    return state, success, log


# --------------------------------------------------------------------------
# the shipped library


def _min_jerk(s):
    return 10 * s**3 - 15 * s**4 + 6 * s**5


def _bump(s):
    return 16 * s**2 * (1 - s) ** 2


def demo_trajectory(kind: str, duration: float = 1.5, n: int = 301) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic demonstration of a primitive in the ``(x, y, z, tilt)`` frame."""
    t = np.linspace(0.0, duration, n)
    s = t / duration
    y = np.zeros((n, 4))
    if kind in ("top-down pick", "side pick"):
        a, b = np.array([0.0, 0.2, 0.3]), np.array([0.3, 0.6, 0.0])
        y[:, :2] = a[:2] + (b - a)[:2] * _min_jerk(s)[:, None]
        # top-down: stay high and descend late; side: descend first, then slide in
        zs = _min_jerk(s**2) if kind == "top-down pick" else _min_jerk(np.minimum(1.0, 2 * s))
        y[:, 2] = a[2] + (b[2] - a[2]) * zs
    elif kind in ("top-down place", "side place"):
        a, b = np.array([0.3, 0.6, 0.0]), np.array([0.0, 0.35, 0.02])
        y[:, :3] = a + (b - a) * _min_jerk(s)[:, None]
        y[:, 2] += (0.15 if kind == "top-down place" else 0.04) * _bump(s)
    elif kind == "pour":
        a, b = np.array([0.3, 0.6, 0.0]), np.array([0.0, 0.35, 0.15])
        u = np.clip(s / 0.45, 0.0, 1.0)
        y[:, :3] = a + (b - a) * _min_jerk(u)[:, None]
        v = np.clip((s - 0.4) / 0.6, 0.0, 1.0)
        y[:, 3] = 1.8 * _bump(v)
    else:
        raise LibraryError(f"no demonstration for {kind!r}")
    return t, y


PRIMITIVE_KINDS = ("top-down pick", "top-down place", "side pick", "side place", "pour")


def build_kitchen_library(world: WorldSpec, n_basis: int = 20) -> DmpLibrary:
    """Fit the primitives from synthetic demos and align every place/pour production."""
    prims = {k: fit_dmp(*demo_trajectory(k), n_basis=n_basis, name=k) for k in PRIMITIVE_KINDS}
    cat = {n: c for c, ns in world.noun_categories.items() for n in ns}
    entries: dict = {}
    for step in world.productions():
        nouns = step.nouns
        if step.verb == "place" and len(nouns) == 1:
            o = nouns[0]
            invs = [Invocation("top-down pick", o, "object", "grasp"),
                    Invocation("top-down place", o, "site:workspace", "release")]
        elif step.verb == "place" and len(nouns) == 2:
            o, surface = nouns
            invs = [Invocation("side pick", o, "object", "grasp"),
                    Invocation("side place", o, f"slot:{surface}", "release")]
        elif step.verb == "pour" and cat[nouns[0]] in ("liquid", "granular"):
            o = nouns[0]
            target = nouns[1] if len(nouns) == 2 else "bowl"
            invs = [Invocation("top-down pick", o, "object", "grasp"),
                    Invocation("pour", o, f"over:{target}", "pour"),
                    Invocation("top-down place", o, "home", "release")]
        else:
            continue
        entries[step.key()] = invs
    lib = DmpLibrary(prims, entries)
    lib.validate(world.verbs, world.nouns)
    return lib


def kitchen_tasks() -> list[TaskSpec]:
    """The three demonstration tasks: cereal, coffee and serving drinks."""
    return [
        TaskSpec("cereal", ActionSequence.parse("place bowl, pour cereal, pour milk"),
                 [{"at": "bowl", "site": "workspace"}, {"contains": "bowl", "items": ["cereal", "milk"]},
                  {"hand_empty": True}], ["bowl"]),
        TaskSpec("coffee", ActionSequence.parse("pour coffee cup, pour milk cup"),
                 [{"contains": "cup", "items": ["coffee", "milk"]}, {"hand_empty": True}]),
        TaskSpec("drinks", ActionSequence.parse("place orange-juice tray, place strawberry-juice tray"),
                 [{"on": "tray", "items": ["orange-juice", "strawberry-juice"]}, {"hand_empty": True}]),
    ]


def _resource(name: str):
    return resources.files("avaction").joinpath("resources", name)


def default_library() -> DmpLibrary:
    with resources.as_file(_resource("kitchen_library.json")) as p:
        return DmpLibrary.load(p)


def default_tasks() -> list[TaskSpec]:
    with resources.as_file(_resource("kitchen_tasks.json")) as p:
        return load_tasks(p)
