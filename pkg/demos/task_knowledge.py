"""Restrict decoding to the objects on the workbench and watch both the
action error and the simulated task success move.

A deliberately undertrained model on noisy features confuses objects; the
bench mask removes the ones that cannot be there.
"""

import dataclasses
import warnings

from avaction.data import ActionSequence, generate_dataset, generate_task_videos, kitchen_world
from avaction.decode import StructuralWarning, TaskKnowledge
from avaction.dmp import align_and_execute, default_library, kitchen_scene, kitchen_tasks
from avaction.metrics import format_table
from avaction.training import TrainConfig, decode_actions, evaluate_model, train

warnings.simplefilter("ignore", StructuralWarning)
world = dataclasses.replace(kitchen_world(), noise=1.0)
data = generate_dataset(world, n_videos=40, segments_per_video=4, seed=1)
model = train(data, None, "baseline", TrainConfig(steps=600, eval_every=600, seed=1)).params

tasks = kitchen_tasks()
clips = generate_task_videos(world, [t.subtasks for t in tasks], 10, seed=1, bench_extra=4)
lex = clips.lexicon
masks = {r.video_id: TaskKnowledge.from_names(lex, [n for n in r.bench if n in lex.action_index]) for r in clips.records}

plain = evaluate_model(model, clips, label="w/o task knowledge")
masked = evaluate_model(model, clips, masks=masks, label="w/ task knowledge")
print(format_table([plain, masked], "task"))

# execute the masked decodes of the first clip of each task in the simulator
library = default_library()
by_clip: dict = {}
for rec, _, seq in decode_actions(model, clips, masks=masks):
    by_clip.setdefault(rec.video_id, (rec.bench, []))[1].extend(seq.steps)
print()
for ti, task in enumerate(tasks):
    bench, steps = by_clip[f"task{ti}_000"]
    plan = ActionSequence(tuple(steps))
    _, ok, _ = align_and_execute(plan, library, kitchen_scene(bench, seed=ti), task)
    print(f"{task.name:<8} wanted:  {task.subtasks}\n{'':<8} decoded: {plan}\n{'':<8} executed successfully: {ok}")
