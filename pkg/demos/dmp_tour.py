"""Fit a primitive to a minimum-jerk reach, send it to a new goal, then run
the cereal task through the shipped kitchen library and print the log."""

import numpy as np

from avaction.dmp import align_and_execute, default_library, default_tasks, fit_dmp, kitchen_scene, rollout

t = np.linspace(0.0, 1.2, 241)
s = t / 1.2
reach = 10 * s**3 - 15 * s**4 + 6 * s**5
demo = np.stack([0.1 + 0.4 * reach, -0.2 + 0.3 * reach], 1)

dmp = fit_dmp(t, demo)
same = rollout(dmp, dt=t[1] - t[0])
rmse = np.sqrt(((same.y - demo) ** 2).mean(axis=0))
print("reproduction RMSE per dim:", np.round(rmse, 5))

moved = rollout(dmp, g=[0.7, 0.4], dt=0.005, T=3 * dmp.tau)
print("new goal [0.7, 0.4] reached at", np.round(moved.y[-1], 4))

task = {x.name: x for x in default_tasks()}["cereal"]
scene = kitchen_scene(task.required_objects() + ["knife", "sugar", "plate"], seed=1)
final, ok, log = align_and_execute(task.subtasks, default_library(), scene, task)
for e in log.entries:
    print(f"  {e['step']:<14} {e['status']:<10} {' -> '.join(e.get('primitives', []))}")
print("bowl holds", sorted(final.contents["bowl"]), "| success:", ok)
