"""A small simulated vision-then-touch exploration of a sphere.

The camera starts at one pose and greedily picks further views by ensemble
information gain; a tactile probe then touches wherever the surface is least
certain.  Every step prints the chosen pose or point and the largest
occupancy variance left on the true surface.

    python demos/active_exploration.py
"""
import json

from gpdf import sim

config = {
    "scene": {
        "primitives": [{"type": "sphere", "params": {"center": [0, 0, 0], "radius": 0.15},
                        "color": [0.8, 0.2, 0.2]}],
        "workspace_box": [[-0.2, -0.2, -0.2], [0.2, 0.2, 0.2]],
    },
    "budgets": {"views": 2, "touches": 4},
    "seed": 3,
}
res = sim.run_exploration(config)
for entry in res.metrics:
    ig = "-" if entry["max_ig"] is None else f"{entry['max_ig']:.1f}"
    where = ", ".join(f"{v:+.3f}" for v in entry["chosen_pose_or_point"])
    print(f"step {entry['step']:2d} {entry['phase']:6s} at ({where})  IG {ig:>7s}"
          f"  max surface variance {entry['max_surface_var']:.3e}")
print(f"{len(res.touches)} contacts; final model has {res.model.n} points")
print("config used:", json.dumps(config["budgets"]))
