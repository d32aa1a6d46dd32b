# %% [markdown]
# # Parsing one demonstration into primitives
#
# Collect a small IDM dataset, train the inverse dynamics model briefly, then
# segment a scripted PickPlaceLite demonstration and replay the result.
# Run with `python notebooks/01_parse_a_demo.py` (one to two minutes on one core).

# %%
import numpy as np

from primil.collector import CollectorConfig, collect_dataset
from primil.demos import script_demo
from primil.idm import classification_accuracy, train_idm
from primil.nn import TrainConfig
from primil.parser import parse_dp, parse_greedy, replay

# %%
data = collect_dataset("PickPlaceLite", CollectorConfig(episodes=2000, seed=0))
print(len(data), "samples;", data.counts())

# %%
train, held = data.split(0.1, seed=0)
models = train_idm(train, TrainConfig(epochs=60, seed=0), TrainConfig(epochs=150, batch_size=128, seed=0))
print("held-out type accuracy: %.3f" % classification_accuracy(models, held))

# %% [markdown]
# A demonstration is a few hundred motor steps; the parse should be a handful
# of primitives whose replay still solves the task.

# %%
demo = script_demo("PickPlaceLite", seed=5, noise=0.1)
parsed = parse_dp(demo, models, stride=2)
for seg in parsed.segments:
    x = "none" if seg.x is None else np.round(seg.x, 3)
    print(f"{seg.t_start:4d} -> {seg.t_end:4d}  {seg.p.name:6s} {x}")
print("replay success:", replay(parsed, demo).success)

# %%
greedy = parse_greedy(demo, models, stride=2)
print("DP log score %.2f vs greedy %.2f" % (parsed.total_log_score, greedy.total_log_score))
