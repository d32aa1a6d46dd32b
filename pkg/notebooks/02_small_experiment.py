# %% [markdown]
# # A small end-to-end run
#
# The same pipeline as `primil run-all`, scaled down so it finishes in under a
# minute. Numbers from this size are noisy; the default configuration is what
# the acceptance suite measures.

# %%
import tempfile

from primil.harness import ExperimentConfig, run_pipeline

cfg = ExperimentConfig.from_dict({
    "task": "PickPlaceLite", "demos": 10, "seeds": [0],
    "collector": {"episodes": 600},
    "idm_classifier": {"epochs": 20}, "idm_params": {"epochs": 40},
    "policy_finetune": {"epochs": 30}, "bc": {"epochs": 30},
    "eval_episodes": 10, "bc_max_steps": 400,
})

# %%
out = tempfile.mkdtemp(prefix="primil_")
rep = run_pipeline(cfg, out)
for name, (mean, std) in rep.aggregate().items():
    print(f"{name:22s} {mean:8.4f} +/- {std:.4f}")
print("ablations:", rep.ablation_aggregate())
print("artifacts in", out)
