"""A few epochs of the feedback loop, with a local stand-in language model.

Run with ``python3 demos/closed_loop.py``. Training budgets are tiny, so the
policy barely learns; the point is to watch the configuration set change.
"""

# %% Starting set
from critgen import llm as L
from critgen.experiments import RunSettings, run_arm
from critgen.ppo import PpoConfig
from critgen.scenario import sample_config

train = [sample_config(s) for s in range(6)]
test = [sample_config(100 + s) for s in range(2)]
settings = RunSettings(epochs=3, episodes_per_config=2, eval_runs=2, max_steps=40,
                       ppo=PpoConfig(steps_per_update=256, minibatch_size=64, update_epochs=4))

# %% Direct perturbation and language-model variants side by side
with L.MockLlmServer() as server:
    runs = {
        "critical": run_arm("critical", train, test, settings, seed=0),
        "llm": run_arm("llm", train, test, settings, seed=0, llm=server.endpoint()),
    }
    print(f"stand-in model answered {len(server.requests)} requests\n")

for arm, res in runs.items():
    print(f"== {arm}")
    for e in res.experiment.epochs:
        labels = [c["label"] for c in e["classification"].values()]
        origins = [ev["origin"] for ev in e["selection"]["events"] if ev["event"] == "offspring"]
        t = e["training"]
        print(f"epoch {e['epoch']}: {len(e['configs'])} configs, "
              f"{labels.count('boundary')} boundary, {labels.count('edge_case')} edge, "
              f"training reward {t['mean_reward']:.2f}, crashes {t['crashes']}")
        print(f"   next set: {origins}")
    print("test evaluation:", {k: round(v, 3) for k, v in res.evaluation.summary().items()}, "\n")

# %% What the model was shown
from critgen.llm import PromptContext, build_prompt

print(build_prompt(PromptContext(base=train[0]))[:600], "...")
