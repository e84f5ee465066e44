"""Smoke test for the sdql Python module.

Run with `python python/smoke_test.py` or `pytest python/smoke_test.py`
after installing the extension (see README).
"""

import os
import tempfile

import numpy as np
import sdql

GRID = """
seed = 5

[environment]
name = "gridworld"
rows = 5
cols = 5
band_thresholds = [2]
goal = [4, 4]

[stages]
n_stages = 2
discounts = [0.9, 0.9]
max_steps = 40

[trainer]
episodes_per_phase = 40
batch_size = 16
warmup_steps = 16
eval_every = 20
eval_episodes = 1

[[modules]]
kind = "tabular"
epsilon_end = 0.2
epsilon_decay_steps = 2000

[[modules]]
kind = "tabular"
epsilon_end = 0.2
epsilon_decay_steps = 2000
"""


def test_validate_config():
    canonical = sdql.validate_config(GRID)
    assert 'name = "gridworld"' in canonical
    try:
        sdql.validate_config(GRID.replace("warmup_steps", "warmup_step"))
    except ValueError as e:
        assert "warmup_step" in str(e)
    else:
        raise AssertionError("unknown key accepted")


def test_exact_solvers_agree():
    backward = np.array(sdql.solve_gridworld(GRID, "backward"))
    flat = np.array(sdql.solve_gridworld(GRID, "flat"))
    assert backward.shape == (5, 5)
    assert np.max(np.abs(backward - flat)) < 1e-9
    assert backward[4, 3] > backward[0, 0] > 0


def test_train_save_resume_and_query():
    trainer = sdql.Trainer(GRID)
    first = trainer.run_episode()
    assert first["phase"] == 2 and first["episode"] == 1
    assert trainer.run(29) == 29
    assert trainer.progress["episodes_done"] == 30

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "run.sdql")
        trainer.save(path)
        resumed = sdql.Trainer.resume(path)
        assert resumed.checkpoint_bytes() == trainer.checkpoint_bytes()
        trainer.run()
        resumed.run()
        assert trainer.is_done and resumed.is_done
        assert resumed.checkpoint_bytes() == trainer.checkpoint_bytes()

        trainer.save(path)
        policy = sdql.Policy.load(path)

    assert policy.environment == "gridworld"
    assert policy.state_labels == ["row", "col"]
    live = trainer.policy()
    for r in range(5):
        for c in range(5):
            assert policy.act([r, c]) == live.act([r, c])
            assert policy.stage([r, c]) == (1 if c < 2 else 2)

    grid = policy.value_grid()
    values = np.array(grid["values"])
    assert values.shape == (5, 5) and values[4, 4] == 0.0
    assert np.all(np.isfinite(values))

    out = policy.evaluate(3)
    assert out["stats"]["episodes"] == 3
    assert len(out["trajectories"]) == 3
    assert trainer.diagnostics["truncation_violations"] == 0

    try:
        policy.act([9, 9])
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-grid state accepted")


def test_missing_checkpoint():
    try:
        sdql.Policy.load("/nonexistent/run.sdql")
    except OSError:
        pass
    else:
        raise AssertionError("missing file accepted")


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")
    print("smoke test passed")
