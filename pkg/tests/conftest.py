"""Shared desk-scale datasets and trained models, plus the acceptance summary.

Training happens once per session through the command-line entry points, so
the trained-model fixtures also exercise ``synth`` and ``train`` end to end.
"""

import json
import time

import pytest

from derain.checkpoint import load_checkpoint
from derain.cli import main
from derain.synthesis import load_dataset

CRITERIA = {
    1: "synthesis exactness",
    2: "gradient correctness",
    3: "receptive field",
    4: "telescoping identity",
    5: "desk-scale training efficacy",
    6: "recurrence benefit",
    7: "pipeline ordering",
    8: "metric oracles",
    9: "determinism",
}

HEAVY = {"num_directions": 5, "density": 1.5}
DESK_NET = {"feature_channels": 16, "intra_recurrences": 2}
DERAIN_STEPS = 1500


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    results = item.config.stash.setdefault(_RESULTS, {})
    entry = results.setdefault(n, {"passed": True, "seen": False, "details": []})
    if report.when == "call":
        entry["seen"] = True
        entry["details"] += [f"{k}={v}" for k, v in item.user_properties]
    if report.failed or (report.when == "call" and report.skipped):
        entry["passed"] = False


_RESULTS = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        entry = results.get(n)
        if entry is None:
            status = "NOT RUN"
        else:
            status = "PASS" if entry["passed"] and entry["seen"] else "FAIL"
        details = "; ".join(entry["details"]) if entry else ""
        terminalreporter.write_line(f"criterion {n} ({name}): {status}"
                                    + (f"  [{details}]" if details else ""))


def synth(root, name, mode, synthesis, count, bg_seed, shape=(96, 96)):
    cfg = root / f"{name}.json"
    cfg.write_text(json.dumps({
        "mode": mode, "split": name, "synthesis": synthesis,
        "backgrounds": {"kind": "procedural", "count": count, "shape": list(shape),
                        "seed": bg_seed},
    }))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    return root / "data" / name


def train(root, name, **experiment):
    cfg = root / f"{name}.json"
    cfg.write_text(json.dumps({"output_dir": str(root / name), **experiment}))
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg)]) == 0
    return root / name, time.perf_counter() - t0


@pytest.fixture(scope="session")
def light_run(tmp_path_factory):
    """Joint network trained 2000 steps on 20 light-rain images; 8 held out."""
    root = tmp_path_factory.mktemp("light")
    t0 = time.perf_counter()
    train_dir = synth(root, "train", "light", {"seed": 3}, 20, bg_seed=1)
    test_dir = synth(root, "test", "light", {"seed": 99}, 8, bg_seed=2)
    run, _ = train(root, "run", dataset="data/train", kind="joint", network=DESK_NET, steps=2000,
                   checkpoint_every=500, seed=0)
    return {"train": train_dir, "test": test_dir, "run": run,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def light_model(light_run):
    return load_checkpoint(light_run["run"] / "last.pt")[0]


@pytest.fixture(scope="session")
def light_test(light_run):
    return load_dataset(light_run["test"])[0]


@pytest.fixture(scope="session")
def heavy_run(tmp_path_factory):
    """Recurrent (tau = 3) derain network and a dehazing network at desk scale.

    The derain network sees heavy rain with and without haze (its target
    keeps the veil) plus light rain, whose large rain-free areas teach it to
    leave clean content alone. The dehazing network sees haze alone, with
    transmissions up to 1 so clear inputs are in its training range.
    """
    root = tmp_path_factory.mktemp("heavy")
    synth(root, "rain", "heavy", {**HEAVY, "heavy_haze": False, "seed": 11}, 12, bg_seed=5)
    synth(root, "rainhaze", "heavy", {**HEAVY, "heavy_haze": True, "seed": 12}, 12, bg_seed=6)
    synth(root, "light", "light", {"seed": 14}, 12, bg_seed=11)
    synth(root, "haze", "haze", {"seed": 13, "alpha_range": [0.6, 1.0]}, 24, bg_seed=7)
    tests = {
        "rain_test": synth(root, "rain_test", "heavy",
                           {**HEAVY, "heavy_haze": False, "seed": 21}, 8, bg_seed=8),
        "rainhaze_test": synth(root, "rainhaze_test", "heavy",
                               {**HEAVY, "heavy_haze": True, "seed": 22}, 8, bg_seed=9),
        "haze_test": synth(root, "haze_test", "haze", {"seed": 23}, 6, bg_seed=10),
    }
    derain, _ = train(root, "derain", dataset=["data/rain", "data/rainhaze", "data/light"],
                      kind="recurrent", tau=3, network=DESK_NET, steps=DERAIN_STEPS,
                      checkpoint_every=500, seed=0)
    dehaze, _ = train(root, "dehaze", dataset="data/haze", kind="dehaze", network=DESK_NET,
                      steps=3000, checkpoint_every=1000, seed=0)
    return {"derain": derain / "last.pt", "dehaze": dehaze / "last.pt", **tests}


@pytest.fixture(scope="session")
def dehaze_model(heavy_run):
    return load_checkpoint(heavy_run["dehaze"])[0]


@pytest.fixture(scope="session")
def haze_test(heavy_run):
    return load_dataset(heavy_run["haze_test"])[0]


@pytest.fixture
def record(request):
    """Attach a measured value to the current test's acceptance line."""
    def add(name, value):
        request.node.user_properties.append(
            (name, f"{value:.4g}" if isinstance(value, float) else value))
    return add
