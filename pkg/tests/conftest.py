import os

import numpy as np
import pytest
import torch

from nicegan.config import parse_dict


def tiny_config(**overrides):
    base = dict(image_size=32, base_filters=4, n_res_blocks=1, scales_enabled=["c0", "c1"],
                iterations=3, log_every=1, checkpoint_every=0, synthetic_n=6,
                synthetic_n_test=4, seed=3)
    base.update(overrides)
    return parse_dict(base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


# -- desk-scale training runs shared by the acceptance suite -------------------------

ACCEPTANCE_LINES = []


def record_criterion(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class DeskRuns:
    """Trains each variant once per session on the synthetic hue-swap task."""

    def __init__(self, root):
        self.root = root
        self.cache = {}

    def get(self, variant: str) -> dict:
        if variant not in self.cache:
            self.cache[variant] = self._run(variant)
        return self.cache[variant]

    def _run(self, variant):
        from nicegan.analysis import evaluate_model
        from nicegan.config import desk_config
        from nicegan.data import datasets_for_config
        from nicegan.losses import NonFiniteLossError
        from nicegan.training import init_state, train

        cfg = desk_config(variant=variant, out_dir=str(self.root / variant))
        test_x, test_y = datasets_for_config(cfg, "test")
        wanted = ("kid", "cycle", "mmd")
        initial = init_state(cfg)
        before = evaluate_model(initial, test_x, test_y, metrics=wanted)
        result = {"cfg": cfg, "initial": initial, "before": before, "error": None,
                  "test": (test_x, test_y), "log_path": os.path.join(cfg.out_dir, "log.jsonl")}
        try:
            state, log = train(cfg)
        except NonFiniteLossError as exc:
            result["error"] = exc
            return result
        result.update(state=state, log=log,
                      after=evaluate_model(state, test_x, test_y, metrics=wanted))
        return result


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    return DeskRuns(tmp_path_factory.mktemp("desk_runs"))


def metric(reports, name, direction=None):
    for r in reports:
        if r.name == name and r.extra.get("direction") == direction:
            return r.value
    raise KeyError((name, direction))
