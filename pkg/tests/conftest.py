import sys

import pytest
import torch

from wildcode import scenegen as sg

torch.set_num_threads(1)

TINY = {"embed_dim": 8, "feature_dim": 32, "max_objects": 3, "place_radius": 6.0, "cam_distance": (12.0, 18.0)}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    cfg = sg.GenConfig(**TINY, seed=7)
    return sg.emit_dataset(cfg, 20, 2, tmp_path_factory.mktemp("tiny"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(results):
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
