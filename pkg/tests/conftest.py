from pathlib import Path

import pytest

from tape.config import TrainConfig

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"

_criteria: dict[int, dict] = {}


def tiny_config(**changes) -> TrainConfig:
    """A model small enough for many training iterations inside a unit test."""
    base = dict(seed=3, channels=2, patch_size=4, heads=2, plm_hidden=4, max_size=8, height=8, width=8,
                batch_size=1, pretrain_iters=6, finetune_iters=4, lr=1e-3, lr_decayed=5e-4, decay_step=3,
                finetune_lr=1e-3, eval_size=3)
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "tests": 0})
    if call.when == "call":
        entry["tests"] += 1
    if call.excinfo is not None:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']} ({entry['tests']} checks)")


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Pre-train the shipped toy config once through the CLI; shared by slow tests."""
    import time

    from tape.checkpoint import load_checkpoint
    from tape.cli import main

    out = tmp_path_factory.mktemp("toy") / "pretrain.ckpt"
    start = time.perf_counter()
    status = main(["pretrain", "--config", str(CONFIGS / "toy.json"), "--out", str(out)])
    seconds = time.perf_counter() - start
    assert status == 0
    return {"path": out, "seconds": seconds, "ckpt": load_checkpoint(out)}
