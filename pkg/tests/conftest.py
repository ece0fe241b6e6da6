import json
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from elastofusion.dataio import SynthConfig, generate_synthetic


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """12 patients, small images: cheap enough for unit tests that touch disk."""
    out = tmp_path_factory.mktemp("synth_small")
    return generate_synthetic(SynthConfig(n_patients=12, images_per_patient=(2, 3), image_size=64, seed=3), out)


@pytest.fixture(scope="session")
def cv_synth(tmp_path_factory):
    """Enough patients for a 5-fold split with a held-out test set."""
    out = tmp_path_factory.mktemp("synth_cv")
    return generate_synthetic(SynthConfig(n_patients=20, images_per_patient=(2, 2), image_size=64, seed=5), out)


def write_png(path: Path, arr: np.ndarray, mode: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode=mode).save(path)
    return path


def write_rows(path: Path, rows: list[dict]) -> Path:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return path


@pytest.fixture
def pair_files(tmp_path):
    """One gray + one RGB image pair on disk, 40 x 60."""
    g = write_png(tmp_path / "b.png", np.full((40, 60), 128), "L")
    c = write_png(tmp_path / "e.png", np.full((40, 60, 3), 64), "RGB")
    return tmp_path, g, c


# -- acceptance summary: one line per criterion ------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    config_results = item.config.stash[_CRITERIA]
    config_results[number] = ("PASS" if report.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail = results[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
