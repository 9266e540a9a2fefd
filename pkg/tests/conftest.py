import os

import numpy as np
import pytest

from loadforge.cli import synth_dataset
from loadforge.record_format import KIND_ENCODED, KIND_TENSOR, SamplePayload


def payload_of_size(key: str, body_len: int, label: int = 0) -> SamplePayload:
    """A kind-1 sample whose encoded body is exactly ``body_len`` bytes."""
    body = bytes((i * 31 + len(key)) & 0xFF for i in range(body_len))
    return SamplePayload(key, label, KIND_ENCODED, encoded=body)


def tensor_payload(key: str, shape=(4, 5, 3), seed: int = 0, dtype=np.uint8) -> SamplePayload:
    rng = np.random.default_rng(seed)
    if dtype == np.uint8:
        image = rng.integers(0, 256, shape, dtype=np.uint8)
    else:
        image = rng.standard_normal(shape).astype(np.float32)
    return SamplePayload(key, seed, KIND_TENSOR, image=image)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """4 classes x 8 images of 20x24 PPM files."""
    root = tmp_path_factory.mktemp("data") / "small"
    synth_dataset(root, classes=4, per_class=8, h=20, w=24, seed=11)
    return root


@pytest.fixture(scope="session")
def small_container(small_dataset):
    from loadforge.cli import pack_directory

    dest = str(small_dataset) + ".brc"
    if not os.path.exists(dest):
        pack_directory(small_dataset, dest, chunk_bytes=8192)
    return dest


# -- acceptance reporting ----------------------------------------------------------

_ACCEPTANCE: list[tuple[str, str, str]] = []


class _Criterion:
    def __init__(self, name):
        self.name = name
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail if exc_type is None else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        line = f"{status} {self.name}" + (f" ({detail})" if detail else "")
        print(line)
        _ACCEPTANCE.append((status, self.name, detail))
        return False


@pytest.fixture()
def criterion():
    """``with criterion("name") as c:`` records one PASS/FAIL line."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{status} {name}" + (f" ({detail})" if detail else ""))
