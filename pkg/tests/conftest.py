import json
import sys

import pytest

from semfuse.data import BinaryLabel, Category, PostRecord, Source
from semfuse.synthetic import make_corpus


def make_record(i, binary=0, category=None, text="some text", ocr="", image="img.png", source=Source.TWITTER):
    return PostRecord(
        id=f"r{i}",
        text=text,
        image_path=image,
        ocr_text=ocr,
        binary_label=BinaryLabel(binary),
        category_label=None if category is None else Category(category),
        source=source,
    )


def write_jsonl(path, objs):
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write((obj if isinstance(obj, str) else json.dumps(obj)) + "\n")
    return path


@pytest.fixture(scope="session")
def corpus16(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus16")
    return root, make_corpus(root, n=16, seed=1)


@pytest.fixture(scope="session")
def corpus50(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus50")
    return root, make_corpus(root, n=50, seed=3)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
