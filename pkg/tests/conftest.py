import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
REPORT_DIR = FIXTURES / "reports"


@pytest.fixture(scope="session")
def report_labels() -> dict:
    return json.loads((REPORT_DIR / "labels.json").read_text())


@pytest.fixture(scope="session")
def report_texts(report_labels) -> dict:
    return {name: (REPORT_DIR / name).read_text() for name in report_labels}


@pytest.fixture(scope="session")
def corpus_143(tmp_path_factory) -> Path:
    import synth

    root = tmp_path_factory.mktemp("corpus143")
    synth.make_corpus(root, n=143)
    return root


@pytest.fixture(scope="session")
def mini_tree(tmp_path_factory) -> Path:
    import synth

    root = tmp_path_factory.mktemp("tree")
    synth.make_tree(root)
    return root
