import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from capctl.corpus import CorpusConfig, build_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    cfg = CorpusConfig(train_scenes=24, val_scenes=6, test_scenes=6, seed=123)
    return build_dataset(cfg, tmp_path_factory.mktemp("tiny") / "data")
