import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tracegen import generator as gen
from tracegen import toydata as td
from tracegen.discriminator import DiscriminatorModel

TINY = td.WorldParams(train_speakers=16, train_scripts=6, dev_speakers=3,
                      dev_scripts=3, test_speakers=3, test_scripts=3,
                      script_tokens=6)


@pytest.fixture(scope="session")
def tiny_world():
    return td.World(TINY, seed=0)


@pytest.fixture(scope="session")
def pretrained_gen(tiny_world):
    """A small trained generator. Tests must not mutate it; use copy_gen."""
    model, curve = gen.make_pretrained(tiny_world, seed=0, epochs=32, lr=1.5e-3)
    model.pretrain_curve = curve
    return model


@pytest.fixture()
def copy_gen(tmp_path):
    def _copy(model):
        path = tmp_path / "gen_copy.ckpt"
        model.save(path)
        return gen.GeneratorModel.load(path)
    return _copy


@pytest.fixture()
def copy_disc(tmp_path):
    def _copy(model):
        path = tmp_path / "disc_copy.ckpt"
        model.save(path)
        return DiscriminatorModel.load(path)
    return _copy
