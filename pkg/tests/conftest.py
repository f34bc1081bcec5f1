import pytest

from sundew.datagen import GeneratorSpec, generate_dataset, temporal_split
from sundew.domain import COMPONENTS, EnsembleConfig
from sundew.ensemble import train_ensemble


def small_spec(seed: int = 7, per_class: int = 40) -> GeneratorSpec:
    spec = GeneratorSpec(programs_per_class=per_class, seed=seed)
    for c in COMPONENTS:
        spec.rows_per_program[c] = (20, 40)
    return spec


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(small_spec())


@pytest.fixture(scope="session")
def small_splits(small_dataset):
    return temporal_split(small_dataset)


@pytest.fixture(scope="session")
def small_ensemble(small_splits):
    train, validate, _ = small_splits
    cfg = EnsembleConfig(seed=7)
    return train_ensemble(train.programs, validate.programs, cfg, workers=1)
