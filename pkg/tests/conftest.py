import pytest

from lorentz_st.data import SynthConfig, generate_synthetic
from lorentz_st.train import TrainConfig, prepare

TINY_SYNTH = SynthConfig(slides=3, spots_per_slide=80, n_genes_raw=60, feature_dim=8)
TINY_TRAIN = TrainConfig(
    n_genes=20, embed_dim=8, gene_hidden=16, decoder_hidden=16, adapter_rank=2, batch_size=16, epochs=3
)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(TINY_SYNTH)


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    return prepare(tiny_dataset, TINY_TRAIN)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_synthetic(SynthConfig())
