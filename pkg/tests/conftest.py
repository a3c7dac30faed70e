import pytest

from dtcnsim.data import SyntheticSpec, generate_synthetic
from dtcnsim.jscrc import Mode, PipelineConfig
from dtcnsim.training import TrainConfig


@pytest.fixture
def small_spec() -> SyntheticSpec:
    return SyntheticSpec(
        n_classes=4, img_dim=8, txt_dim=6, n_train=64, n_test=32, seed=7
    )


@pytest.fixture
def small_data(small_spec):
    return generate_synthetic(small_spec)


@pytest.fixture
def small_pipeline_config(small_spec):
    def make(mode: Mode = Mode.DTCN, snr_db: float = 10.0) -> PipelineConfig:
        return PipelineConfig(
            img_dim=small_spec.img_dim,
            txt_dim=small_spec.txt_dim,
            n_classes=small_spec.n_classes,
            d_sem=4,
            d_txt=3,
            d_fused=4,
            n_sym1=4,
            n_sym2=4,
            hidden=8,
            mode=mode,
        ).with_snr(snr_db)

    return make


@pytest.fixture
def quick_train_config() -> TrainConfig:
    return TrainConfig(
        epochs=(2, 2, 2), learning_rates=(0.05, 0.05, 0.02), batch_size=16, seed=3
    )


@pytest.fixture
def write_config(tmp_path):
    """Escribe un TOML con `body` y devuelve su ruta."""

    def write(body: str, name: str = "config.toml"):
        path = tmp_path / name
        path.write_text(body, encoding="utf-8")
        return path

    return write


