import pytest

from ynet_trainer import YNetConfig, train


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    # 64 randomized pairs, enough for smoke training and predict tests
    from wumrsi.phantom import export_dataset

    path = tmp_path_factory.mktemp("ds") / "ds64"
    export_dataset(64, path, seed=11)
    return path


@pytest.fixture(scope="session")
def small_checkpoint(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    ckpt, state = train(small_dataset, YNetConfig(epochs=5), out_dir=out, seed=0)
    return ckpt, state
