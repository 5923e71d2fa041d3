import pytest
import torch

from sdtlab.phantoms import DatasetSpec, generate_dataset, save_dataset
from sdtlab.unet import BackboneConfig, build_unet

# Narrow backbone and 32px images keep unit-test runs fast on one CPU core.
TINY_WIDTHS = (8, 8, 8, 8, 8)
TINY_SPEC = DatasetSpec(num_classes=4, image_size=32, n_train=12, n_val=4,
                        n_test=6, seed=7)


def tiny_net(seed=0, num_classes=4, dtype=torch.float32):
    config = BackboneConfig(num_classes=num_classes, widths=TINY_WIDTHS)
    return build_unet(config, seed, dtype)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("tiny_dataset")
    save_dataset(directory, generate_dataset(TINY_SPEC), TINY_SPEC)
    return directory
