import numpy as np
import pytest

from cxrpipe.datagen import CLASS_NAMES, PhantomSpec, generate_phantom


def phantom_batch(n, size=64, seed0=0, labels=None):
    """n phantoms cycling through the classes; returns (X, masks, y)."""
    imgs, masks, ys = [], [], []
    for i in range(n):
        label = labels[i] if labels else CLASS_NAMES[i % 3]
        img, mask, _ = generate_phantom(PhantomSpec(seed=seed0 + i, size=size, class_label=label))
        imgs.append(img)
        masks.append(mask)
        ys.append(CLASS_NAMES.index(label))
    return np.stack(imgs), np.stack(masks), np.array(ys)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def phantom_dataset_dir(tmp_path_factory):
    """A small on-disk phantom dataset shared across tests."""
    from cxrpipe.datagen import generate_dataset

    root = tmp_path_factory.mktemp("phantoms")
    generate_dataset(root, counts=8, seed=7, size=32)
    return root
