"""Shared desk-scale fixtures.

The desk configuration (sensor density, split sizes, training lengths, and
attack budgets) and every numeric threshold asserted against it were pinned
from pilot runs on this code base; they are deliberately small enough that
the whole suite runs on a laptop CPU.
"""

import math
import warnings

import numpy as np
import pytest

from advfield import attack, evaluate, field, simulator, victim

# desk sensor: denser than nothing, far sparser than a production unit
DESK_SENSOR = simulator.SensorSpec(
    channels=20,
    elevation_min=math.radians(-15.0),
    elevation_max=math.radians(4.0),
    azimuth_resolution=math.radians(0.7),
)

DESK_SIZES = (200, 50, 50, 50)
DESK_BASE_SEED = 0
N_CLASSES = len(simulator.CLASS_NAMES)
CAR = simulator.CAR

SEG_EPOCHS = 16
SEG_LR = 0.01
DET_EPOCHS = 14
DET_LR = 0.01


@pytest.fixture(scope="session")
def desk_splits():
    return simulator.make_splits(DESK_BASE_SEED, sizes=DESK_SIZES, sensor=DESK_SENSOR)


@pytest.fixture(scope="session")
def train_scenes(desk_splits):
    return desk_splits["train"]


@pytest.fixture(scope="session")
def val_scenes(desk_splits):
    return desk_splits["val"]


@pytest.fixture(scope="session")
def seg_victim(train_scenes):
    clouds = [s.cloud for s in train_scenes]
    return victim.train_seg(clouds, N_CLASSES, epochs=SEG_EPOCHS, lr=SEG_LR, seed=1)


@pytest.fixture(scope="session")
def det_victim(train_scenes):
    clouds = [s.cloud for s in train_scenes]
    boxes = [[sb.box for sb in s.boxes if sb.class_id == CAR] for s in train_scenes]
    return victim.train_det(clouds, boxes, epochs=DET_EPOCHS, lr=DET_LR, seed=2)


@pytest.fixture(scope="session")
def car_bank(train_scenes, seg_victim):
    """Untargeted car bank used by the augmentation and analysis tests."""
    bank = field.make_bank(CAR, "car", (1.8, 1.6, 4.6), 0.2, 12, 6, seed=5)
    cfg = attack.AttackConfig(mode="seg-untargeted", adversarial_class=CAR,
                              eps=0.3, psi=0.3, lr=0.01, iterations=60, k=2, seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bank, _ = attack.fit_bank(bank, train_scenes[:60], seg_victim, cfg)
    return bank


def car_iou_over(model, scenes):
    return evaluate.miou_over_scenes(model, scenes, N_CLASSES).iou[CAR]


def small_cloud(seed=7, n=300, area=12.0):
    """Random labeled cloud away from grid degeneracies, for gradient checks."""
    from advfield.cloudio import PointCloud

    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-area, area, (n, 3))
    xyz[:, 2] = rng.uniform(0.3, 3.0, n)
    return PointCloud(xyz, rng.uniform(0.05, 0.95, n),
                      rng.integers(0, N_CLASSES, n), np.zeros(n, np.int32)), rng
