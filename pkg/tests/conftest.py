"""Shared fixtures: a micro synthetic dataset and desk-scale configs."""
import pytest

from viewdistill.config import (FDConfig, OptimConfig, ScheduleConfig,
                                StudentConfig, TeacherConfig)
from viewdistill.datasets import SyntheticSpec, generate_synthetic, ingest
from viewdistill.views import canonical_views, scale_views


def micro_config(seed: int = 0, epochs: int = 2) -> FDConfig:
    """Smallest config that still exercises every code path."""
    return FDConfig(
        views=scale_views(canonical_views(), holistic_hw=(32, 16),
                          partial_hw=(32, 32)),
        teacher=TeacherConfig(backbone="ref", width=4, holistic_dim=16,
                              partial_dim=8),
        student=StudentConfig(backbone="ref", width=4, embedding_dim=16),
        featsel_channels=16,
        pool_kernel=2,
        branch_pool_kernel=2,
        optim=OptimConfig(batch_size=8, lr=0.0025),
        teacher_schedule=ScheduleConfig(halve_every=2, epochs=epochs),
        student_schedule=ScheduleConfig(halve_every=2, epochs=epochs),
        seed=seed,
    )


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """Tiny dataset for fast unit tests (6 train ids, 3 test ids)."""
    root = tmp_path_factory.mktemp("micro_data")
    spec = SyntheticSpec(n_train_ids=6, n_test_ids=3, images_per_id=4,
                         test_images_per_id=4, height=32, width=16, seed=11)
    generate_synthetic(spec, root)
    return root


@pytest.fixture(scope="session")
def micro_manifest(micro_dataset):
    return ingest(micro_dataset)
