"""Shared fixtures: a fast toy configuration for end-to-end runs."""

import pytest

from spherekd.config import RunConfig, apply_overrides

TOY_OVERRIDES = [
    "arch.input_size=8",
    "arch.num_stages=2",
    "arch.teacher_channels=[4, 6]",
    "arch.student_channels=[2, 3]",
    "arch.block_depth=1",
    "arch.embedding_dim=4",
    "data.image_size=8",
    "data.num_train_classes=8",
    "data.num_test_classes=4",
    "data.samples_per_class=6",
    "data.latent_dim=8",
    "data.num_distractors=8",
    "data.pairs_per_side=10",
    "data.folds=2",
    "train.batch_size=8",
    "train.teacher_epochs=3",
    "train.student_epochs=3",
]


def make_toy_config(out_dir, extra=()):
    cfg = apply_overrides(RunConfig().validate(), TOY_OVERRIDES + list(extra))
    return apply_overrides(cfg, [f"output_dir={out_dir}"])


@pytest.fixture
def toy_config(tmp_path):
    return make_toy_config(tmp_path / "run")
