"""Staged convolutional networks for teacher-student training.

A network is an ordered list of stages (blocks). Each block downsamples
spatially by exactly 2x and produces the stage feature F_i; a flatten+linear
head maps the last stage feature to the embedding. Teacher and student share
this structure and differ only in channel widths, so a per-stage 1x1
projection (plus batch norm) can lift student features into teacher width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .rng import substream


@dataclass(frozen=True)
class ArchConfig:
    """Shapes of the reference teacher/student pair."""

    input_size: int = 16
    in_channels: int = 1
    num_stages: int = 4
    teacher_channels: tuple[int, ...] = (32, 64, 128, 256)
    student_channels: tuple[int, ...] = (8, 16, 32, 64)
    block_depth: int = 2
    embedding_dim: int = 32

    def validate(self) -> "ArchConfig":
        if self.num_stages < 1:
            raise ConfigError("num_stages must be >= 1")
        if len(self.teacher_channels) != self.num_stages:
            raise ConfigError(
                f"teacher_channels has {len(self.teacher_channels)} entries "
                f"for {self.num_stages} stages"
            )
        if len(self.student_channels) != self.num_stages:
            raise ConfigError(
                f"student_channels has {len(self.student_channels)} entries "
                f"for {self.num_stages} stages"
            )
        if any(c < 1 for c in self.teacher_channels + self.student_channels):
            raise ConfigError("channel counts must be positive")
        if self.block_depth < 1:
            raise ConfigError("block_depth must be >= 1")
        if self.input_size < 2**self.num_stages:
            raise ConfigError(
                f"input_size {self.input_size} too small for {self.num_stages} halvings"
            )
        if self.embedding_dim < 1 or self.in_channels < 1:
            raise ConfigError("embedding_dim and in_channels must be positive")
        return self

    def stage_sizes(self) -> list[int]:
        """Spatial side length after each stage."""
        sizes, s = [], self.input_size
        for _ in range(self.num_stages):
            s = (s + 1) // 2
            sizes.append(s)
        return sizes

    def canonical(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "num_stages": self.num_stages,
            "teacher_channels": list(self.teacher_channels),
            "student_channels": list(self.student_channels),
            "block_depth": self.block_depth,
            "embedding_dim": self.embedding_dim,
        }


class BatchNorm:
    """Per-channel batch normalization over all non-channel axes.

    Train mode normalizes with batch statistics and updates the running
    estimates; eval mode normalizes with the running estimates. Variance is
    the biased estimator in both modes.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.9):
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            xhat = centered / ((var + self.eps) ** 0.5)
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean.data.reshape(-1)
            self.running_var = m * self.running_var + (1.0 - m) * var.data.reshape(-1)
        else:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
        return xhat * self.gamma + self.beta


class ConvUnit:
    """3x3 conv (stride 1 or 2) -> batch norm -> PReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        fan_in = 9 * c_in
        self.stride = stride
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(3, 3, c_in, c_out)),
            requires_grad=True,
        )
        self.bn = BatchNorm(c_out)
        self.slope = Tensor(np.full(c_out, 0.25), requires_grad=True)

    def forward(self, x: Tensor, train: bool) -> Tensor:
        y = ad.conv2d_3x3(x, self.weight, stride=self.stride)
        y = self.bn.forward(y, train)
        return ad.prelu(y, self.slope)


class Block:
    """One stage: `depth` conv units, the first with stride 2."""

    def __init__(self, c_in: int, c_out: int, depth: int, rng: np.random.Generator):
        self.c_in = c_in
        self.c_out = c_out
        self.units = []
        for k in range(depth):
            self.units.append(ConvUnit(c_in if k == 0 else c_out, c_out, 2 if k == 0 else 1, rng))

    def forward(self, x: Tensor, train: bool) -> Tensor:
        for unit in self.units:
            x = unit.forward(x, train)
        return x


class StagedNetwork:
    """Composition of stage blocks plus a flatten+linear embedding head."""

    def __init__(self, arch: ArchConfig, channels: tuple[int, ...], rng: np.random.Generator):
        arch.validate()
        self.arch = arch
        self.channels = tuple(channels)
        self.frozen = False
        self.blocks: list[Block] = []
        c_prev = arch.in_channels
        for c in channels:
            self.blocks.append(Block(c_prev, c, arch.block_depth, rng))
            c_prev = c
        side = arch.stage_sizes()[-1]
        self.flat_dim = side * side * channels[-1]
        self.head_weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / self.flat_dim), size=(self.flat_dim, arch.embedding_dim)),
            requires_grad=True,
        )

    @property
    def num_stages(self) -> int:
        return len(self.blocks)

    def _check_stage_input(self, x: Tensor, stage: int) -> None:
        expected_c = self.blocks[stage - 1].c_in
        if x.ndim != 4 or x.shape[-1] != expected_c:
            raise DimensionError(
                f"stage {stage}: expected input [B,h,w,{expected_c}], got {x.shape}"
            )

    def forward(self, batch: Tensor, train: bool = False) -> tuple[list[Tensor], Tensor]:
        """All stage features F_1..F_n plus the embedding of the last one."""
        batch = Tensor._lift(batch)
        x = batch
        features: list[Tensor] = []
        for i, block in enumerate(self.blocks, start=1):
            self._check_stage_input(x, i)
            x = block.forward(x, train)
            features.append(x)
        return features, self.head(x)

    def head(self, feature: Tensor) -> Tensor:
        flat = feature.reshape(feature.shape[0], self.flat_dim)
        return ad.matmul(flat, self.head_weight)

    def tail(self, stage: int, feature: Tensor) -> Tensor:
        """Embed `feature` by running blocks stage+1..n and the head.

        The tail always runs in eval mode: a frozen network is a fixed
        function. Gradients still flow through to `feature`.
        """
        if not 1 <= stage <= self.num_stages:
            raise DimensionError(f"stage {stage} outside 1..{self.num_stages}")
        feature = Tensor._lift(feature)
        expected_c = self.blocks[stage - 1].c_out
        side = self.arch.stage_sizes()[stage - 1]
        if feature.ndim != 4 or feature.shape[1:] != (side, side, expected_c):
            raise DimensionError(
                f"stage {stage}: tail expects [B,{side},{side},{expected_c}], got {feature.shape}"
            )
        x = feature
        for i in range(stage, self.num_stages):
            x = self.blocks[i].forward(x, train=False)
        return self.head(x)

    # -- parameter bookkeeping --------------------------------------------

    def trainable_params(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks, start=1):
            for k, unit in enumerate(block.units, start=1):
                params[f"block{i}.conv{k}.weight"] = unit.weight
                params[f"block{i}.bn{k}.gamma"] = unit.bn.gamma
                params[f"block{i}.bn{k}.beta"] = unit.bn.beta
                params[f"block{i}.prelu{k}.slope"] = unit.slope
        params["head.weight"] = self.head_weight
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs: dict[str, np.ndarray] = {}
        for i, block in enumerate(self.blocks, start=1):
            for k, unit in enumerate(block.units, start=1):
                bufs[f"block{i}.bn{k}.running_mean"] = unit.bn.running_mean
                bufs[f"block{i}.bn{k}.running_var"] = unit.bn.running_var
        return bufs

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        for i, block in enumerate(self.blocks, start=1):
            for k, unit in enumerate(block.units, start=1):
                unit.bn.running_mean = bufs[f"block{i}.bn{k}.running_mean"].copy()
                unit.bn.running_var = bufs[f"block{i}.bn{k}.running_var"].copy()

    def param_count(self) -> int:
        return sum(p.data.size for p in self.trainable_params().values())

    def freeze(self) -> None:
        for p in self.trainable_params().values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True


class StudentTransform:
    """Lift a student stage feature to teacher width: 1x1 conv then batch norm."""

    def __init__(self, stage: int, c_student: int, c_teacher: int, rng: np.random.Generator):
        self.stage = stage
        self.c_student = c_student
        self.c_teacher = c_teacher
        self.proj = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / c_student), size=(c_student, c_teacher)),
            requires_grad=True,
        )
        self.bn = BatchNorm(c_teacher)

    def forward(self, feature: Tensor, train: bool) -> Tensor:
        feature = Tensor._lift(feature)
        if feature.shape[-1] != self.c_student:
            raise DimensionError(
                f"stage {self.stage}: transform expects {self.c_student} channels, "
                f"got {feature.shape}"
            )
        return self.bn.forward(ad.conv2d_1x1(feature, self.proj), train)

    def trainable_params(self) -> dict[str, Tensor]:
        return {
            f"transform{self.stage}.proj.weight": self.proj,
            f"transform{self.stage}.bn.gamma": self.bn.gamma,
            f"transform{self.stage}.bn.beta": self.bn.beta,
        }

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"transform{self.stage}.bn.running_mean": self.bn.running_mean,
            f"transform{self.stage}.bn.running_var": self.bn.running_var,
        }

    def load_buffers(self, bufs: dict[str, np.ndarray]) -> None:
        self.bn.running_mean = bufs[f"transform{self.stage}.bn.running_mean"].copy()
        self.bn.running_var = bufs[f"transform{self.stage}.bn.running_var"].copy()


class ClassifierHead:
    """Bias-free linear classifier over embeddings.

    plain mode: logits are raw inner products with the class rows.
    normalized mode: rows and embedding are unit-normalized on the fly, so the
    logit for class c is scale * cos(theta_c).
    """

    MODES = ("plain", "normalized")

    def __init__(
        self,
        num_classes: int,
        dim: int,
        mode: str = "normalized",
        scale: float = 16.0,
        rng: np.random.Generator | None = None,
    ):
        if mode not in self.MODES:
            raise ConfigError(f"classifier mode must be one of {self.MODES}, got {mode!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.mode = mode
        self.scale = float(scale)
        self.weight = Tensor(rng.normal(0.0, 1.0, size=(num_classes, dim)), requires_grad=True)

    def logits(self, embedding: Tensor) -> Tensor:
        embedding = Tensor._lift(embedding)
        if embedding.ndim != 2 or embedding.shape[1] != self.weight.shape[1]:
            raise DimensionError(
                f"embedding {embedding.shape} does not match classifier dim "
                f"{self.weight.shape[1]}"
            )
        if self.mode == "plain":
            return ad.matmul(embedding, ad.transpose(self.weight))
        cos = ad.matmul(ad.l2_normalize(embedding), ad.transpose(ad.l2_normalize(self.weight)))
        return cos * self.scale


# -- module-level operation aliases ------------------------------------------


def forward_all_stages(net: StagedNetwork, batch: Tensor, train: bool = False):
    """Stage features F_1..F_n and the final embedding for a batch."""
    return net.forward(batch, train=train)


def apply_teacher_tail(teacher: StagedNetwork, stage: int, feature: Tensor) -> Tensor:
    """Teacher's interpretation of a stage-i feature: blocks i+1..n, then head."""
    return teacher.tail(stage, feature)


def transform_student_feature(transform: StudentTransform, feature: Tensor, train: bool = True) -> Tensor:
    return transform.forward(feature, train)


def classify(head: ClassifierHead, embedding: Tensor) -> Tensor:
    return head.logits(embedding)


def build_reference_pair(
    arch: ArchConfig, seed: int
) -> tuple[StagedNetwork, StagedNetwork, list[StudentTransform]]:
    """Teacher, student, and one channel-matching transform per stage."""
    arch.validate()
    teacher = StagedNetwork(arch, arch.teacher_channels, substream(seed, "teacher-init"))
    student = StagedNetwork(arch, arch.student_channels, substream(seed, "student-init"))
    t_rng = substream(seed, "transform-init")
    transforms = [
        StudentTransform(i + 1, arch.student_channels[i], arch.teacher_channels[i], t_rng)
        for i in range(arch.num_stages)
    ]
    return teacher, student, transforms
