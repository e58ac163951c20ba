import math
from collections import OrderedDict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

import constants
from errors import ShapeMismatch

POSE_DIM = 7


class EncoderBlock(nn.Module):
    """Pre-norm self-attention block; padded tokens are excluded as keys."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm_1 = nn.LayerNorm(width)
        self.attention = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm_2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(OrderedDict((
            ("linear_1", nn.Linear(width, 2 * width)),
            ("gelu_1", nn.GELU()),
            ("linear_2", nn.Linear(2 * width, width)),
        )))

    def forward(self, inputs, padding_mask: Optional[torch.Tensor] = None):
        x = self.norm_1(inputs)
        attended, _ = self.attention(x, x, x, key_padding_mask=padding_mask, need_weights=False)
        x = inputs + attended
        return x + self.mlp(self.norm_2(x))


class DensityPredictor(nn.Module):
    """
    Camera tokens (7D pose -> width) plus one scene-descriptor token, a stack of
    encoder blocks without positional encoding, a per-token scalar head and a
    masked mean over tokens. The output regresses 0.1 * keyframe count.
    """

    def __init__(self, width: int = constants.DEFAULT_MODEL_PARAMS.width,
                 heads: int = constants.DEFAULT_MODEL_PARAMS.heads,
                 layers: int = constants.DEFAULT_MODEL_PARAMS.layers,
                 descriptor_dim: int = constants.DEFAULT_MODEL_PARAMS.descriptor_dim,
                 head_layers: int = constants.DEFAULT_MODEL_PARAMS.head_layers):
        super().__init__()
        if width % heads != 0:
            raise ValueError("Model width {} is not divisible by {} heads".format(width, heads))
        self.width = width
        self.descriptor_dim = descriptor_dim

        self.camera_embedding = nn.Sequential(OrderedDict((
            ("linear_1", nn.Linear(POSE_DIM, width)),
            ("gelu_1", nn.GELU()),
            ("linear_2", nn.Linear(width, width)),
        )))
        self.descriptor_projection = nn.Linear(descriptor_dim, width)
        self.encoder = nn.ModuleList([EncoderBlock(width, heads) for _ in range(layers)])
        self.final_norm = nn.LayerNorm(width)

        head = OrderedDict()
        for index in range(1, head_layers):
            head["linear_{}".format(index)] = nn.Linear(width, width)
            head["gelu_{}".format(index)] = nn.GELU()
        head["linear_{}".format(head_layers)] = nn.Linear(width, 1)
        self.head = nn.Sequential(head)

    def forward(self, poses, descriptors, mask: Optional[torch.Tensor] = None):
        """
        :param poses: (B, N, 7) canonical quaternion + translation rows.
        :param descriptors: (B, descriptor_dim).
        :param mask: (B, N) bool, True for real tokens. None means no padding.
        :return: (B,) mean of the per-token outputs.
        """
        if poses.dim() != 3 or poses.shape[-1] != POSE_DIM:
            raise ShapeMismatch("Expected poses of shape (B, N, 7), got {}".format(tuple(poses.shape)))
        if descriptors.dim() != 2 or descriptors.shape[-1] != self.descriptor_dim:
            raise ShapeMismatch("Expected descriptors of shape (B, {}), got {}".format(
                self.descriptor_dim, tuple(descriptors.shape)))
        if descriptors.shape[0] != poses.shape[0]:
            raise ShapeMismatch("Batch sizes of poses and descriptors differ")

        batch, length, _ = poses.shape
        if mask is None:
            mask = torch.ones(batch, length, dtype=torch.bool, device=poses.device)
        valid = torch.cat([mask, torch.ones(batch, 1, dtype=torch.bool, device=poses.device)], dim=1)

        tokens = torch.cat([self.camera_embedding(poses), self.descriptor_projection(descriptors)[:, None]], dim=1)
        padding_mask = ~valid
        for block in self.encoder:
            tokens = block(tokens, padding_mask)
        per_token = self.head(self.final_norm(tokens)).squeeze(-1)

        weights = valid.to(per_token.dtype)
        return (per_token * weights).sum(dim=1) / weights.sum(dim=1)

    @property
    def num_params(self):
        return np.sum(
            [np.prod(param.size()) for param in self.parameters()]
        )


class ScaledCountLoss(nn.Module):
    """(y - 0.1 * n_gt)^2 averaged over the batch."""

    def __init__(self, scale: float = constants.OUTPUT_SCALE):
        super().__init__()
        self.scale = scale

    def forward(self, y_pred, n_gt):
        return torch.mean((y_pred - self.scale * n_gt.to(y_pred.dtype)) ** 2)


def embed_pose_tokens(model: DensityPredictor, pose_rows: np.ndarray) -> torch.Tensor:
    """(N, width) camera tokens for (N, 7) pose rows."""
    parameter = next(model.parameters())
    rows = torch.as_tensor(np.asarray(pose_rows), dtype=parameter.dtype, device=parameter.device)
    with torch.no_grad():
        return model.camera_embedding(rows)


def flat_parameters(model: nn.Module) -> torch.Tensor:
    return parameters_to_vector(model.parameters()).detach().clone()


def set_flat_parameters(model: nn.Module, vector: torch.Tensor) -> None:
    vector_to_parameters(vector, model.parameters())


def count_from_output(y_bar: float, n_frames: int, scale: float = constants.OUTPUT_SCALE) -> int:
    """floor(y / scale + 0.5) clamped to [2, n_frames]; non-finite outputs fall back to the lower bound."""
    upper = max(n_frames, 1)
    if not math.isfinite(y_bar):
        return min(constants.MIN_PREDICTED_KEYFRAMES, upper)
    count = int(math.floor(y_bar / scale + 0.5))
    return min(max(count, constants.MIN_PREDICTED_KEYFRAMES), upper)


def predict_output(model: DensityPredictor, pose_rows: np.ndarray, descriptor: np.ndarray) -> float:
    parameter = next(model.parameters())
    poses = torch.as_tensor(np.asarray(pose_rows)[None], dtype=parameter.dtype, device=parameter.device)
    descriptors = torch.as_tensor(np.asarray(descriptor)[None], dtype=parameter.dtype, device=parameter.device)
    model.eval()
    with torch.no_grad():
        return float(model(poses, descriptors)[0])


def predict_count(model: DensityPredictor, pose_rows: np.ndarray, descriptor: np.ndarray, n_frames: int) -> int:
    return count_from_output(predict_output(model, pose_rows, descriptor), n_frames)
