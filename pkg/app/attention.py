"""Source-image attention over keypoint distance tensors."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from app.errors import ShapeError
from app.tensorcore import Module, Parameter, Tensor, softmax, stack
from app.vision.keypoints import DistanceTensor
from app.vision.masks import LowerFaceMask

logger = logging.getLogger(__name__)

SignatureLike = Union[DistanceTensor, Tensor, np.ndarray]


class SimilarityProjection(Module):
    """Learned projections W_S and W_D of flattened distance tensors."""

    def __init__(self, n_vr: int, dim: int = 256, rng: Optional[np.random.Generator] = None):
        """
        Initialize projection matrices.

        Args:
            n_vr: VR keypoint count (input length is 2 * n_vr^2)
            dim: Similarity vector length
            rng: Random generator for the uniform(-1/sqrt(d), 1/sqrt(d)) init
        """
        rng = rng if rng is not None else np.random.default_rng(0)
        d = 2 * n_vr * n_vr
        bound = 1.0 / math.sqrt(d)
        self.W_S = Parameter(rng.uniform(-bound, bound, size=(d, dim)))
        self.W_D = Parameter(rng.uniform(-bound, bound, size=(d, dim)))

    @property
    def input_dim(self) -> int:
        return self.W_S.shape[0]

    @property
    def dim(self) -> int:
        return self.W_S.shape[1]


def _flatten(D: SignatureLike, weight: Parameter) -> Tensor:
    if isinstance(D, DistanceTensor):
        flat = Tensor(D.flatten(), dtype=weight.data.dtype)
    elif isinstance(D, Tensor):
        flat = D.reshape(-1)
    else:
        flat = Tensor(np.asarray(D).reshape(-1), dtype=weight.data.dtype)
    if flat.shape[0] != weight.shape[0]:
        raise ShapeError(f"distance tensor has {flat.shape[0]} entries, projection expects {weight.shape[0]}")
    return flat


def similarity_source(D: SignatureLike, proj: SimilarityProjection) -> Tensor:
    """x_S = flatten(D) W_S."""
    return _flatten(D, proj.W_S) @ proj.W_S


def similarity_driving(D: SignatureLike, proj: SimilarityProjection) -> Tensor:
    """x_D = flatten(D) W_D."""
    return _flatten(D, proj.W_D) @ proj.W_D


def attention_scores(x_S_list: Sequence[Tensor], x_D: Tensor) -> Tensor:
    """Scaled dot products <x_S_i, x_D> / sqrt(dim), one per source."""
    if not x_S_list:
        raise ShapeError("attention needs at least one source")
    dim = x_D.shape[0]
    for x in x_S_list:
        if x.shape != x_D.shape:
            raise ShapeError(f"similarity vectors differ in shape: {x.shape} vs {x_D.shape}")
    scale = 1.0 / math.sqrt(dim)
    return stack([(x_S @ x_D) * scale for x_S in x_S_list])


@dataclass
class AttentionWeights:
    """Per-source attention values (sum to 1).

    Attributes:
        values: Weight tensor (n,)
        retrieved_index: Index of the dynamically retrieved source, if any
        clamped: Whether the a_max clamp changed the softmax output
    """
    values: Tensor
    retrieved_index: Optional[int] = None
    clamped: bool = False

    def __len__(self) -> int:
        return self.values.shape[0]

    def as_array(self) -> np.ndarray:
        return self.values.data.astype(np.float64)

    @classmethod
    def uniform(cls, n: int) -> "AttentionWeights":
        return cls(Tensor(np.full(n, 1.0 / n)))

    @classmethod
    def one_hot(cls, n: int, index: int) -> "AttentionWeights":
        values = np.zeros(n)
        values[index] = 1.0
        return cls(Tensor(values), retrieved_index=index)


def clamp_attention(values: Tensor, retrieved_index: int, a_max: float) -> AttentionWeights:
    """Cap the retrieved weight at ``a_max`` and rescale the others to keep the sum at 1.

    Raises:
        ValueError: If a_max is outside (0, 1] or the clamp has nothing to redistribute to
        ShapeError: If the retrieved index is out of range
    """
    if not 0.0 < a_max <= 1.0:
        raise ValueError(f"a_max must be in (0, 1], got {a_max}")
    n = values.shape[0]
    if not 0 <= retrieved_index < n:
        raise ShapeError(f"retrieved index {retrieved_index} out of range for {n} sources")

    w_r = values[retrieved_index]
    if w_r.item() <= a_max:
        return AttentionWeights(values, retrieved_index, clamped=False)
    if n == 1:
        raise ValueError("cannot clamp the only source")

    dtype = values.data.dtype
    one_hot = np.zeros(n, dtype=dtype)
    one_hot[retrieved_index] = 1.0
    rest = 1.0 - w_r
    if rest.item() <= np.finfo(dtype).eps:
        spread = (1.0 - one_hot) * ((1.0 - a_max) / (n - 1)) + one_hot * a_max
        return AttentionWeights(Tensor(spread, dtype=dtype), retrieved_index, clamped=True)

    others = values * (1.0 - one_hot)
    clamped = others * ((1.0 - a_max) / rest) + one_hot * a_max
    return AttentionWeights(clamped, retrieved_index, clamped=True)


def attention_weights(
    scores: Union[Tensor, Sequence[float]],
    a_max: Optional[float] = None,
    retrieved_index: Optional[int] = None,
) -> AttentionWeights:
    """Softmax of the scores, then the optional a_max clamp on the retrieved source.

    Raises:
        ValueError: If a_max is given without a retrieved index
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores, dtype=np.float64))
    values = softmax(scores)
    if a_max is None:
        return AttentionWeights(values, retrieved_index)
    if retrieved_index is None:
        raise ValueError("a_max requires a retrieved_index")
    return clamp_attention(values, retrieved_index, a_max)


def aggregate_features(
    deformed: Sequence[Tensor],
    weights: AttentionWeights,
    mask: LowerFaceMask,
) -> Tensor:
    """(1 - B) * E_1 + sum_i a_i * B * E_i.

    Outside the mask the appearance source (index 0) passes through untouched.

    Raises:
        ShapeError: On length or resolution mismatch
    """
    if not deformed:
        raise ShapeError("aggregation needs at least one source")
    if len(deformed) != len(weights):
        raise ShapeError(f"{len(deformed)} feature maps but {len(weights)} attention weights")
    shape = deformed[0].shape
    for e in deformed:
        if e.shape != shape:
            raise ShapeError(f"feature maps differ in shape: {e.shape} vs {shape}")
    if mask.resolution != shape[1:]:
        raise ShapeError(f"mask resolution {mask.resolution} does not match features {shape[1:]}")

    B = mask.as_tensor(dtype=deformed[0].data.dtype)
    out = deformed[0] * (1.0 - B)
    for i, e in enumerate(deformed):
        out = out + (e * B) * weights.values[i]
    return out


def source_signatures(distance_tensors: Sequence[DistanceTensor]) -> List[np.ndarray]:
    return [d.flatten() for d in distance_tensors]
