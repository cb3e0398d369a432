"""Parameter containers: a Module base class and the convolution layer."""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import CheckpointFormatError, ShapeError
from app.tensorcore import ops
from app.tensorcore.tensor import Parameter, Tensor


class Module:
    """Base class that discovers Parameters and sub-Modules from attributes.

    Attribute insertion order defines parameter order, so naming is stable
    across runs: ``enc.conv1.weight``, ``attn.W_S`` and so on.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{full}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype: type) -> "Module":
        """Recast every parameter (float64 for gradient checks)."""
        for p in self.parameters():
            p.astype(dtype)
        return self

    def state_entries(self) -> List[Tuple[str, Tensor]]:
        """Named parameters in checkpoint order."""
        return list(self.named_parameters())

    def load_entries(self, entries: Sequence[Tuple[str, Tensor]], strict: bool = True) -> None:
        """Copy checkpoint entries into matching parameters.

        Raises:
            CheckpointFormatError: On missing/unexpected names (strict) or shape mismatch
        """
        own: Dict[str, Parameter] = dict(self.named_parameters())
        given = {name: tensor for name, tensor in entries}
        if strict:
            missing = sorted(set(own) - set(given))
            unexpected = sorted(set(given) - set(own))
            if missing or unexpected:
                raise CheckpointFormatError(
                    f"checkpoint mismatch: missing={missing[:5]}, unexpected={unexpected[:5]}"
                )
        for name, tensor in given.items():
            if name not in own:
                continue
            param = own[name]
            data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            if data.shape != param.shape:
                raise CheckpointFormatError(
                    f"shape mismatch for '{name}': checkpoint {data.shape}, model {param.shape}"
                )
            param.data = data.astype(param.data.dtype, copy=True)
            param.zero_grad()


class Conv2d(Module):
    """Convolution layer with He-uniform weights and zero bias."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        """
        Initialize convolution layer.

        Args:
            in_channels: Input channels
            out_channels: Output channels
            kernel_size: Square kernel side
            stride: Convolution stride
            padding: Zero padding (default keeps size at stride 1)
            rng: Random generator for the weight init
        """
        if in_channels < 1 or out_channels < 1 or kernel_size < 1:
            raise ShapeError("Conv2d channel and kernel sizes must be positive")
        if kernel_size % 2 == 0:
            raise ShapeError(f"Conv2d kernel size must be odd, got {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        bound = np.sqrt(6.0 / fan_in)
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(np.zeros(out_channels))
        self._stride = stride
        self._padding = kernel_size // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)
