"""Validated zero-copy views over caller-owned arrays.

A view records dtype, shape and strides and keeps a reference to the
caller's buffer; the payload itself is never copied.  Arrays that would
force a silent copy downstream (unsupported dtype, non-C-contiguous
layout) are rejected up front instead, so the caller stays in charge of
any conversion cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hoverpost import HoverpostError, UnsupportedDtype


class NotCContiguous(HoverpostError):
    """Array layout would require a silent copy."""


ACCEPTED_DTYPES = frozenset(("float32", "float64", "uint32", "uint8"))


@dataclass(frozen=True)
class BoundArrayView:
    """dtype/shape/strides plus a reference to the original buffer."""

    dtype: np.dtype
    shape: tuple[int, ...]
    strides: tuple[int, ...]
    data: np.ndarray

    @classmethod
    def from_array(cls, arr, name: str = "array") -> "BoundArrayView":
        if not isinstance(arr, np.ndarray):
            raise UnsupportedDtype(
                f"{name}: expected a numpy array, got {type(arr).__name__}"
            )
        if arr.dtype.name not in ACCEPTED_DTYPES:
            raise UnsupportedDtype(
                f"{name}: dtype {arr.dtype} is not bound "
                f"(accepted: float32, float64, uint32, uint8)"
            )
        if not arr.flags["C_CONTIGUOUS"]:
            raise NotCContiguous(
                f"{name}: non-contiguous layout is rejected rather than "
                f"copied; apply np.ascontiguousarray yourself if the copy "
                f"is acceptable"
            )
        return cls(dtype=arr.dtype, shape=arr.shape, strides=arr.strides, data=arr)

    def expect_dtype(self, dtype, name: str = "array") -> "BoundArrayView":
        if self.dtype != np.dtype(dtype):
            raise UnsupportedDtype(
                f"{name}: requires dtype {np.dtype(dtype)}, got {self.dtype}"
            )
        return self
