# SPDX-License-Identifier: Apache-2.0
"""Low-rank KV-cache compression: decomposition, quantization, accounting."""

from ._palu import *  # noqa: F401,F403
from ._palu import PaluError

__all__ = [name for name in dir() if not name.startswith("_")]
