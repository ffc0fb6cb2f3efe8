import hashlib
import os
import random
from typing import Optional

import numpy as np
import torch


def set_seed(seed: Optional[int] = 1227):
    os.environ["PYTHONHASHSEED"] = str(seed)
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def derive_seed(seed: int, *path) -> int:
    """
    Derive a child seed from a root seed and a named path.

    Example:
        >>> derive_seed(1227, "gen", 3) == derive_seed(1227, "gen", 3)
        True
    """
    key = "/".join([str(seed)] + [str(p) for p in path])
    digest = hashlib.blake2b(key.encode("utf8"), digest_size=8).digest()
    # keep it in the non-negative int63 range accepted by torch and numpy
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def torch_generator(seed: int, *path) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(derive_seed(seed, *path) if path else seed)
    return generator
