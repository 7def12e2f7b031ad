"""Sample containers shared by the model, data and evaluation code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SeqSample:
    x: np.ndarray  # (T, d_m)
    modality: str
    y: float


@dataclass(frozen=True)
class AlignedSample:
    xs: dict  # modality -> (T_m, d_m); absent key means missing
    y: float
    sample_id: int = -1

    def present(self) -> tuple:
        return tuple(self.xs)

    def unimodal(self, m) -> SeqSample:
        return SeqSample(self.xs[m], m, self.y)

    def without(self, missing) -> "AlignedSample":
        kept = {m: x for m, x in self.xs.items() if m not in missing}
        if not kept:
            raise ValueError("an aligned sample needs at least one present modality")
        return AlignedSample(kept, self.y, self.sample_id)
