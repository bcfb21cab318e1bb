"""Pick a grasp among pre-projected candidates using an affordance heatmap."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class GraspCandidate:
    id: str
    u: int  # column
    v: int  # row
    score: Optional[float] = None

    def check_bounds(self, shape):
        h, w = shape[:2]
        if not (0 <= self.u < w and 0 <= self.v < h):
            raise ValueError(f"candidate {self.id} at ({self.u}, {self.v}) outside {w}x{h} image")


def select_grasp(heatmap, candidates: Sequence[GraspCandidate]) -> GraspCandidate:
    """Candidate sitting on the highest heatmap value; ties go to the lowest id."""
    if not candidates:
        raise ValueError("no grasp candidates")
    heatmap = np.asarray(heatmap)
    for c in candidates:
        c.check_bounds(heatmap.shape)
    return min(candidates, key=lambda c: (-float(heatmap[c.v, c.u]), c.id))


def load_candidates(path) -> list:
    """Read ``id u v [score]`` rows (whitespace separated, '#' comments)."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"{path}:{lineno}: expected 'id u v [score]'")
            score = float(parts[3]) if len(parts) == 4 else None
            out.append(GraspCandidate(parts[0], int(parts[1]), int(parts[2]), score))
    return out
