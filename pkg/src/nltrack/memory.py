"""Exemplar memory and the four-state tracking state machine.

Memory admission uses a reverse-nearest-neighbor test: a candidate joins only if
no stored exemplar would have it as its nearest neighbor. Exemplar weights grow
when an exemplar wins the per-frame selection and shrink otherwise; exemplars with
negative weight are dropped at maintenance frames.
"""

from __future__ import annotations

import enum
import itertools
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nltrack.geometry import BBox


class TrackState(str, enum.Enum):
    STABLE = "STABLE"
    LOST = "LOST"
    CONTINUED_LOST = "CONTINUED_LOST"
    RESTORING = "RESTORING"


ALLOWED_EDGES = frozenset({
    (TrackState.STABLE, TrackState.STABLE),
    (TrackState.STABLE, TrackState.LOST),
    (TrackState.LOST, TrackState.LOST),
    (TrackState.LOST, TrackState.STABLE),
    (TrackState.LOST, TrackState.CONTINUED_LOST),
    (TrackState.CONTINUED_LOST, TrackState.CONTINUED_LOST),
    (TrackState.CONTINUED_LOST, TrackState.RESTORING),
    (TrackState.RESTORING, TrackState.RESTORING),
    (TrackState.RESTORING, TrackState.STABLE),
    (TrackState.RESTORING, TrackState.CONTINUED_LOST),
})


@dataclass(frozen=True)
class MMMConfig:
    tau1: float = 0.99
    tau2: float = 0.4
    tau3: float = 0.7
    maintenance_period: int = 25
    admission_window: int = 50
    # "window": mean of the last ``admission_window`` scores; "frame": current score only
    admission_mode: str = "window"
    delta_best: float = 1.0
    delta_other: float = 0.2
    weight_cap: float = 10.0
    initial_weight: float = 1.0
    capacity: int = 8
    # "prose": winner gains delta_best, others lose delta_other; "literal": the reverse
    weight_rule: str = "prose"
    # exemplar distance for admission, see Memory.metric
    metric: str = "normalized"

    def __post_init__(self):
        if not 0 < self.tau2 < self.tau3 < 1:
            raise ValueError(f"thresholds must satisfy 0 < tau2 < tau3 < 1, got {self.tau2}, {self.tau3}")
        if not 0 < self.tau1 < 1:
            raise ValueError(f"tau1 must lie in (0, 1), got {self.tau1}")
        if self.capacity < 1 or self.maintenance_period < 1 or self.admission_window < 1:
            raise ValueError("capacity, maintenance_period and admission_window must be >= 1")
        if self.admission_mode not in ("window", "frame"):
            raise ValueError(f"unknown admission_mode {self.admission_mode!r}")
        if self.weight_rule not in ("prose", "literal"):
            raise ValueError(f"unknown weight_rule {self.weight_rule!r}")
        if self.metric not in ("normalized", "euclidean"):
            raise ValueError(f"unknown metric {self.metric!r}")


class ScoreHistory:
    """Recorded detection scores with their frame indices."""

    def __init__(self, maxlen: int = 256):
        self.scores: deque[float] = deque(maxlen=maxlen)
        self.frames: deque[int] = deque(maxlen=maxlen)

    def append(self, score: float, frame: int) -> None:
        self.scores.append(float(score))
        self.frames.append(int(frame))

    def __len__(self) -> int:
        return len(self.scores)

    def mean_last(self, n: int) -> float | None:
        """Mean of the last ``n`` scores, ``None`` until ``n`` scores exist."""
        if n < 1 or len(self.scores) < n:
            return None
        return float(np.mean(list(itertools.islice(reversed(self.scores), n))))

    def below(self, n: int, thr: float) -> bool:
        m = self.mean_last(n)
        return m is not None and m < thr

    def above(self, n: int, thr: float) -> bool:
        m = self.mean_last(n)
        return m is not None and m > thr


def step_state(hist: ScoreHistory, current: TrackState, tau2: float, tau3: float) -> TrackState:
    if not 0 < tau2 < tau3 < 1:
        raise ValueError(f"thresholds must satisfy 0 < tau2 < tau3 < 1, got {tau2}, {tau3}")
    if current is TrackState.STABLE:
        return TrackState.LOST if hist.below(3, tau2) else current
    if current is TrackState.LOST:
        if hist.above(5, tau3):
            return TrackState.STABLE
        if hist.below(10, tau2):
            return TrackState.CONTINUED_LOST
        return current
    if current is TrackState.CONTINUED_LOST:
        return TrackState.RESTORING if hist.above(5, tau3) else current
    if hist.above(5, tau3):
        return TrackState.STABLE
    if hist.below(5, tau2):
        return TrackState.CONTINUED_LOST
    return current


@dataclass
class Exemplar:
    id: int
    features: np.ndarray
    weight: float
    born_at: int
    source_box: BBox

    def flat_normalized(self) -> np.ndarray:
        return normalized(self.features)


def normalized(features: np.ndarray) -> np.ndarray:
    v = np.asarray(features, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


METRICS = ("normalized", "euclidean")


@dataclass
class Memory:
    exemplars: list[Exemplar] = field(default_factory=list)
    capacity: int = 8
    _next_id: int = 0
    # "normalized": Euclidean between L2-normalized flattened features; "euclidean": raw
    metric: str = "normalized"

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; choose from {', '.join(METRICS)}")

    def new_exemplar(self, features: np.ndarray, t: int, box: BBox, weight: float = 1.0) -> Exemplar:
        ex = Exemplar(self._next_id, np.asarray(features, dtype=np.float64), weight, t, box)
        self._next_id += 1
        return ex

    def add(self, ex: Exemplar) -> None:
        self.exemplars.append(ex)

    def get(self, ex_id: int) -> Exemplar:
        for ex in self.exemplars:
            if ex.id == ex_id:
                return ex
        raise KeyError(f"exemplar {ex_id} not in memory")

    def __len__(self) -> int:
        return len(self.exemplars)

    def __iter__(self):
        return iter(self.exemplars)

    def weights(self) -> dict[int, float]:
        return {ex.id: ex.weight for ex in self.exemplars}

    def export(self, out_dir) -> Path:
        """Write a JSON manifest plus one ``.npy`` feature blob per exemplar."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for ex in self.exemplars:
            blob = f"exemplar_{ex.id:04d}.npy"
            np.save(out / blob, ex.features)
            entries.append({"id": ex.id, "weight": ex.weight, "born_at": ex.born_at,
                            "source_box": list(ex.source_box.as_array()), "features": blob})
        manifest = {"capacity": self.capacity, "next_id": self._next_id, "metric": self.metric,
                    "exemplars": entries}
        (out / "memory.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return out

    @classmethod
    def load(cls, in_dir) -> "Memory":
        root = Path(in_dir)
        manifest = json.loads((root / "memory.json").read_text())
        exemplars = [Exemplar(e["id"], np.load(root / e["features"]), e["weight"], e["born_at"],
                              BBox.from_array(e["source_box"])) for e in manifest["exemplars"]]
        return cls(exemplars, manifest["capacity"], manifest["next_id"], manifest.get("metric", "normalized"))


def _nearest(idx: int, points: np.ndarray) -> int:
    d = np.linalg.norm(points - points[idx], axis=1)
    d[idx] = np.inf
    return int(np.argmin(d))


def rnn_should_admit(cand: Exemplar | np.ndarray, mem: Memory | list, metric: str | None = None) -> bool:
    """True iff the candidate's reverse-nearest-neighbor set within memory is empty.

    Features are compared as flattened vectors, L2-normalized unless the metric
    (argument, else the memory's own) is ``"euclidean"``. Distance ties resolve to
    the stored exemplar. A memory of at most one exemplar admits anything.
    """
    metric = metric or getattr(mem, "metric", "normalized")
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    stored = [ex.features if isinstance(ex, Exemplar) else ex for ex in mem]
    if len(stored) <= 1:
        return True
    cand_f = cand.features if isinstance(cand, Exemplar) else cand
    prep = normalized if metric == "normalized" else (lambda f: np.asarray(f, dtype=np.float64).ravel())
    points = np.stack([prep(f) for f in stored] + [prep(cand_f)])
    c = len(stored)
    return all(_nearest(i, points) != c for i in range(c))


def update_weights(mem: Memory, best_id: int, cfg: MMMConfig = MMMConfig()) -> Memory:
    """Reward the frame's winning exemplar and decay the rest (no removal here)."""
    best = mem.get(best_id)
    if cfg.weight_rule == "prose":
        win, lose = cfg.delta_best, -cfg.delta_other
    else:
        win, lose = -cfg.delta_other, cfg.delta_best
    for ex in mem:
        delta = win if ex is best else lose
        ex.weight = min(ex.weight + delta, cfg.weight_cap)
    return mem


def admission_score(hist: ScoreHistory, cfg: MMMConfig) -> float | None:
    if cfg.admission_mode == "frame":
        return hist.scores[-1] if len(hist) else None
    return hist.mean_last(cfg.admission_window)


def is_maintenance_frame(t: int, state: TrackState, cfg: MMMConfig) -> bool:
    return t % cfg.maintenance_period == 0 and state is TrackState.STABLE


def maintain_memory(mem: Memory, cand: Exemplar | None, hist: ScoreHistory, state: TrackState,
                    t: int, cfg: MMMConfig = MMMConfig()) -> Memory:
    """Periodic admission and pruning; a no-op outside STABLE maintenance frames.

    ``cand`` may be ``None`` when the admission gate is already known to fail.
    """
    if t < 1:
        raise ValueError(f"frame index must be >= 1, got {t}")
    if not is_maintenance_frame(t, state, cfg):
        return mem
    gate = admission_score(hist, cfg)
    if cand is not None and gate is not None and gate > cfg.tau1 and rnn_should_admit(cand, mem):
        if len(mem) >= cfg.capacity:
            victim = min(mem.exemplars, key=lambda ex: (ex.weight, ex.born_at))
            mem.exemplars.remove(victim)
        mem.add(cand)
    survivors = [ex for ex in mem.exemplars if ex.weight >= 0]
    if not survivors:
        survivors = [max(mem.exemplars, key=lambda ex: (ex.weight, -ex.born_at))]
    mem.exemplars = survivors
    return mem
