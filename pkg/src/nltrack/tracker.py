"""Per-sequence tracking loop.

Each frame: sample a search patch around the last box shifted by the mean
optical flow, detect with the visual branch (or the NL branch once the target is
considered lost for a while), advance the state machine, update the exemplar
memory, and re-seed the search from a full-frame NL scan when the target has
been lost long enough.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from nltrack import rpn
from nltrack.backends import Model, NLKernel, UnusableQuery
from nltrack.flow import BlockMatchingFlow, FlowProvider, ZeroFlow
from nltrack.geometry import BBox
from nltrack.imaging import CropTransform, context_side, crop, crop_transform
from nltrack.memory import (Memory, MMMConfig, ScoreHistory, TrackState, admission_score,
                            is_maintenance_frame, maintain_memory, step_state, update_weights)

log = logging.getLogger(__name__)

MODES = ("box+nl", "box", "nl")


class InitializationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    exemplar_crop: int = 128
    search_crop: int = 256
    context: float = 0.5
    anchors: rpn.AnchorConfig = rpn.AnchorConfig()
    window_sigma: float = 0.2
    mmm: MMMConfig = MMMConfig()
    init_scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    init_floor: float = 0.05
    # sliding-window stride as a fraction of the window side
    window_stride: float = 0.5
    reset_scales: tuple[float, ...] = (0.5, 1.0, 2.0)
    reset_period: int = 10
    # box size follows visual detections at rate size_rate * score
    size_rate: float = 0.3
    flow_block: int = 16
    flow_radius: int = 16
    # ablation switches
    use_nl: bool = True
    use_mmm: bool = True
    use_flow: bool = True
    use_window: bool = True
    # branch answering while LOST: "visual" (loop structure) or "nl" (rely on language)
    lost_branch: str = "visual"

    def __post_init__(self):
        stride = self.anchors.stride
        for name in ("exemplar_crop", "search_crop"):
            v = getattr(self, name)
            if v < stride or v % stride:
                raise ValueError(f"{name}={v} must be a positive multiple of the backbone stride {stride}")
        if self.search_crop <= self.exemplar_crop:
            raise ValueError("search_crop must exceed exemplar_crop")
        if not 0 < self.init_floor < 1 or not 0 < self.window_sigma < 1:
            raise ValueError("init_floor and window_sigma must lie in (0, 1)")
        if not 0 < self.window_stride <= 1 or not 0 <= self.size_rate <= 1:
            raise ValueError("window_stride must lie in (0, 1] and size_rate in [0, 1]")
        if self.reset_period < 1:
            raise ValueError("reset_period must be >= 1")
        if not self.init_scales or not self.reset_scales or min(self.init_scales + self.reset_scales) <= 0:
            raise ValueError("scale lists must be non-empty and positive")
        if self.lost_branch not in ("visual", "nl"):
            raise ValueError(f"unknown lost_branch {self.lost_branch!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown tracker config field(s): {', '.join(sorted(unknown))}")
        if "anchors" in d:
            a = dict(d["anchors"])
            d["anchors"] = rpn.AnchorConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in a.items()})
        if "mmm" in d:
            d["mmm"] = MMMConfig(**d["mmm"])
        for key in ("init_scales", "reset_scales"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def search_side(self, box: BBox) -> float:
        return context_side(box.w, box.h, self.context) * self.search_crop / self.exemplar_crop


ARMS = {
    "full": {},
    "baseline": {"use_nl": False, "use_mmm": False, "use_flow": False},
    "no_nl": {"use_nl": False},
    "no_flow": {"use_flow": False},
    "no_mmm": {"use_mmm": False},
}


def arm_config(arm: str, base: TrackerConfig = TrackerConfig()) -> TrackerConfig:
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")
    return dataclasses.replace(base, **ARMS[arm])


@dataclass
class TrackRecord:
    frame_idx: int
    box: BBox
    score: float
    state: TrackState
    branch: str
    exemplar_id: int | None = None
    warning: str | None = None


def window_grid(frame_w: int, frame_h: int, side: float, stride: float) -> list[tuple[float, float]]:
    """Centers of square windows covering the frame, row-major."""

    def axis(n):
        if side >= n:
            return [n / 2.0]
        origins = list(np.arange(0.0, n - side + 1e-9, stride))
        if n - side - origins[-1] > 1e-9:
            origins.append(n - side)
        return [o + side / 2.0 for o in origins]

    return [(x, y) for y in axis(frame_h) for x in axis(frame_w)]


class TrackerSession:
    """State of one tracked sequence. Build with :func:`init_with_box` or :func:`init_with_nl`."""

    def __init__(self, model: Model, config: TrackerConfig, frame: np.ndarray, box: BBox,
                 nl_kernel: NLKernel | None, flow: FlowProvider | None = None):
        self.model = model
        self.config = config
        self.memory = Memory(capacity=config.mmm.capacity, metric=config.mmm.metric)
        self.state = TrackState.STABLE
        self.history = ScoreHistory()
        self.last_box = box
        self.nl_kernel = nl_kernel
        self.frame_idx = 1
        self.frame_size = (frame.shape[1], frame.shape[0])
        if flow is None:
            flow = BlockMatchingFlow(config.flow_block, config.flow_radius) if config.use_flow else ZeroFlow()
        self.flow = flow
        self.prev_frame = frame
        self.last_reset = None
        self._kernels: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.memory.add(self.memory.new_exemplar(self.exemplar_features(frame, box), 1, box,
                                                 config.mmm.initial_weight))

    # perception helpers

    def exemplar_transform(self, box: BBox) -> CropTransform:
        cfg = self.config
        return crop_transform(box.center, context_side(box.w, box.h, cfg.context), cfg.exemplar_crop)

    def exemplar_features(self, frame: np.ndarray, box: BBox) -> np.ndarray:
        return self.model.extract_features(crop(frame, self.exemplar_transform(box)))

    def _exemplar_kernels(self, ex) -> tuple[np.ndarray, np.ndarray]:
        if ex.id not in self._kernels:
            self._kernels[ex.id] = rpn.project_exemplar(ex.features, self.model)
        return self._kernels[ex.id]

    def sample_search_patch(self, frame: np.ndarray, flow: FlowProvider | None = None):
        """Search crop centered on the last box shifted by the mean flow inside it."""
        flow = flow or self.flow
        vx, vy = flow.mean_flow(self.prev_frame, frame, self.last_box)
        center = (self.last_box.cx + vx, self.last_box.cy + vy)
        tf = crop_transform(center, self.config.search_side(self.last_box), self.config.search_crop,
                            frame.shape)
        return crop(frame, tf), tf

    def _grid(self, cls_map: np.ndarray, kh: int, kw: int):
        return self.config.anchors.grid_for(cls_map.shape[1], cls_map.shape[2], kh, kw)

    def detect_visual(self, feats: np.ndarray, windowed: bool) -> rpn.Detection:
        projected = rpn.project_search(feats, self.model)
        maps = {}
        for ex in self.memory:
            maps[ex.id] = rpn.siam_rpn_forward(feats, ex.features, self.model, projected,
                                               self._exemplar_kernels(ex))
        best = rpn.select_best_exemplar([(ex.id, maps[ex.id][0], ex.born_at) for ex in self.memory])
        cls_map, reg_map = maps[best]
        z = self.memory.get(best).features
        window = rpn.WindowParams(self.config.window_sigma) if windowed else None
        return rpn.extract_detection(cls_map, reg_map, self._grid(cls_map, z.shape[1], z.shape[2]), window,
                                     rpn.Source.VISUAL, best)

    def detect_nl(self, feats: np.ndarray) -> rpn.Detection:
        cls_map, reg_map = rpn.nl_rpn_forward(feats, self.nl_kernel, self.model)
        s = self.model.nl_kernel_size
        return rpn.extract_detection(cls_map, reg_map, self._grid(cls_map, s, s), None, rpn.Source.NL)

    def scan(self, frame: np.ndarray, target_sides: Sequence[float],
             detector: Callable[[np.ndarray], rpn.Detection]):
        """Best detection over sliding windows at each target side; ties keep the first (row-major)."""
        cfg = self.config
        fw, fh = frame.shape[1], frame.shape[0]
        best, best_tf = None, None
        for a in target_sides:
            side = context_side(a, a, cfg.context) * cfg.search_crop / cfg.exemplar_crop
            for center in window_grid(fw, fh, side, cfg.window_stride * side):
                tf = crop_transform(center, side, cfg.search_crop)
                det = detector(self.model.extract_features(crop(frame, tf)))
                if best is None or det.score > best.score:
                    best, best_tf = det, tf
        return best, best_tf

    # loop

    def _windowed(self) -> bool:
        return self.config.use_window and self.state in (TrackState.STABLE, TrackState.RESTORING)

    def _use_nl_branch(self) -> bool:
        if not self.config.use_mmm:
            return False
        if self.state is TrackState.CONTINUED_LOST:
            return True
        return self.state is TrackState.LOST and self.config.lost_branch == "nl"

    def _follow(self, det_box: BBox, score: float, resize: bool = True) -> BBox:
        rate = self.config.size_rate * score if resize else 0.0
        w = (1 - rate) * self.last_box.w + rate * det_box.w
        h = (1 - rate) * self.last_box.h + rate * det_box.h
        fw, fh = self.frame_size
        cx = min(max(det_box.cx, 0.0), float(fw))
        cy = min(max(det_box.cy, 0.0), float(fh))
        return BBox(cx, cy, min(max(w, 4.0), fw), min(max(h, 4.0), fh))

    def step(self, frame: np.ndarray) -> TrackRecord:
        cfg = self.config
        t = self.frame_idx + 1
        patch, tf = self.sample_search_patch(frame)
        feats = self.model.extract_features(patch)
        warning = None
        if self._use_nl_branch() and self.nl_kernel is not None:
            det = self.detect_nl(feats)
        else:
            if self._use_nl_branch():
                warning = "nl-branch-unavailable"
            det = self.detect_visual(feats, self._windowed())
        # language boxes only re-center; their extent estimate is too coarse to track scale
        box = self._follow(tf.box_to_frame(det.box), det.score, det.source is rpn.Source.VISUAL)
        branch = det.source.value
        score = det.score

        self.history.append(det.score, t)
        prev_state = self.state
        if cfg.use_mmm:
            self.state = step_state(self.history, self.state, cfg.mmm.tau2, cfg.mmm.tau3)
            if det.source is rpn.Source.VISUAL:
                update_weights(self.memory, det.exemplar_id, cfg.mmm)
            self._maintain(frame, box, t)
        self.last_box = box

        if cfg.use_mmm and self.state is TrackState.CONTINUED_LOST:
            due = prev_state is not TrackState.CONTINUED_LOST or (
                self.last_reset is not None and t - self.last_reset >= cfg.reset_period)
            if due:
                reset = self.nl_reset(frame, t)
                if reset is not None:
                    if self.nl_kernel is None:
                        warning = warning or "visual-re-search"
                    if reset.score > score:
                        box, score, branch = self.last_box, reset.score, "reset"

        self.prev_frame = frame
        self.frame_idx = t
        return TrackRecord(t, box, score, self.state, branch, det.exemplar_id, warning)

    def _maintain(self, frame: np.ndarray, box: BBox, t: int) -> None:
        cfg = self.config.mmm
        if not is_maintenance_frame(t, self.state, cfg):
            return
        gate = admission_score(self.history, cfg)
        cand = None
        if gate is not None and gate > cfg.tau1:
            cand = self.memory.new_exemplar(self.exemplar_features(frame, box), t, box, cfg.initial_weight)
        maintain_memory(self.memory, cand, self.history, self.state, t, cfg)
        live = {ex.id for ex in self.memory}
        self._kernels = {k: v for k, v in self._kernels.items() if k in live}

    def reset_sides(self) -> list[float]:
        sizes = sorted({round(math.sqrt(ex.source_box.area), 1) for ex in self.memory})
        return [a * s for s in self.config.reset_scales for a in sizes]

    def nl_reset(self, frame: np.ndarray, t: int | None = None) -> rpn.Detection | None:
        """Full-frame scan at memory-derived scales; re-centers ``last_box`` on the best hit.

        Uses the NL branch, or a visual re-search when no NL kernel exists. Memory is
        untouched; the winning score joins the history.
        """
        t = self.frame_idx + 1 if t is None else t
        if self.nl_kernel is not None:
            det, tf = self.scan(frame, self.reset_sides(), self.detect_nl)
        else:
            det, tf = self.scan(frame, self.reset_sides(), lambda f: self.detect_visual(f, False))
        if det is None:
            return None
        hit = tf.box_to_frame(det.box)
        fw, fh = self.frame_size
        self.last_box = BBox(min(max(hit.cx, 0.0), fw), min(max(hit.cy, 0.0), fh), self.last_box.w, self.last_box.h)
        self.history.append(det.score, t)
        self.last_reset = t
        log.debug("frame %d: reset to (%.1f, %.1f) score %.3f", t, hit.cx, hit.cy, det.score)
        return det


def _nl_kernel(model: Model, q: str | None) -> NLKernel | None:
    if q is None:
        return None
    if not q.strip():
        raise UnusableQuery("empty description")
    return model.nl_kernel(model.embed_sentence(q))


def init_with_box(frame: np.ndarray, b1: BBox, q: str | None = None, model: Model | None = None,
                  config: TrackerConfig = TrackerConfig(), flow: FlowProvider | None = None) -> TrackerSession:
    fh, fw = frame.shape[:2]
    x1, y1, x2, y2 = b1.corners()
    if not (0 <= b1.cx <= fw and 0 <= b1.cy <= fh) or x2 <= 0 or y2 <= 0 or x1 >= fw or y1 >= fh:
        raise ValueError(f"initial box {b1} lies outside the {fw}x{fh} frame")
    model = model or default_model()
    kernel = _nl_kernel(model, q) if config.use_nl else None
    session = TrackerSession(model, config, frame, b1, kernel, flow)
    session.history.append(1.0, 1)
    return session


def init_with_nl(frame: np.ndarray, q: str, target_scale: float | None = None, model: Model | None = None,
                 config: TrackerConfig = TrackerConfig(), flow: FlowProvider | None = None) -> TrackerSession:
    """Locate the described target by a multi-scale sliding-window NL scan and seed tracking there.

    ``target_scale`` is the expected target area in pixels (default: 1/16 of the frame).
    """
    if not q or not q.strip():
        raise UnusableQuery("empty description")
    model = model or default_model()
    fh, fw = frame.shape[:2]
    area = float(target_scale) if target_scale else fw * fh / 16.0
    kernel = _nl_kernel(model, q)
    probe = TrackerSession.__new__(TrackerSession)
    probe.model, probe.config, probe.nl_kernel = model, config, kernel
    sides = [math.sqrt(area * s) for s in config.init_scales]
    det, tf = probe.scan(frame, sides, probe.detect_nl)
    if det.score < config.init_floor:
        raise InitializationFailed(f"no window scored above {config.init_floor} (best {det.score:.3f})")
    box = tf.box_to_frame(det.box).clamp_to(fw, fh)
    session = TrackerSession(model, config, frame, box, kernel, flow)
    session.history.append(det.score, 1)
    return session


def step(session: TrackerSession, frame: np.ndarray) -> TrackRecord:
    return session.step(frame)


def nl_reset(session: TrackerSession, frame: np.ndarray) -> TrackerSession:
    if session.nl_kernel is not None:
        session.nl_reset(frame)
    return session


def track_sequence(frames: Sequence[np.ndarray], init_box: BBox | None, text: str | None,
                   model: Model | None = None, config: TrackerConfig = TrackerConfig(),
                   mode: str = "box+nl", target_scale: float | None = None,
                   flow: FlowProvider | None = None) -> list[TrackRecord]:
    """Run one sequence; ``frames`` may be a lazy sequence of arrays."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    it = iter(frames)
    first = next(it)
    if mode == "nl":
        if text is None:
            raise UnusableQuery("nl mode needs a description")
        session = init_with_nl(first, text, target_scale, model, config, flow)
        branch = "init-nl"
    else:
        if init_box is None:
            raise ValueError(f"mode {mode} needs an initial box")
        session = init_with_box(first, init_box, text if mode == "box+nl" else None, model, config, flow)
        branch = "init"
    out = [TrackRecord(1, session.last_box, session.history.scores[-1], session.state, branch)]
    for frame in it:
        out.append(session.step(frame))
    return out


_DEFAULT_MODEL: list[Model] = []


def default_model() -> Model:
    """The bundled toy model shipped with the package."""
    if not _DEFAULT_MODEL:
        from importlib import resources

        with resources.as_file(resources.files("nltrack") / "data" / "toy_model") as p:
            _DEFAULT_MODEL.append(Model.load(p))
    return _DEFAULT_MODEL[0]
