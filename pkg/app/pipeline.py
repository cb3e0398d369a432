"""Staged inference pipeline: decode -> geometry -> forward -> emit over bounded queues."""

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.camera import MouthFrameStream
from app.config import Config
from app.corpus import MouthFrame
from app.errors import StageError
from app.inference import Animator, InferenceState

logger = logging.getLogger(__name__)

STAGES = ("decode", "geometry", "forward", "emit")
QUEUE_POLL_S = 0.05

_END = object()

Sink = Callable[[int, np.ndarray], None]
StreamLike = Union[MouthFrameStream, Sequence[MouthFrame]]


@dataclass
class _Item:
    index: int
    payload: Any
    started: float


@dataclass
class _Failure:
    stage: str
    index: Optional[int]
    error: BaseException


@dataclass
class ThroughputReport:
    """Timing of one pipeline run.

    Attributes:
        mode: ``"pipelined"`` or ``"sequential"``
        frames: Frames emitted
        wall_time_s: First read to last emit
        fps: frames / wall_time_s
        latency_mean_ms: Mean per-frame decode-to-emit latency
        latency_p95_ms: 95th percentile of the same
        stage_busy_s: Time spent inside each stage function
        workers: Worker threads (0 in sequential mode)
    """
    mode: str
    frames: int
    wall_time_s: float
    fps: float
    latency_mean_ms: float
    latency_p95_ms: float
    stage_busy_s: Dict[str, float] = field(default_factory=dict)
    workers: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "frames": self.frames,
            "wall_time_s": round(self.wall_time_s, 6),
            "fps": round(self.fps, 3),
            "latency_mean_ms": round(self.latency_mean_ms, 3),
            "latency_p95_ms": round(self.latency_p95_ms, 3),
            "stage_busy_s": {k: round(v, 6) for k, v in self.stage_busy_s.items()},
            "workers": self.workers,
        }


def stage_groups(n_workers: int) -> List[Tuple[str, ...]]:
    """Split the four stages into ``n_workers`` contiguous groups (1 to 4)."""
    if not 1 <= n_workers <= len(STAGES):
        raise ValueError(f"stage count must be in [1, {len(STAGES)}], got {n_workers}")
    return [tuple(STAGES[i] for i in part) for part in np.array_split(np.arange(len(STAGES)), n_workers)]


class _Run:
    """State of one run: the per-frame inference state lives in the geometry stage only."""

    def __init__(self, animator: Animator, stream: MouthFrameStream, sink: Optional[Sink], expected_shape):
        self.animator = animator
        self.stream = stream
        self.sink = sink
        self.expected_shape = expected_shape
        self.state = InferenceState()
        self.outputs: List[np.ndarray] = []
        self.latencies: List[float] = []
        self.busy = {name: 0.0 for name in STAGES}
        self.next_emit = None

    def decode(self) -> Optional[_Item]:
        started = time.perf_counter()
        ok, frame = self.stream.read()
        if not ok:
            self.busy["decode"] += time.perf_counter() - started
            return None
        image = np.asarray(frame.image, dtype=np.float32)
        if image.ndim != 3 or image.shape[1:] != self.expected_shape:
            raise StageError(
                "decode",
                f"mouth frame is {image.shape}, expected (C, {self.expected_shape[0]}, {self.expected_shape[1]})",
                frame.index,
            )
        item = _Item(frame.index, MouthFrame(frame.index, image, frame.keypoints, frame.gaze), started)
        self.busy["decode"] += time.perf_counter() - started
        return item

    def geometry(self, item: _Item) -> _Item:
        prepared, self.state = self.animator.prepare(item.payload, self.state)
        return _Item(item.index, prepared, item.started)

    def forward(self, item: _Item) -> _Item:
        return _Item(item.index, self.animator.synthesize(item.payload), item.started)

    def emit(self, item: _Item) -> _Item:
        if self.next_emit is not None and item.index <= self.next_emit:
            raise RuntimeError(f"frame {item.index} emitted after frame {self.next_emit}")
        self.next_emit = item.index
        if self.sink is not None:
            self.sink(item.index, item.payload)
        self.outputs.append(item.payload)
        self.latencies.append(time.perf_counter() - item.started)
        return item

    def apply(self, name: str, item: _Item) -> _Item:
        started = time.perf_counter()
        out = getattr(self, name)(item)
        self.busy[name] += time.perf_counter() - started
        return out


def _put(q: queue.Queue, item: Any, stop: threading.Event) -> bool:
    while not stop.is_set():
        try:
            q.put(item, timeout=QUEUE_POLL_S)
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, stop: threading.Event) -> Any:
    while not stop.is_set():
        try:
            return q.get(timeout=QUEUE_POLL_S)
        except queue.Empty:
            continue
    return _END


def _drain(queues: Sequence[queue.Queue]) -> int:
    dropped = 0
    for q in queues:
        while True:
            try:
                q.get_nowait()
                dropped += 1
            except queue.Empty:
                break
    return dropped


def _as_stream(stream: StreamLike) -> MouthFrameStream:
    if isinstance(stream, MouthFrameStream):
        return stream
    return MouthFrameStream.from_frames(list(stream))


def _run_sequential(run: _Run) -> Optional[_Failure]:
    while True:
        name, index = "decode", None
        try:
            item = run.decode()
            if item is None:
                return None
            index = item.index
            for name in STAGES[1:]:
                item = run.apply(name, item)
        except Exception as e:
            return _Failure(name, index, e)


def _run_pipelined(run: _Run, n_workers: int, capacity: int) -> Optional[_Failure]:
    groups = stage_groups(n_workers)
    queues = [queue.Queue(maxsize=capacity) for _ in range(len(groups) - 1)]
    stop = threading.Event()
    failures: List[_Failure] = []
    lock = threading.Lock()

    def fail(name: str, index: Optional[int], e: BaseException) -> None:
        with lock:
            failures.append(_Failure(name, index, e))
        stop.set()

    def worker(g: int) -> None:
        names = groups[g]
        q_in = queues[g - 1] if g > 0 else None
        q_out = queues[g] if g < len(queues) else None
        while not stop.is_set():
            name, index = names[0], None
            try:
                if q_in is None:
                    item = run.decode()
                    rest = names[1:]
                    if item is None:
                        item = _END
                else:
                    item = _get(q_in, stop)
                    rest = names
                if item is _END:
                    if q_out is not None:
                        _put(q_out, _END, stop)
                    return
                index = item.index
                for name in rest:
                    item = run.apply(name, item)
            except Exception as e:
                logger.error(f"Pipeline stage '{name}' failed at frame {index}: {e}", exc_info=True)
                fail(name, index, e)
                return
            if q_out is not None and not _put(q_out, item, stop):
                return

    threads = [
        threading.Thread(target=worker, args=(g,), name=f"pipeline-{'+'.join(groups[g])}", daemon=True)
        for g in range(len(groups))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    if failures:
        dropped = _drain(queues)
        logger.warning(f"PIPELINE_ABORTED: drained {dropped} queued item(s)")
        return failures[0]
    return None


def run_pipeline(
    animator: Animator,
    stream: StreamLike,
    config: Config,
    sink: Optional[Sink] = None,
    pipelined: Optional[bool] = None,
) -> Tuple[List[np.ndarray], ThroughputReport]:
    """Animate a mouth-frame stream.

    Each stage is single-threaded; stage groups run on their own worker and
    pass frames through queues of ``pipeline.queue_capacity``, so output order
    equals input order and outputs match the sequential loop bit for bit.

    Args:
        animator: Enrolment and generator
        stream: Mouth-frame stream or in-memory frames
        config: Configuration (``pipeline`` section)
        sink: Called with (frame index, image) by the emit stage
        pipelined: Override ``pipeline.pipelined``

    Returns:
        Tuple of (output images in stream order, ThroughputReport)

    Raises:
        StageError: Naming the failed stage and the frame being processed
    """
    cfg = config.pipeline
    pipelined = cfg.pipelined if pipelined is None else pipelined
    resolution = animator.enrolment.appearance.image.shape[1:]
    run = _Run(animator, _as_stream(stream), sink, tuple(resolution))
    mode = "pipelined" if pipelined else "sequential"
    workers = cfg.stages if pipelined else 0
    logger.info(
        f"PIPELINE_START: mode={mode}, frames={len(run.stream)}, workers={workers}, queue={cfg.queue_capacity}"
    )

    started = time.perf_counter()
    failure = _run_pipelined(run, cfg.stages, cfg.queue_capacity) if pipelined else _run_sequential(run)
    wall = time.perf_counter() - started

    if failure is not None:
        error = failure.error
        # inner stage errors already name the frame
        if isinstance(error, StageError) and error.frame_index is not None:
            raise error
        raise StageError(failure.stage, str(error), failure.index) from error

    lat = np.asarray(run.latencies) * 1000.0 if run.latencies else np.zeros(1)
    frames = len(run.outputs)
    report = ThroughputReport(
        mode=mode,
        frames=frames,
        wall_time_s=wall,
        fps=frames / wall if wall > 0 else 0.0,
        latency_mean_ms=float(lat.mean()),
        latency_p95_ms=float(np.percentile(lat, 95)),
        stage_busy_s=dict(run.busy),
        workers=workers,
    )
    logger.info(
        f"PIPELINE_DONE: mode={mode}, frames={frames}, fps={report.fps:.2f}, "
        f"latency_p95_ms={report.latency_p95_ms:.2f}"
    )
    return run.outputs, report


def outputs_identical(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> bool:
    """Bitwise equality of two output streams."""
    return len(a) == len(b) and all(x.dtype == y.dtype and np.array_equal(x, y) for x, y in zip(a, b))
