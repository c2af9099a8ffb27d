"""Three-phase band scheduler: warm-up, movement-based selection, perturbation.

The scheduler decides which sliding-window band the training loop aligns on at
every iteration, driven only by the stream of per-iteration transferability
values. The schedule is a deterministic function of (config, value stream), so
runs replay bit-exactly.

Phases:

* warm-up   -- iterations [0, T_w): the window is pinned at band 0 so the
  backbone and discriminator settle before any measurement counts.
* movement  -- iterations [T_w, T_m): the window advances one band every T
  iterations along the trajectory; the mean metric value of each interval is
  recorded per band. After the first ``n_bands`` bands are measured the best
  one is selected (argmax by default, argmin available).
* perturbation -- iterations [T_m, T_a): the window starts at the selected
  band moving upward and bounces inside the radius-k neighbourhood, reversing
  whenever the latest interval mean is worse than the band it came from or an
  edge is reached. Clamping at the valid-band edge also reverses, so the
  window never pins.

Measurement values seen during warm-up (and during any slack iterations
between the last measured band and T_m) are logged but never enter the
selection history.
"""

from dataclasses import dataclass, field, asdict

from .metrics import METRIC_KINDS
from .spectral import TRAJECTORY_KINDS, num_bands

WARMUP = "warmup"
MOVEMENT = "movement"
PERTURBATION = "perturbation"

SELECTION_DIRECTIONS = ("argmax", "argmin")


class ScheduleCompleteError(RuntimeError):
    """step() called after the schedule already reached its final iteration."""


@dataclass
class SchedulerConfig:
    T: int                      # iterations per measurement interval
    T_w: int                    # warm-up end
    T_m: int                    # movement end / selection point
    T_a: int                    # total iterations
    m: int = 10                 # frequencies per window
    k: int = 3                  # perturbation radius in bands
    grid_h: int = 8
    grid_w: int = 8
    trajectory: str = "left-to-right"
    metric: str = "mmd"
    selection: str = "argmax"
    n_bands: int = None         # bands traversed during movement; default all

    def __post_init__(self):
        if self.n_bands is None:
            self.n_bands = num_bands(self.grid_h, self.grid_w, self.m)
        self.validate()

    def validate(self):
        cells = self.grid_h * self.grid_w
        checks = [
            (1 <= self.m <= cells, f"1 <= m <= H*W violated (m={self.m}, H*W={cells})"),
            (self.k >= 0, f"k >= 0 violated (k={self.k})"),
            (self.T >= 1, f"T >= 1 violated (T={self.T})"),
            (0 < self.T_w, f"0 < T_w violated (T_w={self.T_w})"),
            (self.T_w < self.T_m, f"T_w < T_m violated (T_w={self.T_w}, T_m={self.T_m})"),
            (self.T_m <= self.T_a, f"T_m <= T_a violated (T_m={self.T_m}, T_a={self.T_a})"),
            (1 <= self.n_bands <= num_bands(self.grid_h, self.grid_w, self.m),
             f"1 <= n_bands <= H*W - m + 1 violated (n_bands={self.n_bands})"),
            (self.T_m - self.T_w >= self.n_bands * self.T,
             f"T_m - T_w >= n_bands * T violated "
             f"({self.T_m - self.T_w} < {self.n_bands} * {self.T})"),
            (self.trajectory in TRAJECTORY_KINDS,
             f"unknown trajectory {self.trajectory!r}"),
            (self.metric in METRIC_KINDS, f"unknown metric {self.metric!r}"),
            (self.selection in SELECTION_DIRECTIONS,
             f"unknown selection direction {self.selection!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid scheduler config: {msg}")


@dataclass
class SchedulerState:
    phase: str = WARMUP
    t: int = 0
    j: int = 0
    d: int = 1
    j_star: int = None
    history: list = field(default_factory=list)        # movement-phase interval means
    interval_values: list = field(default_factory=list)
    latest: dict = field(default_factory=dict)         # band -> most recent interval mean
    complete: bool = False

    def to_dict(self):
        d = asdict(self)
        d["latest"] = {str(k): v for k, v in self.latest.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["latest"] = {int(k): v for k, v in d["latest"].items()}
        return cls(**d)


@dataclass(frozen=True)
class IntervalRecord:
    """One finalized measurement interval, for the per-interval CSV log."""

    t: int
    phase: str
    j: int
    epsilon_bar: float


def select_optimal(history, selection="argmax"):
    """Index of the best interval mean; ties break toward the lowest index."""
    if not history:
        raise ValueError("cannot select a band from an empty history")
    if selection not in SELECTION_DIRECTIONS:
        raise ValueError(f"unknown selection direction {selection!r}")
    best = max(history) if selection == "argmax" else min(history)
    return history.index(best)


class BandScheduler:
    """Stateful driver of the three-phase schedule.

    One instance per training run; call ``step(epsilon)`` once per iteration
    with the metric value measured on the current band. The return value is
    the band index to align on next iteration. Finalized intervals are
    appended to ``interval_log``.
    """

    def __init__(self, config, state=None):
        config.validate()
        self.config = config
        self.state = state if state is not None else SchedulerState()
        self.interval_log = []

    @property
    def current_band(self):
        return self.state.j

    @property
    def band_range(self):
        """Valid perturbation interval, radius-k around j* clamped to real bands."""
        j_star, k = self.state.j_star, self.config.k
        return max(0, j_star - k), min(self.config.n_bands - 1, j_star + k)

    def step(self, epsilon):
        cfg, s = self.config, self.state
        if s.complete:
            raise ScheduleCompleteError(f"schedule already completed at t={s.t}")
        s.interval_values.append(float(epsilon))
        s.t += 1

        if s.phase == WARMUP:
            if len(s.interval_values) == cfg.T:
                self._finalize_interval(record_history=False)
            if s.t == cfg.T_w:
                s.phase = MOVEMENT
                s.j = 0
                s.interval_values = []
        elif s.phase == MOVEMENT:
            if len(s.interval_values) == cfg.T:
                self._finalize_interval(record_history=len(s.history) < cfg.n_bands)
            if s.t == cfg.T_m:
                s.j_star = select_optimal(s.history, cfg.selection)
                s.phase = PERTURBATION
                s.j = s.j_star
                s.d = 1
                s.interval_values = []
        else:
            if len(s.interval_values) == cfg.T:
                self._perturbation_boundary()

        if s.t >= cfg.T_a:
            s.complete = True
        return s.j

    def _finalize_interval(self, record_history):
        cfg, s = self.config, self.state
        eps_bar = sum(s.interval_values) / len(s.interval_values)
        self.interval_log.append(IntervalRecord(s.t, s.phase, s.j, eps_bar))
        if record_history:
            s.history.append(eps_bar)
            s.latest[s.j] = eps_bar
            if len(s.history) < cfg.n_bands:
                s.j += 1
        s.interval_values = []

    def _perturbation_boundary(self):
        cfg, s = self.config, self.state
        eps_bar = sum(s.interval_values) / len(s.interval_values)
        self.interval_log.append(IntervalRecord(s.t, s.phase, s.j, eps_bar))
        ref = s.latest.get(s.j - s.d)
        worsened = ref is not None and eps_bar > ref
        at_radius_edge = s.j >= s.j_star + cfg.k or s.j <= s.j_star - cfg.k
        s.latest[s.j] = eps_bar
        if worsened or at_radius_edge:
            s.d = -s.d
        lo, hi = self.band_range
        nxt = s.j + s.d
        if nxt < lo or nxt > hi:
            nxt = min(max(nxt, lo), hi)
            s.d = -s.d
        s.j = nxt
        s.interval_values = []
