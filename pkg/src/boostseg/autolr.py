"""Learning-rate schedules with linear warm-up, and population-based
adaptive learning-rate search.

A population of runs trains for one period, each at its own rate. The run
with the highest validation score seen during the period wins; every run is
then restarted from the winner's weights at ``winner_rate * factor_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


DEFAULT_WARMUP = 10


class PopulationError(RuntimeError):
    pass


def effective_lr(target: float, epochs_since_change: int, warmup: int = DEFAULT_WARMUP) -> float:
    """``target * min(1, (epochs_since_change + 1) / warmup)``."""
    if warmup <= 0:
        return float(target)
    return float(target) * min(1.0, (epochs_since_change + 1) / warmup)


# -- schedules ------------------------------------------------------------------------

class Schedule:
    """Base: subclasses define ``target(epoch)`` and ``last_change(epoch)``."""

    warmup: int = DEFAULT_WARMUP

    def target(self, epoch: int) -> float:
        raise NotImplementedError

    def last_change(self, epoch: int) -> int:
        return 0

    def lr(self, epoch: int) -> float:
        return effective_lr(self.target(epoch), epoch - self.last_change(epoch), self.warmup)

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass
class ConstantSchedule(Schedule):
    rate: float
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("learning rate must be positive")

    def target(self, epoch):
        return self.rate

    def to_dict(self):
        return {"kind": "constant", "rate": self.rate, "warmup": self.warmup}


@dataclass
class StepDecaySchedule(Schedule):
    """``rate * decay ** (epoch // step)``; warm-up re-arms at every step."""

    rate: float
    decay: float = 0.5
    step: int = 100
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        if not (self.rate > 0 and self.decay > 0 and self.step > 0):
            raise ValueError("step decay needs positive rate, decay and step")

    def target(self, epoch):
        return self.rate * self.decay ** (epoch // self.step)

    def last_change(self, epoch):
        return 0 if self.decay == 1 else (epoch // self.step) * self.step

    def to_dict(self):
        return {"kind": "step", "rate": self.rate, "decay": self.decay, "step": self.step,
                "warmup": self.warmup}


@dataclass
class PiecewiseSchedule(Schedule):
    """Handcrafted table of ``(start_epoch, rate)`` pairs, first start 0."""

    table: list[tuple[int, float]]
    warmup: int = DEFAULT_WARMUP

    def __post_init__(self):
        self.table = sorted((int(e), float(r)) for e, r in self.table)
        if not self.table or self.table[0][0] != 0:
            raise ValueError("piecewise table must start at epoch 0")
        if any(r <= 0 for _, r in self.table):
            raise ValueError("learning rates must be positive")

    def _entry(self, epoch):
        i = max(i for i, (e, _) in enumerate(self.table) if e <= epoch)
        return self.table[i]

    def target(self, epoch):
        return self._entry(epoch)[1]

    def last_change(self, epoch):
        start, rate = self._entry(epoch)
        # consecutive equal rates are not a change
        for e, r in reversed([t for t in self.table if t[0] < start]):
            if r != rate:
                break
            start = e
        return start

    def to_dict(self):
        return {"kind": "piecewise", "table": [list(t) for t in self.table], "warmup": self.warmup}


@dataclass
class RunSchedule(Schedule):
    """Mutable per-run schedule driven by the population."""

    rate: float
    changed_at: int = 0
    warmup: int = DEFAULT_WARMUP

    def target(self, epoch):
        return self.rate

    def last_change(self, epoch):
        return self.changed_at

    def set_rate(self, rate: float, epoch: int) -> None:
        if rate != self.rate:
            self.rate = rate
            self.changed_at = epoch

    def to_dict(self):
        return {"kind": "run", "rate": self.rate, "changed_at": self.changed_at}


def schedule_from_dict(d: dict) -> Schedule:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "constant":
        return ConstantSchedule(**d)
    if kind == "step":
        return StepDecaySchedule(**d)
    if kind == "piecewise":
        return PiecewiseSchedule(**d)
    raise ValueError(f"unknown schedule kind {kind!r}")


# -- population -------------------------------------------------------------------------

@dataclass
class RunSpec:
    rate: float
    factor: float


DEFAULT_RUNS = (RunSpec(0.05, 2.0), RunSpec(0.01, 1.0), RunSpec(0.005, 0.5))


@dataclass
class PopulationConfig:
    runs: list[RunSpec] = field(default_factory=lambda: list(DEFAULT_RUNS))
    period: int = 50
    warmup: int = DEFAULT_WARMUP
    reset_momentum: bool = False

    def __post_init__(self):
        self.runs = [r if isinstance(r, RunSpec) else RunSpec(**r) for r in self.runs]
        if not self.runs:
            raise ValueError("population needs at least one run")
        if len(self.runs) > 1 and len({r.factor for r in self.runs}) != len(self.runs):
            raise ValueError("modulating factors must be distinct")
        if any(r.rate <= 0 or r.factor <= 0 for r in self.runs):
            raise ValueError("rates and factors must be positive")
        if self.period <= self.warmup:
            raise ValueError("period must exceed the warm-up length")

    def to_dict(self):
        return {"runs": [{"rate": r.rate, "factor": r.factor} for r in self.runs],
                "period": self.period, "warmup": self.warmup, "reset_momentum": self.reset_momentum}


@dataclass
class RunState:
    run_id: int
    factor: float
    schedule: RunSchedule
    trainer: object = None
    scores: list[float] = field(default_factory=list)
    period_length: int = 50

    @property
    def rate(self) -> float:
        return self.schedule.rate


def record_validation(run: RunState, epoch_in_period: int, score: float) -> RunState:
    if not math.isfinite(score):
        raise PopulationError(f"run {run.run_id}: non-finite validation score {score!r}")
    if epoch_in_period >= run.period_length or len(run.scores) >= run.period_length:
        raise PopulationError(f"run {run.run_id}: validation vector already holds a full period")
    run.scores.append(float(score))
    return run


def select_best(runs: list[RunState]) -> int:
    """Index of the run with the largest best-so-far score.

    Ties prefer the smaller learning rate, then the smaller run id.
    """
    if any(not r.scores for r in runs):
        raise PopulationError("every run needs at least one recorded score")
    return min(range(len(runs)), key=lambda i: (-max(runs[i].scores), runs[i].rate, runs[i].run_id))


def evolve(runs: list[RunState], best: int, epoch: int = 0, reset_momentum: bool = False) -> float:
    """Respawn every run from the winner at ``winner_rate * factor``.

    Returns the winner's rate. ``epoch`` is the first epoch of the next
    period, where any changed rate starts its warm-up.
    """
    if not 0 <= best < len(runs):
        raise PopulationError(f"best index {best} out of range")
    winner = runs[best]
    best_rate = winner.rate
    for run in runs:
        if run.trainer is not None and run is not winner:
            run.trainer.load_state_from(winner.trainer, momentum=not reset_momentum)
    if reset_momentum and winner.trainer is not None:
        winner.trainer.opt.velocity[...] = 0
    for run in runs:
        run.schedule.set_rate(best_rate * run.factor, epoch)
        run.scores = []
    return best_rate


@dataclass
class AutoLRResult:
    runs: list[RunState]
    winner: int
    log: list[dict]
    lr_path: list[float]
    metrics: dict[int, list]
    winners: list = field(default_factory=list)  # (network copy, velocity copy) per period

    @property
    def final_trainer(self):
        return self.runs[self.winner].trainer


def run_autolr(config: PopulationConfig, trainer_factory, total_epochs: int, base_seed: int = 0,
               callback=None) -> AutoLRResult:
    """Train a population for ``total_epochs`` (a multiple of the period).

    ``trainer_factory(run_id)`` returns an object with ``reseed(seed)``,
    ``run_epoch(lr)`` (returning a record with ``mean_dice``) and
    ``load_state_from(other, momentum)``. Runs execute one after another
    within a period; their random streams come from
    ``(base_seed, run_id, period)``, so the order does not matter.
    """
    from .trainer import run_seed

    P = config.period
    if total_epochs % P:
        raise PopulationError(f"total epochs {total_epochs} is not a multiple of the period {P}")
    runs = [RunState(i, spec.factor, RunSchedule(spec.rate, 0, config.warmup), trainer_factory(i),
                     period_length=P)
            for i, spec in enumerate(config.runs)]
    metrics = {r.run_id: [] for r in runs}
    log, lr_path, winners = [], [], []
    best = 0
    n_periods = total_epochs // P
    for period in range(n_periods):
        paths = {}
        for run in runs:
            run.trainer.reseed(run_seed(base_seed, run.run_id, period))
            paths[run.run_id] = []
            for e in range(P):
                epoch = period * P + e
                lr = run.schedule.lr(epoch)
                rec = run.trainer.run_epoch(lr)
                record_validation(run, e, rec.mean_dice)
                metrics[run.run_id].append(rec)
                paths[run.run_id].append(lr)
                if callback is not None:
                    callback(period, run, rec)
        best = select_best(runs)
        wt = runs[best].trainer
        if hasattr(wt, "net"):
            winners.append((wt.net.copy(), wt.opt.velocity.copy()))
        lr_path.extend(paths[runs[best].run_id])
        entry = {"period": period, "winner": runs[best].run_id, "best_rate": runs[best].rate,
                 "best_score": max(runs[best].scores)}
        if period < n_periods - 1:
            evolve(runs, best, (period + 1) * P, config.reset_momentum)
        entry["new_rates"] = [r.rate for r in runs]
        log.append(entry)
    return AutoLRResult(runs, best, log, lr_path, metrics, winners)


def population_log_csv(log: list[dict], manifest_hash: str | None = None) -> str:
    lines = [f"# manifest {manifest_hash}"] if manifest_hash else []
    n = len(log[0]["new_rates"]) if log else 0
    lines.append(",".join(["period", "winner", "best_rate", "best_score"] + [f"rate_{i}" for i in range(n)]))
    for e in log:
        lines.append(",".join([str(e["period"]), str(e["winner"]), repr(float(e["best_rate"])),
                               repr(float(e["best_score"]))] + [repr(float(r)) for r in e["new_rates"]]))
    return "\n".join(lines) + "\n"
