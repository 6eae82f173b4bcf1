"""Workload-driven timing analysis and application-specific fmax.

Two analysis methods over the same simulated trace:

* corner: per-cycle fresh activated delay inflated by the fixed aging and
  variation guardbands.
* avatar: per-cycle aged delay as mu + 3*sigma, with per-stage aging driven
  by the workload's measured toggle activity and POCV-style per-stage
  variation, so no extra guardband is applied.

Both are compared against a static worst-case baseline (full-width carry
chain, full guardband). Timing sites are the accumulator bit stages: one
stage per bit plus the base stage of the multiply path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import QuantTensor
from .env import TimingEnv
from .macsim import CycleEvent, run_start, run_tile, to_unsigned

METHODS = ("corner", "avatar")


@dataclass(frozen=True)
class AgingState:
    """Per-site toggle duty and the threshold shift it accrues.

    Sites are accumulator bit stages; index b is bit b. base_duty drives the
    shared base stage (multiplier and wiring before the carry chain) and is
    the mean bit activity of the workload.
    """

    toggle_rates: np.ndarray
    delta_vth: np.ndarray
    base_duty: float = 0.0
    base_delta_vth: float = 0.0

    def __post_init__(self):
        if self.toggle_rates.shape != self.delta_vth.shape:
            raise ValueError("toggle_rates and delta_vth must align")
        if np.any(self.toggle_rates < 0.0) or np.any(self.toggle_rates > 1.0):
            raise ValueError("toggle rates must lie in [0, 1]")
        if np.any(self.delta_vth < 0.0) or self.base_delta_vth < 0.0:
            raise ValueError("delta_vth must be non-negative")


@dataclass(frozen=True)
class FmaxResult:
    method: str
    fmax_mhz: float
    improvement_vs_sta: float
    workload: str = ""

    def __post_init__(self):
        if self.fmax_mhz <= 0.0:
            raise ValueError("fmax must be positive")


@dataclass(frozen=True)
class Workload:
    """run_tile inputs bundled for the fmax searches."""

    name: str
    weights: QuantTensor
    acts: QuantTensor
    order: tuple[int, ...] | None = None


def extract_toggle_rates(trace: list[CycleEvent], acc_bits: int = 24) -> AgingState:
    """Per-bit toggle rate: fraction of cycles in which that accumulator bit
    changed value. The aging shift is filled in by apply_aging."""
    if not trace:
        raise ValueError("cannot extract toggle rates from an empty trace")
    counts = np.zeros(acc_bits, dtype=np.int64)
    for ev in trace:
        toggle = to_unsigned(ev.acc_before, acc_bits) ^ to_unsigned(ev.acc_after, acc_bits)
        b = 0
        while toggle:
            if toggle & 1:
                counts[b] += 1
            toggle >>= 1
            b += 1
    rates = counts.astype(np.float64) / len(trace)
    rates.setflags(write=False)
    zeros = np.zeros(acc_bits)
    zeros.setflags(write=False)
    return AgingState(toggle_rates=rates, delta_vth=zeros, base_duty=float(rates.mean()))


def apply_aging(state: AgingState, env: TimingEnv) -> AgingState:
    """Fill in the per-site threshold shift from the env's stress model."""
    dvth = np.array([env.aging.delta_vth(duty) for duty in state.toggle_rates])
    dvth.setflags(write=False)
    return AgingState(
        toggle_rates=state.toggle_rates,
        delta_vth=dvth,
        base_duty=state.base_duty,
        base_delta_vth=env.aging.delta_vth(state.base_duty),
    )


def statistical_delay(path_stage_delays, env: TimingEnv) -> tuple[float, float]:
    """Statistical path delay over aged per-stage delays.

    mu is the plain sum; sigma treats each stage as an independent Gaussian
    with standard deviation rho * stage, combined root-sum-square. Callers
    use mu + 3*sigma as the final delay.
    """
    stages = list(path_stage_delays)
    if not stages:
        raise ValueError("path must have at least one stage")
    mu = float(sum(stages))
    rho = env.variation.rho
    sigma = math.sqrt(sum((rho * s) ** 2 for s in stages))
    return mu, sigma


def _aged_stage_delays(event: CycleEvent, env: TimingEnv, aging: AgingState) -> list[float]:
    """Stage delays of the path this cycle activates: the base stage plus one
    bit stage per chain position, each aged by its own site's shift."""
    s = env.aging.sensitivity
    stages = [env.d_base * (1.0 + s * aging.base_delta_vth)]
    chain = event.carry_chain_len
    if chain > 0:
        toggle = to_unsigned(event.acc_before, env.acc_bits) ^ to_unsigned(event.acc_after, env.acc_bits)
        start = run_start(toggle, chain, env.acc_bits)
        for b in range(start, start + chain):
            stages.append(env.d_bit * (1.0 + s * aging.delta_vth[b]))
    return stages


def static_worst_period(env: TimingEnv) -> float:
    """STA sign-off period: full-width carry chain with the full guardband."""
    worst_fresh = env.d_base + env.d_bit * env.acc_bits
    return worst_fresh * (1.0 + env.guardband.total)


def fmax_search(workload: Workload, method: str, env: TimingEnv) -> FmaxResult:
    """Smallest feasible clock period for the workload under one method.

    The per-cycle required period is explicit (monotone feasibility
    predicate), so the minimum is the maximum requirement over the trace;
    a bisection to any tolerance converges to the same value.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    trace_env = env.replace(errors_enabled=False)
    _, _, trace = run_tile(workload.weights, workload.acts, trace_env, order=workload.order)
    if not trace:
        raise RuntimeError("workload produced no cycles")

    if method == "corner":
        gb = 1.0 + env.guardband.total
        required = [(env.d_base + env.d_bit * ev.carry_chain_len) * gb for ev in trace]
    else:
        aging = apply_aging(extract_toggle_rates(trace, env.acc_bits), env)
        required = []
        for ev in trace:
            mu, sigma = statistical_delay(_aged_stage_delays(ev, env, aging), env)
            required.append(mu + 3.0 * sigma)

    period = max(required)
    if period <= 0.0:
        raise RuntimeError("degenerate zero-delay workload; fmax search cannot converge")
    fmax = 1e3 / period  # ns -> MHz
    fmax_sta = 1e3 / static_worst_period(env)
    return FmaxResult(
        method=method,
        fmax_mhz=fmax,
        improvement_vs_sta=(fmax - fmax_sta) / fmax_sta,
        workload=workload.name,
    )


def fmax_table(workloads, env: TimingEnv) -> list[FmaxResult]:
    rows = []
    for wl in workloads:
        for method in METHODS:
            rows.append(fmax_search(wl, method, env))
    return rows


def write_fmax_csv(rows, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["workload", "method", "fmax_mhz", "improvement_pct"])
        for r in rows:
            writer.writerow([r.workload, r.method, repr(r.fmax_mhz), repr(100.0 * r.improvement_vs_sta)])
