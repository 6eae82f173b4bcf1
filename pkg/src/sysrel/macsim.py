"""Bit-accurate MAC and tile simulation with per-cycle timing-error decisions.

The critical-input-pattern model: the accumulator transition word
acc_before XOR acc_after marks every bit the addition must rewrite; its
longest run of ones is the carry chain the update drives through the
accumulator. Sign flips of the partial sum rewrite the whole sign-extension
region at once, so they produce the longest chains; the per-cycle activated
delay grows linearly in the chain length.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .core import QuantTensor, WideTensor
from .env import TimingEnv


def wrap_signed(value: int, bits: int) -> int:
    """Two's-complement wrap of an arbitrary integer into `bits` bits."""
    m = 1 << bits
    value &= m - 1
    return value - m if value & (m >> 1) else value


def to_unsigned(value: int, bits: int) -> int:
    return value & ((1 << bits) - 1)


def longest_one_run(word: int) -> int:
    """Length of the longest run of consecutive 1 bits."""
    n = 0
    while word:
        word &= word << 1
        n += 1
    return n


def run_start(word: int, length: int, bits: int) -> int:
    """Lowest bit index where a run of `length` ones begins."""
    if length <= 0:
        raise ValueError("no run to locate in a zero word")
    mask = (1 << length) - 1
    for s in range(bits - length + 1):
        if (word >> s) & mask == mask:
            return s
    raise ValueError("word has no run of the requested length")


@dataclass(frozen=True)
class MacState:
    """Accumulator register of one PE. acc is a signed value inside the
    configured width; overflow wraps in two's complement like the hardware."""

    acc: int = 0
    cycle: int = 0


@dataclass(frozen=True)
class CycleEvent:
    cycle: int
    a: int
    w: int
    product: int
    acc_before: int
    acc_after: int
    sign_flip: bool
    carry_chain_len: int
    activated_delay: float = 0.0
    error: bool = False


@dataclass(frozen=True)
class TerReport:
    total_cycles: int
    error_cycles: int
    sign_flip_cycles: int
    total_outputs: int = 0
    outputs_with_error: int = 0
    outputs_with_flip: int = 0
    max_flips_per_output: int = 0

    @property
    def ter(self) -> float:
        return self.error_cycles / self.total_cycles if self.total_cycles else 0.0

    @property
    def flip_rate(self) -> float:
        return self.sign_flip_cycles / self.total_cycles if self.total_cycles else 0.0

    def merge(self, other: "TerReport") -> "TerReport":
        """Associative, order-independent combination of two reports."""
        return TerReport(
            total_cycles=self.total_cycles + other.total_cycles,
            error_cycles=self.error_cycles + other.error_cycles,
            sign_flip_cycles=self.sign_flip_cycles + other.sign_flip_cycles,
            total_outputs=self.total_outputs + other.total_outputs,
            outputs_with_error=self.outputs_with_error + other.outputs_with_error,
            outputs_with_flip=self.outputs_with_flip + other.outputs_with_flip,
            max_flips_per_output=max(self.max_flips_per_output, other.max_flips_per_output),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ter"] = self.ter
        d["flip_rate"] = self.flip_rate
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mac_step(state: MacState, a: int, w: int, acc_bits: int = 24) -> tuple[MacState, CycleEvent]:
    """One multiply-accumulate cycle. Wrapping overflow is defined behavior."""
    product = int(a) * int(w)
    acc_before = state.acc
    acc_after = wrap_signed(acc_before + product, acc_bits)
    toggle = to_unsigned(acc_before, acc_bits) ^ to_unsigned(acc_after, acc_bits)
    chain = longest_one_run(toggle)
    sign_bit = 1 << (acc_bits - 1)
    flip = bool(toggle & sign_bit)
    event = CycleEvent(
        cycle=state.cycle,
        a=int(a),
        w=int(w),
        product=product,
        acc_before=acc_before,
        acc_after=acc_after,
        sign_flip=flip,
        carry_chain_len=chain,
    )
    return MacState(acc=acc_after, cycle=state.cycle + 1), event


def activated_delay(event: CycleEvent, env: TimingEnv) -> float:
    """Delay of the path this cycle activates, in ns.

    Linear in the chain length, scaled by the env's aging factor and the
    cycle-keyed variation sample; deterministic given the env's seed.
    """
    fresh = env.d_base + env.d_bit * event.carry_chain_len
    return fresh * env.aging_factor() * env.variation_sample(event.cycle)


def _corrupt_on_error(acc_before: int, acc_after: int, chain: int, factor: float, env: TimingEnv) -> int:
    """Stale-upper-bits fault: chain bits the carry cannot reach within the
    clock period keep their old values; everything else latches the new sum."""
    bits = env.acc_bits
    toggle = to_unsigned(acc_before, bits) ^ to_unsigned(acc_after, bits)
    start = run_start(toggle, chain, bits)
    budget = env.clock_period / factor if factor > 0.0 else 0.0
    reach = int((budget - env.d_base) / env.d_bit) if env.d_bit > 0.0 else 0
    reach = max(reach, 0)
    stale_from = start + reach
    if stale_from >= start + chain:
        return acc_after
    run_mask = ((1 << chain) - 1) << start
    stale_mask = run_mask & ~((1 << stale_from) - 1)
    merged = (to_unsigned(acc_after, bits) & ~stale_mask) | (to_unsigned(acc_before, bits) & stale_mask)
    return wrap_signed(merged, bits)


def _check_order(order, k: int) -> list[int]:
    if order is None:
        return list(range(k))
    order = [int(t) for t in order]
    if sorted(order) != list(range(k)):
        raise ValueError("order is not a permutation of the reduction axis")
    return order


def run_tile(
    weights: QuantTensor,
    acts: QuantTensor,
    env: TimingEnv,
    order=None,
    collect_events: bool = True,
) -> tuple[WideTensor, TerReport, list[CycleEvent]]:
    """Simulate one output tile of W[m,k] @ X[k,n] cycle by cycle.

    The reduction axis is walked in `order` (same permutation applied to the
    weight columns and activation rows, so the exact result is preserved).
    With errors disabled the output equals the exact integer GEMM; with
    errors enabled, cycles whose activated delay exceeds the clock period
    latch a corrupted accumulator that propagates to later cycles.
    """
    if len(weights.dims) != 2 or len(acts.dims) != 2:
        raise ValueError("run_tile needs 2-D weights and activations")
    m, k = weights.dims
    k2, n = acts.dims
    if k != k2:
        raise ValueError(f"inner dimensions do not conform: {weights.dims} vs {acts.dims}")
    order = _check_order(order, k)

    w_arr = weights.as_array().astype(np.int64)
    x_arr = acts.as_array().astype(np.int64)
    out = np.zeros((m, n), dtype=np.int64)
    events: list[CycleEvent] = []

    total_cycles = 0
    error_cycles = 0
    flip_cycles = 0
    outputs_with_error = 0
    outputs_with_flip = 0
    max_flips = 0
    cycle = 0
    errors_on = env.errors_enabled

    for i in range(m):
        w_row = w_arr[i]
        for j in range(n):
            state = MacState(acc=0, cycle=cycle)
            flips_here = 0
            errors_here = 0
            for t in order:
                state, ev = mac_step(state, int(x_arr[t, j]), int(w_row[t]), env.acc_bits)
                factor = env.aging_factor() * env.variation_sample(ev.cycle)
                delay = (env.d_base + env.d_bit * ev.carry_chain_len) * factor
                err = errors_on and delay > env.clock_period
                if ev.sign_flip:
                    flips_here += 1
                if err:
                    errors_here += 1
                    if env.propagate_errors:
                        corrupted = _corrupt_on_error(ev.acc_before, ev.acc_after, ev.carry_chain_len, factor, env)
                        state = MacState(acc=corrupted, cycle=state.cycle)
                if collect_events:
                    events.append(
                        CycleEvent(
                            cycle=ev.cycle,
                            a=ev.a,
                            w=ev.w,
                            product=ev.product,
                            acc_before=ev.acc_before,
                            acc_after=ev.acc_after,
                            sign_flip=ev.sign_flip,
                            carry_chain_len=ev.carry_chain_len,
                            activated_delay=delay,
                            error=err,
                        )
                    )
            cycle = state.cycle
            out[i, j] = state.acc
            total_cycles += k
            flip_cycles += flips_here
            error_cycles += errors_here
            outputs_with_error += 1 if errors_here else 0
            outputs_with_flip += 1 if flips_here else 0
            max_flips = max(max_flips, flips_here)

    report = TerReport(
        total_cycles=total_cycles,
        error_cycles=error_cycles,
        sign_flip_cycles=flip_cycles,
        total_outputs=m * n,
        outputs_with_error=outputs_with_error,
        outputs_with_flip=outputs_with_flip,
        max_flips_per_output=max_flips,
    )
    y = WideTensor((m, n), out, weights.scale * acts.scale)
    return y, report, events


def write_trace_csv(events, path) -> None:
    """Event trace export, one row per cycle."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["cycle", "a", "w", "acc_before", "acc_after", "sign_flip", "chain_len", "delay", "error"])
        for ev in events:
            writer.writerow(
                [
                    ev.cycle,
                    ev.a,
                    ev.w,
                    ev.acc_before,
                    ev.acc_after,
                    int(ev.sign_flip),
                    ev.carry_chain_len,
                    repr(ev.activated_delay),
                    int(ev.error),
                ]
            )


def read_trace_csv(path) -> list[CycleEvent]:
    path = Path(path)
    events = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            events.append(
                CycleEvent(
                    cycle=int(row["cycle"]),
                    a=int(row["a"]),
                    w=int(row["w"]),
                    product=int(row["a"]) * int(row["w"]),
                    acc_before=int(row["acc_before"]),
                    acc_after=int(row["acc_after"]),
                    sign_flip=bool(int(row["sign_flip"])),
                    carry_chain_len=int(row["chain_len"]),
                    activated_delay=float(row["delay"]),
                    error=bool(int(row["error"])),
                )
            )
    return events
