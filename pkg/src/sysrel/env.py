"""Timing environment: clock, delay coefficients, aging/variation/guardband knobs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .core import SeededStream, mix64

_VAR_STREAM_TAG = 0x76617269  # distinguishes variation draws from other users of a seed


def _take(d: dict, allowed: dict, where: str) -> dict:
    """Strict kwargs from a JSON dict: unknown fields are rejected."""
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValueError(f"unknown field(s) {sorted(unknown)} in {where}")
    out = dict(allowed)
    out.update(d)
    return out


@dataclass(frozen=True)
class AgingParams:
    """Threshold-shift model: dVth = k_stress * duty * age_time_h^exponent.

    An aged stage delay is fresh * (1 + sensitivity * dVth), the first-order
    form in the shift.
    """

    k_stress: float = 0.0  # volts per unit duty at one hour
    exponent: float = 0.2
    age_time_h: float = 0.0
    sensitivity: float = 0.0  # relative delay increase per volt of shift

    def delta_vth(self, duty: float) -> float:
        if self.age_time_h <= 0.0:
            return 0.0
        return self.k_stress * duty * self.age_time_h**self.exponent


@dataclass(frozen=True)
class VariationParams:
    """Per-stage random variation: multiplier 1 + rho*z, z ~ N(0,1).

    fixed pins the multiplier to a constant (used for corner-style analysis
    and hand-checkable fixtures). rho = 0 with fixed unset means exactly 1.0.
    """

    rho: float = 0.0
    seed: int = 0
    fixed: float | None = None


@dataclass(frozen=True)
class GuardbandParams:
    aging_gb: float = 0.15
    var_gb: float = 0.05

    @property
    def total(self) -> float:
        return self.aging_gb + self.var_gb


@dataclass(frozen=True)
class TimingEnv:
    """One operating point of the simulated MAC datapath.

    Delay of an activated path with transition-chain length L is
    (d_base + d_bit*L) * aging_factor * variation_sample, in nanoseconds.
    """

    clock_period: float = 1.0  # ns
    vdd_label: str = "0.8V"  # informational only; voltage sweeps are out of scope
    d_base: float = 0.2  # ns, chain-length-zero path
    d_bit: float = 0.05  # ns per chain bit
    acc_bits: int = 24
    op_bits: int = 8
    errors_enabled: bool = True
    # propagate the corrupted accumulator into later cycles (hardware truth);
    # switch off to count errors against the pristine value stream
    propagate_errors: bool = True
    aging: AgingParams = field(default_factory=AgingParams)
    variation: VariationParams = field(default_factory=VariationParams)
    guardband: GuardbandParams = field(default_factory=GuardbandParams)

    def __post_init__(self):
        if self.clock_period <= 0.0:
            raise ValueError("clock_period must be positive")
        if self.d_base < 0.0 or self.d_bit < 0.0:
            raise ValueError("delay coefficients must be non-negative")
        if not 0.0 <= self.variation.rho < 1.0:
            raise ValueError("variation rho must be in [0, 1)")
        if self.acc_bits < 2 or self.op_bits < 2:
            raise ValueError("datapath widths must be at least 2 bits")

    def aging_factor(self, duty: float = 1.0) -> float:
        a = self.aging
        return 1.0 + a.sensitivity * a.delta_vth(duty)

    def variation_sample(self, cycle: int) -> float:
        """Variation multiplier for one cycle; pure in (variation.seed, cycle)."""
        v = self.variation
        if v.fixed is not None:
            return v.fixed
        if v.rho == 0.0:
            return 1.0
        s = SeededStream(mix64(v.seed ^ _VAR_STREAM_TAG), counter=2 * cycle)
        return max(0.0, 1.0 + v.rho * s.normal())

    def replace(self, **changes) -> "TimingEnv":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "clock_period": self.clock_period,
            "vdd_label": self.vdd_label,
            "d_base": self.d_base,
            "d_bit": self.d_bit,
            "acc_bits": self.acc_bits,
            "op_bits": self.op_bits,
            "errors_enabled": self.errors_enabled,
            "propagate_errors": self.propagate_errors,
            "aging": dataclasses.asdict(self.aging),
            "variation": dataclasses.asdict(self.variation),
            "guardband": dataclasses.asdict(self.guardband),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimingEnv":
        base = cls()
        fields = _take(
            d,
            {
                "clock_period": base.clock_period,
                "vdd_label": base.vdd_label,
                "d_base": base.d_base,
                "d_bit": base.d_bit,
                "acc_bits": base.acc_bits,
                "op_bits": base.op_bits,
                "errors_enabled": base.errors_enabled,
                "propagate_errors": base.propagate_errors,
                "aging": {},
                "variation": {},
                "guardband": {},
            },
            "timing env",
        )
        aging = AgingParams(**_take(dict(fields["aging"] or {}), dataclasses.asdict(AgingParams()), "aging"))
        variation = VariationParams(
            **_take(dict(fields["variation"] or {}), dataclasses.asdict(VariationParams()), "variation")
        )
        guardband = GuardbandParams(
            **_take(dict(fields["guardband"] or {}), dataclasses.asdict(GuardbandParams()), "guardband")
        )
        return cls(
            clock_period=float(fields["clock_period"]),
            vdd_label=str(fields["vdd_label"]),
            d_base=float(fields["d_base"]),
            d_bit=float(fields["d_bit"]),
            acc_bits=int(fields["acc_bits"]),
            op_bits=int(fields["op_bits"]),
            errors_enabled=bool(fields["errors_enabled"]),
            propagate_errors=bool(fields["propagate_errors"]),
            aging=aging,
            variation=variation,
            guardband=guardband,
        )
