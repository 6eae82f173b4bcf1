"""Statistical algorithm-based fault tolerance for systolic GEMM tiles.

Exact integer checksums compare e^T(WX) against e^T(y_observed) per output
column (e is the all-ones vector), so any single corrupted output element
shows up as a column mismatch of exactly its magnitude. A statistical unit
summarizes the mismatches as (frequency, magnitude); recomputation is
triggered only when the summary lands inside a calibrated critical region,
leaving harmless errors uncorrected.

Checksums are taken on the wide (pre-requantization) outputs: clamping
after requantization would break the exact-integer identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import QuantTensor, SeededStream, WideTensor, mix64

DATAFLOWS = ("weight_stationary", "output_stationary")


@dataclass(frozen=True)
class ChecksumPlan:
    dataflow: str
    rows: int
    cols: int
    depth: int

    def __post_init__(self):
        if self.dataflow not in DATAFLOWS:
            raise ValueError(f"dataflow must be one of {DATAFLOWS}, got {self.dataflow!r}")
        if min(self.rows, self.cols, self.depth) < 1:
            raise ValueError("tile dims must be positive")


@dataclass(frozen=True)
class ErrorStats:
    """Per-tile mismatch summary captured by the statistical unit.

    freq is the fraction of output columns with a nonzero mismatch; max_mag
    and total_mag are the largest and summed |mismatch| in real units
    (integer mismatch times the output quantum). checksum_fault_cols marks
    columns where the checksum hardware itself disagrees with the directly
    summed outputs.
    """

    mismatches: tuple[int, ...]
    scale: float
    checksum_fault_cols: tuple[int, ...] = ()

    @property
    def n_cols(self) -> int:
        return len(self.mismatches)

    @property
    def freq(self) -> float:
        if not self.mismatches:
            return 0.0
        return sum(1 for m in self.mismatches if m != 0) / len(self.mismatches)

    @property
    def max_mag(self) -> float:
        if not self.mismatches:
            return 0.0
        return max(abs(m) for m in self.mismatches) * self.scale

    @property
    def total_mag(self) -> float:
        return sum(abs(m) for m in self.mismatches) * self.scale

    def merge(self, other: "ErrorStats") -> "ErrorStats":
        if self.scale != other.scale:
            raise ValueError("cannot merge stats with different scales")
        offset = len(self.mismatches)
        return ErrorStats(
            mismatches=self.mismatches + other.mismatches,
            scale=self.scale,
            checksum_fault_cols=self.checksum_fault_cols + tuple(offset + c for c in other.checksum_fault_cols),
        )

    def to_dict(self) -> dict:
        return {
            "freq": self.freq,
            "max_mag": self.max_mag,
            "total_mag": self.total_mag,
            "n_cols": self.n_cols,
            "mismatches": list(self.mismatches),
            "checksum_fault_cols": list(self.checksum_fault_cols),
        }


def _check_shapes(w: QuantTensor, x: QuantTensor, y_observed: WideTensor) -> tuple[int, int, int]:
    if len(w.dims) != 2 or len(x.dims) != 2 or len(y_observed.dims) != 2:
        raise ValueError("checksums need 2-D w, x and y")
    m, n = w.dims
    n2, k = x.dims
    if n != n2 or y_observed.dims != (m, k):
        raise ValueError(f"shapes do not conform: w{w.dims} x{x.dims} y{y_observed.dims}")
    return m, n, k


def _assemble_stats(
    reference: np.ndarray,
    observed: np.ndarray,
    direct_sums: np.ndarray,
    scale: float,
    observed_output_checksum,
) -> ErrorStats:
    mismatches = tuple(int(v) for v in (reference - observed))
    fault_cols: tuple[int, ...] = ()
    if observed_output_checksum is not None:
        # The adder-row checksum disagrees with the directly summed outputs
        # while those outputs themselves verify: the checksum row is at fault.
        fault_cols = tuple(
            int(j)
            for j in range(len(mismatches))
            if observed[j] != direct_sums[j] and reference[j] == direct_sums[j]
        )
    return ErrorStats(mismatches=mismatches, scale=scale, checksum_fault_cols=fault_cols)


def checksum_ws(
    w: QuantTensor,
    x: QuantTensor,
    y_observed: WideTensor,
    observed_weight_checksum=None,
    observed_output_checksum=None,
) -> ErrorStats:
    """Weight-stationary checksum: the weight checksum row e^T W is held next
    to the stationary weights, multiplied into each activation column, and
    compared against the accumulated output checksum of that column."""
    m, n, k = _check_shapes(w, x, y_observed)
    w_arr = w.as_array().astype(np.int64)
    x_arr = x.as_array().astype(np.int64)
    y_arr = y_observed.as_array()
    u = np.sum(w_arr, axis=0) if observed_weight_checksum is None else np.asarray(observed_weight_checksum, dtype=np.int64)
    if u.shape != (n,):
        raise ValueError("weight checksum must have one entry per inner dim")
    reference = u @ x_arr
    direct = np.sum(y_arr, axis=0)
    observed = direct if observed_output_checksum is None else np.asarray(observed_output_checksum, dtype=np.int64)
    if observed.shape != (k,):
        raise ValueError("output checksum must have one entry per output column")
    return _assemble_stats(reference, observed, direct, y_observed.scale, observed_output_checksum)


def checksum_os(
    w: QuantTensor,
    x: QuantTensor,
    y_observed: WideTensor,
    observed_weight_checksum=None,
    observed_output_checksum=None,
) -> ErrorStats:
    """Output-stationary checksum: a side column of adders folds the streamed
    weights into e^T W on the fly, and a bottom PE row accumulates the
    reference e^T W X step by step as the activations stream through.
    Mismatch semantics are identical to the weight-stationary form."""
    m, n, k = _check_shapes(w, x, y_observed)
    w_arr = w.as_array().astype(np.int64)
    x_arr = x.as_array().astype(np.int64)
    y_arr = y_observed.as_array()
    if observed_weight_checksum is None:
        wsum = np.zeros(n, dtype=np.int64)
        for i in range(m):  # adder column folds one streamed weight row per step
            wsum += w_arr[i]
    else:
        wsum = np.asarray(observed_weight_checksum, dtype=np.int64)
    if wsum.shape != (n,):
        raise ValueError("weight checksum must have one entry per inner dim")
    reference = np.zeros(k, dtype=np.int64)
    for d in range(n):  # bottom PE row accumulates as depth streams
        reference += wsum[d] * x_arr[d]
    direct = np.sum(y_arr, axis=0)
    observed = direct if observed_output_checksum is None else np.asarray(observed_output_checksum, dtype=np.int64)
    if observed.shape != (k,):
        raise ValueError("output checksum must have one entry per output column")
    return _assemble_stats(reference, observed, direct, y_observed.scale, observed_output_checksum)


def checksum(plan: ChecksumPlan, w, x, y_observed, **kwargs) -> ErrorStats:
    fn = checksum_ws if plan.dataflow == "weight_stationary" else checksum_os
    return fn(w, x, y_observed, **kwargs)


@dataclass(frozen=True)
class CriticalRegion:
    """Monotone boundary m*(f) over error frequency; observed stats above the
    boundary need recovery, everything on or below it is ignorable."""

    knots: tuple[tuple[float, float], ...]
    degradation_threshold: float

    def __post_init__(self):
        if not self.knots:
            raise ValueError("critical region needs at least one knot")
        fs = [f for f, _ in self.knots]
        ms = [m for _, m in self.knots]
        if any(f2 <= f1 for f1, f2 in zip(fs, fs[1:])):
            raise ValueError("knot frequencies must strictly increase")
        if any(m < 0.0 for m in ms):
            raise ValueError("boundary magnitudes must be non-negative")
        if any(m2 > m1 + 1e-12 for m1, m2 in zip(ms, ms[1:])):
            raise ValueError("boundary must be non-increasing in frequency")

    def boundary_at(self, freq: float) -> float:
        fs = np.array([f for f, _ in self.knots])
        ms = np.array([m for _, m in self.knots])
        return float(np.interp(freq, fs, ms))

    def to_json(self) -> str:
        return json.dumps(
            {
                "knots": [[f, m] for f, m in self.knots],
                "degradation_threshold": self.degradation_threshold,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CriticalRegion":
        d = json.loads(text)
        if "knots" not in d or "degradation_threshold" not in d:
            raise ValueError("critical region file needs 'knots' and 'degradation_threshold'")
        return cls(
            knots=tuple((float(f), float(m)) for f, m in d["knots"]),
            degradation_threshold=float(d["degradation_threshold"]),
        )


def save_region(region: CriticalRegion, path) -> None:
    Path(path).write_text(region.to_json() + "\n")


def load_region(path) -> CriticalRegion:
    return CriticalRegion.from_json(Path(path).read_text())


KEEP = "keep"
RECOMPUTE = "recompute"


def classify(stats: ErrorStats, region: CriticalRegion) -> str:
    """Pure boundary test: recompute iff max_mag strictly exceeds m*(freq).
    On-boundary stats are kept (the efficiency-biased convention)."""
    return RECOMPUTE if stats.max_mag > region.boundary_at(stats.freq) else KEEP


class UnrecoverableFaultError(RuntimeError):
    """Recomputation budget exhausted with critical errors still present."""

    def __init__(self, message: str, stats: ErrorStats, audit: list):
        super().__init__(message)
        self.stats = stats
        self.audit = audit


@dataclass(frozen=True)
class TileAudit:
    tile_id: str
    stats: ErrorStats
    decision: str
    recompute_count: int

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "stats": self.stats.to_dict(),
            "decision": self.decision,
            "recompute_count": self.recompute_count,
        }


@dataclass(frozen=True)
class ProtectedGemmResult:
    y: WideTensor
    decision: str
    stats: ErrorStats
    recompute_count: int
    audit: list[TileAudit]


def _resolve_fault_spec(fault_model, tile_index: int, seed_salt: int):
    """fault_model is None, one InjectionSpec, or [(weight, spec), ...]; the
    weighted form draws one spec per tile from a seeded stream."""
    if fault_model is None:
        return None
    if isinstance(fault_model, (list, tuple)):
        weights = [float(wt) for wt, _ in fault_model]
        total = sum(weights)
        if total <= 0.0:
            raise ValueError("fault mix weights must sum to a positive value")
        u = SeededStream(mix64(seed_salt ^ 0xFA417))
        u.counter = tile_index
        draw = u.uniform() * total
        acc = 0.0
        for wt, spec in fault_model:
            acc += wt
            if draw < acc:
                return spec
        return fault_model[-1][1]
    return fault_model


def protected_gemm(
    w: QuantTensor,
    x: QuantTensor,
    plan: ChecksumPlan,
    region: CriticalRegion,
    fault_model=None,
    max_recompute: int = 3,
    persistent: bool = False,
) -> ProtectedGemmResult:
    """Checksum-protected GEMM with selective recovery, at tile granularity.

    Each (row-block, col-block, depth-block) tile is computed in wide
    integers, exposed to the fault model, checksummed and classified. Tiles
    inside the critical region are recomputed (fault-free, the fault class is
    transient) and re-verified, up to max_recompute rounds; a persistent
    fault model re-injects on every round and exhausts the budget.
    """
    from .inject import inject  # local import: inject depends on core only

    if len(w.dims) != 2 or len(x.dims) != 2:
        raise ValueError("protected_gemm needs 2-D operands")
    m, n = w.dims
    n2, k = x.dims
    if n != n2:
        raise ValueError(f"shapes do not conform: w{w.dims} x{x.dims}")

    w_arr = w.as_array().astype(np.int64)
    x_arr = x.as_array().astype(np.int64)
    out = np.zeros((m, k), dtype=np.int64)
    out_scale = w.scale * x.scale

    audit: list[TileAudit] = []
    merged: ErrorStats | None = None
    total_recomputes = 0
    any_recompute = False
    tile_index = 0

    for bi in range(0, m, plan.rows):
        for bj in range(0, k, plan.cols):
            for bd in range(0, n, plan.depth):
                i1 = min(bi + plan.rows, m)
                j1 = min(bj + plan.cols, k)
                d1 = min(bd + plan.depth, n)
                w_tile = QuantTensor((i1 - bi, d1 - bd), w_arr[bi:i1, bd:d1].reshape(-1), w.scale)
                x_tile = QuantTensor((d1 - bd, j1 - bj), x_arr[bd:d1, bj:j1].reshape(-1), x.scale)
                exact = w_tile.as_array().astype(np.int64) @ x_tile.as_array().astype(np.int64)
                spec = _resolve_fault_spec(fault_model, tile_index, region_salt(region))

                tile_id = f"r{bi}c{bj}d{bd}"
                recomputes = 0
                while True:
                    inject_now = spec is not None and (recomputes == 0 or persistent)
                    if inject_now:
                        tile_seed = mix64(spec.seed ^ mix64(tile_index ^ 0x711E))
                        y_tile = inject(exact, spec, seed_override=tile_seed)
                    else:
                        y_tile = exact
                    wide = WideTensor(exact.shape, y_tile.reshape(-1), out_scale)
                    stats = checksum(plan, w_tile, x_tile, wide)
                    decision = classify(stats, region)
                    if decision == KEEP:
                        break
                    if recomputes >= max_recompute:
                        audit.append(TileAudit(tile_id, stats, RECOMPUTE, recomputes))
                        raise UnrecoverableFaultError(
                            f"tile {tile_id} still critical after {recomputes} recomputations",
                            stats,
                            audit,
                        )
                    recomputes += 1
                    total_recomputes += 1
                    any_recompute = True

                out[bi:i1, bj:j1] += y_tile
                audit.append(TileAudit(tile_id, stats, RECOMPUTE if recomputes else KEEP, recomputes))
                merged = stats if merged is None else merged.merge(stats)
                tile_index += 1

    return ProtectedGemmResult(
        y=WideTensor((m, k), out.reshape(-1), out_scale),
        decision=RECOMPUTE if any_recompute else KEEP,
        stats=merged,
        recompute_count=total_recomputes,
        audit=audit,
    )


def region_salt(region: CriticalRegion) -> int:
    """Stable salt for per-tile fault-mix draws (depends only on the region)."""
    h = 0
    for f, m_ in region.knots:
        h = mix64(h ^ hash((round(f, 9), round(m_, 9))))
    return h


def write_audit_jsonl(audit: list[TileAudit], path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in audit:
            fh.write(json.dumps(rec.to_dict()) + "\n")


@dataclass(frozen=True)
class CalibrationSweep:
    """Grid spec for calibrate_region: injections on one component of the toy
    network at every (frequency, magnitude) grid point."""

    component: str
    freqs: tuple[float, ...]
    mags: tuple[float, ...]
    layer_index: int = 0
    stage: str = "prefill"
    seed: int = 0

    def __post_init__(self):
        if len(self.freqs) < 3 or len(self.mags) < 3:
            raise ValueError("calibration grid needs at least 3 points per axis")


def calibrate_region(net, sweep: CalibrationSweep, degradation_threshold: float) -> CriticalRegion:
    """Measure degradation over the (freq, mag) grid and trace the largest
    tolerable magnitude per frequency.

    Linear interpolation refines the crossing between adjacent grid
    magnitudes; a running-minimum pass enforces the non-increasing boundary.
    Frequencies where every magnitude degrades past the threshold get
    m*(f) = 0 (recorded, not an error).
    """
    from .inject import InjectionSpec, degradation_rel_l2

    mags = sorted(sweep.mags)
    knots = []
    prev = None
    for fi, f in enumerate(sorted(sweep.freqs)):
        degs = []
        for mi, mag in enumerate(mags):
            spec = InjectionSpec(
                target=sweep.component,
                layer_index=sweep.layer_index,
                rate=f,
                magnitude=mag,
                stage=sweep.stage,
                seed=mix64(sweep.seed ^ mix64((fi + 1) * 1000 + mi)),
            )
            degs.append(degradation_rel_l2(net, spec))
        m_star = 0.0
        for j in range(len(mags) - 1, -1, -1):
            if degs[j] <= degradation_threshold:
                if j + 1 < len(mags) and degs[j + 1] > degradation_threshold:
                    span = degs[j + 1] - degs[j]
                    t = (degradation_threshold - degs[j]) / span if span > 0 else 0.0
                    m_star = mags[j] + t * (mags[j + 1] - mags[j])
                else:
                    m_star = mags[j]
                break
        if prev is not None:
            m_star = min(m_star, prev)  # running minimum keeps the boundary monotone
        prev = m_star
        knots.append((f, m_star))
    return CriticalRegion(knots=tuple(knots), degradation_threshold=degradation_threshold)
