"""Seeded synthetic workloads and layer suites.

The timing-analysis benchmarks differ in operand ranges and sign mixes, which
is what determines their dynamic carry-chain profiles. The reorder suite uses
layers whose weight-sign sets are nested along a hidden column ranking: under
any positive-fraction order every row is non-negative-first, so the one-flip
bound is exact, while the stored (scrambled) column order leaves plenty of
errors for the baseline. Operand magnitudes are capped so partial sums stay
below 2^15; transition runs of 16+ bits then provably involve the sign
extension, which keeps timing errors a subset of sign flips.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import QuantTensor, SeededStream, mix64, load_tensor, save_tensor
from .dta import Workload
from .env import AgingParams, GuardbandParams, TimingEnv, VariationParams

# operand profiles: (rows, depth, cols, act_lo, act_hi, w_lo, w_hi)
_DTA_PROFILES = {
    "sha": (4, 32, 2, -127, 127, -127, 127),
    "aes_cbc": (4, 32, 2, -127, 127, -96, 96),
    "fir": (4, 32, 2, 0, 63, -63, 63),
    "bubblesort": (4, 32, 2, 0, 15, 1, 15),
    "motion_detection": (4, 32, 2, -31, 31, -31, 31),
    "cnn": (4, 32, 2, 0, 127, -96, 96),
    "convolution": (4, 32, 2, 0, 127, -96, 96),
    "filter2d": (4, 32, 2, 0, 63, -48, 48),
    "matrixmult": (4, 32, 2, -127, 127, -127, 127),
    "dct": (4, 32, 2, 0, 31, -24, 24),
}

DTA_WORKLOAD_NAMES = tuple(_DTA_PROFILES)


def default_dta_env() -> TimingEnv:
    """Operating point for the fmax comparisons. The aging and variation
    levels keep (1 + S*dVth)(1 + 3*rho) below the 20% corner guardband, so
    the workload-aware method can never be more pessimistic than the corner
    method on these configs."""
    return TimingEnv(
        clock_period=1.0,
        d_base=0.2,
        d_bit=0.05,
        aging=AgingParams(k_stress=0.05, exponent=0.2, age_time_h=1e4, sensitivity=0.25),
        variation=VariationParams(rho=0.03, seed=11),
        guardband=GuardbandParams(aging_gb=0.15, var_gb=0.05),
    )


def default_read_env() -> TimingEnv:
    """Operating point for timing-error-rate measurements: deterministic
    delays (no aging, no variation) with the clock placed between the
    15-bit and 16-bit chain delays, so errors fire exactly on transition
    runs of 16 bits or more."""
    return TimingEnv(
        clock_period=0.975,
        d_base=0.2,
        d_bit=0.05,
        errors_enabled=True,
        aging=AgingParams(),
        variation=VariationParams(rho=0.0, seed=0),
    )


def _name_tag(name: str) -> int:
    """Process-stable integer tag for a name (str hash is randomized)."""
    return zlib.crc32(name.encode("utf-8"))


def _randint_block(stream: SeededStream, n: int, lo: int, hi: int) -> np.ndarray:
    """n integers in [lo, hi]; modulo reduction keeps it exact and portable."""
    span = np.uint64(hi - lo + 1)
    u = stream.u64_block(n)
    return lo + (u % span).astype(np.int64)


def make_dta_workload(name: str, seed: int) -> Workload:
    if name not in _DTA_PROFILES:
        raise ValueError(f"unknown workload {name!r}; known: {sorted(_DTA_PROFILES)}")
    m, k, n, a_lo, a_hi, w_lo, w_hi = _DTA_PROFILES[name]
    stream = SeededStream(mix64(seed ^ mix64(_name_tag(name))))
    w = _randint_block(stream.fork(1), m * k, w_lo, w_hi)
    a = _randint_block(stream.fork(2), k * n, a_lo, a_hi)
    return Workload(
        name=name,
        weights=QuantTensor((m, k), w, 0.05),
        acts=QuantTensor((k, n), a, 0.05),
    )


def make_dta_suite(seed: int, names=DTA_WORKLOAD_NAMES) -> list[Workload]:
    return [make_dta_workload(name, seed) for name in names]


@dataclass(frozen=True)
class ReadLayerSpec:
    name: str
    c_out: int
    c_in: int
    n_acts: int = 2


DEFAULT_READ_LAYERS = (
    ReadLayerSpec("conv1", 16, 16),
    ReadLayerSpec("conv2", 16, 32),
    ReadLayerSpec("conv3", 32, 32),
    ReadLayerSpec("conv4", 32, 64),
    ReadLayerSpec("conv5", 64, 64),
    ReadLayerSpec("conv6", 64, 128),
    ReadLayerSpec("conv7", 128, 128),
    ReadLayerSpec("conv8", 128, 128),
)

_MAX_OPERAND = 15  # keeps any partial-sum trajectory below 128 * 15 * 15 < 2^15


def make_read_layer(spec: ReadLayerSpec, seed: int) -> tuple[QuantTensor, QuantTensor]:
    """One synthetic layer with nested weight-sign structure.

    A hidden column ranking assigns each output channel a positive prefix of
    seeded length; the stored column order is scrambled. Activations are
    non-negative (post-ReLU regime).
    """
    if spec.c_in > 128:
        raise ValueError("c_in above 128 would break the partial-sum magnitude cap")
    stream = SeededStream(mix64(seed ^ mix64(_name_tag(spec.name))))
    ranking = stream.fork(1).permutation(spec.c_in)  # rank r lives at column ranking[r]
    mags = _randint_block(stream.fork(2), spec.c_out * spec.c_in, 1, _MAX_OPERAND).reshape(spec.c_out, spec.c_in)
    thresholds = _randint_block(
        stream.fork(3), spec.c_out, max(1, spec.c_in // 6), max(2, (5 * spec.c_in) // 6)
    )
    w = np.zeros((spec.c_out, spec.c_in), dtype=np.int64)
    for i in range(spec.c_out):
        n_pos = int(thresholds[i])
        for r, col in enumerate(ranking):
            w[i, col] = mags[i, col] if r < n_pos else -mags[i, col]
    acts = _randint_block(stream.fork(4), spec.c_in * spec.n_acts, 0, _MAX_OPERAND)
    return (
        QuantTensor((spec.c_out, spec.c_in), w.reshape(-1), 0.05),
        QuantTensor((spec.c_in, spec.n_acts), acts, 0.05),
    )


def make_read_suite(seed: int, layer_specs=DEFAULT_READ_LAYERS) -> list[tuple[str, QuantTensor, QuantTensor]]:
    return [(spec.name, *make_read_layer(spec, seed)) for spec in layer_specs]


def make_gemm_operands(m: int, n: int, k: int, seed: int, lo: int = -127, hi: int = 127, scale: float = 1.0):
    """Plain random GEMM operands (unit scale by default: quanta are real units)."""
    stream = SeededStream(mix64(seed ^ 0x6E0001))
    w = _randint_block(stream.fork(1), m * n, lo, hi)
    x = _randint_block(stream.fork(2), n * k, lo, hi)
    return QuantTensor((m, n), w, scale), QuantTensor((n, k), x, scale)


def save_read_suite(suite, directory) -> Path:
    """Write each layer's tensors plus a manifest listing them."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layers = []
    for name, w, x in suite:
        w_manifest = directory / f"{name}_weights.json"
        x_manifest = directory / f"{name}_acts.json"
        save_tensor(w, w_manifest, f"{name}_weights")
        save_tensor(x, x_manifest, f"{name}_acts")
        layers.append({"name": name, "weights": w_manifest.name, "acts": x_manifest.name})
    manifest = directory / "suite.json"
    manifest.write_text(json.dumps({"layers": layers}, indent=2) + "\n")
    return manifest


def load_read_suite(manifest_path) -> list[tuple[str, QuantTensor, QuantTensor]]:
    manifest_path = Path(manifest_path)
    d = json.loads(manifest_path.read_text())
    if "layers" not in d:
        raise ValueError(f"suite manifest missing 'layers': {manifest_path}")
    suite = []
    for entry in d["layers"]:
        for key in ("name", "weights", "acts"):
            if key not in entry:
                raise ValueError(f"suite manifest layer entry missing '{key}'")
        w = load_tensor(manifest_path.parent / entry["weights"])
        x = load_tensor(manifest_path.parent / entry["acts"])
        suite.append((entry["name"], w, x))
    return suite
