"""Error injection and resilience characterization on a desk-scale network.

Faults are injected into the wide (pre-requantization) GEMM outputs, which is
where a systolic-array timing error manifests and where the checksums look.
The toy network keeps the structural features the resilience findings hinge
on: normalization straight after the attention-output and down projections,
residual-carried activations, and a prefill stage whose cached context feeds
a decode stage. All quantization scales are unity, so accumulator quanta and
real units coincide.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import I8_MAX, I8_MIN, SeededStream, mix64

STAGES = ("prefill", "decode")
TARGETS = ("qkv", "o_proj", "up", "down", "other")

_SELECT_TAG = 0x5E1EC7
_SIGN_TAG = 0x516E
_WIDE_BITS = 32


@dataclass(frozen=True)
class InjectionSpec:
    """One fault-injection site and intensity.

    Exactly one of bit_position (XOR a bit of the 32-bit accumulator image)
    or magnitude (add +/-magnitude quanta) is active. rate is the per-element
    selection probability; positions replay exactly under the same seed.
    """

    target: str
    layer_index: int = 0
    rate: float = 0.0
    bit_position: int | None = None
    magnitude: float | None = None
    stage: str = "prefill"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if (self.bit_position is None) == (self.magnitude is None):
            raise ValueError("exactly one of bit_position / magnitude must be set")
        if self.bit_position is not None and not 0 <= self.bit_position < _WIDE_BITS:
            raise ValueError(f"bit_position must be in [0, {_WIDE_BITS - 1}]")
        if self.magnitude is not None and self.magnitude < 0.0:
            raise ValueError("magnitude must be non-negative")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "layer_index": self.layer_index,
            "rate": self.rate,
            "bit_position": self.bit_position,
            "magnitude": self.magnitude,
            "stage": self.stage,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InjectionSpec":
        allowed = {"target", "layer_index", "rate", "bit_position", "magnitude", "stage", "seed"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown field(s) {sorted(unknown)} in injection spec")
        return cls(
            target=str(d["target"]),
            layer_index=int(d.get("layer_index", 0)),
            rate=float(d.get("rate", 0.0)),
            bit_position=None if d.get("bit_position") is None else int(d["bit_position"]),
            magnitude=None if d.get("magnitude") is None else float(d["magnitude"]),
            stage=str(d.get("stage", "prefill")),
            seed=int(d.get("seed", 0)),
        )


def inject(y_wide: np.ndarray, spec: InjectionSpec, seed_override: int | None = None) -> np.ndarray:
    """Corrupt selected elements of a wide integer tensor.

    Selection draws are keyed by flat element index, so the same seed flips
    the same positions regardless of how many elements end up selected.
    """
    arr = np.asarray(y_wide, dtype=np.int64)
    flat = arr.reshape(-1).copy()
    n = flat.size
    seed = spec.seed if seed_override is None else seed_override
    if spec.rate > 0.0 and n > 0:
        sel = SeededStream(seed).fork(_SELECT_TAG).uniform_block(n) < spec.rate
        if spec.bit_position is not None:
            image = flat[sel] & 0xFFFFFFFF
            image ^= 1 << spec.bit_position
            signed = np.where(image & 0x80000000, image - (1 << _WIDE_BITS), image)
            flat[sel] = signed
        else:
            delta = int(np.floor(abs(spec.magnitude) + 0.5))
            signs = SeededStream(seed).fork(_SIGN_TAG).sign_block(n)
            flat[sel] = flat[sel] + signs[sel] * delta
    return flat.reshape(arr.shape)


def _round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def _requant(wide: np.ndarray, scale: float) -> np.ndarray:
    q = _round_half_away(wide.astype(np.float64) / scale)
    return np.clip(q, I8_MIN, I8_MAX).astype(np.int64)


_NORM_TARGET_RMS = 32.0


def _rmsnorm_to_i8(wide: np.ndarray) -> np.ndarray:
    """Row-wise RMS scaling of wide values onto the int8 grid.

    A single large entry inflates its row's RMS and squashes every other
    feature of that token: the mechanism that makes normalized components
    fault-sensitive.
    """
    w = wide.astype(np.float64)
    rms = np.sqrt(np.mean(w * w, axis=-1, keepdims=True))
    rms = np.where(rms == 0.0, 1.0, rms)
    out = _round_half_away(w / rms * _NORM_TARGET_RMS)
    return np.clip(out, I8_MIN, I8_MAX).astype(np.int64)


def _sat_add_i8(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.clip(a + b, I8_MIN, I8_MAX)


@dataclass(frozen=True)
class ToyNetConfig:
    d_model: int = 32
    d_ff: int = 64
    n_layers: int = 2
    seq_len: int = 12
    n_classes: int = 8
    batch: int = 16
    seed: int = 7

    def __post_init__(self):
        if min(self.d_model, self.d_ff, self.n_layers, self.seq_len, self.n_classes, self.batch) < 1:
            raise ValueError("toy network dims must be positive")


def _int8_block(stream: SeededStream, shape, sigma: float) -> np.ndarray:
    vals = _round_half_away(stream.normal_block(int(np.prod(shape))) * sigma)
    return np.clip(vals, I8_MIN, I8_MAX).astype(np.int64).reshape(shape)


class ToyNetwork:
    """Quantized transformer-ish stack: per layer a fused qkv projection,
    integer attention over cached keys/values, an output projection followed
    by normalization, and an up/down MLP whose down projection is also
    normalized. Deterministic given the config seed."""

    def __init__(self, config: ToyNetConfig):
        self.config = config
        stream = SeededStream(mix64(config.seed ^ 0x70F1E7))
        d, ff = config.d_model, config.d_ff
        self.layers = []
        for li in range(config.n_layers):
            ls = stream.fork(100 + li)
            self.layers.append(
                {
                    "w_qkv": _int8_block(ls.fork(1), (d, 3 * d), 14.0),
                    "w_o": _int8_block(ls.fork(2), (d, d), 14.0),
                    "w_up": _int8_block(ls.fork(3), (d, ff), 14.0),
                    "w_down": _int8_block(ls.fork(4), (ff, d), 14.0),
                }
            )
        self.w_head = _int8_block(stream.fork(900), (d, config.n_classes), 14.0)
        # one extra token per sequence: positions [0, seq_len) prefill, position seq_len decodes
        self.inputs = _int8_block(
            stream.fork(901), (config.batch, config.seq_len + 1, d), 20.0
        )
        self.scales: dict[str, float] = {}
        self._calibrate()
        self.clean_logits = self.forward(None)
        # classification labels: fault-free argmax at the decode position
        self.labels = np.argmax(self.clean_logits[:, -1, :], axis=1)

    # -- execution ---------------------------------------------------------

    def _site(self, kind: str, layer: int) -> str:
        return f"l{layer}.{kind}"

    def _quant_site(self, wide: np.ndarray, site: str, calibrating: bool) -> np.ndarray:
        if calibrating and site not in self.scales:
            peak = float(np.max(np.abs(wide)))
            self.scales[site] = max(peak / I8_MAX, 1.0)
        return _requant(wide, self.scales[site])

    def _maybe_inject(self, wide, spec, kind, layer, stage):
        if spec is None:
            return wide
        if spec.target == kind and spec.layer_index == layer and spec.stage == stage:
            return inject(wide, spec)
        return wide

    def _calibrate(self):
        self._forward_impl(None, calibrating=True)

    def forward(self, spec: InjectionSpec | None) -> np.ndarray:
        """Per-position logits for the whole batch, wide ints [B, T+1, classes]."""
        if spec is not None:
            if spec.target not in TARGETS:
                raise ValueError(f"unknown injection target {spec.target!r}")
            if not 0 <= spec.layer_index < self.config.n_layers:
                raise ValueError(f"layer_index {spec.layer_index} outside the network")
        return self._forward_impl(spec, calibrating=False)

    def _attend(self, q8, k8, v8, site_scores, site_ctx, causal, calibrating, spec, layer, stage):
        t_q, t_k = q8.shape[1], k8.shape[1]
        scores = np.einsum("bqd,bkd->bqk", q8, k8, dtype=np.int64)
        if calibrating and site_scores not in self.scales:
            peak = float(np.max(np.abs(scores)))
            self.scales[site_scores] = max(peak / I8_MAX, 1.0)
        att = _requant(scores, self.scales[site_scores])
        att = np.maximum(att, 0)
        if causal:
            mask = np.tril(np.ones((t_q, t_k), dtype=np.int64))
            att = att * mask[None, :, :]
        # L1-normalized mixing weights: like a softmax, corrupted scores can
        # redistribute attention but never amplify the mixed values
        mixed = np.einsum("bqk,bkd->bqd", att, v8, dtype=np.int64)
        denom = np.maximum(att.sum(axis=2, keepdims=True), 1)
        ctx = _round_half_away(mixed.astype(np.float64) / denom).astype(np.int64)
        ctx = self._maybe_inject(ctx, spec, "other", layer, stage)
        if calibrating and site_ctx not in self.scales:
            peak = float(np.max(np.abs(ctx)))
            self.scales[site_ctx] = max(peak / I8_MAX, 1.0)
        return _requant(ctx, self.scales[site_ctx])

    def _block(self, x_wide, layer_idx, stage, spec, caches, calibrating):
        """Pre-norm block over the wide residual stream.

        The attention-output and down projections add their raw wide outputs
        into the residual; their first consumer is the next normalization.
        A large fault there rides the residual unclamped and collapses every
        later normalization of that token, whereas qkv/up faults are clamped
        away at requantization.
        """
        cfg = self.config
        d = cfg.d_model
        lw = self.layers[layer_idx]

        xin8 = _rmsnorm_to_i8(x_wide)
        qkv = np.tensordot(xin8, lw["w_qkv"], axes=([2], [0]))
        qkv = self._maybe_inject(qkv, spec, "qkv", layer_idx, stage)
        qkv8 = self._quant_site(qkv, self._site("qkv", layer_idx), calibrating)
        q8, k8, v8 = qkv8[..., :d], qkv8[..., d : 2 * d], qkv8[..., 2 * d :]

        if stage == "prefill":
            caches[layer_idx] = (k8, v8)
            k_all, v_all = k8, v8
            causal = True
        else:
            k_prev, v_prev = caches[layer_idx]
            k_all = np.concatenate([k_prev, k8], axis=1)
            v_all = np.concatenate([v_prev, v8], axis=1)
            caches[layer_idx] = (k_all, v_all)
            causal = False

        ctx8 = self._attend(
            q8,
            k_all,
            v_all,
            self._site("scores", layer_idx),
            self._site("ctx", layer_idx),
            causal,
            calibrating,
            spec,
            layer_idx,
            stage,
        )

        o_wide = np.tensordot(ctx8, lw["w_o"], axes=([2], [0]))
        o_wide = self._maybe_inject(o_wide, spec, "o_proj", layer_idx, stage)
        x_wide = x_wide + o_wide

        xin8b = _rmsnorm_to_i8(x_wide)
        up = np.tensordot(xin8b, lw["w_up"], axes=([2], [0]))
        up = self._maybe_inject(up, spec, "up", layer_idx, stage)
        up8 = self._quant_site(up, self._site("up", layer_idx), calibrating)
        up8 = np.maximum(up8, 0)

        down = np.tensordot(up8, lw["w_down"], axes=([2], [0]))
        down = self._maybe_inject(down, spec, "down", layer_idx, stage)
        x_wide = x_wide + down
        return x_wide

    def _forward_impl(self, spec, calibrating: bool) -> np.ndarray:
        """Next-step logits at every position: [batch, seq_len + 1, n_classes].

        The decode position is computed from cached keys/values, so
        prefill-stage corruption reaches it through the cache.
        """
        cfg = self.config
        prefill_x = self.inputs[:, : cfg.seq_len, :].astype(np.int64) * 16
        decode_x = self.inputs[:, cfg.seq_len :, :].astype(np.int64) * 16
        caches: dict[int, tuple] = {}

        x = prefill_x
        for li in range(cfg.n_layers):
            x = self._block(x, li, "prefill", spec, caches, calibrating)

        y = decode_x
        for li in range(cfg.n_layers):
            y = self._block(y, li, "decode", spec, caches, calibrating)

        hidden = _rmsnorm_to_i8(np.concatenate([x, y], axis=1))
        return np.tensordot(hidden, self.w_head, axes=([2], [0]))


# -- degradation metrics ----------------------------------------------------


def degradation_rel_l2(net: ToyNetwork, spec: InjectionSpec | None) -> float:
    """Relative L2 distortion of the full logit output vs the fault-free run."""
    if spec is None:
        return 0.0
    faulty = net.forward(spec)
    clean = net.clean_logits
    denom = float(np.linalg.norm(clean.astype(np.float64)))
    if denom == 0.0:
        denom = 1.0
    return float(np.linalg.norm((faulty - clean).astype(np.float64))) / denom


def accuracy_delta(net: ToyNetwork, spec: InjectionSpec | None) -> float:
    """Drop in agreement with the fault-free decode-position labels."""
    if spec is None:
        return 0.0
    faulty = net.forward(spec)
    acc = float(np.mean(np.argmax(faulty[:, -1, :], axis=1) == net.labels))
    return 1.0 - acc


METRICS = {
    "rel_l2": degradation_rel_l2,
    "acc_delta": accuracy_delta,
}


@dataclass(frozen=True)
class ResilienceReport:
    records: tuple[dict, ...]

    COLUMNS = ("target", "layer", "bit", "rate", "magnitude", "stage", "metric", "value")

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for rec in self.records:
                writer.writerow([rec[c] if rec[c] is not None else "" for c in self.COLUMNS])

    def values(self, metric: str, **filters) -> list[tuple[dict, float]]:
        out = []
        for rec in self.records:
            if rec["metric"] != metric:
                continue
            if all(rec[k] == v for k, v in filters.items()):
                out.append((rec, rec["value"]))
        return out


def run_characterization(net: ToyNetwork, sweep) -> ResilienceReport:
    """Execute every injection spec and tabulate both degradation metrics."""
    records = []
    for spec in sweep:
        if spec.target not in TARGETS:
            raise ValueError(f"unknown injection target {spec.target!r}")
        if not 0 <= spec.layer_index < net.config.n_layers:
            raise ValueError(f"layer_index {spec.layer_index} outside the network")
        for metric, fn in METRICS.items():
            records.append(
                {
                    "target": spec.target,
                    "layer": spec.layer_index,
                    "bit": spec.bit_position,
                    "rate": spec.rate,
                    "magnitude": spec.magnitude,
                    "stage": spec.stage,
                    "metric": metric,
                    "value": fn(net, spec),
                }
            )
    return ResilienceReport(records=tuple(records))


def site_element_count(net: ToyNetwork, component: str, stage: str) -> int:
    """Number of wide elements the injection sees at one site and stage."""
    cfg = net.config
    tokens = cfg.batch * (cfg.seq_len if stage == "prefill" else 1)
    widths = {
        "qkv": 3 * cfg.d_model,
        "o_proj": cfg.d_model,
        "up": cfg.d_ff,
        "down": cfg.d_model,
        "other": cfg.d_model,
    }
    if component not in widths:
        raise ValueError(f"unknown injection target {component!r}")
    return tokens * widths[component]


def magnitude_frequency_sweep(
    net: ToyNetwork,
    component: str,
    total_mag: float,
    points: int,
    layer_index: int = 0,
    stage: str = "prefill",
    seed: int = 0,
    rates=None,
    metric: str = "rel_l2",
) -> list[dict]:
    """Hold the total error budget fixed and trade frequency against magnitude.

    Each point injects at rate r with magnitude total_mag / (r * N), N being
    the element count of the target tensor; points whose expected fault count
    r * N falls below one are skipped with a flag.
    """
    if points < 3:
        raise ValueError("sweep needs at least 3 points")
    n = site_element_count(net, component, stage)
    if rates is None:
        rates = np.geomspace(max(2.0 / n, 1e-6), 0.5, points)
    fn = METRICS[metric]
    curve = []
    for pi, rate in enumerate(rates):
        rate = float(rate)
        expected = rate * n
        if expected < 1.0:
            curve.append({"rate": rate, "magnitude": None, "value": None, "skipped": True})
            continue
        magnitude = total_mag / expected if total_mag > 0 else 0.0
        spec = InjectionSpec(
            target=component,
            layer_index=layer_index,
            rate=rate,
            magnitude=magnitude,
            stage=stage,
            seed=mix64(seed ^ mix64(pi + 1)),
        )
        curve.append({"rate": rate, "magnitude": magnitude, "value": fn(net, spec), "skipped": False})
    return curve
