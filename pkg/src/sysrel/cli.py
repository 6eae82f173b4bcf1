"""Experiment runner: one binary, the paper-shaped recipes as subcommands.

Every subcommand is deterministic given its config (all randomness is seeded
from it), writes outputs atomically, and emits a run_meta.json whose embedded
config reproduces the run byte for byte when fed back through --config.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .abft import (
    CalibrationSweep,
    ChecksumPlan,
    CriticalRegion,
    UnrecoverableFaultError,
    calibrate_region,
    load_region,
    protected_gemm,
    save_region,
    write_audit_jsonl,
)
from .core import mix64
from .dta import METHODS, Workload, fmax_search
from .env import TimingEnv
from .inject import (
    InjectionSpec,
    ToyNetConfig,
    ToyNetwork,
    degradation_rel_l2,
    magnitude_frequency_sweep,
    run_characterization,
)
from .readopt import cluster_then_reorder, direct_plan, evaluate_ter_reduction, geometric_mean
from .workloads import (
    DTA_WORKLOAD_NAMES,
    DEFAULT_READ_LAYERS,
    ReadLayerSpec,
    default_dta_env,
    default_read_env,
    load_read_suite,
    make_dta_workload,
    make_gemm_operands,
    make_read_suite,
    save_read_suite,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_UNRECOVERABLE = 4


class ConfigError(ValueError):
    pass


def _require(cfg: dict, where: str, allowed: set[str], required: set[str] = frozenset()) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown field(s) {sorted(unknown)} in {where} config")
    missing = required - set(cfg)
    if missing:
        raise ConfigError(f"missing field(s) {sorted(missing)} in {where} config")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_table(path_base: Path, header: list[str], rows: list[list], fmt: str) -> Path:
    if fmt == "json":
        path = path_base.with_suffix(".json")
        payload = [dict(zip(header, row)) for row in rows]
        _atomic_write_text(path, json.dumps(payload, indent=2) + "\n")
    else:
        path = path_base.with_suffix(".csv")
        lines = [",".join(header)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        _atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def _load_config(path: str, subcommand: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    if "subcommand" in doc and "config" in doc:
        # run_meta.json round trip
        if doc["subcommand"] != subcommand:
            raise ConfigError(
                f"run metadata is for subcommand {doc['subcommand']!r}, not {subcommand!r}"
            )
        doc = doc["config"]
    return doc


def _env_from(cfg: dict, default: TimingEnv) -> TimingEnv:
    if "env" not in cfg or cfg["env"] is None:
        return default
    return TimingEnv.from_dict(cfg["env"])


def _write_meta(out: Path, subcommand: str, config: dict, outputs: list[str]) -> None:
    meta = {
        "subcommand": subcommand,
        "version": __version__,
        "config": config,
        "outputs": sorted(outputs),
    }
    _atomic_write_text(out / "run_meta.json", json.dumps(meta, indent=2) + "\n")


# -- dta ---------------------------------------------------------------------


def cmd_dta(cfg: dict, out: Path, fmt: str) -> list[str]:
    _require(cfg, "dta", {"seed", "env", "workloads"})
    seed = int(cfg.get("seed", 0))
    env = _env_from(cfg, default_dta_env())
    entries = cfg.get("workloads") or list(DTA_WORKLOAD_NAMES)
    workloads: list[Workload] = []
    for idx, entry in enumerate(entries):
        if isinstance(entry, str):
            workloads.append(make_dta_workload(entry, mix64(seed ^ (idx + 1))))
        else:
            _require(entry, "dta workload", {"name", "seed"}, {"name"})
            workloads.append(make_dta_workload(entry["name"], int(entry.get("seed", mix64(seed ^ (idx + 1))))))
    rows = []
    for wl in workloads:
        for method in METHODS:
            r = fmax_search(wl, method, env)
            rows.append([r.workload, r.method, r.fmax_mhz, 100.0 * r.improvement_vs_sta])
    path = _write_table(out / "dta_fmax", ["workload", "method", "fmax_mhz", "improvement_pct"], rows, fmt)
    return [path.name]


# -- read --------------------------------------------------------------------


def _read_suite_from(cfg: dict, seed: int):
    suite_cfg = cfg.get("suite")
    if suite_cfg is None:
        return make_read_suite(seed)
    _require(suite_cfg, "read suite", {"manifest", "generate"})
    if "manifest" in suite_cfg:
        return load_read_suite(suite_cfg["manifest"])
    gen = suite_cfg["generate"]
    _require(gen, "read suite generate", {"seed", "layers"})
    gen_seed = int(gen.get("seed", seed))
    layers = gen.get("layers")
    if layers is None:
        return make_read_suite(gen_seed)
    specs = []
    for entry in layers:
        _require(entry, "read layer", {"name", "c_out", "c_in", "n_acts"}, {"name", "c_out", "c_in"})
        specs.append(
            ReadLayerSpec(
                name=str(entry["name"]),
                c_out=int(entry["c_out"]),
                c_in=int(entry["c_in"]),
                n_acts=int(entry.get("n_acts", 2)),
            )
        )
    return make_read_suite(gen_seed, tuple(specs))


def cmd_read(cfg: dict, out: Path, fmt: str) -> list[str]:
    _require(cfg, "read", {"seed", "env", "suite", "k_values"})
    seed = int(cfg.get("seed", 0))
    env = _env_from(cfg, default_read_env())
    k_values = [int(k) for k in cfg.get("k_values", [2, 4, 8])]
    if not k_values or any(k < 1 for k in k_values):
        raise ConfigError("k_values must be positive cluster counts")
    suite = _read_suite_from(cfg, seed)

    header = ["layer", "c_out", "c_in", "baseline_ter", "baseline_flip_rate", "direct_ter", "direct_reduction"]
    for k in k_values:
        header += [f"cluster{k}_ter", f"cluster{k}_reduction"]
    header += ["best_k", "best_cluster_ter", "best_cluster_reduction"]

    rows = []
    direct_reductions = []
    cluster_reductions = []
    for name, w, x in suite:
        direct = evaluate_ter_reduction(w, x, direct_plan(w), env)
        row = [
            name,
            w.dims[0],
            w.dims[1],
            direct.baseline.ter,
            direct.baseline.flip_rate,
            direct.optimized.ter,
            "no_errors" if direct.no_errors else direct.reduction,
        ]
        if not direct.no_errors:
            direct_reductions.append(direct.reduction)
        best = None
        for k in k_values:
            kk = min(k, w.dims[0])
            ev = evaluate_ter_reduction(w, x, cluster_then_reorder(w, kk, seed=seed), env)
            row += [ev.optimized.ter, "no_errors" if ev.no_errors else ev.reduction]
            key = math.inf if ev.no_errors else ev.reduction
            if best is None or key > best[0]:
                best = (key, kk, ev)
        _, best_k, best_ev = best
        row += [
            best_k,
            best_ev.optimized.ter,
            "no_errors" if best_ev.no_errors else best_ev.reduction,
        ]
        if not best_ev.no_errors:
            cluster_reductions.append(best_ev.reduction)
        rows.append(row)

    summary = ["geomean", "", "", "", "", "", geometric_mean(direct_reductions) if direct_reductions else ""]
    for _ in k_values:
        summary += ["", ""]
    summary += ["", "", geometric_mean(cluster_reductions) if cluster_reductions else ""]
    rows.append(summary)
    path = _write_table(out / "read_ter", header, rows, fmt)
    return [path.name]


# -- abft ---------------------------------------------------------------------


def _spec_from(cfg: dict) -> InjectionSpec:
    return InjectionSpec.from_dict(cfg)


def _region_from(cfg: dict, out: Path, seed: int) -> tuple[CriticalRegion, ToyNetwork | None, CalibrationSweep | None, list[str]]:
    region_cfg = cfg.get("region")
    if region_cfg is None:
        raise ConfigError("abft config needs a 'region' block ('file' or 'calibrate')")
    _require(region_cfg, "abft region", {"file", "calibrate"})
    if "file" in region_cfg:
        return load_region(region_cfg["file"]), None, None, []
    cal = region_cfg["calibrate"]
    _require(
        cal,
        "abft calibrate",
        {"component", "freqs", "mags", "threshold", "net", "layer_index", "stage", "seed"},
        {"component", "freqs", "mags", "threshold"},
    )
    net_cfg = cal.get("net") or {}
    _require(net_cfg, "toy net", {"d_model", "d_ff", "n_layers", "seq_len", "n_classes", "batch", "seed"})
    net = ToyNetwork(ToyNetConfig(**{**{"seed": seed}, **net_cfg}))
    sweep = CalibrationSweep(
        component=str(cal["component"]),
        freqs=tuple(float(f) for f in cal["freqs"]),
        mags=tuple(float(m) for m in cal["mags"]),
        layer_index=int(cal.get("layer_index", 0)),
        stage=str(cal.get("stage", "prefill")),
        seed=int(cal.get("seed", seed)),
    )
    region = calibrate_region(net, sweep, float(cal["threshold"]))
    region_path = out / "region.json"
    _atomic_write_text(region_path, region.to_json() + "\n")
    return region, net, sweep, [region_path.name]


def cmd_abft(cfg: dict, out: Path, fmt: str) -> list[str]:
    _require(
        cfg,
        "abft",
        {"seed", "plan", "workload", "region", "faults", "max_recompute"},
        {"plan", "workload", "region"},
    )
    seed = int(cfg.get("seed", 0))
    plan_cfg = cfg["plan"]
    _require(plan_cfg, "abft plan", {"dataflow", "rows", "cols", "depth"}, {"dataflow", "rows", "cols", "depth"})
    plan = ChecksumPlan(
        dataflow=str(plan_cfg["dataflow"]),
        rows=int(plan_cfg["rows"]),
        cols=int(plan_cfg["cols"]),
        depth=int(plan_cfg["depth"]),
    )
    wl = cfg["workload"]
    _require(wl, "abft workload", {"m", "n", "k", "seed"}, {"m", "n", "k"})
    w, x = make_gemm_operands(int(wl["m"]), int(wl["n"]), int(wl["k"]), int(wl.get("seed", seed)))

    region, net, sweep, outputs = _region_from(cfg, out, seed)

    fault_model = None
    fault_entries = cfg.get("faults") or []
    if fault_entries:
        mix = []
        for entry in fault_entries:
            _require(entry, "abft fault", {"weight", "spec"}, {"weight", "spec"})
            mix.append((float(entry["weight"]), _spec_from(entry["spec"])))
        fault_model = mix if len(mix) > 1 else mix[0][1]

    result = protected_gemm(
        w, x, plan, region, fault_model=fault_model, max_recompute=int(cfg.get("max_recompute", 3))
    )

    audit_path = out / "abft_audit.jsonl"
    write_audit_jsonl(result.audit, audit_path)
    outputs.append(audit_path.name)

    n_tiles = len(result.audit)
    erroneous = [a for a in result.audit if a.stats.freq > 0.0]
    recomputed = [a for a in result.audit if a.recompute_count > 0]
    missed = [a for a in erroneous if a.recompute_count == 0]

    exact = w.as_array().astype(np.int64) @ x.as_array().astype(np.int64)
    diff = result.y.as_array() - exact
    denom = float(np.linalg.norm(exact.astype(np.float64))) or 1.0
    summary = {
        "tiles": n_tiles,
        "recompute_rate": len(recomputed) / n_tiles,
        "always_recompute_rate": len(erroneous) / n_tiles,
        "missed_error_rate": (len(missed) / len(erroneous)) if erroneous else 0.0,
        "recompute_count": result.recompute_count,
        "decision": result.decision,
        "output_rel_l2": float(np.linalg.norm(diff.astype(np.float64))) / denom,
        "degradation_threshold": region.degradation_threshold,
    }
    if net is not None and sweep is not None and fault_entries:
        task_degs = []
        for entry in fault_entries:
            spec = _spec_from(entry["spec"])
            if spec.magnitude is None:
                task_degs.append(None)
                continue
            net_spec = InjectionSpec(
                target=sweep.component,
                layer_index=sweep.layer_index,
                rate=spec.rate,
                magnitude=spec.magnitude,
                stage=sweep.stage,
                seed=spec.seed,
            )
            task_degs.append(degradation_rel_l2(net, net_spec))
        summary["fault_task_degradation"] = task_degs
    summary_path = out / "abft_summary.json"
    _atomic_write_text(summary_path, json.dumps(summary, indent=2) + "\n")
    outputs.append(summary_path.name)
    return outputs


# -- inject --------------------------------------------------------------------


def _characterization_sweep(net: ToyNetwork, seed: int) -> list[InjectionSpec]:
    """The six-question grid: layer-wise, bit-wise, component-wise,
    magnitude-frequency (emitted separately), and stage slices."""
    specs = []
    layers = range(net.config.n_layers)
    # layer-wise (fixed mid bit, moderate rate) on a normalized component
    for li in layers:
        specs.append(InjectionSpec("o_proj", li, rate=0.02, bit_position=20, seed=mix64(seed ^ (0x1A00 + li))))
    # bit-wise on a requantized component and a normalized one
    for bit in range(0, 32, 2):
        specs.append(InjectionSpec("qkv", 0, rate=0.02, bit_position=bit, seed=mix64(seed ^ (0x2B00 + bit))))
        specs.append(InjectionSpec("o_proj", 0, rate=0.02, bit_position=bit, seed=mix64(seed ^ (0x2C00 + bit))))
    # component-wise at equal spec, both stages
    for stage in ("prefill", "decode"):
        for ti, target in enumerate(("qkv", "o_proj", "up", "down", "other")):
            specs.append(
                InjectionSpec(
                    target,
                    0,
                    rate=0.02,
                    bit_position=22,
                    stage=stage,
                    seed=mix64(seed ^ (0x3D00 + ti)),
                )
            )
    return specs


def cmd_inject(cfg: dict, out: Path, fmt: str) -> list[str]:
    _require(cfg, "inject", {"seed", "net", "sweep", "msd"}, set())
    seed = int(cfg.get("seed", 0))
    net_cfg = cfg.get("net") or {}
    _require(net_cfg, "toy net", {"d_model", "d_ff", "n_layers", "seq_len", "n_classes", "batch", "seed"})
    net = ToyNetwork(ToyNetConfig(**{**{"seed": seed}, **net_cfg}))

    sweep_cfg = cfg.get("sweep")
    if sweep_cfg is None:
        specs = _characterization_sweep(net, seed)
    elif isinstance(sweep_cfg, dict):
        _require(sweep_cfg, "inject sweep", {"preset", "seed"}, {"preset"})
        if sweep_cfg["preset"] != "characterization":
            raise ConfigError(f"unknown sweep preset {sweep_cfg['preset']!r}")
        specs = _characterization_sweep(net, int(sweep_cfg.get("seed", seed)))
    else:
        specs = [_spec_from(s) for s in sweep_cfg]

    report = run_characterization(net, specs)
    outputs = []
    rows = [[rec[c] for c in report.COLUMNS] for rec in report.records]
    path = _write_table(out / "inject_report", list(report.COLUMNS), rows, fmt)
    outputs.append(path.name)

    msd_cfg = cfg.get("msd")
    if msd_cfg is None:
        msd_cfg = {"components": ["qkv", "o_proj"], "total_mag": 60000.0, "points": 6}
    _require(msd_cfg, "inject msd", {"components", "total_mag", "points", "stage", "layer_index"})
    for comp in msd_cfg.get("components", []):
        curve = magnitude_frequency_sweep(
            net,
            comp,
            float(msd_cfg.get("total_mag", 60000.0)),
            int(msd_cfg.get("points", 6)),
            layer_index=int(msd_cfg.get("layer_index", 0)),
            stage=str(msd_cfg.get("stage", "prefill")),
            seed=seed,
        )
        rows = [[p["rate"], p["magnitude"], p["value"], int(p["skipped"])] for p in curve]
        path = _write_table(out / f"msd_{comp}", ["rate", "magnitude", "rel_l2", "skipped"], rows, fmt)
        outputs.append(path.name)
    return outputs


# -- gen-workload ----------------------------------------------------------------


def cmd_gen_workload(cfg: dict, out: Path, fmt: str) -> list[str]:
    _require(cfg, "gen-workload", {"kind", "seed", "layers", "m", "n", "k"}, {"kind"})
    kind = cfg["kind"]
    seed = int(cfg.get("seed", 0))
    if kind == "read_suite":
        layers = cfg.get("layers")
        if layers is None:
            suite = make_read_suite(seed)
        else:
            specs = []
            for entry in layers:
                _require(entry, "read layer", {"name", "c_out", "c_in", "n_acts"}, {"name", "c_out", "c_in"})
                specs.append(
                    ReadLayerSpec(
                        name=str(entry["name"]),
                        c_out=int(entry["c_out"]),
                        c_in=int(entry["c_in"]),
                        n_acts=int(entry.get("n_acts", 2)),
                    )
                )
            suite = make_read_suite(seed, tuple(specs))
        manifest = save_read_suite(suite, out)
        return [manifest.name] + [f"{name}_{part}.{ext}" for name, _, _ in suite for part in ("weights", "acts") for ext in ("json", "bin")]
    if kind == "gemm":
        for key in ("m", "n", "k"):
            if key not in cfg:
                raise ConfigError(f"gemm workload needs '{key}'")
        from .core import save_tensor

        w, x = make_gemm_operands(int(cfg["m"]), int(cfg["n"]), int(cfg["k"]), seed)
        save_tensor(w, out / "gemm_w.json", "gemm_w")
        save_tensor(x, out / "gemm_x.json", "gemm_x")
        return ["gemm_w.json", "gemm_w.bin", "gemm_x.json", "gemm_x.bin"]
    raise ConfigError(f"unknown gen-workload kind {kind!r}")


# -- entry ----------------------------------------------------------------------

_COMMANDS = {
    "dta": cmd_dta,
    "read": cmd_read,
    "abft": cmd_abft,
    "inject": cmd_inject,
    "gen-workload": cmd_gen_workload,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sysrel", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config's top-level seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap (results are schedule-independent)")
        p.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = _load_config(args.config, args.subcommand)
        if args.seed is not None:
            cfg = {**cfg, "seed": args.seed}
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        outputs = _COMMANDS[args.subcommand](cfg, out, args.format)
        _write_meta(out, args.subcommand, cfg, outputs)
        return EXIT_OK
    except UnrecoverableFaultError as exc:
        print(
            json.dumps({"error": "unrecoverable-fault", "message": str(exc)}),
            file=sys.stderr,
        )
        return EXIT_UNRECOVERABLE
    except (ConfigError, ValueError) as exc:
        print(json.dumps({"error": "invalid-argument", "message": str(exc)}), file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - last resort
        print(json.dumps({"error": "internal", "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
