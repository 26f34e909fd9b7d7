"""``deqflow`` command-line entry point.

Usage::

    deqflow <gen-data|flow|gradcheck|trust-region|implicit-bias> --config PATH
            [--out DIR] [--trials K] [--seed S]

Exit codes: 0 success, 1 failed check, 2 configuration error, 3 divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .datagen import GenSpec, dataset_to_csv, generate, read_dataset_csv, teacher_to_json
from .dynamics import FlowConfig, flow_integrate, initialize
from .equilibrium import ModelParams
from .exceptions import (
    DivergenceError,
    InvalidInputError,
    PreconditionError,
    UnsupportedConfigurationError,
)
from .gradients import gradcheck, loss_and_grad
from .losses import Dataset, LossSpec, sigma_min
from .trust_region import (
    certificates_to_json,
    certify_theorem2,
    delta_bar_search,
    implicit_bias_sweep,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
CONFIG_VERSION = 1

# Allowed keys and defaults per section. ``None`` means "derive" or "unset".
SCHEMA = {
    "model": {"m": None, "m_y": None, "gamma": 0.8, "init_scheme": "scaled_normal", "seed": 0},
    "data": {
        "path": None,
        "kind": "gaussian_negation",
        "n": 1000,
        "m": 10,
        "m_y": None,
        "noise_std": 0.1,
        "gamma_teacher": 0.8,
        "seed": 0,
    },
    "flow": {
        "step_size": 1e-3,
        "steps": 1000,
        "record_every": 1,
        "radius_R": None,
        "integrator": "euler",
        "track_spectrum": True,
        "target_gap": None,
    },
    "loss": {"kind": "square", "tau": 0.0},
    "output": {"directory": "out", "format": "csv"},
    "gradcheck": {
        "sizes": [3, 5, 10],
        "m_y": [1, 3],
        "losses": ["square", "logistic"],
        "tau": 0.1,
        "seeds": 10,
        "n": 15,
        "gamma": 0.8,
        "inject_fault": False,
    },
    "trust_region": {"sampled_steps": 20, "n_probes": 500, "delta": None, "delta_fraction": 0.5},
    "implicit_bias": {
        "gammas": [0.5, 0.9, 0.99],
        "delta": None,
        "delta_fraction": 0.5,
        "orthogonal_error": False,
        "projector": "orthogonal",
    },
}


class ConfigError(Exception):
    pass


class CheckFailure(Exception):
    pass


def load_config(path) -> dict:
    """Parse, validate and fill defaults. Relative data paths resolve against the config."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return normalize_config(raw, base=path.parent)


def normalize_config(raw, base=Path(".")) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {raw.get('version')!r}")
    unknown = set(raw) - set(SCHEMA) - {"version"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    cfg = {"version": CONFIG_VERSION}
    for section, defaults in SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section {section!r} must be an object")
        bad = set(given) - set(defaults)
        if bad:
            raise ConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
        cfg[section] = {**copy.deepcopy(defaults), **given}
    data_path = cfg["data"]["path"]
    if data_path is not None:
        p = Path(data_path)
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise ConfigError(f"data file not found: {p}")
        cfg["data"]["path"] = str(p)
    gamma = cfg["model"]["gamma"]
    if not isinstance(gamma, (int, float)) or not 0.0 < gamma < 1.0:
        raise ConfigError(f"model.gamma must lie in (0, 1), got {gamma!r}")
    if cfg["implicit_bias"]["projector"] not in ("orthogonal", "perron"):
        raise ConfigError("implicit_bias.projector must be 'orthogonal' or 'perron'")
    if cfg["output"]["format"] not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'")
    return cfg


def _gen_spec(cfg) -> GenSpec:
    d = {k: v for k, v in cfg["data"].items() if k != "path"}
    return GenSpec(**d)


def _load_data(cfg) -> tuple[Dataset, GenSpec | None, ModelParams | None]:
    if cfg["data"]["path"] is not None:
        data, spec = read_dataset_csv(cfg["data"]["path"])
        return data, spec, None
    spec = _gen_spec(cfg)
    data, teacher = generate(spec)
    return data, spec, teacher


def _loss_spec(cfg) -> LossSpec:
    return LossSpec(cfg["loss"]["kind"], float(cfg["loss"]["tau"]))


def _flow_config(cfg) -> FlowConfig:
    f = cfg["flow"]
    R = math.inf if f["radius_R"] is None else float(f["radius_R"])
    return FlowConfig(
        step_size=float(f["step_size"]),
        steps=int(f["steps"]),
        record_every=int(f["record_every"]),
        loss_spec=_loss_spec(cfg),
        radius_R=R,
        integrator=f["integrator"],
    )


def _init_params(cfg, data: Dataset) -> ModelParams:
    mc = cfg["model"]
    for key, actual in (("m", data.m), ("m_y", data.m_y)):
        if mc[key] is not None and mc[key] != actual:
            raise ConfigError(f"model.{key} = {mc[key]} does not match the data ({actual})")
    return initialize(mc["init_scheme"], data.m, data.m_y, mc["gamma"], seed=mc["seed"])


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _finite_or_none(v):
    v = float(v)
    return v if math.isfinite(v) else None


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, out: Path) -> int:
    spec = _gen_spec(cfg)
    data, teacher = generate(spec)
    _write(out / "dataset.csv", dataset_to_csv(data, spec))
    if teacher is not None:
        _write(out / "teacher.json", teacher_to_json(teacher) + "\n")
    rank = int(np.linalg.matrix_rank(data.Phi)) if data.n else 0
    print(
        f"kind={spec.kind} n={data.n} m={data.m} rank={rank} "
        f"sigma_min={sigma_min(data.Phi):.6g}"
    )
    return EXIT_OK


def cmd_flow(cfg, out: Path) -> int:
    data, _, _ = _load_data(cfg)
    fc = _flow_config(cfg)
    init = _init_params(cfg, data)
    traj = flow_integrate(init, data, fc, track_spectrum=bool(cfg["flow"]["track_spectrum"]))
    if cfg["output"]["format"] == "csv":
        _write(out / "trajectory.csv", traj.to_csv())
    else:
        _write(out / "trajectory.json", traj.to_json(fc) + "\n")
    gap = float(traj.loss_gap[-1])
    lam = traj.lambda_running_min
    summary = {
        "final_loss": _finite_or_none(traj.losses[-1]),
        "final_loss_gap": _finite_or_none(gap),
        "optimum": _finite_or_none(traj.optimum),
        "kappa": _finite_or_none(traj.kappa),
        "lambda_floor": _finite_or_none(traj.lambda_floor),
        "lambda_running_min": _finite_or_none(lam[-1]) if lam.size else None,
        "horizon": fc.steps * fc.step_size,
        "monotone": traj.is_monotone(),
        "radius_violations": list(traj.radius_violations),
        "config": fc.to_dict(),
    }
    _write(out / "summary.json", _dumps(summary))
    print(f"final loss {traj.losses[-1]:.6g}, loss gap {gap:.3e}")
    target = cfg["flow"]["target_gap"]
    if traj.radius_violations:
        raise CheckFailure(f"radius condition violated at steps {traj.radius_violations[:5]}")
    if target is not None and not gap <= target:
        raise CheckFailure(f"final loss gap {gap:.3e} above target {target:g}")
    return EXIT_OK


def _gradcheck_instance(m, m_y, kind, tau, n, gamma, seed):
    rng = np.random.Generator(np.random.Philox(seed))
    params = ModelParams(rng.standard_normal((m, m)), rng.standard_normal((m_y, m)), gamma)
    Phi = rng.standard_normal((m, n))
    if kind == "logistic":
        data = Dataset(Phi, (rng.random((1, n)) < 0.5).astype(float), kind="binary_labels")
        spec = LossSpec("logistic", tau)
    else:
        data = Dataset(Phi, rng.standard_normal((m_y, n)))
        spec = LossSpec("square")
    return params, data, spec


def cmd_gradcheck(cfg, out: Path | None, inject_fault: bool = False) -> int:
    g = cfg["gradcheck"]
    inject = inject_fault or bool(g["inject_fault"])
    base_seed = int(cfg["model"]["seed"])
    rows = []
    print(f"{'m':>3} {'m_y':>3} {'loss':>8} {'seed':>4} {'err_A':>10} {'err_B':>10}  status")
    for m in g["sizes"]:
        for m_y in g["m_y"]:
            for kind in g["losses"]:
                if kind == "logistic" and m_y != 1:
                    continue  # logistic loss is scalar-output only
                for s in range(int(g["seeds"])):
                    seed = base_seed + s
                    p, d, spec = _gradcheck_instance(
                        m, m_y, kind, float(g["tau"]), int(g["n"]), float(g["gamma"]), seed
                    )
                    rep = gradcheck(p, d, spec, inject_fault=inject)
                    status = "pass" if rep.passed else "FAIL"
                    print(
                        f"{m:>3} {m_y:>3} {kind:>8} {seed:>4} "
                        f"{rep.max_rel_error_A:>10.3e} {rep.max_rel_error_B:>10.3e}  {status}"
                    )
                    rows.append((m, m_y, kind, seed, rep.max_rel_error_A, rep.max_rel_error_B, status))
    if out is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "m_y", "loss", "seed", "max_rel_error_A", "max_rel_error_B", "status"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], r[3], repr(r[4]), repr(r[5]), r[6]])
        _write(out / "gradcheck.csv", buf.getvalue())
    failed = sum(r[-1] != "pass" for r in rows)
    if failed:
        raise CheckFailure(f"{failed} of {len(rows)} gradient checks failed")
    return EXIT_OK


def _require_scalar(cfg, data: Dataset):
    if data.m_y != 1 or cfg["model"]["m_y"] not in (None, 1):
        raise UnsupportedConfigurationError(
            f"this command needs m_y = 1, got m_y = {data.m_y}"
        )


def cmd_trust_region(cfg, out: Path, delta_override: float | None = None) -> int:
    data, _, _ = _load_data(cfg)
    _require_scalar(cfg, data)
    spec = _loss_spec(cfg)
    fc = _flow_config(cfg)
    tr = cfg["trust_region"]
    delta_cfg = delta_override if delta_override is not None else tr["delta"]
    params = _init_params(cfg, data)
    n_samples = int(tr["sampled_steps"])
    sample_at = sorted(set(np.linspace(0, fc.steps, n_samples).round().astype(int).tolist()))
    records = []
    h = fc.step_size
    seed = int(cfg["model"]["seed"])
    for step in range(fc.steps + 1):
        if step in sample_at:
            dbar = delta_bar_search(params, data, spec)
            delta = float(delta_cfg) if delta_cfg is not None else tr["delta_fraction"] * dbar
            cert = certify_theorem2(
                params, data, spec, delta, int(tr["n_probes"]), seed=seed + step, delta_bar=dbar
            )
            records.append((step, cert))
        if step == fc.steps:
            break
        loss, grads = loss_and_grad(params, data, spec)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        A = params.A - h * grads.grad_A
        B = params.B - h * grads.grad_B
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise DivergenceError(f"non-finite parameters after step {step}", step=step + 1)
        params = ModelParams(A, B, params.gamma)
    _write(out / "certificates.json", certificates_to_json(records) + "\n")
    failed = [s for s, c in records if not c.passed]
    print(f"{len(records)} certificates, {len(failed)} failed")
    if failed:
        raise CheckFailure(f"certificates failed at steps {failed}")
    return EXIT_OK


def cmd_implicit_bias(
    cfg, out: Path, gammas=None, orthogonal_error: bool = False
) -> int:
    data, _, _ = _load_data(cfg)
    _require_scalar(cfg, data)
    spec = _loss_spec(cfg)
    ib = cfg["implicit_bias"]
    gammas = list(ib["gammas"] if gammas is None else gammas)
    for g in gammas:
        if not 0.0 < g < 1.0:
            raise ConfigError(f"gamma values must lie in (0, 1), got {g}")
    params = _init_params(cfg, data)
    r = None
    delta = ib["delta"]
    if orthogonal_error or ib["orthogonal_error"]:
        rng = np.random.Generator(np.random.Philox(int(cfg["model"]["seed"])))
        r = rng.standard_normal(params.m)
        r -= r.mean()
    elif delta is None:
        delta = ib["delta_fraction"] * delta_bar_search(params, data, spec)
    sweep = implicit_bias_sweep(params, gammas, data, spec, delta, r=r, projector=ib["projector"])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gamma", "aligned_norm", "residual_norm"])
    worst = 0.0
    for g, dec in sweep:
        w.writerow([repr(g), repr(dec.aligned_norm), repr(dec.residual_norm)])
        recon = dec.aligned_component + dec.residual_component - dec.V
        scale = max(1.0, float(np.max(np.abs(dec.V))))
        worst = max(worst, float(np.max(np.abs(recon))) / scale)
    _write(out / "implicit_bias.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    if worst > 1e-10:
        raise CheckFailure(f"decomposition does not reconstruct V (error {worst:.3e})")
    return EXIT_OK


# ---------------------------------------------------------------- driver

COMMANDS = ("gen-data", "flow", "gradcheck", "trust-region", "implicit-bias")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deqflow", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON run configuration (optional for gradcheck)")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--trials", type=int, default=1, help="independent seeded runs")
    p.add_argument("--seed", type=int, help="base seed (overrides model.seed and data.seed)")
    hooks = p.add_argument_group("test hooks")
    hooks.add_argument("--inject-fault", action="store_true", help="gradcheck: perturb dL/dA")
    hooks.add_argument("--delta", type=float, help="trust-region: fixed delta")
    hooks.add_argument("--gammas", help="implicit-bias: comma-separated gamma list")
    hooks.add_argument(
        "--orthogonal-error", action="store_true", help="implicit-bias: use r orthogonal to 1"
    )
    return p


def _run_one(command, cfg, out: Path, opts: dict) -> int:
    if command == "gen-data":
        return cmd_gen_data(cfg, out)
    if command == "flow":
        return cmd_flow(cfg, out)
    if command == "gradcheck":
        return cmd_gradcheck(cfg, out, inject_fault=opts.get("inject_fault", False))
    if command == "trust-region":
        return cmd_trust_region(cfg, out, delta_override=opts.get("delta"))
    return cmd_implicit_bias(
        cfg, out, gammas=opts.get("gammas"), orthogonal_error=opts.get("orthogonal_error", False)
    )


def run_command(command, cfg, out: Path, opts: dict) -> int:
    """Run one command, mapping exceptions onto the exit-code contract."""
    try:
        return _run_one(command, cfg, out, opts)
    except CheckFailure as exc:
        print(f"deqflow: check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except DivergenceError as exc:
        print(f"deqflow: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, InvalidInputError, UnsupportedConfigurationError) as exc:
        print(f"deqflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"deqflow: precondition violated: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"deqflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _trial_worker(args):
    command, cfg, out, opts = args
    return run_command(command, cfg, Path(out), opts)


def _max_workers(k: int) -> int:
    env = os.environ.get("DEQFLOW_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError(f"DEQFLOW_THREADS must be an integer, got {env!r}") from None
    return max(1, min(k, cap))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config is None:
            if args.command != "gradcheck":
                raise ConfigError(f"{args.command} requires --config")
            cfg = normalize_config({"version": CONFIG_VERSION})
        else:
            cfg = load_config(args.config)
        if args.trials < 1:
            raise ConfigError("--trials must be at least 1")
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg["model"]["seed"] = args.seed
            cfg["data"]["seed"] = args.seed
        gammas = None
        if args.gammas is not None:
            try:
                gammas = [float(g) for g in args.gammas.split(",") if g.strip()]
            except ValueError:
                raise ConfigError(f"cannot parse --gammas {args.gammas!r}") from None
        workers = _max_workers(args.trials)
    except ConfigError as exc:
        print(f"deqflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.out is not None:
        out = Path(args.out)
    elif args.config is not None or args.command != "gradcheck":
        out = Path(cfg["output"]["directory"])
    else:
        out = None
    opts = {
        "inject_fault": args.inject_fault,
        "delta": args.delta,
        "gammas": gammas,
        "orthogonal_error": args.orthogonal_error,
    }
    if args.trials == 1:
        return run_command(args.command, cfg, out, opts)

    # Trial i reseeds the model initialisation only; the dataset stays fixed.
    base = int(cfg["model"]["seed"])
    jobs = []
    for i in range(args.trials):
        c = copy.deepcopy(cfg)
        c["model"]["seed"] = base + i
        trial_out = (out or Path(".")) / f"trial_{i:03d}"
        jobs.append((args.command, c, str(trial_out), opts))
    if workers == 1:
        codes = [_trial_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            codes = list(pool.map(_trial_worker, jobs))
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
