"""Experiment driver: training runs, integrator comparisons, step-size
robustness studies, and descent audits.

Subcommands: train, compare, ode-bench, descent-audit. Settings come from
an optional JSON config file plus flags; flags win. Metrics go to CSV
(deterministic: identical config + seed gives identical bytes), run
summaries to JSON (which also carries the wallclock), weights to binary
checkpoints.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .checkpoint import save_network
from .data import DataError, batches, load_dataset
from .integrators import (
    INTEGRATOR_NAMES,
    StepAudit,
    StepConfig,
    abc_psi_step,
    ode_error_study,
    s_step_loss_delta_psi,
    synthetic_quadratic_problem,
)
from .linalg import NumericError
from .lowrank import TruncationPolicy, compression_rate, param_count
from .nn import LowRankLayer, build_network, forward, mlp_specs, softmax_cross_entropy, train_step
from .nn import evaluate as net_accuracy

__all__ = ["RunConfig", "ConfigError", "main"]

log = logging.getLogger("dlrt")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_VIOLATION = 5

DATA_DIR_ENV = "DLRT_DATA_DIR"
DIVERGENCE_NORM = 1e12


class ConfigError(Exception):
    """Invalid or unknown run settings."""


@dataclass(frozen=True)
class RunConfig:
    """Settings for all subcommands; each command reads the slice it needs."""

    integrator: str = "abc-psi"
    integrators: tuple = ()  # compare: defaults to (integrator,)
    arch: tuple = (784, 500, 500, 500, 500, 10)
    lr: float = 0.01
    tau: float = 0.1
    rank: int = 50
    r_min: int = 2
    r_max: Optional[int] = None  # None: twice the initial rank
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    seeds: tuple = ()  # compare: defaults to (seed,)
    data_dir: Optional[str] = None
    out_dir: str = "runs"
    substeps: int = 1
    # synthetic-problem settings (ode-bench, descent-audit)
    dims: tuple = (50, 40)
    target_rank: int = 4
    eps: float = 0.0
    h_list: tuple = (0.1, 0.05, 0.025)
    t_end: float = 1.0
    ref_h: float = 1e-4
    steps: int = 200

    def validate(self) -> "RunConfig":
        names = set(INTEGRATOR_NAMES)
        if self.integrator not in names:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        for name in self.integrators:
            if name not in names:
                raise ConfigError(f"unknown integrator {name!r}")
        if len(self.arch) < 2 or any(w < 1 for w in self.arch):
            raise ConfigError("arch needs >= 2 positive layer widths")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be >= 0")
        if self.rank < 1 or self.r_min < 1:
            raise ConfigError("rank and r_min must be >= 1")
        if self.r_max is not None and self.r_max < self.r_min:
            raise ConfigError("r_max must be >= r_min")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.substeps < 1:
            raise ConfigError("substeps must be >= 1")
        if len(self.dims) != 2 or any(d < 1 for d in self.dims):
            raise ConfigError("dims must be two positive integers")
        if self.target_rank < 1 or self.target_rank > min(self.dims):
            raise ConfigError("target_rank must be in [1, min(dims)]")
        if not self.h_list or any(h <= 0 for h in self.h_list):
            raise ConfigError("h_list must hold positive step sizes")
        if self.t_end <= 0 or self.ref_h <= 0:
            raise ConfigError("t_end and ref_h must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        return self

    def hash(self) -> str:
        # identifies the experiment: filesystem locations don't contribute
        settings = asdict(self)
        settings.pop("data_dir")
        settings.pop("out_dir")
        canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def policy(self, initial_rank: int) -> TruncationPolicy:
        r_max = self.r_max if self.r_max is not None else max(2 * initial_rank, self.r_min)
        return TruncationPolicy(tau=self.tau, r_max=r_max, r_min=min(self.r_min, r_max))


_LIST_FIELDS = {"integrators", "seeds", "arch", "dims", "h_list"}


def load_config(path=None, overrides=None) -> RunConfig:
    """Defaults, then JSON file settings, then flag overrides."""
    valid = {f.name for f in fields(RunConfig)}
    merged = {}
    if path is not None:
        try:
            with open(path) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - valid
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        merged.update(file_cfg)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    for key in _LIST_FIELDS & set(merged):
        merged[key] = tuple(merged[key])
    try:
        return RunConfig(**merged).validate()
    except TypeError as exc:
        raise ConfigError(str(exc))


def write_csv(path, config_hash, columns, rows) -> None:
    """CSV with a comment line naming the tool version and config hash."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# dlrt {__version__} config {config_hash}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _net_param_count(net) -> int:
    total = 0
    for layer in net.layers:
        if isinstance(layer, LowRankLayer):
            total += param_count([(layer.out_dim, layer.in_dim, layer.rank)])
        else:
            total += layer.out_dim * layer.in_dim
    return total


def _net_compression(net) -> float:
    triples = [
        (layer.in_dim, layer.out_dim, layer.rank)
        for layer in net.layers
        if isinstance(layer, LowRankLayer)
    ]
    if not triples:
        return 0.0
    return compression_rate(triples)


def _dataset_loss(net, dataset, chunk=1024) -> float:
    total = 0.0
    for start in range(0, len(dataset), chunk):
        logits, _ = forward(net, dataset.images[start : start + chunk])
        loss, _ = softmax_cross_entropy(logits, dataset.labels[start : start + chunk])
        total += loss * logits.shape[0]
    return total / len(dataset)


def _diverged(loss, net) -> bool:
    if not np.isfinite(loss):
        return True
    for layer in net.layers:
        if isinstance(layer, LowRankLayer):
            if np.linalg.norm(layer.state.s) > DIVERGENCE_NORM:
                return True
        elif np.linalg.norm(layer.w) > DIVERGENCE_NORM:
            return True
    return False


def _metric_row(epoch, train_loss, test_acc, net):
    ranks = net.ranks()
    return (
        [epoch, repr(float(train_loss)), repr(float(test_acc))]
        + ranks
        + [_net_param_count(net), repr(round(_net_compression(net), 6))]
    )


def _run_training(config: RunConfig, integrator: str, seed: int) -> dict:
    """One training run; returns rows, final net, and status."""
    train = load_dataset(config.data_dir, "train")
    test = load_dataset(config.data_dir, "test")
    if train.images.shape[1] != config.arch[0]:
        raise ConfigError(
            f"arch expects {config.arch[0]} inputs, data has {train.images.shape[1]}"
        )

    if integrator == "full":
        specs = mlp_specs(list(config.arch))
    else:
        specs = mlp_specs(list(config.arch), initial_rank=config.rank)
    net = build_network(specs, seed=seed)
    policy = config.policy(config.rank) if integrator != "full" else None
    cfg = StepConfig(h=config.lr, substeps=config.substeps, policy=policy)

    n_lowrank = len(net.ranks())
    columns = (
        ["epoch", "train_loss", "test_accuracy"]
        + [f"rank_{i}" for i in range(n_lowrank)]
        + ["param_count", "compression_rate"]
    )
    start = time.monotonic()
    rows = [_metric_row(0, _dataset_loss(net, train), net_accuracy(net, test), net)]
    status = "ok"
    for epoch in range(1, config.epochs + 1):
        losses = []
        for batch in batches(train, config.batch_size, seed, epoch):
            try:
                net, loss = train_step(net, batch, integrator, cfg)
            except NumericError:
                loss = float("nan")
            losses.append(loss)
            if _diverged(loss, net):
                status = "diverged"
                break
        if status == "diverged":
            log.error("diverged in epoch %d (loss %s)", epoch, losses[-1])
            break
        rows.append(
            _metric_row(epoch, np.mean(losses), net_accuracy(net, test), net)
        )
        log.info(
            "epoch %d: train_loss %.4f test_acc %.4f ranks %s",
            epoch, float(np.mean(losses)), float(rows[-1][2]), net.ranks(),
        )
    return {
        "status": status,
        "rows": rows,
        "columns": columns,
        "net": net,
        "runtime_s": time.monotonic() - start,
        "integrator": integrator,
        "seed": seed,
        "final_accuracy": float(rows[-1][2]),
        "param_count": _net_param_count(net),
        "compression_rate": _net_compression(net),
    }


def _resolve_data_dir(config: RunConfig) -> RunConfig:
    if config.data_dir is None:
        env = os.environ.get(DATA_DIR_ENV)
        if env:
            return replace(config, data_dir=env)
        raise ConfigError(f"no data directory: pass --data-dir or set {DATA_DIR_ENV}")
    return config


def cmd_train(config: RunConfig) -> int:
    config = _resolve_data_dir(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = config.hash()
    try:
        result = _run_training(config, config.integrator, config.seed)
    except (FileNotFoundError, DataError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    write_csv(out / f"train-{tag}.csv", tag, result["columns"], result["rows"])
    save_network(out / f"train-{tag}.ckpt", result["net"])
    write_json(
        out / f"train-{tag}.json",
        {
            "command": "train",
            "config": asdict(config),
            "config_hash": tag,
            "status": result["status"],
            "epochs_completed": len(result["rows"]) - 1,
            "final_accuracy": result["final_accuracy"],
            "param_count": result["param_count"],
            "compression_rate": result["compression_rate"],
            "runtime_s": result["runtime_s"],
        },
    )
    print(
        f"train {config.integrator} seed {config.seed}: {result['status']}, "
        f"accuracy {result['final_accuracy']:.4f}, "
        f"params {result['param_count']}, "
        f"compression {result['compression_rate']:.2f}%"
    )
    return EXIT_OK if result["status"] == "ok" else EXIT_DIVERGED


def cmd_compare(config: RunConfig) -> int:
    config = _resolve_data_dir(config)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = config.hash()
    integrators = list(config.integrators) or [config.integrator]
    seeds = list(config.seeds) or [config.seed]
    runs = []
    for integrator in integrators:
        for seed in seeds:
            try:
                result = _run_training(config, integrator, seed)
            except (FileNotFoundError, DataError, OSError) as exc:
                log.error("%s", exc)
                return EXIT_IO
            runs.append(result)
            write_csv(
                out / f"compare-{tag}-{integrator}-s{seed}.csv",
                tag, result["columns"], result["rows"],
            )
    rows = []
    for r in runs:
        rows.append(
            ["run", r["integrator"], r["seed"], r["status"],
             repr(r["final_accuracy"]), r["param_count"]]
        )
    print(f"{'integrator':>10} {'mean_acc':>9} {'std':>7} {'params':>8} {'runs':>5}")
    for integrator in integrators:
        ok = [r for r in runs if r["integrator"] == integrator and r["status"] == "ok"]
        accs = [r["final_accuracy"] for r in ok]
        mean = float(np.mean(accs)) if accs else float("nan")
        std = float(np.std(accs)) if accs else float("nan")
        params = int(np.mean([r["param_count"] for r in ok])) if ok else 0
        rows.append(
            ["summary", integrator, "", f"{len(ok)}/{len(seeds)} ok",
             repr(mean), params]
        )
        print(f"{integrator:>10} {mean:9.4f} {std:7.4f} {params:8d} {len(ok):2d}/{len(seeds)}")
    write_csv(
        out / f"compare-{tag}.csv", tag,
        ["row", "integrator", "seed", "status", "accuracy", "param_count"],
        rows,
    )
    write_json(
        out / f"compare-{tag}.json",
        {
            "command": "compare",
            "config": asdict(config),
            "config_hash": tag,
            "runs": [
                {k: r[k] for k in
                 ("integrator", "seed", "status", "final_accuracy", "param_count",
                  "runtime_s")}
                for r in runs
            ],
        },
    )
    return EXIT_OK


def cmd_ode_bench(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = config.hash()
    m, n = config.dims
    problem = synthetic_quadratic_problem(
        m, n, config.target_rank, eps=config.eps, seed=config.seed
    )
    policy = config.policy(config.target_rank)
    template = StepConfig(h=1.0, substeps=config.substeps, policy=policy)
    h_list = sorted(config.h_list, reverse=True)
    results = ode_error_study(
        problem, config.integrator, h_list, config.t_end, config.ref_h,
        cfg_template=template,
    )
    rows = []
    orders = []
    prev = None
    for h, err in results:
        h, err = float(h), float(err)
        order = ""
        if prev is not None and err > 0 and prev[1] > 0 and h != prev[0]:
            value = float(np.log(prev[1] / err) / np.log(prev[0] / h))
            orders.append(value)
            order = repr(value)
        rows.append([repr(h), repr(err), order])
        prev = (h, err)
    write_csv(out / f"ode-bench-{tag}.csv", tag, ["h", "error", "observed_order"], rows)
    plateau = bool(orders) and orders[-1] < 0.5
    write_json(
        out / f"ode-bench-{tag}.json",
        {
            "command": "ode-bench",
            "config": asdict(config),
            "config_hash": tag,
            "integrator": config.integrator,
            "errors": [[float(h), float(e)] for h, e in results],
            "observed_orders": orders,
            "plateau": plateau,
        },
    )
    for (h, err), row in zip(results, rows):
        print(f"h={h:<10g} error={err:.6e} order={row[2] or '-'}")
    if plateau:
        print("note: error has plateaued (perturbation floor reached)")
    return EXIT_OK


def cmd_descent_audit(config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = config.hash()
    m, n = config.dims
    problem = synthetic_quadratic_problem(
        m, n, config.target_rank, eps=config.eps, seed=config.seed
    )
    # quadratic loss has curvature constant 1
    curvature = 1.0
    h = config.lr
    guaranteed = h <= 2.0 / curvature
    if not guaranteed:
        log.warning(
            "h=%g exceeds 2/c_l=%g: the descent inequality is no longer "
            "guaranteed; violations below are reported, not fatal", h, 2.0 / curvature,
        )
    policy = config.policy(config.target_rank)
    cfg = StepConfig(h=h, substeps=config.substeps, policy=policy)
    state = problem.y0
    rows = []
    violations = 0
    worst = 0.0
    for step in range(1, config.steps + 1):
        audit = StepAudit()
        state = abc_psi_step(state, problem.oracle, cfg, audit=audit)
        bound = audit.loss_before - (1.0 - h * curvature / 2.0) * h * audit.proj_grad_sq
        margin = bound - audit.loss_flow
        violated = margin < -1e-9
        if violated:
            violations += 1
            worst = min(worst, margin)
            log.error(
                "step %d: descent inequality violated (lhs %.12e > bound %.12e)",
                step, audit.loss_flow, bound,
            )
        rows.append(
            [step, repr(audit.loss_before), repr(audit.loss_flow), repr(bound),
             repr(margin), int(violated)]
        )
    s_before, s_after = s_step_loss_delta_psi(problem.y0, problem.oracle, cfg)
    write_csv(
        out / f"descent-audit-{tag}.csv", tag,
        ["step", "loss_before", "loss_after_flow", "descent_bound", "margin",
         "violated"],
        rows,
    )
    write_json(
        out / f"descent-audit-{tag}.json",
        {
            "command": "descent-audit",
            "config": asdict(config),
            "config_hash": tag,
            "steps": config.steps,
            "violations": violations,
            "worst_margin": worst,
            "h_within_guarantee": guaranteed,
            "s_step_loss_before": s_before,
            "s_step_loss_after": s_after,
            "s_step_delta": s_after - s_before,
        },
    )
    print(
        f"descent audit: {config.steps} steps, {violations} violations; "
        f"core-update loss delta {s_after - s_before:+.6e}"
    )
    if violations and guaranteed:
        return EXIT_VIOLATION
    return EXIT_OK


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x)


def _float_list(text):
    return tuple(float(x) for x in text.split(",") if x)


def _str_list(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dlrt",
        description="Low-rank training experiments with splitting integrators",
    )
    parser.add_argument("--version", action="version", version=f"dlrt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override it")
    common.add_argument("--integrator", choices=INTEGRATOR_NAMES)
    common.add_argument("--lr", type=float, help="step size / learning rate")
    common.add_argument("--tau", type=float, help="truncation tolerance")
    common.add_argument("--rank", type=int, help="initial rank per layer")
    common.add_argument("--r-min", dest="r_min", type=int)
    common.add_argument("--r-max", dest="r_max", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--data-dir", dest="data_dir",
                        help=f"directory of IDX files (default ${DATA_DIR_ENV})")
    common.add_argument("--out-dir", dest="out_dir")
    common.add_argument("--substeps", type=int)
    common.add_argument("--arch", type=_int_list,
                        help="comma-separated layer widths")

    p_train = sub.add_parser("train", parents=[common], help="one training run")
    p_train.set_defaults(func=cmd_train)

    p_cmp = sub.add_parser("compare", parents=[common],
                           help="train across integrators and seeds")
    p_cmp.add_argument("--integrators", type=_str_list,
                       help="comma-separated integrator names")
    p_cmp.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    p_cmp.set_defaults(func=cmd_compare)

    p_ode = sub.add_parser("ode-bench", parents=[common],
                           help="step-size robustness study on a synthetic problem")
    p_ode.add_argument("--dims", type=_int_list, help="problem size m,n")
    p_ode.add_argument("--target-rank", dest="target_rank", type=int)
    p_ode.add_argument("--eps", type=float, help="full-rank perturbation size")
    p_ode.add_argument("--h-list", dest="h_list", type=_float_list)
    p_ode.add_argument("--t-end", dest="t_end", type=float)
    p_ode.add_argument("--ref-h", dest="ref_h", type=float)
    p_ode.set_defaults(func=cmd_ode_bench)

    p_aud = sub.add_parser("descent-audit", parents=[common],
                           help="check the per-step loss descent inequality")
    p_aud.add_argument("--dims", type=_int_list)
    p_aud.add_argument("--target-rank", dest="target_rank", type=int)
    p_aud.add_argument("--eps", type=float)
    p_aud.add_argument("--steps", type=int)
    p_aud.set_defaults(func=cmd_descent_audit)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {
        k: v
        for k, v in vars(args).items()
        if k not in ("command", "func", "config") and v is not None
    }
    try:
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    try:
        return args.func(config)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
