"""Command-line entry points.

Every subcommand reads the shared config (``--config``, or the file named by
``ANALOG_VMM_CONFIG``, or built-in defaults), takes ``--seed`` for all
stochastic choices (chip fixed pattern, trial noise, initialization, data
order) and writes into ``--out``, which is locked for the duration of the run.

Exit codes: 0 success, 2 usage, 3 unreadable input (config, dataset, files),
4 contract violation, 5 calibration failure, 6 output directory busy.
"""

from __future__ import annotations

import argparse
import csv
import fcntl
import json
import sys
from contextlib import contextmanager
from pathlib import Path

from . import calibration as cal
from . import training as tr
from .compiler import MODELS, plan_model, plan_to_json, total_runs, total_tiles
from .config import Config, load_config
from .core import AnalogCore
from .cost import cost_for_model
from .data import load_split
from .errors import CalibrationError, ConfigurationError, ContractViolation, IngestionError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_CONTRACT = 4
EXIT_CALIBRATION = 5
EXIT_BUSY = 6

CALIBRATION_FILE = "calibration.txt"
WEIGHTS_FILE = "weights.npz"
ITL_WEIGHTS_FILE = "weights_itl.npz"


class OutputBusy(Exception):
    pass


@contextmanager
def locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError as exc:
            raise OutputBusy(f"{directory} is in use by another process") from exc
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


# --- shared helpers -------------------------------------------------------------------

def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _dataset(args, cfg: Config, split: str):
    return load_split(split, args.data or cfg.data.mnist_dir or None)


def _build_core(args, cfg: Config) -> AnalogCore:
    return AnalogCore.from_seed(args.seed, cfg.variation, cfg.physics)


def _calibrated_core(args, cfg: Config) -> AnalogCore:
    """Load the stored calibration of this seed's chip, or calibrate and store it."""
    core = _build_core(args, cfg)
    path = args.out / CALIBRATION_FILE
    if path.exists():
        core.calibration = cal.load_calibration(path)
    else:
        c = cfg.calibration
        cal.calibrate(core, c.tolerance_cv, c.tolerance_ns, c.n_reads)
        cal.save_calibration(core.calibration, path)
    core.reseed_noise(args.seed)
    return core


def _weights_path(args, itl_default: bool) -> Path:
    if args.weights:
        return Path(args.weights)
    itl = args.out / ITL_WEIGHTS_FILE
    if itl_default and itl.exists():
        return itl
    return args.out / WEIGHTS_FILE


def _load_state(path: Path, cfg: Config) -> tr.TrainState:
    if not path.exists():
        raise IngestionError(f"weights file {path} not found; run `train` first", field="weights")
    return tr.load_weights(path, cfg.hyper)


def _compile(state: tr.TrainState, cfg: Config, images, core=None, weight_limit=None):
    c = cfg.compiler
    return tr.compile_model(state, images, core, weight_limit or c.weight_limit, c.target_lsb, c.percentile,
                            c.max_resends, c.input_percentile, cfg.mac.wait_ns)


def _to_simulator(state: tr.TrainState, cfg: Config, core: AnalogCore, train) -> None:
    """Attach ``core``; keep a stored deployment (it was trained under it), else compile."""
    n = cfg.training.sample_size
    if state.deployment is None:
        _compile(state, cfg, train.images[:n], core)
    state.core = core
    if state.deployment.gains is None:
        tr.fit_hardware_gains(state, train.images[:cfg.training.warmup_size])
    state.backend = "simulator"


# --- subcommands ----------------------------------------------------------------------

def cmd_calibrate(args, cfg: Config) -> int:
    core = _build_core(args, cfg)
    pre = [cal.response_cv(r) for r in (cal.measure_stimulus_response(core),
                                         -cal.measure_stimulus_response(core, -cal.STIMULUS_WEIGHT))]
    c = cfg.calibration
    cal.calibrate_rest(core)
    cal.calibrate_leak(core)
    _, drivers = cal.calibrate_drivers(core, c.tolerance_ns, return_report=True)
    _, neurons = cal.calibrate_neurons(core, tolerance_cv=c.tolerance_cv, n_reads=c.n_reads, return_report=True)
    cal.calibrate_rest(core)
    cal.save_calibration(core.calibration, args.out / CALIBRATION_FILE)
    lines = [f"seed: {args.seed}",
             f"pre-calibration cv (pos, neg): {pre[0]:.4f}, {pre[1]:.4f}",
             f"post-calibration cv (pos, neg): {neurons.cv_pos:.4f}, {neurons.cv_neg:.4f}",
             f"neuron iterations: {neurons.iterations}",
             f"driver residual std: {drivers.residual_std_ns:.4f} ns"]
    (args.out / "calibration_summary.txt").write_text("\n".join(lines) + "\n")
    _say(args, "\n".join(lines))
    return EXIT_OK


def cmd_characterize(args, cfg: Config) -> int:
    if args.uncalibrated:
        core = _build_core(args, cfg)
        core.reseed_noise(args.seed)
    else:
        core = _calibrated_core(args, cfg)
    levels = tuple(int(v) for v in args.levels.split(","))
    report = cal.characterize(core, levels, args.repeats, args.resends, args.seed)
    report.to_csv(args.out / "characterization.csv")
    _say(args, f"wrote {args.out / 'characterization.csv'} ({len(levels)} levels x {args.repeats} repeats)")
    return EXIT_OK


def cmd_compile(args, cfg: Config) -> int:
    spec = MODELS[args.model]()
    plans = plan_model(spec)
    (args.out / f"plan_{args.model}.json").write_text(plan_to_json(plans))
    _say(args, f"{args.model}: {total_tiles(plans)} tiles in {total_runs(plans)} runs")
    path = _weights_path(args, itl_default=True)
    if path.exists():
        state = _load_state(path, cfg)
        if state.spec.to_dict() != spec.to_dict():
            raise ContractViolation(f"{path} holds a {state.spec.name} model, not {args.model}")
        if state.deployment is None:
            train = _dataset(args, cfg, "train")
            _compile(state, cfg, train.images[:cfg.training.sample_size], weight_limit=args.weight_limit)
        tr.export_quantized(state, args.out / f"{args.model}.avmq")
        _say(args, f"wrote {args.out / (args.model + '.avmq')}")
    return EXIT_OK


def cmd_train(args, cfg: Config) -> int:
    train = _dataset(args, cfg, "train")
    test = _dataset(args, cfg, "test")
    if args.itl:
        state = _load_state(_weights_path(args, itl_default=False), cfg)
        core = _calibrated_core(args, cfg)
        _to_simulator(state, cfg, core, train)
        tr.set_learning_rate(state, cfg.training.itl_lr)
        state.seed = args.seed
        metrics = [tr.train_epoch(state, train) for _ in range(args.epochs or 1)]
        out, log = ITL_WEIGHTS_FILE, "metrics_itl.csv"
    else:
        state = tr.init_state(MODELS[args.model](), args.seed, cfg.hyper)
        metrics = tr.train_software(state, train, args.epochs or cfg.training.software_epochs)
        out, log = WEIGHTS_FILE, "metrics_software.csv"
    merged = tr.EpochMetrics([l for m in metrics for l in m.loss], [a for m in metrics for a in m.accuracy])
    merged.to_csv(args.out / log)
    tr.save_weights(state, args.out / out)
    acc = tr.evaluate(state, test).accuracy
    _say(args, f"wrote {args.out / out}; test accuracy ({state.backend}) {acc:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    train = _dataset(args, cfg, "train")
    test = _dataset(args, cfg, "test")
    state = _load_state(_weights_path(args, itl_default=not args.no_itl), cfg)
    if args.backend == "simulator":
        _to_simulator(state, cfg, _calibrated_core(args, cfg), train)
    elif args.backend == "quantized" and (state.deployment is None or args.weight_limit):
        _compile(state, cfg, train.images[:cfg.training.sample_size], weight_limit=args.weight_limit)
    result = tr.evaluate(state, test, args.backend, args.repeats)
    result.confusion_to_csv(args.out / f"confusion_{args.backend}.csv")
    with open(args.out / f"accuracy_{args.backend}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["repeat", "accuracy"])
        for i, a in enumerate(result.accuracies):
            w.writerow([i, repr(a)])
    _say(args, f"{args.backend} accuracy {result.accuracy:.4f} +- {result.std:.4f} over {args.repeats} repeats")
    return EXIT_OK


def cmd_decalibrate_sweep(args, cfg: Config) -> int:
    train = _dataset(args, cfg, "train")
    test = _dataset(args, cfg, "test")
    core = _calibrated_core(args, cfg)
    calibrated = core.calibration.copy()
    rows = []
    for factor in (float(f) for f in args.factors.split(",")):
        core.calibration = cal.blend_decalibration(calibrated, factor)
        core.reseed_noise(args.seed)
        state = _load_state(_weights_path(args, itl_default=False), cfg)
        state.deployment = None
        _to_simulator(state, cfg, core, train)
        pre = tr.evaluate(state, test, "simulator", args.repeats).accuracy
        post = ""
        if args.epochs:
            tr.set_learning_rate(state, cfg.training.itl_lr)
            for _ in range(args.epochs):
                tr.train_epoch(state, train)
            post = tr.evaluate(state, test, "simulator", args.repeats).accuracy
        rows.append((factor, pre, post))
        _say(args, f"factor {factor:g}: before {pre:.4f}" + (f", after ITL {post:.4f}" if post != "" else ""))
    with open(args.out / "decalibration.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "accuracy_before", "accuracy_after_itl"])
        for r in rows:
            w.writerow([repr(r[0]), repr(r[1]), repr(r[2]) if r[2] != "" else ""])
    return EXIT_OK


def cmd_cost(args, cfg: Config) -> int:
    report = cost_for_model(args.model, cfg.timing, args.batch)
    report.to_csv(args.out / f"cost_{args.model}.csv")
    (args.out / f"cost_{args.model}.json").write_text(json.dumps(
        {"runs": report.runs, "tiles": report.tiles, "runtime_ms": report.runtime_ms,
         "energy_mj": report.energy_mj, "batch": report.batch, "breakdown": report.breakdown}, indent=2))
    _say(args, report.summary())
    return EXIT_OK


COMMANDS = {
    "calibrate": cmd_calibrate,
    "characterize": cmd_characterize,
    "compile": cmd_compile,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "decalibrate-sweep": cmd_decalibrate_sweep,
    "cost": cmd_cost,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="INI config file, or 'default'")
    common.add_argument("--seed", type=int, default=0, help="seed for chip, noise, init and data order")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--data", default=None, help="directory holding the MNIST IDX files")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="analog-vmm", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common], help="calibrate the chip of --seed")

    p = sub.add_parser("characterize", parents=[common], help="ramp/random matrix sweep")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--levels", default="0,3,7,15")
    p.add_argument("--resends", type=int, default=4)
    p.add_argument("--uncalibrated", action="store_true")

    for name, helptext in (("compile", "partition a model; export quantized weights if trained"),
                           ("train", "software training, or --itl on the simulator"),
                           ("evaluate", "test-set accuracy and confusion matrix")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        if name != "evaluate":
            p.add_argument("--model", choices=sorted(MODELS), default="dense")
        p.add_argument("--weights", default=None)
        if name != "train":
            p.add_argument("--weight-limit", type=int, default=None, help="15 gives the reduced 4-bit mode")
        if name == "train":
            p.add_argument("--itl", action="store_true")
            p.add_argument("--epochs", type=int, default=None)
        if name == "evaluate":
            p.add_argument("--backend", choices=tr.BACKENDS, default="float")
            p.add_argument("--repeats", type=int, default=1)
            p.add_argument("--no-itl", action="store_true", help="use the software-trained weights")

    p = sub.add_parser("decalibrate-sweep", parents=[common], help="accuracy versus decalibration factor")
    p.add_argument("--weights", default=None)
    p.add_argument("--factors", default="0,0.5,1")
    p.add_argument("--epochs", type=int, default=1, help="ITL epochs per factor (0: no retraining)")
    p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("cost", parents=[common], help="runtime and energy per image")
    p.add_argument("--model", choices=sorted(MODELS) + ["single"], default="dense")
    p.add_argument("--batch", type=int, default=1)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        cfg = load_config(args.config)
        with locked(args.out):
            return COMMANDS[args.command](args, cfg)
    except OutputBusy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUSY
    except (IngestionError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except ContractViolation as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


def main() -> None:
    sys.exit(run_command())
