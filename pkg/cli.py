"""
Command-line entry point: simulate, train, eval, infer, saliency, gradcheck,
export, experiment and serve
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import REGISTRY_URL, configure_logging, load_experiment_config
from errors import ConfigError, RadarHDError
from schemas import Split

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors raise ConfigError (exit 1) instead of exiting with 2"""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _pixel(text: str):
    try:
        row, col = (int(v) for v in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected R,C, got {text!r}") from e
    return row, col


def _registry(args):
    """Registry session when --registry is set, else None"""
    if not getattr(args, "registry", None):
        return None
    import database
    database.configure_registry(args.registry)
    database.create_tables()
    return database.SessionLocal()


def cmd_simulate(args) -> None:
    from harness import make_dataset
    cfg = load_experiment_config(args.config).sim
    make_dataset(Path(args.out), args.train, args.test_same, args.test_similar, args.test_different, args.frames,
                 cfg, args.seed, args.step, args.smoke, args.workers)


def cmd_train(args) -> None:
    from harness import run_training
    cfg = load_experiment_config(args.config)
    epochs = args.epochs if args.epochs is not None else cfg.training.epochs
    db = _registry(args)
    try:
        run_training(Path(args.data), cfg, epochs, Path(args.out), resume=args.resume, db=db)
    finally:
        if db is not None:
            db.close()


def cmd_eval(args) -> None:
    from harness import MODEL_METHOD, run_eval
    cfg = load_experiment_config(args.config)
    db = _registry(args)
    try:
        report = run_eval(Path(args.data), Split(args.split), Path(args.ckpt), args.cfar, args.tau,
                          Path(args.report), cfg.cfar, cfg.training.n_triptychs, db=db)
    finally:
        if db is not None:
            db.close()
    model = report.methods[MODEL_METHOD]
    print(f"{report.split.value}: median chamfer {model.median_chamfer}, "
          f"median mod-hausdorff {model.median_mod_hausdorff}, best CFAR {report.best_cfar}")


def cmd_infer(args) -> None:
    from harness import run_infer
    run_infer(Path(args.ckpt), Path(args.frame), Path(args.out), args.tau)


def cmd_saliency(args) -> None:
    from harness import run_saliency
    run_saliency(Path(args.ckpt), Path(args.frame), args.pixel, Path(args.out))


def cmd_gradcheck(args) -> None:
    from harness import gradcheck_suite, require_gradcheck
    outcomes = gradcheck_suite(args.seed)
    for o in outcomes:
        mark = "ok" if o.passed else "FAIL"
        print(f"{o.name:<20} {o.max_error:.3e} ({o.n_checked} coords) {mark}")
    require_gradcheck(outcomes)


def cmd_export(args) -> None:
    from harness import export_stack
    history = load_experiment_config(args.config).unet.history if args.history is None else args.history
    export_stack(Path(args.data), args.traj, args.index, history, Path(args.out))


def cmd_experiment(args) -> None:
    from harness import run_experiment
    cfg = load_experiment_config(args.config)
    if args.epochs is not None:
        cfg.training.epochs = args.epochs
    summary = run_experiment(Path(args.out), args.seed, cfg, args.train, args.test, args.frames, args.step,
                             args.workers)
    for key in ("chamfer_ratio", "mod_hausdorff_ratio", "beats_cfar", "generalization_ordered", "smoke_identical"):
        print(f"{key}: {summary[key]}")


def cmd_serve(args) -> None:
    import uvicorn

    import database
    import main
    database.configure_registry(args.registry or REGISTRY_URL)
    if args.ckpt:
        main.load_model(args.ckpt)
    uvicorn.run(main.app, host=args.host, port=args.port)


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="radarhd", description="Radar super-resolution toolkit")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    p = sub.add_parser("simulate", help="generate a dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--test-same", type=int, default=4)
    p.add_argument("--test-similar", type=int, default=4)
    p.add_argument("--test-different", type=int, default=4)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--smoke", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the U-Net")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score model and CFAR against lidar")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True, choices=[s.value for s in Split if s != Split.TRAIN])
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cfar", type=_floats, default=[1.0, 2.0, 4.0, 8.0])
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--report", required=True)
    p.add_argument("--config")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict one frame stack")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("saliency", help="input attribution of one output pixel")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--pixel", type=_pixel, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("gradcheck", help="finite-difference verification of autodiff")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export", help="write the input stack of one recorded frame")
    p.add_argument("--data", required=True)
    p.add_argument("--traj", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("experiment", help="simulate, train and evaluate end to end")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--step", type=float, default=0.1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--ckpt")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--registry")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        args.func(args)
    except RadarHDError as e:
        logger.error(str(e))
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
