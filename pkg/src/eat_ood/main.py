import argparse
import logging
import os
import sys
from datetime import datetime
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

from eat_ood.core.app import ExperimentApp
from eat_ood.errors import EatOodError
from eat_ood.utils.config import load_config

LOG_LEVEL_ENV = "EAT_OOD_LOG_LEVEL"

logger = logging.getLogger("eat_ood")
console = Console(stderr=True)


def setup_logging(log_dir: str, level: str = "WARNING") -> None:
    """Configure logging with both file and console handlers."""
    os.makedirs(log_dir, exist_ok=True)

    # Detailed log per invocation
    log_file = os.path.join(log_dir, f"eat_ood_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log")
    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))

    console_handler = RichHandler(rich_tracebacks=True, show_time=False, show_path=False)
    console_handler.setLevel(level.upper())

    logging.basicConfig(
        level=logging.DEBUG,
        handlers=[file_handler, console_handler],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eat-ood",
        description="Long-tailed OOD detection with abstention classes: synthesize, train, score, evaluate.",
    )
    parser.add_argument("--config", help="JSON experiment configuration (defaults when omitted)")
    parser.add_argument("--seed", type=int, help="Override the data and training seed")
    parser.add_argument("--output", help="Output directory (default from config, under $EAT_OOD_OUTPUT_ROOT)")
    parser.add_argument("--method", choices=["eat", "oe", "msp"], help="Train a baseline instead of the configured method")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="Write training and test data files")
    sub.add_parser("train", help="Train on the synthesized data; write checkpoint and loss trace")

    score = sub.add_parser("score", help="Score test inliers and outliers with a checkpoint")
    score.add_argument("--checkpoint", help="Checkpoint file (default <output>/checkpoint.json)")
    score.add_argument("--inliers", help="Inlier sample CSV (default <output>/test_inliers.csv)")
    score.add_argument("--outliers", help="Outlier sample CSV (default <output>/test_outliers.csv)")
    score.add_argument("--scores", help="Score CSV to write (default <output>/scores.csv)")

    report = sub.add_parser("metrics", help="Evaluate a score CSV")
    report.add_argument("--scores", help="Score CSV (default <output>/scores.csv)")
    report.add_argument("--tpr", type=float, nargs="+", help="TPR operating points in percent")
    report.add_argument("--fpr", type=float, nargs="+", help="FPR operating points in percent")
    report.add_argument("--train-inliers", help="Training inliers, for the head/tail accuracy split")

    grad = sub.add_parser("gradcheck", help="Verify the gradient-noise identities on outlier rows")
    grad.add_argument("--checkpoint", help="Checkpoint file (fresh initialization when omitted)")
    grad.add_argument("--outliers", help="Outlier sample CSV (default <output>/test_outliers.csv)")
    grad.add_argument("--samples", type=int, default=32, help="Number of outlier rows to check")
    grad.add_argument("--oracle", action="store_true", help="Also compare against central differences")

    sweep = sub.add_parser("sweep", help="Run EAT and both baselines over several seeds")
    sweep.add_argument("--seeds", type=int, nargs="+", help="Seeds (default from config)")
    sweep.add_argument("--workers", type=int, help="Parallel worker processes")
    return parser


def _percent_points(values: Optional[List[float]]) -> Optional[List[float]]:
    return None if values is None else [v / 100.0 for v in values]


def run(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.method is not None:
        config = config.model_copy(update={"train": config.train.for_method(args.method)})
    if args.output is not None:
        config = config.model_copy(update={"output_dir": args.output})

    setup_logging(os.path.join(config.output_dir, "logs"), os.getenv(LOG_LEVEL_ENV, "WARNING"))
    logger.info(f"Running {args.command} in {config.output_dir}")
    app = ExperimentApp(config)

    if args.command == "synth":
        written = app.cmd_synth()
        console.print(f"[bold green]Wrote {len(written)} data files to {config.output_dir}[/bold green]")
    elif args.command == "train":
        with console.status("[bold green]Training...[/bold green]"):
            app.cmd_train()
        console.print(f"[bold green]Checkpoint written to {app.path('checkpoint.json')}[/bold green]")
    elif args.command == "score":
        records = app.cmd_score(args.checkpoint, args.inliers, args.outliers, args.scores)
        console.print(f"[bold green]Scored {len(records)} samples[/bold green]")
    elif args.command == "metrics":
        report = app.cmd_metrics(args.scores, _percent_points(args.tpr), _percent_points(args.fpr), args.train_inliers)
        print(report.to_text(), end="")
    elif args.command == "gradcheck":
        summary = app.cmd_gradcheck(args.checkpoint, args.outliers, args.samples, args.oracle)
        print(summary.line())
    elif args.command == "sweep":
        app.cmd_sweep(args.seeds, args.workers)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        run(args)
    except EatOodError as e:
        logger.error(f"{type(e).__name__}: {e}")
        console.print(f"[bold red]{type(e).__name__}: {e}[/bold red]")
        return e.exit_code
    except Exception as e:
        logger.error(f"Application error: {str(e)}", exc_info=True)
        console.print(f"[bold red]Error: {str(e)}[/bold red]")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
