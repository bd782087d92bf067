from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import json
import logging
import time

import numpy as np
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn, TimeRemainingColumn
from rich.table import Table

from eat_ood.config.config import ExperimentConfig, Method
from eat_ood.core import gradnoise, metrics
from eat_ood.core.datasets import (
    SampleSet,
    class_counts,
    gen_balanced,
    gen_longtail,
    gen_ood,
    read_samples_csv,
    tail_classes,
    write_samples_csv,
)
from eat_ood.core.metrics import MetricsReport
from eat_ood.core.model import ModelParams, ScoreRecord, load_checkpoint, save_checkpoint, score_samples
from eat_ood.core.trainer import train, write_loss_trace
from eat_ood.errors import ContractViolation, MissingFileError
from eat_ood.utils.config import save_config
from eat_ood.utils.csvio import format_float

logger = logging.getLogger(__name__)
console = Console()

TRAIN_INLIERS = "train_inliers.csv"
TRAIN_OUTLIERS = "train_outliers.csv"
TEST_INLIERS = "test_inliers.csv"
TEST_OUTLIERS = "test_outliers.csv"
CHECKPOINT = "checkpoint.json"
LOSS_TRACE = "loss_trace.csv"
SCORES = "scores.csv"
HISTOGRAM = "score_histogram.csv"
METRICS_TEXT = "metrics.txt"
METRICS_JSON = "metrics.json"
GRADCHECK = "gradcheck.csv"
GRADCHECK_SUMMARY = "gradcheck_summary.txt"
SWEEP_JSON = "sweep.json"
SWEEP_TEXT = "sweep.txt"

SWEEP_METHODS: List[Method] = ["eat", "oe", "msp"]
SUMMARY_KEYS = ["auroc", "aupr", "fpr95", "acc95", "n_correct", "tail_accuracy"]

# id ranges keep every row of one experiment distinct across files
ID_OFFSETS = {TRAIN_INLIERS: 0, TRAIN_OUTLIERS: 1_000_000, TEST_INLIERS: 2_000_000, TEST_OUTLIERS: 3_000_000}


def stream_seed(seed: int, stream: int) -> int:
    """Independent generator seed for one data stream of an experiment seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingFileError(f"Required file not found: {path}")
    return path


class ExperimentApp:
    """Runs the file-based stages of one experiment inside ``config.output_dir``."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        logger.debug(f"ExperimentApp initialized for {self.output_dir}")

    def path(self, name: str) -> Path:
        return self.output_dir / name

    @property
    def grid_shape(self):
        spec = self.config.dataset.longtail
        if spec.geometry == "grid-image":
            return spec.grid_width, spec.grid_height
        return None

    def _ood(self, which: str, stream: int) -> SampleSet:
        spec = self.config.dataset.longtail
        ood = self.config.dataset.ood_train if which == TRAIN_OUTLIERS else self.config.dataset.ood_test
        grid = self.grid_shape
        return gen_ood(
            ood.count,
            spec.input_dim,
            ood.mode,
            stream_seed(spec.seed, stream),
            num_classes=spec.num_classes,
            heldout_patterns=ood.heldout_patterns,
            pattern_offset=ood.pattern_offset,
            grid_width=grid[0] if grid else None,
            grid_height=grid[1] if grid else None,
            shift=ood.shift,
            noise_std=spec.noise_std,
            id_offset=ID_OFFSETS[which],
        )

    def cmd_synth(self) -> Dict[str, Path]:
        """Write the training and test inlier/outlier sets as CSV files."""
        spec = self.config.dataset.longtail
        sets = {
            TRAIN_INLIERS: gen_longtail(spec, id_offset=ID_OFFSETS[TRAIN_INLIERS]),
            TRAIN_OUTLIERS: self._ood(TRAIN_OUTLIERS, 1),
            TEST_INLIERS: gen_balanced(
                spec, self.config.dataset.test_per_class, stream_seed(spec.seed, 2), id_offset=ID_OFFSETS[TEST_INLIERS]
            ),
            TEST_OUTLIERS: self._ood(TEST_OUTLIERS, 3),
        }
        written = {}
        for name, samples in sets.items():
            written[name] = self.path(name)
            write_samples_csv(samples, str(written[name]))
            logger.info(f"Wrote {len(samples)} rows to {written[name]}")
        save_config(self.config, str(self.path("config.json")))
        return written

    def cmd_train(self) -> ModelParams:
        """Train on the synthesized training files; writes checkpoint and loss trace."""
        inliers = read_samples_csv(str(_require(self.path(TRAIN_INLIERS))))
        outliers = read_samples_csv(str(_require(self.path(TRAIN_OUTLIERS))))
        num_classes = self.config.dataset.longtail.num_classes

        start_time = time.time()
        result = train(self.config.train, inliers, outliers, num_classes, self.grid_shape)
        logger.debug(f"Training finished in {time.time() - start_time:.2f} seconds")

        save_checkpoint(result.params, self.path(CHECKPOINT))
        write_loss_trace(result.trace, str(self.path(LOSS_TRACE)))
        return result.params

    def cmd_score(
        self,
        checkpoint: Optional[str] = None,
        inliers: Optional[str] = None,
        outliers: Optional[str] = None,
        output: Optional[str] = None,
    ) -> List[ScoreRecord]:
        """Score test inliers and outliers; writes the score CSV and its histogram."""
        params = load_checkpoint(checkpoint or self.path(CHECKPOINT))
        inlier_set = read_samples_csv(str(_require(Path(inliers) if inliers else self.path(TEST_INLIERS))))
        outlier_set = read_samples_csv(str(_require(Path(outliers) if outliers else self.path(TEST_OUTLIERS))))

        records = score_samples(params, inlier_set, is_ood=False) + score_samples(params, outlier_set, is_ood=True)
        scores_path = Path(output) if output else self.path(SCORES)
        metrics.write_scores_csv(records, str(scores_path))
        metrics.write_histogram_csv(
            metrics.score_histogram(records, self.config.histogram_bins), str(scores_path.with_name(HISTOGRAM))
        )
        logger.info(f"Scored {len(inlier_set)} inliers and {len(outlier_set)} outliers into {scores_path}")
        return records

    def _tail_classes(self, train_inliers: Optional[str]) -> Optional[List[int]]:
        path = Path(train_inliers) if train_inliers else self.path(TRAIN_INLIERS)
        if not path.exists():
            return None
        counts = class_counts(read_samples_csv(str(path)), self.config.dataset.longtail.num_classes)
        return tail_classes(counts)

    def cmd_metrics(
        self,
        scores: Optional[str] = None,
        tpr_points: Optional[Sequence[float]] = None,
        fpr_points: Optional[Sequence[float]] = None,
        train_inliers: Optional[str] = None,
    ) -> MetricsReport:
        """Evaluate a score CSV, ours or externally produced; writes text and JSON reports."""
        scores_path = _require(Path(scores) if scores else self.path(SCORES))
        records = metrics.read_scores_csv(str(scores_path))
        report = metrics.evaluate(
            records,
            tpr_points if tpr_points is not None else self.config.tpr_points,
            fpr_points if fpr_points is not None else self.config.fpr_points,
            tail=self._tail_classes(train_inliers),
        )
        out_dir = scores_path.parent if scores else self.output_dir
        metrics.write_report(report, str(out_dir / METRICS_TEXT), str(out_dir / METRICS_JSON))
        return report

    def cmd_gradcheck(
        self,
        checkpoint: Optional[str] = None,
        outliers: Optional[str] = None,
        samples: int = 32,
        with_oracle: bool = False,
    ) -> gradnoise.NoiseSummary:
        """Check the gradient-noise identities on outlier rows; a fresh model is used without a checkpoint."""
        if checkpoint:
            params = load_checkpoint(checkpoint)
        else:
            spec, cfg = self.config.dataset.longtail, self.config.train
            params = ModelParams.initialize(spec.input_dim, cfg.hidden_dim, spec.num_classes, cfg.k, cfg.m, cfg.seed)
            logger.info("No checkpoint given, checking a freshly initialized model")
        outlier_set = read_samples_csv(str(_require(Path(outliers) if outliers else self.path(TEST_OUTLIERS))))
        if len(outlier_set) == 0:
            raise ContractViolation("the outlier file holds no rows")

        reports, summary = gradnoise.verify_gradient_noise(params, outlier_set.inputs[:samples], with_oracle=with_oracle)
        gradnoise.write_noise_reports(reports, str(self.path(GRADCHECK)))
        with open(self.path(GRADCHECK_SUMMARY), "w") as f:
            f.write(summary.line() + "\n")
        return summary

    def run_pipeline(self) -> MetricsReport:
        """synth, train, score and metrics in one call, all with the configured defaults."""
        self.cmd_synth()
        self.cmd_train()
        self.cmd_score()
        return self.cmd_metrics()

    def cmd_sweep(self, seeds: Optional[Sequence[int]] = None, workers: Optional[int] = None) -> Dict[str, Any]:
        """Run every method over every seed and aggregate mean and sample std per metric key."""
        seeds = list(seeds) if seeds is not None else list(self.config.seeds)
        if not seeds:
            raise ContractViolation("a sweep needs at least one seed")
        workers = workers or self.config.workers
        jobs = [(method, seed) for method in SWEEP_METHODS for seed in seeds]
        payload = self.config.model_dump()

        results: Dict[str, List[Dict[str, Any]]] = {method: [] for method in SWEEP_METHODS}
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            TaskProgressColumn(),
            TimeRemainingColumn(),
            console=console
        ) as progress:
            task = progress.add_task("[cyan]Sweeping methods and seeds...", total=len(jobs))
            if workers == 1:
                for method, seed in jobs:
                    results[method].append(sweep_run(payload, method, seed))
                    progress.update(task, advance=1)
            else:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    futures = [(method, pool.submit(sweep_run, payload, method, seed)) for method, seed in jobs]
                    for method, future in futures:
                        results[method].append(future.result())
                        progress.update(task, advance=1)

        summary = {
            "seeds": seeds,
            "methods": {method: aggregate(runs) for method, runs in results.items()},
        }
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with open(self.path(SWEEP_JSON), "w") as f:
            json.dump(summary, f, indent=2)
        with open(self.path(SWEEP_TEXT), "w") as f:
            f.write(sweep_text(summary))
        self.display_sweep(summary)
        return summary

    def display_sweep(self, summary: Dict[str, Any]) -> None:
        """Print the per-method mean and std of the headline keys as a rich table."""
        table = Table(title=f"Sweep over seeds {summary['seeds']}", show_header=True, header_style="bold magenta")
        table.add_column("Method", style="cyan")
        for key in SUMMARY_KEYS:
            table.add_column(key, style="green")
        for method, stats in summary["methods"].items():
            row = [method]
            for key in SUMMARY_KEYS:
                mean, std = stats[key]["mean"], stats[key]["std"]
                row.append("undefined" if mean is None else f"{mean:.4f} ± {std:.4f}")
            table.add_row(*row)
        console.print(table)
        console.print(Panel(f"Full report: {self.path(SWEEP_TEXT)}", border_style="blue"))


def sweep_run(payload: Dict[str, Any], method: Method, seed: int) -> Dict[str, Any]:
    """One sweep cell, run in its own directory; returns the flat metric items."""
    base = ExperimentConfig.model_validate(payload).with_seed(seed)
    run_dir = Path(base.output_dir) / "sweep" / method / f"seed_{seed}"
    config = base.model_copy(update={"train": base.train.for_method(method), "output_dir": str(run_dir)})
    logger.info(f"Sweep run: method={method}, seed={seed}")
    return ExperimentApp(config).run_pipeline().flat_items()


def aggregate(runs: List[Dict[str, Any]]) -> Dict[str, Dict[str, Optional[float]]]:
    """Mean and sample standard deviation per key; 0 std for a single run, None when any run is undefined."""
    stats = {}
    for key in runs[0]:
        values = [run[key] for run in runs]
        if any(v is None for v in values):
            stats[key] = {"mean": None, "std": None}
            continue
        array = np.asarray(values, dtype=np.float64)
        std = float(np.std(array, ddof=1)) if array.size > 1 else 0.0
        stats[key] = {"mean": float(np.mean(array)), "std": std}
    return stats


def sweep_text(summary: Dict[str, Any]) -> str:
    """``method.key = mean +- std`` lines, ``undefined`` where a run had no value."""
    lines = [f"seeds = {' '.join(str(s) for s in summary['seeds'])}"]
    for method, stats in summary["methods"].items():
        for key, value in stats.items():
            if value["mean"] is None:
                lines.append(f"{method}.{key} = undefined")
            else:
                lines.append(f"{method}.{key} = {format_float(value['mean'])} +- {format_float(value['std'])}")
    return "\n".join(lines) + "\n"
