# app/main.py
"""
`bissl` command line.

Every command opens its run manifest first, then loads the run config
(built-in defaults < --config file < --set overrides) and runs one stage or
a whole pipeline. Exit codes: 0 success, 1 configuration/usage error,
2 numerical abort or failed verification.
"""
from pathlib import Path
from typing import Annotated, Dict, List, Optional, Sequence, Tuple
import logging
import sys
import time

import click
import torch
import typer
from rich.console import Console
from rich.logging import RichHandler

from app.core.config import settings
from app.core.errors import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, ConfigError, handle_exception
from app.core.models import ModelPart, RunConfig
from app.core.run_config import load_run_config
from app.core.seeding import derive_seed
from app.autodiff.tensor_ops import ParamVector
from app.data.synthetic import dataset_hash, export_datasets_csv, export_features_csv, make_datasets
from app.networks.mlp import flatten, forward_backbone, init_model
from app.services.manifest import RunManifest
from app.services.pipeline_service import PRETRAINED_NAME, PipelineService, bissl_seed, data_seed
from app.services.stages import (
    build_bissl_problem,
    diagnostic_views,
    eval_running_stats,
    run_bissl_stage,
    run_finetune,
    run_head_warmup,
)
from app.training.bissl_loop import TrainState
from app.training.checkpoint import load_params, load_train_state, param_hash, save_params
from app.verify.suite import all_passed, render_results, run_verify_suite

logger = logging.getLogger(__name__)
console = Console()

app = typer.Typer(
    name="bissl",
    help="Bilevel self-supervised pretraining engine on synthetic data.",
    add_completion=False,
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)

WARMUP_NAME = "warmup.pt"
BISSL_NAME = "bissl.pt"
BISSL_STATE_NAME = "bissl_state.pt"
FINETUNED_NAME = "finetuned.pt"

ConfigOption = Annotated[
    Optional[str], typer.Option("--config", "-c", help="Config file of `section.key = value` lines, or 'default'.")
]
SetOption = Annotated[
    Optional[List[str]], typer.Option("--set", "-s", help="Override a config value, e.g. --set bissl.T=0 (repeatable).")
]
OutputOption = Annotated[Optional[Path], typer.Option("--output", "-o", help="Run directory (default: OUTPUT_DIR).")]
InputOption = Annotated[Optional[Path], typer.Option("--input", "-i", help="Parameter checkpoint to start from.")]
SeedsOption = Annotated[Optional[int], typer.Option("--seeds", min=1, help="Number of seeds R (default: pipeline.seeds).")]


def _setup_logging() -> None:
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False, rich_tracebacks=False)],
        force=True,
    )


@app.callback()
def _root() -> None:
    _setup_logging()


def _begin(
    command: str, config: Optional[str], overrides: Optional[List[str]], output: Optional[Path],
) -> Tuple[RunConfig, RunManifest, Path]:
    out = Path(output or settings.OUTPUT_DIR)
    manifest = RunManifest.start(out, command)
    cfg = load_run_config(config, overrides or [])
    manifest.record_config(cfg)
    return cfg, manifest, out


def _load(path: Path, required: Sequence[str]) -> Dict[str, ParamVector]:
    params, meta = load_params(path)
    missing = [name for name in required if name not in params]
    if missing:
        raise ConfigError(f"{path} has no {', '.join(missing)}", details={"available": sorted(params)})
    logger.info(f"📂 Loaded {', '.join(sorted(params))} from {path} ({meta.get('stage', 'unknown stage')})")
    return params


def _fresh_head(cfg: RunConfig, seed_index: int = 0) -> ParamVector:
    init = init_model(cfg.model, derive_seed(cfg.pipeline.seed, "init", seed_index))
    return flatten(init, ModelPart.DOWNSTREAM_HEAD)


@app.command("gen-data")
def gen_data(config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None) -> None:
    """Generate the synthetic datasets and export them as CSV."""
    cfg, manifest, out = _begin("gen-data", config, set_, output)
    data = make_datasets(cfg.data, data_seed(cfg))
    manifest.record_hash("dataset", dataset_hash(data))
    export_datasets_csv(data, out / "data")


@app.command()
def pretrain(config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None) -> None:
    """NT-Xent pretraining of backbone and projection head."""
    cfg, manifest, out = _begin("pretrain", config, set_, output)
    PipelineService(cfg, out, manifest).pretrain()


@app.command()
def warmup(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, input_: InputOption = None,
) -> None:
    """Fit the downstream head on the frozen pretrained backbone."""
    cfg, manifest, out = _begin("warmup", config, set_, output)
    source = input_ or out / PRETRAINED_NAME
    params = _load(source, ["theta"])
    data = make_datasets(cfg.data, data_seed(cfg))
    manifest.record_hash("dataset", dataset_hash(data))
    result = run_head_warmup(
        cfg.model, params["theta"], _fresh_head(cfg), data.downstream.train, cfg.warmup,
        seed=derive_seed(cfg.pipeline.seed, "train", 0, 0),
    )
    params["phi_d"] = result.phi_d
    hashes = save_params(out / WARMUP_NAME, params, meta={"stage": "warmup"})
    manifest.record_hash("input.theta", hashes["theta"])
    manifest.record_hash("output.phi_d", hashes["phi_d"])
    manifest.write("warmup.train_accuracy", f"{result.train_accuracy:.6f}")


@app.command()
def bissl(
    config: ConfigOption = None,
    set_: SetOption = None,
    output: OutputOption = None,
    input_: InputOption = None,
    resume: Annotated[bool, typer.Option("--resume", help="Continue from the training-state checkpoint.")] = False,
) -> None:
    """Run BiSSL alternations from a pretrained (optionally warmed-up) checkpoint."""
    cfg, manifest, out = _begin("bissl", config, set_, output)
    source = input_ or out / WARMUP_NAME
    params = _load(source, ["theta"])
    root = cfg.pipeline.seed
    theta = params["theta"]
    if "phi_p" in params:
        phi_p = params["phi_p"]
    else:
        phi_p = flatten(init_model(cfg.model, derive_seed(root, "init")), ModelPart.PRETEXT_HEAD)
    phi_d = params["phi_d"] if "phi_d" in params else _fresh_head(cfg)

    data = make_datasets(cfg.data, data_seed(cfg))
    manifest.record_hash("dataset", dataset_hash(data))
    stream_root = bissl_seed(cfg)
    problem = build_bissl_problem(
        cfg.model, data, cfg.pretrain.temperature, cfg.data.augment,
        cfg.data.pretext_batch_size, cfg.data.downstream_batch_size,
        stack_seed=derive_seed(stream_root, "stack", 0), augment_seed=derive_seed(stream_root, "augment", 0),
    )
    probe = diagnostic_views(data.pretext, cfg.data.pretext_batch_size, cfg.data.augment, derive_seed(stream_root, "augment", 0, 1))
    state_path = out / BISSL_STATE_NAME
    if resume and state_path.is_file():
        state = TrainState.from_dict(load_train_state(state_path))
        logger.info(f"⏯️ Resuming BiSSL at alternation {state.alternation}")
    else:
        resume = False
        state = TrainState.initial(theta, phi_p, phi_d)

    start = time.perf_counter()
    result = run_bissl_stage(
        cfg.bissl, problem, state, probe,
        metrics_path=out / "bissl_metrics.csv", checkpoint_path=state_path, resume=resume,
    )
    hashes = save_params(
        out / BISSL_NAME,
        {"theta": result.theta_p, "phi_p": state.phi_p, "theta_d": state.theta_d, "phi_d": state.phi_d},
        meta={"stage": "bissl", "alternations": state.alternation},
    )
    manifest.record_timing("bissl", time.perf_counter() - start)
    manifest.record_hash("input.theta", param_hash(theta))
    manifest.record_hash("output.theta", hashes["theta"])
    manifest.write("stationarity.before", f"{result.stationarity_before:.6e}")
    manifest.write("stationarity.after", f"{result.stationarity_after:.6e}")


@app.command()
def finetune(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, input_: InputOption = None,
) -> None:
    """Fine-tune backbone and a fresh linear head on the downstream task."""
    cfg, manifest, out = _begin("finetune", config, set_, output)
    source = input_ or out / BISSL_NAME
    params = _load(source, ["theta"])
    data = make_datasets(cfg.data, data_seed(cfg))
    manifest.record_hash("dataset", dataset_hash(data))
    result = run_finetune(
        cfg.model, params["theta"], _fresh_head(cfg), data.downstream, cfg.finetune,
        seed=derive_seed(cfg.pipeline.seed, "train", 0, 1), metrics_path=out / "finetune_metrics.csv",
    )
    hashes = save_params(
        out / FINETUNED_NAME, {"theta": result.theta, "phi_d": result.phi_d},
        meta={"stage": "finetune", "best_epoch": result.best_epoch},
    )
    manifest.record_hash("output.theta", hashes["theta"])
    manifest.write("finetune.best_epoch", result.best_epoch)
    manifest.write("finetune.test_accuracy", f"{result.test.accuracy:.6f}")
    manifest.write(f"finetune.test_top{result.test.k}_accuracy", f"{result.test.topk_accuracy:.6f}")
    console.print(
        f"test accuracy {result.test.accuracy:.4f}, top-{result.test.k} {result.test.topk_accuracy:.4f} "
        f"(best epoch {result.best_epoch})"
    )


@app.command()
def pipeline(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, seeds: SeedsOption = None,
) -> None:
    """Run every configured arm over R seeds and write the comparison table."""
    cfg, manifest, out = _begin("pipeline", config, set_, output)
    report = PipelineService(cfg, out, manifest).run(seeds=seeds)
    report.render(console)


@app.command()
def sweep(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, seeds: SeedsOption = None,
) -> None:
    """Random search over fine-tuning lr/weight decay, then retrain the winner with R seeds."""
    cfg, manifest, out = _begin("sweep", config, set_, output)
    search, report = PipelineService(cfg, out, manifest).sweep(seeds)
    console.print(
        f"best trial {search.best.index}: lr={search.best.lr:.4g} wd={search.best.weight_decay:.4g} "
        f"val accuracy {search.best.val_accuracy:.4f}"
    )
    report.render(console)


@app.command()
def ablate(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, seeds: SeedsOption = None,
) -> None:
    """BiSSL ablations: default, N_U=1, N_U=1 with matched updates, discarded implicit Jacobian."""
    cfg, manifest, out = _begin("ablate", config, set_, output)
    report = PipelineService(cfg, out, manifest).ablate(seeds)
    report.render(console)


@app.command()
def verify(
    config: ConfigOption = None,
    set_: SetOption = None,
    output: OutputOption = None,
    seed: Annotated[int, typer.Option("--seed", help="Seed for the random oracle instances.")] = 0,
) -> None:
    """Run the gradient, linear-algebra and bilevel oracle checks."""
    _, manifest, _ = _begin("verify", config, set_, output)
    results = run_verify_suite(seed)
    render_results(results, console)
    for r in results:
        manifest.write(f"verify.{r.name}", "pass" if r.passed else "FAIL")
    if not all_passed(results):
        raise typer.Exit(code=EXIT_NUMERICAL)


@app.command("export-features")
def export_features(
    config: ConfigOption = None, set_: SetOption = None, output: OutputOption = None, input_: InputOption = None,
) -> None:
    """Write backbone features of every dataset split to CSV."""
    cfg, manifest, out = _begin("export-features", config, set_, output)
    source = input_ or out / PRETRAINED_NAME
    theta = _load(source, ["theta"])["theta"]
    data = make_datasets(cfg.data, data_seed(cfg))
    manifest.record_hash("dataset", dataset_hash(data))
    stats = eval_running_stats(cfg.model, theta, data.downstream.train.inputs)
    splits = {
        "pretext": (data.pretext.inputs, None),
        "downstream_train": (data.downstream.train.inputs, data.downstream.train.labels),
        "downstream_val": (data.downstream.val.inputs, data.downstream.val.labels),
        "downstream_test": (data.downstream.test.inputs, data.downstream.test.labels),
    }
    for name, (inputs, labels) in splits.items():
        with torch.no_grad():
            features = forward_backbone(theta, inputs, cfg.model, stats)
        export_features_csv(features, labels, out / "features" / f"{name}.csv")
    logger.info(f"✅ Exported features for {len(splits)} splits to {out / 'features'}")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code instead of exiting."""
    args = list(sys.argv[1:] if argv is None else argv)
    command = typer.main.get_command(app)
    try:
        rv = command.main(args=args, prog_name="bissl", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_CONFIG
    except Exception as e:
        return handle_exception(e)
    return rv if isinstance(rv, int) else EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
