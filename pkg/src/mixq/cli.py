"""Command line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from .allocator import InfeasibleError
from .config import ABLATIONS, ConfigError, load_config
from .pipeline import STAGES, PipelineError, Workspace, run_stage


def _fail(code: str, exit_code: int, message: str) -> None:
    click.echo(f"error {code}: {' '.join(str(message).split())}", err=True)
    sys.exit(exit_code)


class _Group(click.Group):
    """Maps usage errors to the config exit code with a one-line message."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            return super().main(*args, **kwargs)
        except click.exceptions.Exit as exc:
            sys.exit(exc.exit_code)
        except click.Abort:
            _fail("E_ABORTED", 1, "aborted")
        except click.UsageError as exc:
            _fail("E_CONFIG", 2, exc.format_message())


@click.group(cls=_Group)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="JSON run configuration.")
@click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help="Override the configured seed.")
@click.option("--out", type=click.Path(file_okay=False), default="mixq-out", show_default=True,
              help="Output directory for the run report.")
@click.option("--stage-cache", type=click.Path(file_okay=False), default=None,
              help="Directory of stage artifacts (default: <out>/stages).")
@click.option("--ablation", type=click.Choice(ABLATIONS), default=None,
              help="Allocate with importance only, or importance plus sensitivity.")
@click.pass_context
def main(ctx, config_path, seed, out, stage_cache, ablation):
    """Mixed-precision quantization pipeline for a toy vision transformer."""
    ctx.obj = {"config_path": config_path, "seed": seed, "out": Path(out),
               "cache": Path(stage_cache) if stage_cache else Path(out) / "stages",
               "ablation": ablation}


def _run(ctx, stage: str) -> None:
    o = ctx.obj
    try:
        cfg = load_config(o["config_path"])
        if o["seed"] is not None:
            cfg = cfg.with_seed(o["seed"])
        if o["ablation"] is not None:
            cfg = cfg.with_ablation(o["ablation"])
        ws = Workspace(cfg, o["cache"])
        run_stage(ws, stage, out=o["out"], log=lambda m: click.echo(m, err=True))
    except ConfigError as exc:
        _fail("E_CONFIG", 2, exc)
    except InfeasibleError as exc:
        _fail("E_INFEASIBLE", 4, exc)
    except PipelineError as exc:
        _fail(exc.code, exc.exit_code, exc)
    except OSError as exc:
        _fail("E_IO", 1, exc)
    click.echo(f"ok {stage}")


def _make(stage: str):
    @click.pass_context
    def cmd(ctx):
        _run(ctx, stage)

    cmd.__doc__ = f"Run the {stage} stage."
    return click.command(stage)(cmd)


for _stage in STAGES:
    main.add_command(_make(_stage))


if __name__ == "__main__":
    main()
