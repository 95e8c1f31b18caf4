"""``efcm <command> --config FILE [--seed N] [--out DIR] [--set key.path=value ...]``."""

from __future__ import annotations

import sys

import click
from pydantic import ValidationError

from .config import load_config
from .experiment import COMMANDS, run_experiment
from .tensor import NonFiniteError


def _run(command: str, config, seed, out, overrides) -> None:
    try:
        cfg = load_config(config, list(overrides), seed, out)
    except (ValidationError, ValueError, OSError) as e:
        click.echo(f"error: invalid configuration: {e}", err=True)
        sys.exit(2)
    try:
        run_experiment(command, cfg, log=lambda m: click.echo(m, err=True))
    except NonFiniteError as e:
        click.echo(f"error: training diverged: {e}", err=True)
        sys.exit(3)
    except (ValueError, KeyError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Distill-then-fine-tune experiments on synthetic pathology data."""


def _command(name: str, help_text: str):
    @click.option("--config", "config", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML run config.")
    @click.option("--seed", type=int, default=None, help="Override the config seed.")
    @click.option("--out", type=click.Path(file_okay=False), default=None, help="Parent directory for run folders.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a config key (dotted path).")
    def cmd(config, seed, out, overrides):
        _run(name, config, seed, out, overrides)

    cmd.__doc__ = help_text
    main.command(name)(cmd)


_HELP = {
    "synth-data": "Generate a seeded synthetic patch- or slide-level dataset.",
    "distill": "Distill a student onto the frozen teacher.",
    "finetune": "Fine-tune a distilled student on slides with one strategy.",
    "mil-run": "Distill, then compare reuse / retrain / etc on slides.",
    "profile": "Params, MAC, GFLOPS and FPS for the configured models.",
    "report": "Summarize earlier runs.",
}
assert set(_HELP) == set(COMMANDS)
for _name in COMMANDS:
    _command(_name, _HELP[_name])


if __name__ == "__main__":
    main()
