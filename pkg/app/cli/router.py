import argparse

from app.cli.commands import flow, segmentation, sampling, url


def include_commands(subparsers: argparse._SubParsersAction) -> None:
    """Register every subcommand; each handler is stored as `handler` on its parser."""
    for module in (flow, segmentation, sampling, url):
        module.register(subparsers)
