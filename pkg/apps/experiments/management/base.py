"""
Shared plumbing for the experiment commands: config loading and exit codes.
"""
import sys
from contextlib import contextmanager

from django.core.management.base import BaseCommand, CommandError

from apps.placement.domain import InfeasiblePlacementError, SearchSpaceTooLarge
from apps.sim_engine.domain import TracePlacementMismatch
from apps.workload.domain import DistributionError
from apps.workload.trace import TraceFormatError

from ..domain import ConfigError
from ..services import load_config

USAGE_ERROR = 1
INFEASIBLE = 2


class ExperimentCommand(BaseCommand):
    """Base for commands that read an experiment config with ``-c``."""

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        if parser.called_from_command_line:
            # argparse exits with 2, which is reserved for infeasible placements
            def usage_error(message):
                parser.print_usage(sys.stderr)
                parser.exit(USAGE_ERROR, f"{parser.prog}: error: {message}\n")
            parser.error = usage_error
        return parser

    def add_arguments(self, parser):
        parser.add_argument('-c', '--config', required=True, help='Experiment config JSON file')

    def load(self, options):
        with self.domain_errors():
            return load_config(options['config'])

    @contextmanager
    def domain_errors(self):
        """Translate domain failures into CommandError exit codes."""
        try:
            yield
        except InfeasiblePlacementError as e:
            raise CommandError(f"infeasible placement: {e}", returncode=INFEASIBLE)
        except (ConfigError, TraceFormatError, TracePlacementMismatch, SearchSpaceTooLarge,
                DistributionError, FileNotFoundError) as e:
            raise CommandError(str(e), returncode=USAGE_ERROR)
