import argparse
import logging

from django.core.management.base import BaseCommand, CommandError

from ..exceptions import EXIT_USAGE, EngineError

logger = logging.getLogger(__name__)


class EngineCommand(BaseCommand):
    """Runs `run()` and turns engine errors into CommandError with their exit code."""

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        if parser.called_from_command_line:
            # argparse exits with 2 on bad flags; usage errors are 1 here
            def usage_error(message):
                parser.print_usage()
                parser.exit(EXIT_USAGE, f'{parser.prog}: error: {message}\n')

            parser.error = usage_error
        return parser

    def add_deterministic_argument(self, parser):
        parser.add_argument(
            '--deterministic',
            action=argparse.BooleanOptionalAction,
            default=None,
            help='Run local-error updates strictly in sequence (default: on, or the config value)',
        )

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except EngineError as e:
            logger.error(f'{self.__module__.rsplit(".", 1)[-1]} failed: {e}')
            raise CommandError(str(e), returncode=e.exit_code) from e

    def run(self, **options):
        raise NotImplementedError
