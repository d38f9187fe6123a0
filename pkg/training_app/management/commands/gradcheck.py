"""
Management command to run the finite-difference gradient checks.
Usage: python manage.py gradcheck [--config configs/gradcheck.json] [--corrupt-feedback]
"""
from ...exceptions import NumericalError
from ...serializers import parse_gradcheck_config, read_json
from ...services.gradcheck import run_gradcheck
from ..base import EngineCommand


class Command(EngineCommand):
    help = 'Compare every analytic gradient with central finite differences in double precision'

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Optional JSON gradcheck config (seed, batch_size, epsilon, tolerance, checks)',
        )
        parser.add_argument(
            '--corrupt-feedback',
            action='store_true',
            help='Replace K with an unrelated random matrix in the local-error checks',
        )

    def run(self, **options):
        data = read_json(options['config']) if options['config'] else {}
        config = parse_gradcheck_config(data)
        report = run_gradcheck(config, corrupt_feedback=options['corrupt_feedback'])
        for result in report.results:
            self.stdout.write(result.line())
        if not report.passed:
            raise NumericalError(f'Gradient check failed: {", ".join(report.failed)}')
        self.stdout.write(self.style.SUCCESS(f'All {len(report.results)} gradient checks passed'))
