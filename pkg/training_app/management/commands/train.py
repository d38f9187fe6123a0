"""
Management command to train a network from a run config.
Usage: python manage.py train --config configs/mnist_local_symmetric.json [--out runs/x] [--no-deterministic]
"""
from ...serializers import load_run_config
from ...services.training import run_training
from ..base import EngineCommand


class Command(EngineCommand):
    help = 'Train a network, writing a per-epoch metrics CSV and a final checkpoint'

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            required=True,
            help='Path to the JSON run config',
        )
        parser.add_argument(
            '--out',
            type=str,
            default=None,
            help='Output directory (overrides output.dir)',
        )
        self.add_deterministic_argument(parser)

    def run(self, **options):
        config = load_run_config(options['config'])
        result = run_training(config, out_dir=options['out'], deterministic=options['deterministic'])

        self.stdout.write(self.style.SUCCESS(f'Trained {config["name"]} for {config["epochs"]} epoch(s)'))
        self.stdout.write(f'  metrics:    {result.metrics_path}')
        self.stdout.write(f'  checkpoint: {result.checkpoint_path}')
        for layer, error in sorted(result.final_test_errors.items()):
            self.stdout.write(f'  err_layer_{layer}: {error:.2f}%')
