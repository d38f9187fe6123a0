"""
Management command to evaluate a checkpoint, optionally exiting early.
Usage: python manage.py eval --checkpoint runs/x/checkpoint.llt [--exit-layer 1] [--split test]
"""
from ...services.evaluation import evaluate_checkpoint
from ..base import EngineCommand


class Command(EngineCommand):
    help = 'Evaluate a checkpoint up to a classifier layer and report error and MACs spent'

    def add_arguments(self, parser):
        parser.add_argument(
            '--checkpoint',
            type=str,
            required=True,
            help='Checkpoint written by the train command',
        )
        parser.add_argument(
            '--exit-layer',
            type=int,
            default=None,
            help='1-based classifier layer to classify from (default: the top one)',
        )
        parser.add_argument(
            '--split',
            choices=['train', 'validation', 'test'],
            default='test',
            help='Dataset split from the checkpoint config',
        )
        parser.add_argument(
            '--batch-size',
            type=int,
            default=None,
            help='Evaluation mini-batch size (default: EVAL_BATCH_SIZE)',
        )

    def run(self, **options):
        result = evaluate_checkpoint(
            options['checkpoint'],
            split=options['split'],
            exit_layer=options['exit_layer'],
            batch_size=options['batch_size'],
        )
        self.stdout.write(
            f'exit_layer={result.exit_layer} depth={result.depth} split={result.split} '
            f'examples={result.examples} error={result.error:.4f} macs={result.macs}'
        )
