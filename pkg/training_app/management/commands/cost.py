"""
Management command to report memory traffic and MACs for a run config.
Usage: python manage.py cost --config configs/cost_worked_example.json [--out cost.csv] [--instrument]
"""
import csv
import io

import numpy as np

from ...cost_model import (
    cost_backprop,
    cost_local,
    cost_spec_from_config,
    fmt_count,
    instrument_run,
    mac_advantage,
)
from ...exceptions import ArgumentError
from ...learning_rules import build_rule
from ...network import build_network
from ...randgen import uniform_tensor
from ...serializers import load_run_config
from ..base import EngineCommand

CSV_HEADER = ['method', 'layer', 'reads', 'writes', 'macs']


class Command(EngineCommand):
    help = 'Emit backprop and local-error cost reports as CSV, plus the MAC-advantage verdict'

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
            help='Write the CSV here instead of stdout',
        )
        parser.add_argument(
            '--instrument',
            action='store_true',
            help='Also run one counted training step of the configured rule and report it',
        )

    def _instrumented(self, config, spec):
        if (config.get('cost') or {}).get('layers'):
            raise ArgumentError('--instrument needs a network description, not explicit cost.layers')
        network = build_network(config, counting=True)
        rule = build_rule(config, network)
        dtype = network.blocks[0].linear.b.dtype
        shape = (config['batch_size'],) + tuple(config['network']['input_shape'])
        x = uniform_tensor(config['seeds']['shuffle'], shape, 0.0, 1.0, dtype=dtype)
        t = np.arange(config['batch_size']) % network.num_classes
        return instrument_run(network, rule, x, t, spec.epochs, spec.batches)

    def run(self, **options):
        config = load_run_config(options['config'])
        spec = cost_spec_from_config(config)
        reports = [cost_backprop(spec), cost_local(spec)]
        if options['instrument']:
            reports.append(self._instrumented(config, spec))

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for report in reports:
            writer.writerows(report.rows())

        if options['out']:
            with open(options['out'], 'w', newline='') as fh:
                fh.write(buffer.getvalue())
            self.stdout.write(self.style.SUCCESS(f'Cost report written to {options["out"]}'))
        else:
            self.stdout.write(buffer.getvalue(), ending='')

        verdict = mac_advantage(spec)
        self.stdout.write(
            f'# mac_advantage={str(verdict.advantage).lower()} margin={fmt_count(verdict.margin)} '
            f'condition={str(verdict.condition).lower()} condition_margin={fmt_count(verdict.condition_margin)}'
        )
        if options['instrument']:
            self.stdout.write(f'# error_transfers={reports[-1].error_transfers}')
