import csv
import json
import shutil
import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from training_app.checkpoints import load_checkpoint
from training_app.network import build_network
from training_app.serializers import load_run_config

from .helpers import CONFIG_DIR, dense_config, write_blob_idx


class CommandTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)

    def call(self, name, **options):
        out = StringIO()
        call_command(name, stdout=out, stderr=StringIO(), **options)
        return out.getvalue()

    def write_config(self, data, name='run.json'):
        path = self.tmp / name
        path.write_text(json.dumps(data))
        return str(path)


class GradcheckCommandTests(CommandTestCase):
    def test_all_checks_pass(self):
        output = self.call('gradcheck', config=str(CONFIG_DIR / 'gradcheck.json'))
        lines = [line for line in output.splitlines() if line.startswith('check=')]
        self.assertEqual(len(lines), 11)
        self.assertTrue(all(line.endswith('status=PASS') for line in lines))

    def test_corrupted_feedback_fails_with_numerical_exit_code(self):
        out = StringIO()
        config = self.write_config({'checks': ['dense', 'local_error_symmetric']})
        with self.assertRaises(CommandError) as ctx:
            call_command('gradcheck', config=config, corrupt_feedback=True, stdout=out)
        self.assertEqual(ctx.exception.returncode, 3)
        self.assertIn('check=dense', out.getvalue())
        self.assertIn('check=local_error_symmetric', out.getvalue())
        self.assertIn('status=FAIL', out.getvalue())


class CostCommandTests(CommandTestCase):
    def test_worked_example(self):
        output = self.call('cost', config=str(CONFIG_DIR / 'cost_worked_example.json'))
        lines = output.splitlines()
        self.assertEqual(lines[0], 'method,layer,reads,writes,macs')
        self.assertIn('backprop,TOTAL,330,180,390', lines)
        self.assertIn('local_error,TOTAL,150,150,860', lines)
        self.assertEqual(lines[-1], '# mac_advantage=false margin=-470 condition=false condition_margin=-16')

    def test_report_ignores_the_configured_rule(self):
        data = json.loads((CONFIG_DIR / 'cost_worked_example.json').read_text())
        local = self.call('cost', config=self.write_config(data, 'local.json'))
        data['rule'] = {'kind': 'backprop'}
        backprop = self.call('cost', config=self.write_config(data, 'bp.json'))
        self.assertEqual(local, backprop)

    def test_instrumented_run_matches_analytic(self):
        output = self.call('cost', config=str(CONFIG_DIR / 'cost_uniform_mlp.json'), instrument=True)
        lines = output.splitlines()
        self.assertIn('local_error,TOTAL,1440,1440,14080', lines)
        self.assertIn('instrumented_local_error,TOTAL,1440,1440,14080', lines)
        self.assertEqual(lines[-1], '# error_transfers=0')

    def test_instrument_needs_a_network(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('cost', config=str(CONFIG_DIR / 'cost_worked_example.json'), instrument=True)
        self.assertEqual(ctx.exception.returncode, 1)

    def test_csv_file_output(self):
        target = self.tmp / 'cost.csv'
        self.call('cost', config=str(CONFIG_DIR / 'cost_worked_example.json'), out=str(target))
        with open(target, newline='') as fh:
            rows = list(csv.reader(fh))
        self.assertEqual(len(rows), 1 + 3 + 3)


class TrainEvalCommandTests(CommandTestCase):
    def run_config(self, kind='local_error', epochs=2, **overrides):
        train_images, train_labels = write_blob_idx(self.tmp, 60)
        test_images, test_labels = write_blob_idx(self.tmp, 12, prefix='test')
        data = dense_config([8, 8], 16, num_classes=3, kind=kind, batch_size=10, epochs=epochs)
        data['data'] = {
            'format': 'idx', 'num_classes': 3,
            'train_images': train_images, 'train_labels': train_labels,
            'test_images': test_images, 'test_labels': test_labels,
        }
        data.update(overrides)
        return self.write_config(data)

    def read_metrics(self, out_dir):
        with open(Path(out_dir) / 'metrics.csv', newline='') as fh:
            return list(csv.reader(fh))

    def test_metrics_and_checkpoint_written(self):
        config = self.run_config()
        output = self.call('train', config=config, out=str(self.tmp / 'a'))
        self.assertIn('err_layer_2:', output)
        rows = self.read_metrics(self.tmp / 'a')
        self.assertEqual(rows[0], ['epoch', 'wall_s', 'train_loss', 'err_layer_1', 'err_layer_2'])
        self.assertEqual([row[0] for row in rows[1:]], ['1', '2'])
        self.assertTrue((self.tmp / 'a' / 'checkpoint.llt').exists())

    def test_runs_are_reproducible(self):
        config = self.run_config()
        self.call('train', config=config, out=str(self.tmp / 'a'))
        self.call('train', config=config, out=str(self.tmp / 'b'))
        first, second = self.read_metrics(self.tmp / 'a'), self.read_metrics(self.tmp / 'b')
        self.assertEqual([row[:1] + row[2:] for row in first], [row[:1] + row[2:] for row in second])
        self.assertEqual(
            (self.tmp / 'a' / 'checkpoint.llt').read_bytes(),
            (self.tmp / 'b' / 'checkpoint.llt').read_bytes(),
        )

    def test_backprop_reports_the_output_layer(self):
        config = self.run_config(kind='backprop', epochs=1)
        self.call('train', config=config, out=str(self.tmp / 'bp'))
        self.assertEqual(self.read_metrics(self.tmp / 'bp')[0][3:], ['err_layer_3'])

    def test_validation_columns(self):
        config = self.run_config(epochs=1)
        data = json.loads(Path(config).read_text())
        data['data']['validation_size'] = 15
        self.call('train', config=self.write_config(data), out=str(self.tmp / 'v'))
        self.assertEqual(self.read_metrics(self.tmp / 'v')[0][-2:], ['val_err_layer_1', 'val_err_layer_2'])

    def test_batch_norm_with_one_example_left_over(self):
        config = self.run_config(epochs=1)
        data = json.loads(Path(config).read_text())
        for layer in data['network']['layers']:
            layer['batch_norm'] = True
        data['data']['train_images'], data['data']['train_labels'] = write_blob_idx(self.tmp, 61, prefix='odd')
        self.call('train', config=self.write_config(data), out=str(self.tmp / 'bn'))
        self.assertEqual([row[0] for row in self.read_metrics(self.tmp / 'bn')[1:]], ['1'])

    def test_zero_epochs_saves_the_initial_network(self):
        config = self.run_config(epochs=0)
        self.call('train', config=config, out=str(self.tmp / 'z'))
        self.assertEqual(len(self.read_metrics(self.tmp / 'z')), 1)
        network, _, _ = load_checkpoint(self.tmp / 'z' / 'checkpoint.llt')
        fresh = build_network(load_run_config(config))
        for name, value in fresh.named_params().items():
            assert_array_equal(network.named_params()[name], value)

    def test_eval_exit_layers(self):
        config = self.run_config()
        self.call('train', config=config, out=str(self.tmp / 'e'))
        checkpoint = str(self.tmp / 'e' / 'checkpoint.llt')
        results = {}
        for layer in (1, 2):
            line = self.call('eval', checkpoint=checkpoint, exit_layer=layer).strip()
            results[layer] = dict(item.split('=') for item in line.split())
        self.assertEqual(results[1]['depth'], '2')
        self.assertEqual(results[1]['examples'], '12')
        self.assertEqual(int(results[1]['macs']), 12 * (16 * 8 + 3 * 8))
        self.assertEqual(int(results[2]['macs']), 12 * (16 * 8 + 8 * 8 + 3 * 8))
        final = self.read_metrics(self.tmp / 'e')[-1]
        self.assertEqual(results[2]['error'], final[4])

    def test_eval_rejects_unknown_exit_layer(self):
        config = self.run_config(epochs=0)
        self.call('train', config=config, out=str(self.tmp / 'e'))
        with self.assertRaises(CommandError) as ctx:
            self.call('eval', checkpoint=str(self.tmp / 'e' / 'checkpoint.llt'), exit_layer=3)
        self.assertEqual(ctx.exception.returncode, 1)

    def test_invalid_config_is_a_usage_error(self):
        data = dense_config([8], 16)
        del data['network']['layers'][0]['units']
        with self.assertRaises(CommandError) as ctx:
            self.call('train', config=self.write_config(data))
        self.assertEqual(ctx.exception.returncode, 1)
        self.assertIn('network.layers.0.units', str(ctx.exception))

    def test_missing_data_is_a_data_error(self):
        config = self.run_config()
        data = json.loads(Path(config).read_text())
        data['data']['train_images'] = str(self.tmp / 'absent-idx3-ubyte')
        with self.assertRaises(CommandError) as ctx:
            self.call('train', config=self.write_config(data), out=str(self.tmp / 'm'))
        self.assertEqual(ctx.exception.returncode, 2)
