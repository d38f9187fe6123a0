import json
import tempfile
from pathlib import Path

from django.test import SimpleTestCase, override_settings

from training_app.exceptions import ConfigError
from training_app.serializers import (
    load_run_config,
    parse_gradcheck_config,
    parse_run_config,
    read_json,
)

from .helpers import CONFIG_DIR, dense_config


def messages(data):
    try:
        parse_run_config(data)
    except ConfigError as e:
        return e.errors
    return []


class RunConfigTests(SimpleTestCase):
    def test_minimal_config_gets_defaults(self):
        config = parse_run_config(dense_config([5], 6))
        self.assertEqual(config['output'], {'metrics': 'metrics.csv', 'checkpoint': 'checkpoint.llt'})
        self.assertEqual(config['network']['layers'][0]['stride'], 1)
        self.assertIsNone(config['network']['layers'][0]['pool'])
        self.assertEqual(config['rule']['loss'], 'softmax_xent')

    def test_hex_and_decimal_seeds(self):
        data = dense_config([5], 6)
        data['seeds'].update(init='0xFF', dropout='12', classifier=['0x1'])
        seeds = parse_run_config(data)['seeds']
        self.assertEqual((seeds['init'], seeds['dropout'], seeds['classifier']), (255, 12, [1]))

    def test_seed_range(self):
        data = dense_config([5], 6)
        data['seeds']['init'] = 2 ** 64
        self.assertEqual(messages(data), ['seeds.init: Seed must lie in [0, 2^64).'])

    def test_nested_layer_errors_are_dotted(self):
        data = dense_config([5, 4], 6)
        del data['network']['layers'][1]['units']
        self.assertEqual(messages(data), ['network.layers.1.units: Dense layers need a unit count.'])

    def test_conv_kernel_larger_than_input(self):
        data = dense_config([5], 1)
        data['network']['input_shape'] = [1, 3, 3]
        data['network']['layers'].insert(0, {'type': 'conv', 'filters': 2, 'kernel': 5})
        errors = messages(data)
        self.assertEqual(len(errors), 1)
        self.assertTrue(errors[0].startswith('network.layers.0: Conv kernel larger than padded input'))

    def test_same_padding_resolved(self):
        data = dense_config([5], 1)
        data['network']['input_shape'] = [1, 8, 8]
        data['network']['layers'].insert(0, {'type': 'conv', 'filters': 2, 'kernel': 5, 'padding': 'same'})
        self.assertEqual(parse_run_config(data)['network']['layers'][0]['padding'], 2)

    def test_random_k_modes_need_feedback_seed(self):
        data = dense_config([5], 6, mode='sign_concordant')
        del data['seeds']['feedback']
        self.assertEqual(messages(data), ['seeds.feedback: Mode sign_concordant needs a feedback seed for K.'])

    def test_mode_only_for_local_error(self):
        data = dense_config([5], 6, kind='backprop', mode='trainable')
        self.assertEqual(messages(data), ['rule.mode: Feedback modes apply to local-error runs only.'])

    def test_classifier_seed_list_length(self):
        data = dense_config([5, 4], 6)
        data['seeds']['classifier'] = [1, 2, 3]
        self.assertEqual(len(messages(data)), 1)

    def test_batch_norm_needs_batch_of_two(self):
        data = dense_config([5], 6, batch_norm=True, batch_size=1)
        self.assertEqual(messages(data), ['batch_size: Batch normalization needs a batch size of at least 2.'])

    def test_dropout_below_one(self):
        data = dense_config([5], 6, dropout=1.0)
        self.assertEqual(messages(data), ['network.layers.0.dropout: Dropout probability must be below 1.'])

    @override_settings(DETERMINISTIC=False)
    def test_deterministic_default_from_settings(self):
        self.assertFalse(parse_run_config(dense_config([5], 6))['deterministic'])

    def test_shipped_configs_validate(self):
        for path in sorted(CONFIG_DIR.glob('*.json')):
            with self.subTest(config=path.name):
                if path.name == 'gradcheck.json':
                    parse_gradcheck_config(read_json(path))
                else:
                    load_run_config(path)


class GradcheckConfigTests(SimpleTestCase):
    def test_defaults(self):
        config = parse_gradcheck_config({})
        self.assertEqual(config['batch_size'], 3)
        self.assertEqual(config['tolerance'], 1e-4)
        self.assertIn('local_error_symmetric', config['checks'])

    def test_unknown_check(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_gradcheck_config({'checks': ['dense', 'lstm']})
        self.assertTrue(ctx.exception.errors[0].startswith('checks.1:'))


class ReadJsonTests(SimpleTestCase):
    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            read_json('/nonexistent/run.json')

    def test_invalid_json_and_non_object(self):
        with tempfile.TemporaryDirectory() as tmp:
            bad = Path(tmp) / 'bad.json'
            bad.write_text('{"epochs": ')
            with self.assertRaises(ConfigError):
                read_json(bad)
            bad.write_text(json.dumps([1, 2]))
            with self.assertRaises(ConfigError):
                read_json(bad)
