import numpy as np
from django.test import SimpleTestCase

from training_app.learning_rules import build_rule, rule_step
from training_app.network import build_network
from training_app.optim import Adam
from training_app.randgen import derive_seed, uniform_tensor
from training_app.serializers import load_run_config, parse_run_config

from .helpers import CONFIG_DIR


def narrow_cifar_config(kind):
    """The CIFAR-10 layout with every layer cut down to a handful of channels."""
    conv = {'type': 'conv', 'filters': 8, 'kernel': 5, 'padding': 2,
            'pool': {'window': 3, 'stride': 2}, 'batch_norm': True, 'dropout': 0.25}
    data = {
        'network': {
            'input_shape': [3, 32, 32],
            'num_classes': 10,
            'input_dropout': 0.1,
            'layers': [
                conv, conv, conv,
                {'type': 'dense', 'units': 32, 'batch_norm': True, 'dropout': 0.5},
                {'type': 'dense', 'units': 32, 'batch_norm': True},
            ],
        },
        'rule': {'kind': kind},
        'seeds': {'init': 1, 'dropout': 2, 'shuffle': 3, 'classifier': 4, 'fa': 5},
        'epochs': 1,
        'batch_size': 4,
    }
    return parse_run_config(data)


class ConvStackTests(SimpleTestCase):
    def test_full_cifar_layout_builds(self):
        config = load_run_config(CONFIG_DIR / 'cifar10_local.json')
        network = build_network(config)
        rule = build_rule(config, network)
        self.assertEqual([b.tap_width for b in network.blocks], [96 * 15 * 15, 128 * 7 * 7, 256 * 3 * 3, 2048, 2048])
        self.assertEqual([lc.M.shape for lc in rule.classifiers][0], (10, 96 * 15 * 15))
        self.assertIsNone(network.output)

    def test_fifty_steps_under_every_rule(self):
        for kind in ('local_error', 'feedback_alignment', 'backprop'):
            with self.subTest(rule=kind):
                config = narrow_cifar_config(kind)
                network = build_network(config)
                rule = build_rule(config, network)
                fixed = rule.fixed_checksums()
                optimizer = Adam(lr=1e-3)
                for step in range(50):
                    x = uniform_tensor(derive_seed(9, step), (4, 3, 32, 32), 0.0, 1.0)
                    t = (np.arange(4) + step) % 10
                    results = rule_step(network, rule, x, t, optimizer)
                    self.assertTrue(all(np.isfinite(loss) for loss, _ in results))
                self.assertIsNone(network.first_non_finite_layer())
                self.assertEqual(rule.fixed_checksums(), fixed)
