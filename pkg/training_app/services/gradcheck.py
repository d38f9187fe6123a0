"""
Finite-difference gradient checks.

Every analytic gradient in the engine is compared with central differences on
tiny double-precision networks. Layer checks project the output onto a fixed
random tensor G, so the scalar objective is sum(G * output) and its gradient
with respect to the output is exactly G.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from ..layers import BatchNormLayer, ConvLayer, DenseLayer, MaxPoolLayer
from ..learning_rules import backprop_step, build_rule, local_classifier_forward, local_error_sweep
from ..network import build_network
from ..optim import GradientRecorder, softmax_xent, squared_hinge
from ..randgen import derive_seed, uniform_tensor

logger = logging.getLogger(__name__)

DTYPE = np.float64

# gradient norms below this on both sides count as zero
ZERO_GRAD_NORM = 1e-7

CHECKS = [
    'dense', 'conv', 'maxpool', 'batchnorm_dense', 'batchnorm_conv',
    'softmax_xent', 'squared_hinge', 'local_error_symmetric', 'local_error_conv_bn',
    'backprop', 'backprop_conv_stack',
]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """
    ||a - n|| / (||a|| + ||n||). Zero when both norms are below ZERO_GRAD_NORM:
    a bias feeding batch norm has a true gradient of 0 and both sides are noise.
    """
    a_norm, n_norm = np.linalg.norm(analytic), np.linalg.norm(numeric)
    if max(a_norm, n_norm) < ZERO_GRAD_NORM:
        return 0.0
    denominator = a_norm + n_norm
    return float(np.linalg.norm(analytic - numeric) / denominator)


def numerical_gradient(objective: Callable[[], float], tensor: np.ndarray, epsilon: float) -> np.ndarray:
    grad = np.zeros_like(tensor)
    for index in np.ndindex(tensor.shape):
        original = tensor[index]
        tensor[index] = original + epsilon
        plus = objective()
        tensor[index] = original - epsilon
        minus = objective()
        tensor[index] = original
        grad[index] = (plus - minus) / (2.0 * epsilon)
    return grad


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    details: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def line(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return f'check={self.name} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} status={status}'


@dataclass
class GradcheckReport:
    results: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @property
    def failed(self) -> List[str]:
        return [result.name for result in self.results if not result.passed]


class GradientChecker:
    def __init__(self, seed: int = 0, batch_size: int = 3, epsilon: float = 1e-6,
                 tolerance: float = 1e-4, corrupt_feedback: bool = False):
        self.seed = seed
        self.batch_size = batch_size
        self.epsilon = epsilon
        self.tolerance = tolerance
        self.corrupt_feedback = corrupt_feedback
        self._stream = 0

    def _random(self, *shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        self._stream += 1
        return uniform_tensor(derive_seed(self.seed, self._stream), shape, low, high, dtype=DTYPE)

    def _labels(self, num_classes: int) -> np.ndarray:
        return np.arange(self.batch_size) % num_classes

    def _result(self, name: str, errors: Dict[str, float]) -> CheckResult:
        return CheckResult(name, max(errors.values()), self.tolerance, errors)

    def _config(self, input_shape, layers, num_classes, kind='local_error'):
        return {
            'network': {
                'input_shape': list(input_shape),
                'num_classes': num_classes,
                'input_dropout': 0.0,
                'batch_norm_shift': True,
                'layers': layers,
            },
            'rule': {'kind': kind, 'mode': 'symmetric', 'loss': 'softmax_xent'},
            'seeds': {
                'init': derive_seed(self.seed, 1001),
                'dropout': derive_seed(self.seed, 1002),
                'shuffle': derive_seed(self.seed, 1003),
                'classifier': derive_seed(self.seed, 1004),
                'fa': derive_seed(self.seed, 1005),
            },
        }

    def _layer_errors(self, objective, analytic: Dict[str, np.ndarray], tensors: Dict[str, np.ndarray]):
        return {
            name: relative_error(analytic[name], numerical_gradient(objective, tensor, self.epsilon))
            for name, tensor in tensors.items()
        }

    def check_dense(self) -> CheckResult:
        layer = DenseLayer(self._random(4, 5), self._random(4))
        x = self._random(self.batch_size, 5)
        G = self._random(self.batch_size, 4)

        def objective():
            return float((G * layer.forward(x, activate=False)).sum())

        layer.forward(x, activate=False)
        e_x, grads = layer.backward(G)
        grads['x'] = e_x
        return self._result('dense', self._layer_errors(objective, grads, {'W': layer.W, 'b': layer.b, 'x': x}))

    def check_conv(self) -> CheckResult:
        errors = {}
        for stride, padding in ((1, 1), (2, 0)):
            layer = ConvLayer(self._random(2, 4, 3, 3), self._random(2), stride=stride, padding=padding)
            x = self._random(1, 4, 5, 5)
            G = self._random(*((1,) + layer.output_shape(x.shape[1:])))

            def objective():
                return float((G * layer.forward(x, activate=False)).sum())

            layer.forward(x, activate=False)
            e_x, grads = layer.backward(G)
            grads['x'] = e_x
            tensors = {'kernels': layer.kernels, 'b': layer.b, 'x': x}
            for name, err in self._layer_errors(objective, grads, tensors).items():
                errors[f'stride{stride}.{name}'] = err
        return self._result('conv', errors)

    def check_maxpool(self) -> CheckResult:
        layer = MaxPoolLayer(3, 2)
        x = self._random(self.batch_size, 2, 5, 5)
        G = self._random(self.batch_size, 2, 2, 2)

        def objective():
            return float((G * layer.forward(x)).sum())

        layer.forward(x)
        analytic = {'x': layer.backward(G)}
        return self._result('maxpool', self._layer_errors(objective, analytic, {'x': x}))

    def _check_batchnorm(self, name: str, shape) -> CheckResult:
        layer = BatchNormLayer(shape[1], dtype=DTYPE)
        layer.gamma[...] = self._random(shape[1], low=0.5, high=1.5)
        layer.beta[...] = self._random(shape[1])
        x = self._random(*shape, low=-2.0, high=3.0)
        G = self._random(*shape)

        def objective():
            return float((G * layer.forward(x, training=True)).sum())

        layer.forward(x, training=True)
        e_in, grad_gamma, grad_beta = layer.backward(G)
        analytic = {'gamma': grad_gamma, 'beta': grad_beta, 'x': e_in}
        tensors = {'gamma': layer.gamma, 'beta': layer.beta, 'x': x}
        return self._result(name, self._layer_errors(objective, analytic, tensors))

    def check_batchnorm_dense(self) -> CheckResult:
        return self._check_batchnorm('batchnorm_dense', (self.batch_size, 4))

    def check_batchnorm_conv(self) -> CheckResult:
        return self._check_batchnorm('batchnorm_conv', (self.batch_size, 3, 4, 4))

    def _check_loss(self, name: str, loss) -> CheckResult:
        s = self._random(self.batch_size, 4, low=-2.0, high=2.0)
        t = self._labels(4)
        _, e_s = loss(s, t)

        def objective():
            return loss(s, t)[0]

        return self._result(name, self._layer_errors(objective, {'s': e_s}, {'s': s}))

    def check_softmax_xent(self) -> CheckResult:
        return self._check_loss('softmax_xent', softmax_xent)

    def check_squared_hinge(self) -> CheckResult:
        return self._check_loss('squared_hinge', squared_hinge)

    def _check_local(self, name: str, config: dict, x: np.ndarray) -> CheckResult:
        network = build_network(config, dtype=DTYPE)
        rule = build_rule(config, network, DTYPE)
        if self.corrupt_feedback:
            for lc in rule.classifiers:
                lc.K = self._random(*lc.K.shape)
        t = self._labels(network.num_classes)
        recorder = GradientRecorder()
        local_error_sweep(network, rule, x, t, recorder)

        errors = {}
        for depth, (block, lc) in enumerate(zip(network.blocks, rule.classifiers)):
            def objective(depth=depth, lc=lc):
                h = network.prepare_input(x, training=True)
                for lower in network.blocks[:depth + 1]:
                    h = lower.forward(h, training=True)
                return rule.loss(local_classifier_forward(lc, h), t)[0]

            analytic = recorder.grads[block.name]
            for key, err in self._layer_errors(objective, analytic, block.params()).items():
                errors[f'{block.name}.{key}'] = err
        return self._result(name, errors)

    def check_local_error_symmetric(self) -> CheckResult:
        config = self._config((3,), [{'type': 'dense', 'units': 4}], num_classes=2)
        return self._check_local('local_error_symmetric', config, self._random(self.batch_size, 3))

    def check_local_error_conv_bn(self) -> CheckResult:
        layers = [
            {'type': 'conv', 'filters': 3, 'kernel': 3, 'stride': 1, 'padding': 1,
             'pool': {'window': 2, 'stride': 2}, 'batch_norm': True},
            {'type': 'dense', 'units': 5, 'batch_norm': True},
        ]
        config = self._config((2, 6, 6), layers, num_classes=3)
        return self._check_local('local_error_conv_bn', config, self._random(self.batch_size, 2, 6, 6))

    def _check_global(self, name: str, config: dict, x: np.ndarray) -> CheckResult:
        network = build_network(config, dtype=DTYPE)
        rule = build_rule(config, network, DTYPE)
        t = self._labels(network.num_classes)
        recorder = GradientRecorder()
        backprop_step(network, x, t, rule.loss, recorder)

        def objective():
            h = network.prepare_input(x, training=True)
            for block in network.blocks:
                h = block.forward(h, training=True)
            s = network.output.forward(h.reshape(h.shape[0], -1), activate=False)
            return rule.loss(s, t)[0]

        params = network.named_params()
        return self._result(name, self._layer_errors(objective, recorder.grads['network'], params))

    def check_backprop(self) -> CheckResult:
        layers = [{'type': 'dense', 'units': 10}, {'type': 'dense', 'units': 10}]
        config = self._config((4,), layers, num_classes=3, kind='backprop')
        return self._check_global('backprop', config, self._random(self.batch_size, 4))

    def check_backprop_conv_stack(self) -> CheckResult:
        layers = [
            {'type': 'conv', 'filters': 4, 'kernel': 3, 'stride': 1, 'padding': 1,
             'pool': {'window': 2, 'stride': 2}, 'batch_norm': True},
            {'type': 'conv', 'filters': 4, 'kernel': 3, 'stride': 1, 'padding': 1, 'batch_norm': True},
            {'type': 'dense', 'units': 6},
        ]
        config = self._config((3, 8, 8), layers, num_classes=3, kind='backprop')
        return self._check_global('backprop_conv_stack', config, self._random(self.batch_size, 3, 8, 8))

    def run(self, checks: Optional[List[str]] = None) -> GradcheckReport:
        results = []
        for name in checks or CHECKS:
            result = getattr(self, f'check_{name}')()
            logger.info(result.line())
            results.append(result)
        return GradcheckReport(results)


def run_gradcheck(config: dict, corrupt_feedback: bool = False) -> GradcheckReport:
    checker = GradientChecker(
        seed=config.get('seed', 0),
        batch_size=config.get('batch_size', 3),
        epsilon=config.get('epsilon', 1e-6),
        tolerance=config.get('tolerance', 1e-4),
        corrupt_feedback=corrupt_feedback,
    )
    return checker.run(config.get('checks'))
