"""
Credit-assignment rules driving the block stack: local-error learning with
fixed random classifiers, feedback alignment and standard backpropagation.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings
from django.db import models

from .data_io import batches
from .exceptions import ArgumentError, DimensionError, NumericalError, StateError
from .network import Block, Network
from .optim import get_loss
from .randgen import ClassifierSeed, FeedbackMode, derive_seed, make_classifier, make_fa_feedback
from .tensor import checksum, flatten_rows, matmul, transpose

logger = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


class RuleKind(models.TextChoices):
    BACKPROP = 'backprop', 'Backpropagation'
    FEEDBACK_ALIGNMENT = 'feedback_alignment', 'Feedback alignment'
    LOCAL_ERROR = 'local_error', 'Local error'


class LocalClassifier:
    """Fixed (or trainable) C x N projection reading one block's tap."""

    def __init__(self, spec: ClassifierSeed, dtype=None):
        self.spec = spec
        self.M, self.K = make_classifier(spec, dtype)

    @property
    def mode(self) -> str:
        return self.spec.mode

    @property
    def trainable(self) -> bool:
        return self.mode == FeedbackMode.TRAINABLE

    @property
    def num_classes(self) -> int:
        return self.M.shape[0]

    @property
    def tap_width(self) -> int:
        return self.M.shape[1]

    def params(self) -> Dict[str, np.ndarray]:
        return {'M': self.M} if self.trainable else {}

    def refresh_feedback(self) -> None:
        self.K = transpose(self.M)

    def checksums(self) -> Dict[str, str]:
        return {'M': checksum(self.M), 'K': checksum(self.K)}


def feedback_backward_weights(B: np.ndarray) -> np.ndarray:
    """Lay a fixed feedback tensor out like the forward weight it stands in for."""
    if B.ndim == 2:
        return np.ascontiguousarray(B.T)
    return np.ascontiguousarray(B.transpose(1, 0, 2, 3))


@dataclass
class TrainRule:
    kind: str
    loss_name: str = 'softmax_xent'
    classifiers: List[LocalClassifier] = field(default_factory=list)
    feedback: List[np.ndarray] = field(default_factory=list)
    feedback_seed: Optional[int] = None

    def __post_init__(self):
        self.loss: LossFn = get_loss(self.loss_name)
        self.backward_weights = [feedback_backward_weights(B) for B in self.feedback]

    @property
    def is_local(self) -> bool:
        return self.kind == RuleKind.LOCAL_ERROR

    @property
    def mode(self) -> Optional[str]:
        return self.classifiers[0].mode if self.classifiers else None

    def classifier_seeds(self) -> List[ClassifierSeed]:
        return [lc.spec for lc in self.classifiers]

    def fixed_checksums(self) -> Dict[str, str]:
        """Checksums of every tensor that must never change during training."""
        sums = {}
        for index, lc in enumerate(self.classifiers):
            if not lc.trainable:
                sums.update({f'classifier{index}.{k}': v for k, v in lc.checksums().items()})
        for index, B in enumerate(self.feedback):
            sums[f'feedback{index}'] = checksum(B)
        return sums

    def classifier_params(self) -> Dict[str, np.ndarray]:
        named = {}
        for index, lc in enumerate(self.classifiers):
            named.update({f'classifier{index}.{k}': v for k, v in lc.params().items()})
        return named


def classifier_seed_list(seeds: dict, count: int) -> List[int]:
    base = seeds['classifier']
    if isinstance(base, (list, tuple)):
        if len(base) != count:
            raise ArgumentError(f'Expected {count} classifier seeds, got {len(base)}')
        return [int(s) for s in base]
    return [derive_seed(base, index) for index in range(count)]


def build_rule(
    config: dict,
    network: Network,
    dtype=None,
    classifier_specs: Optional[Sequence[ClassifierSeed]] = None,
) -> TrainRule:
    rule_cfg = config['rule']
    kind = rule_cfg['kind']
    loss_name = rule_cfg.get('loss', 'softmax_xent')
    seeds = config['seeds']
    dtype = dtype or network.blocks[0].linear.b.dtype

    if kind == RuleKind.LOCAL_ERROR:
        if classifier_specs is None:
            mode = rule_cfg.get('mode', FeedbackMode.SYMMETRIC)
            seed_list = classifier_seed_list(seeds, len(network.blocks))
            classifier_specs = []
            for index, (block, seed) in enumerate(zip(network.blocks, seed_list)):
                k_seed = None
                if mode in (FeedbackMode.SIGN_CONCORDANT, FeedbackMode.FULLY_RANDOM_K):
                    k_seed = derive_seed(seeds['feedback'], index)
                classifier_specs.append(
                    ClassifierSeed(seed, network.num_classes, block.tap_width, mode, k_seed)
                )
        classifiers = []
        for block, spec in zip(network.blocks, classifier_specs):
            if spec.cols != block.tap_width or spec.rows != network.num_classes:
                raise DimensionError(
                    f'Classifier for {block.name} does not match its tap',
                    (spec.rows, spec.cols), (network.num_classes, block.tap_width),
                )
            classifiers.append(LocalClassifier(spec, dtype))
        logger.info(f'Local-error rule: {len(classifiers)} classifiers, mode {classifiers[0].mode}')
        return TrainRule(kind, loss_name, classifiers=classifiers)

    if kind == RuleKind.FEEDBACK_ALIGNMENT:
        feedback = make_fa_feedback(seeds['fa'], network.feedback_shapes(), dtype)
        return TrainRule(kind, loss_name, feedback=feedback, feedback_seed=seeds['fa'])

    if kind == RuleKind.BACKPROP:
        return TrainRule(kind, loss_name)
    raise ArgumentError(f'Unknown learning rule "{kind}"')


def local_classifier_forward(lc: LocalClassifier, y_tap: np.ndarray) -> np.ndarray:
    y_flat = flatten_rows(y_tap)
    if y_flat.shape[1] != lc.tap_width:
        raise DimensionError('Tap width does not match local classifier', y_flat.shape, lc.M.shape)
    return matmul(y_flat, lc.M.T)


def _count_classifier(block: Block, lc: LocalClassifier, batch: int, update: bool) -> None:
    if block.counter is None:
        return
    macs = lc.num_classes * lc.tap_width * batch
    if update:
        macs *= 2
        if lc.trainable:
            macs += lc.num_classes * lc.tap_width * batch
    block.counter.add(block.index, macs=macs)


def local_error_step(
    lc: LocalClassifier,
    block: Block,
    y_tap: np.ndarray,
    t: np.ndarray,
    loss: LossFn,
    optimizer,
) -> Tuple[float, np.ndarray]:
    """
    Update one block from its own classifier's error. Nothing propagates to
    any other block. Returns the batch loss and the classifier scores.
    """
    if block.z is None:
        raise StateError(f'{block.name}: local update needs a completed forward pass')
    y_flat = flatten_rows(y_tap)
    s = local_classifier_forward(lc, y_flat)
    value, e_s = loss(s, t)
    e_tap = e_s @ lc.K.T
    _, grads = block.backward(e_tap, propagate=False)
    params = block.params()
    if lc.trainable:
        params['classifier.M'] = lc.M
        grads['classifier.M'] = e_s.T @ y_flat
    _count_classifier(block, lc, y_flat.shape[0], update=True)
    optimizer.step(block.name, params, grads)
    if lc.trainable:
        lc.refresh_feedback()
    return value, s


def _global_step(
    network: Network,
    x: np.ndarray,
    t: np.ndarray,
    loss: LossFn,
    optimizer,
    backward_weights: Optional[List[np.ndarray]] = None,
    input_error: bool = False,
) -> Tuple[float, np.ndarray]:
    if network.output is None:
        raise StateError('Backprop and feedback alignment need a network with an output layer')
    h = network.prepare_input(x, training=True)
    for block in network.blocks:
        h = block.forward(h, training=True)
    s = network.output.forward(flatten_rows(h), activate=False)
    value, e_s = loss(s, t)

    top_weights = backward_weights[-1] if backward_weights else None
    e, output_grads = network.output.backward(e_s, top_weights)
    if network.counter is not None:
        network.counter.error_transfers += 1
    grads = {f'output.{k}': v for k, v in output_grads.items()}
    for index in reversed(range(len(network.blocks))):
        block = network.blocks[index]
        propagate = index > 0 or input_error
        weights = backward_weights[index - 1] if backward_weights and index > 0 else None
        e, block_grads = block.backward(e, weights, propagate)
        grads.update({f'{block.name}.{k}': v for k, v in block_grads.items()})
    optimizer.step('network', network.named_params(), grads)
    return value, s


def backprop_step(network, x, t, loss: LossFn, optimizer, input_error: bool = False) -> Tuple[float, np.ndarray]:
    return _global_step(network, x, t, loss, optimizer, input_error=input_error)


def feedback_alignment_step(
    network, backward_weights, x, t, loss: LossFn, optimizer, input_error: bool = False,
) -> Tuple[float, np.ndarray]:
    """Backprop with every transposed forward weight swapped for a fixed random tensor."""
    shapes = network.feedback_shapes()
    if len(backward_weights) != len(shapes):
        raise DimensionError(
            'Feedback tensors do not cover every boundary', (len(backward_weights),), (len(shapes),),
        )
    for weights, shape in zip(backward_weights, shapes):
        if weights.shape != tuple(shape):
            raise DimensionError('Feedback tensor does not match its boundary', weights.shape, shape)
    return _global_step(network, x, t, loss, optimizer, backward_weights, input_error)


def local_error_sweep(
    network: Network,
    rule: TrainRule,
    x: np.ndarray,
    t: np.ndarray,
    optimizer,
    executor: Optional[ThreadPoolExecutor] = None,
) -> List[Tuple[float, np.ndarray]]:
    """
    One forward sweep updating every block as soon as its tap exists. With an
    executor a block's update overlaps the next block's forward pass.
    """
    h = network.prepare_input(x, training=True)
    pending = []
    for block, lc in zip(network.blocks, rule.classifiers):
        h = block.forward(h, training=True)
        if executor is not None:
            pending.append(executor.submit(local_error_step, lc, block, h, t, rule.loss, optimizer))
        else:
            pending.append(local_error_step(lc, block, h, t, rule.loss, optimizer))
    if executor is not None:
        return [future.result() for future in pending]
    return pending


def rule_step(network: Network, rule: TrainRule, x, t, optimizer, executor=None, input_error: bool = False):
    """Apply the rule to one mini-batch; returns (loss, scores) per classifier."""
    if rule.is_local:
        return local_error_sweep(network, rule, x, t, optimizer, executor)
    if rule.kind == RuleKind.FEEDBACK_ALIGNMENT:
        return [feedback_alignment_step(network, rule.backward_weights, x, t, rule.loss, optimizer, input_error)]
    return [backprop_step(network, x, t, rule.loss, optimizer, input_error)]


def classifier_layer_numbers(network: Network, rule: TrainRule) -> List[int]:
    """1-based layer numbers of the classifiers a run reports on."""
    if rule.is_local:
        return list(range(1, len(network.blocks) + 1))
    return [len(network.blocks) + 1]


@dataclass
class EpochMetrics:
    epoch: int
    wall_s: float
    train_loss: float
    layer_losses: Dict[int, float]
    train_errors: Dict[int, float]
    test_errors: Dict[int, float] = field(default_factory=dict)
    val_errors: Dict[int, float] = field(default_factory=dict)


def _check_finite(network: Network, value: float) -> None:
    if np.isfinite(value):
        return
    layer = network.first_non_finite_layer() or 'classifier scores'
    logger.error(f'Non-finite loss {value}; first non-finite layer: {layer}')
    raise NumericalError(f'Loss became {value}; first non-finite layer: {layer}')


def train_epoch(
    network: Network,
    rule: TrainRule,
    dataset,
    optimizer,
    batch_size: int,
    epoch_seed: int,
    epoch: int = 1,
    pipelined: bool = False,
) -> EpochMetrics:
    if len(dataset) == 0:
        raise ArgumentError('Cannot train on an empty dataset')
    layers = classifier_layer_numbers(network, rule)
    loss_sums = dict.fromkeys(layers, 0.0)
    wrong = dict.fromkeys(layers, 0)
    seen = 0
    executor = None
    if pipelined and rule.is_local and network.counter is None:
        executor = ThreadPoolExecutor(max_workers=getattr(settings, 'LOCAL_UPDATE_WORKERS', 4))
    try:
        min_batch = 2 if network.has_batch_norm else 1
        for x, t in batches(dataset, batch_size, epoch_seed, min_batch=min_batch):
            results = rule_step(network, rule, x, t, optimizer, executor)
            for layer, (value, s) in zip(layers, results):
                _check_finite(network, value)
                loss_sums[layer] += value
                wrong[layer] += int((s.argmax(axis=1) != t).sum())
            seen += len(t)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    layer_losses = {layer: loss_sums[layer] / seen for layer in layers}
    return EpochMetrics(
        epoch=epoch,
        wall_s=0.0,
        train_loss=layer_losses[layers[-1]],
        layer_losses=layer_losses,
        train_errors={layer: 100.0 * wrong[layer] / seen for layer in layers},
    )


def forward_scores(
    network: Network,
    rule: TrainRule,
    x: np.ndarray,
    exit_layer: Optional[int] = None,
    all_layers: bool = True,
) -> Dict[int, np.ndarray]:
    """
    Inference-mode scores up to `exit_layer` (1-based): every local classifier
    on the way, or only the exit one when `all_layers` is off. Blocks above
    the exit layer are never evaluated.
    """
    layers = classifier_layer_numbers(network, rule)
    exit_layer = layers[-1] if exit_layer is None else exit_layer
    if exit_layer not in layers:
        raise ArgumentError(f'Exit layer {exit_layer} is not a classifier layer; choose from {layers}')
    h = network.prepare_input(x, training=False)
    scores = {}
    if rule.is_local:
        for block, lc in zip(network.blocks[:exit_layer], rule.classifiers):
            h = block.forward(h, training=False)
            if all_layers or block.index + 1 == exit_layer:
                scores[block.index + 1] = local_classifier_forward(lc, h)
                _count_classifier(block, lc, x.shape[0], update=False)
        return scores
    for block in network.blocks:
        h = block.forward(h, training=False)
    flat = flatten_rows(h)
    scores[exit_layer] = network.output.forward(flat, activate=False)
    if network.counter is not None:
        network.counter.add(len(network.blocks), macs=network.output.forward_macs(flat.shape[0]))
    return scores


def evaluate(
    network: Network,
    rule: TrainRule,
    dataset,
    batch_size: int,
    exit_layer: Optional[int] = None,
    all_layers: bool = True,
) -> Dict[int, float]:
    """Error percentage per classifier, see `forward_scores`."""
    if len(dataset) == 0:
        raise ArgumentError('Cannot evaluate on an empty dataset')
    wrong: Dict[int, int] = {}
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start:start + batch_size]
        t = dataset.labels[start:start + batch_size]
        for layer, s in forward_scores(network, rule, x, exit_layer, all_layers).items():
            wrong[layer] = wrong.get(layer, 0) + int((s.argmax(axis=1) != t).sum())
    return {layer: 100.0 * count / len(dataset) for layer, count in sorted(wrong.items())}
