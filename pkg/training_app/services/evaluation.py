"""
Checkpoint evaluation with optional early exit.

Inference runs up to the requested classifier layer only; blocks above it are
never evaluated. The MAC count reported is what the counting hooks observed.
"""
import logging
from dataclasses import dataclass
from typing import Optional

from django.conf import settings

from ..checkpoints import load_checkpoint
from ..cost_model import CostCounter
from ..data_io import Dataset, load_splits
from ..exceptions import ArgumentError, ConfigError
from ..learning_rules import classifier_layer_numbers, evaluate

logger = logging.getLogger(__name__)


@dataclass
class EvaluationResult:
    exit_layer: int
    depth: int
    error: float
    macs: int
    examples: int
    split: str


def evaluate_checkpoint(
    checkpoint_path,
    split: str = 'test',
    exit_layer: Optional[int] = None,
    dataset: Optional[Dataset] = None,
    batch_size: Optional[int] = None,
) -> EvaluationResult:
    network, rule, manifest = load_checkpoint(checkpoint_path, counting=True)
    layers = classifier_layer_numbers(network, rule)
    if exit_layer is not None and exit_layer not in layers:
        raise ArgumentError(
            f'Exit layer {exit_layer} is out of range; this network has classifier layers {layers}'
        )
    exit_layer = exit_layer or layers[-1]

    if dataset is None:
        data_cfg = manifest['config'].get('data')
        if not data_cfg:
            raise ConfigError('data: the checkpoint config has no data section')
        splits = load_splits(data_cfg, network.blocks[0].linear.b.dtype)
        if split not in splits:
            raise ConfigError(f'data: no {split} split configured')
        dataset = splits[split]

    counter = CostCounter()
    network.attach_counter(counter)
    try:
        errors = evaluate(
            network, rule, dataset,
            batch_size or getattr(settings, 'EVAL_BATCH_SIZE', 500),
            exit_layer=exit_layer,
            all_layers=False,
        )
    finally:
        network.detach_counter()
    result = EvaluationResult(
        exit_layer=exit_layer,
        depth=layers[-1],
        error=errors[exit_layer],
        macs=int(counter.macs),
        examples=len(dataset),
        split=dataset.split,
    )
    logger.info(
        f'Evaluated {checkpoint_path} on {result.examples} {result.split} examples: '
        f'exit layer {exit_layer}, error {result.error:.2f}%, {result.macs} MACs'
    )
    return result
