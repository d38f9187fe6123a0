"""
Training run orchestration.

A run builds the network and learning rule from a validated config, trains for
the configured epochs, appends one metrics CSV row per epoch and writes a final
checkpoint. Every source of randomness comes from the config's seeds.
"""
import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from django.conf import settings

from ..checkpoints import save_checkpoint
from ..data_io import Dataset, load_splits
from ..exceptions import ConfigError, ConsistencyError
from ..learning_rules import EpochMetrics, build_rule, classifier_layer_numbers, evaluate, train_epoch
from ..network import build_network
from ..optim import Adam
from ..randgen import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class TrainingResult:
    out_dir: Path
    metrics_path: Path
    checkpoint_path: Path
    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def final_test_errors(self) -> Dict[int, float]:
        return self.epochs[-1].test_errors if self.epochs else {}


def metrics_header(layers: List[int], with_validation: bool) -> List[str]:
    header = ['epoch', 'wall_s', 'train_loss'] + [f'err_layer_{k}' for k in layers]
    if with_validation:
        header += [f'val_err_layer_{k}' for k in layers]
    return header


def metrics_row(metrics: EpochMetrics, layers: List[int], with_validation: bool) -> List[str]:
    row = [str(metrics.epoch), f'{metrics.wall_s:.3f}', f'{metrics.train_loss:.6f}']
    row += [f'{metrics.test_errors[k]:.4f}' for k in layers]
    if with_validation:
        row += [f'{metrics.val_errors[k]:.4f}' for k in layers]
    return row


class TrainingService:
    def __init__(self, config: dict, out_dir=None, deterministic: Optional[bool] = None):
        self.config = config
        output = config.get('output') or {}
        default_dir = Path(getattr(settings, 'TRAINING_OUTPUT_DIR', 'runs')) / config.get('name', 'run')
        self.out_dir = Path(out_dir or output.get('dir') or default_dir)
        self.metrics_path = self.out_dir / output.get('metrics', 'metrics.csv')
        self.checkpoint_path = self.out_dir / output.get('checkpoint', 'checkpoint.llt')
        if deterministic is None:
            deterministic = config.get('deterministic', getattr(settings, 'DETERMINISTIC', True))
        self.deterministic = deterministic
        self.eval_batch_size = getattr(settings, 'EVAL_BATCH_SIZE', 500)

    def _datasets(self, datasets: Optional[Dict[str, Dataset]], dtype) -> Dict[str, Dataset]:
        if datasets is None:
            if not self.config.get('data'):
                raise ConfigError('data: training needs a data section')
            datasets = load_splits(self.config['data'], dtype)
        for split in ('train', 'test'):
            if split not in datasets:
                raise ConfigError(f'data: training needs a {split} split')
        width = int(np.prod(self.config['network']['input_shape']))
        for split, dataset in datasets.items():
            if int(np.prod(dataset.images.shape[1:])) != width:
                raise ConsistencyError(
                    f'{split} images have shape {dataset.images.shape[1:]}, '
                    f'network expects {self.config["network"]["input_shape"]}'
                )
            if dataset.num_classes > self.config['network']['num_classes']:
                raise ConsistencyError(
                    f'{split} data has {dataset.num_classes} classes, '
                    f'network has {self.config["network"]["num_classes"]}'
                )
        return datasets

    def run(self, datasets: Optional[Dict[str, Dataset]] = None) -> TrainingResult:
        config = self.config
        network = build_network(config)
        dtype = network.blocks[0].linear.b.dtype
        datasets = self._datasets(datasets, dtype)
        rule = build_rule(config, network)
        optimizer = Adam(**config.get('adam', {}))
        layers = classifier_layer_numbers(network, rule)
        validation = datasets.get('validation')

        self.out_dir.mkdir(parents=True, exist_ok=True)
        result = TrainingResult(self.out_dir, self.metrics_path, self.checkpoint_path)
        logger.info(
            f'Training {config.get("name")}: rule {rule.kind}, {config["epochs"]} epochs, '
            f'{len(datasets["train"])} training examples, deterministic={self.deterministic}'
        )
        with open(self.metrics_path, 'w', newline='') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(metrics_header(layers, validation is not None))
            fh.flush()
            for epoch in range(1, config['epochs'] + 1):
                started = time.perf_counter()
                metrics = train_epoch(
                    network, rule, datasets['train'], optimizer,
                    batch_size=config['batch_size'],
                    epoch_seed=derive_seed(config['seeds']['shuffle'], epoch),
                    epoch=epoch,
                    pipelined=not self.deterministic,
                )
                metrics.test_errors = evaluate(network, rule, datasets['test'], self.eval_batch_size)
                if validation is not None:
                    metrics.val_errors = evaluate(network, rule, validation, self.eval_batch_size)
                metrics.wall_s = time.perf_counter() - started
                writer.writerow(metrics_row(metrics, layers, validation is not None))
                fh.flush()
                result.epochs.append(metrics)
                logger.info(
                    f'Epoch {epoch}/{config["epochs"]}: loss {metrics.train_loss:.4f}, '
                    f'test error {metrics.test_errors[layers[-1]]:.2f}% (layer {layers[-1]}), '
                    f'{metrics.wall_s:.1f}s'
                )

        save_checkpoint(self.checkpoint_path, network, rule, config, epoch=config['epochs'])
        return result


def run_training(config: dict, out_dir=None, deterministic: Optional[bool] = None,
                 datasets: Optional[Dict[str, Dataset]] = None) -> TrainingResult:
    return TrainingService(config, out_dir, deterministic).run(datasets)
