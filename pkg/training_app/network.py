"""
Layer stack assembly.

A network is an optional input dropout followed by hidden blocks. Each block
runs linear (dense or conv) -> [batch norm] -> ReLU -> [max-pool] -> [dropout];
its output is the tap a local classifier reads. Networks trained with
backpropagation or feedback alignment add a linear output layer on top.
"""
import logging
from collections import OrderedDict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.db import models

from .exceptions import DimensionError, StateError
from .layers import (
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    DropoutLayer,
    MaxPoolLayer,
    conv_output_shape,
    pool_output_shape,
    relu,
    relu_deriv,
)
from .randgen import derive_seed
from .tensor import default_dtype, first_non_finite, flatten_rows

logger = logging.getLogger(__name__)


class LayerType(models.TextChoices):
    DENSE = 'dense', 'Fully connected'
    CONV = 'conv', 'Convolutional'


def layer_output_shape(in_shape: Sequence[int], spec: dict) -> Tuple[int, ...]:
    """Shape of a block's tap for one layer spec, without building the layer."""
    if spec['type'] == LayerType.DENSE:
        return (int(spec['units']),)
    if len(in_shape) != 3:
        raise DimensionError('Conv layer needs a C x H x W input', tuple(in_shape))
    shape = conv_output_shape(in_shape, spec['filters'], spec['kernel'], spec.get('stride', 1), spec.get('padding', 0))
    pool = spec.get('pool')
    if pool:
        shape = pool_output_shape(shape, pool['window'], pool['stride'])
    return shape


class Block:
    def __init__(
        self,
        index: int,
        linear,
        in_shape: Sequence[int],
        out_shape: Sequence[int],
        bn: Optional[BatchNormLayer] = None,
        pool: Optional[MaxPoolLayer] = None,
        dropout: Optional[DropoutLayer] = None,
    ):
        self.index = index
        self.linear = linear
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.bn = bn
        self.pool = pool
        self.dropout = dropout
        self.z: Optional[np.ndarray] = None
        self.counter = None
        self.stash_activations = False

    @property
    def name(self) -> str:
        return f'block{self.index}'

    @property
    def is_conv(self) -> bool:
        return isinstance(self.linear, ConvLayer)

    @property
    def input_width(self) -> int:
        return int(np.prod(self.in_shape))

    @property
    def tap_width(self) -> int:
        return int(np.prod(self.out_shape))

    def params(self) -> Dict[str, np.ndarray]:
        params = {f'linear.{k}': v for k, v in self.linear.params().items()}
        if self.bn is not None:
            params.update({f'bn.{k}': v for k, v in self.bn.params().items()})
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        if self.bn is None:
            return {}
        return {f'bn.{k}': v for k, v in self.bn.buffers().items()}

    @property
    def param_words(self) -> int:
        return sum(p.size for p in self.params().values())

    def _linear_macs(self, batch: int) -> int:
        if self.is_conv:
            return self.linear.forward_macs(batch, self.in_shape)
        return self.linear.forward_macs(batch)

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        batch = x.shape[0]
        if not self.is_conv and x.ndim > 2:
            x = flatten_rows(x)
        z = self.linear.forward(x, activate=False)
        if self.bn is not None:
            z = self.bn.forward(z, training)
        self.z = z
        y = relu(z)
        if self.pool is not None:
            y = self.pool.forward(y)
        if self.dropout is not None:
            y = self.dropout.forward(y, training)
        if self.counter is not None:
            self.counter.add(
                self.index,
                reads=self.param_words,
                writes=x.size if self.stash_activations else 0,
                macs=self._linear_macs(batch),
            )
        return y

    def backward(
        self,
        e_out: np.ndarray,
        backward_weights: Optional[np.ndarray] = None,
        propagate: bool = True,
    ) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
        """
        Reverse the block from its output (the tap) to its input.

        The error passes back through the dropout mask, the pool's argmax
        routing, f'(z) and batch norm before reaching the linear layer.
        """
        if self.z is None:
            raise StateError(f'{self.name}: backward called before forward')
        batch = self.z.shape[0]
        e = e_out.reshape((batch,) + self.out_shape)
        if self.dropout is not None:
            e = self.dropout.backward(e)
        if self.pool is not None:
            e = self.pool.backward(e)
        e = e * relu_deriv(self.z)
        grads: Dict[str, np.ndarray] = {}
        if self.bn is not None:
            e, grad_gamma, grad_beta = self.bn.backward(e)
            grads['bn.gamma'] = grad_gamma
            if self.bn.shift:
                grads['bn.beta'] = grad_beta
        e_x, linear_grads = self.linear.backward(e, backward_weights, propagate)
        grads.update({f'linear.{k}': v for k, v in linear_grads.items()})
        if e_x is not None:
            e_x = e_x.reshape((batch,) + self.in_shape)
        if self.counter is not None:
            macs = self._linear_macs(batch) * (2 if propagate else 1)
            stash_reads = self.param_words + batch * self.input_width if self.stash_activations else 0
            self.counter.add(self.index, reads=stash_reads, writes=self.param_words, macs=macs)
            if propagate:
                self.counter.error_transfers += 1
        return e_x, grads


class Network:
    def __init__(
        self,
        input_shape: Sequence[int],
        blocks: List[Block],
        num_classes: int,
        input_dropout: Optional[DropoutLayer] = None,
        output: Optional[DenseLayer] = None,
    ):
        self.input_shape = tuple(input_shape)
        self.blocks = blocks
        self.num_classes = num_classes
        self.input_dropout = input_dropout
        self.output = output
        self.counting_enabled = False
        self.counter = None

    @property
    def depth(self) -> int:
        """Number of classifier layers: hidden blocks, plus the output layer if present."""
        return len(self.blocks) + (1 if self.output is not None else 0)

    @property
    def has_batch_norm(self) -> bool:
        return any(block.bn is not None for block in self.blocks)

    def enable_counting(self) -> None:
        self.counting_enabled = True

    def attach_counter(self, counter, stash_activations: bool = False) -> None:
        if not self.counting_enabled:
            raise StateError('Cost counting hooks are disabled for this network')
        self.counter = counter
        for block in self.blocks:
            block.counter = counter
            block.stash_activations = stash_activations

    def detach_counter(self) -> None:
        self.counter = None
        for block in self.blocks:
            block.counter = None
            block.stash_activations = False

    def prepare_input(self, x: np.ndarray, training: bool) -> np.ndarray:
        x = x.reshape((x.shape[0],) + self.input_shape)
        if self.input_dropout is not None:
            x = self.input_dropout.forward(x, training)
        return x

    def named_params(self) -> 'OrderedDict[str, np.ndarray]':
        named = OrderedDict()
        for block in self.blocks:
            for key, value in block.params().items():
                named[f'{block.name}.{key}'] = value
        if self.output is not None:
            for key, value in self.output.params().items():
                named[f'output.{key}'] = value
        return named

    def named_buffers(self) -> 'OrderedDict[str, np.ndarray]':
        named = OrderedDict()
        for block in self.blocks:
            for key, value in block.buffers().items():
                named[f'{block.name}.{key}'] = value
        return named

    def feedback_shapes(self) -> List[Tuple[int, ...]]:
        """Forward weight shapes of every boundary that errors cross going down."""
        shapes = []
        for block in self.blocks[1:]:
            weight = block.linear.kernels if block.is_conv else block.linear.W
            shapes.append(weight.shape)
        if self.output is not None:
            shapes.append(self.output.W.shape)
        return shapes

    def first_non_finite_layer(self) -> Optional[str]:
        name = first_non_finite(self.named_params())
        if name is None:
            for block in self.blocks:
                if block.z is not None and not np.all(np.isfinite(block.z)):
                    return f'{block.name} (pre-activations)'
        return name


def build_network(config: dict, counting: bool = False, dtype=None) -> Network:
    """
    Build a network from a validated run config. Backprop and feedback
    alignment runs get a linear output layer; local-error runs do not.
    """
    dtype = np.dtype(dtype or config.get('dtype') or default_dtype())
    net_cfg = config['network']
    seeds = config['seeds']
    init_seed, dropout_seed = seeds['init'], seeds['dropout']
    shape = tuple(net_cfg['input_shape'])
    num_classes = net_cfg['num_classes']
    shift = net_cfg.get('batch_norm_shift', True)

    input_dropout = None
    if net_cfg.get('input_dropout', 0.0) > 0:
        input_dropout = DropoutLayer(net_cfg['input_dropout'], derive_seed(dropout_seed, 0))

    blocks = []
    for index, spec in enumerate(net_cfg['layers']):
        layer_seed = derive_seed(init_seed, index)
        out_shape = layer_output_shape(shape, spec)
        pool = None
        if spec['type'] == LayerType.CONV:
            linear = ConvLayer.glorot(
                layer_seed, shape[0], spec['filters'], spec['kernel'],
                stride=spec.get('stride', 1), padding=spec.get('padding', 0), dtype=dtype,
            )
            if spec.get('pool'):
                pool = MaxPoolLayer(spec['pool']['window'], spec['pool']['stride'])
            features = spec['filters']
        else:
            linear = DenseLayer.glorot(layer_seed, int(np.prod(shape)), spec['units'], dtype=dtype)
            features = spec['units']
        bn = BatchNormLayer(features, shift=shift, dtype=dtype) if spec.get('batch_norm') else None
        dropout = None
        if spec.get('dropout', 0.0) > 0:
            dropout = DropoutLayer(spec['dropout'], derive_seed(dropout_seed, index + 1))
        blocks.append(Block(index, linear, shape, out_shape, bn=bn, pool=pool, dropout=dropout))
        shape = out_shape

    output = None
    if config['rule']['kind'] != 'local_error':
        output = DenseLayer.glorot(
            derive_seed(init_seed, len(blocks)), int(np.prod(shape)), num_classes, dtype=dtype,
        )

    network = Network(net_cfg['input_shape'], blocks, num_classes, input_dropout=input_dropout, output=output)
    if counting:
        network.enable_counting()
    logger.info(
        f'Built network: {len(blocks)} blocks, '
        f'{sum(p.size for p in network.named_params().values())} trainable words, dtype {dtype}'
    )
    return network
