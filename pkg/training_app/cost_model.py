"""
Memory-traffic and MAC accounting for one training run.

Analytic reports follow the closed-form per-layer totals for backpropagation
and local-error learning; `instrument_run` counts the same quantities while a
real training step executes, so the two can be compared word for word.

Per cost layer i: P is the trainable word count, A the mini-batch activation
word count at the layer's input and R the fan-out (outgoing projections per
neuron, border effects ignored).
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import ArgumentError, StateError
from .learning_rules import RuleKind, TrainRule, rule_step
from .network import Network, build_network
from .optim import Adam

logger = logging.getLogger(__name__)

WORD_BITS = 32

Count = Union[int, Fraction]


@dataclass(frozen=True)
class LayerCostSpec:
    P: int
    A: int
    R: Count

    def __post_init__(self):
        if self.P < 0 or self.A < 1 or self.R < 0:
            raise ArgumentError(f'Invalid layer cost spec: P={self.P}, A={self.A}, R={self.R}')


@dataclass(frozen=True)
class RunCostSpec:
    layers: Tuple[LayerCostSpec, ...]
    num_classes: int
    epochs: int = 1
    batches: int = 1
    word_bits: int = WORD_BITS

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        if not self.layers:
            raise ArgumentError('A cost spec needs at least one layer')
        if self.epochs < 1 or self.batches < 1:
            raise ArgumentError(f'N_e and N_b must be >= 1, got {self.epochs} and {self.batches}')
        if self.num_classes < 0:
            raise ArgumentError(f'Class count must be >= 0, got {self.num_classes}')

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def steps(self) -> int:
        return self.epochs * self.batches

    @classmethod
    def from_lists(cls, P: Sequence[int], A: Sequence[int], R: Sequence[Count], num_classes: int,
                   epochs: int = 1, batches: int = 1) -> 'RunCostSpec':
        if not len(P) == len(A) == len(R):
            raise ArgumentError(f'P, A and R lists differ in length: {len(P)}, {len(A)}, {len(R)}')
        layers = tuple(LayerCostSpec(p, a, r) for p, a, r in zip(P, A, R))
        return cls(layers, num_classes, epochs, batches)


@dataclass
class LayerCost:
    layer: int
    reads: Count = 0
    writes: Count = 0
    macs: Count = 0


@dataclass
class CostReport:
    method: str
    layers: List[LayerCost] = field(default_factory=list)
    error_transfers: int = 0

    @property
    def reads(self) -> Count:
        return sum(layer.reads for layer in self.layers)

    @property
    def writes(self) -> Count:
        return sum(layer.writes for layer in self.layers)

    @property
    def macs(self) -> Count:
        return sum(layer.macs for layer in self.layers)

    def totals(self) -> Tuple[Count, Count, Count]:
        return self.reads, self.writes, self.macs

    def rows(self) -> Iterator[Tuple[str, str, str, str, str]]:
        """CSV rows: method,layer,reads,writes,macs then a TOTAL row."""
        for layer in self.layers:
            yield self.method, str(layer.layer), fmt_count(layer.reads), fmt_count(layer.writes), fmt_count(layer.macs)
        yield self.method, 'TOTAL', fmt_count(self.reads), fmt_count(self.writes), fmt_count(self.macs)


def fmt_count(value: Count) -> str:
    if isinstance(value, Fraction) and value.denominator != 1:
        return f'{float(value):.6g}'
    return str(int(value))


def cost_backprop(spec: RunCostSpec) -> CostReport:
    """Each layer: reads 2P + A, writes P + A, 3RA MACs (forward, update, error)."""
    steps = spec.steps
    layers = [
        LayerCost(
            index + 1,
            reads=steps * (2 * layer.P + layer.A),
            writes=steps * (layer.P + layer.A),
            macs=steps * 3 * layer.R * layer.A,
        )
        for index, layer in enumerate(spec.layers)
    ]
    return CostReport('backprop', layers)


def cost_local(spec: RunCostSpec) -> CostReport:
    """
    Each layer: P reads and P writes, (2R + 2C)A MACs. Classifier matrices are
    regenerated from their seeds so they add MACs but no memory traffic.
    """
    steps = spec.steps
    layers = [
        LayerCost(
            index + 1,
            reads=steps * layer.P,
            writes=steps * layer.P,
            macs=steps * (2 * layer.R + 2 * spec.num_classes) * layer.A,
        )
        for index, layer in enumerate(spec.layers)
    ]
    return CostReport('local_error', layers)


@dataclass(frozen=True)
class MacAdvantage:
    advantage: bool
    condition: bool
    margin: Count
    condition_margin: Count


def mac_advantage(spec: RunCostSpec) -> MacAdvantage:
    """
    `advantage` compares the two MAC totals exactly. `condition` is the
    closed-form test L * C < 0.5 * sum(R), which assumes every layer has the
    same A. Equality counts as no advantage for both.
    """
    local_macs = cost_local(spec).macs
    backprop_macs = cost_backprop(spec).macs
    half_fanout = Fraction(sum(Fraction(layer.R) for layer in spec.layers), 2)
    lc = spec.depth * spec.num_classes
    return MacAdvantage(
        advantage=local_macs < backprop_macs,
        condition=lc < half_fanout,
        margin=backprop_macs - local_macs,
        condition_margin=half_fanout - lc,
    )


class CostCounter:
    """Accumulates words read, words written and MACs per block."""

    def __init__(self):
        self.counts: Dict[int, List[Count]] = defaultdict(lambda: [0, 0, 0])
        self.error_transfers = 0

    def add(self, index: int, reads: Count = 0, writes: Count = 0, macs: Count = 0) -> None:
        entry = self.counts[index]
        entry[0] += reads
        entry[1] += writes
        entry[2] += macs

    @property
    def macs(self) -> Count:
        return sum(entry[2] for entry in self.counts.values())

    def report(self, method: str, scale: int = 1) -> CostReport:
        layers = [
            LayerCost(index + 1, scale * reads, scale * writes, scale * macs)
            for index, (reads, writes, macs) in sorted(self.counts.items())
        ]
        return CostReport(method, layers, scale * self.error_transfers)


def block_fanout(block) -> Count:
    if block.is_conv:
        kh, kw = block.linear.kernel_size
        return Fraction(block.linear.out_channels * kh * kw, block.linear.stride ** 2)
    return block.linear.out_features


def cost_spec_from_network(network: Network, batch_size: int, epochs: int = 1, batches: int = 1) -> RunCostSpec:
    layers = [
        LayerCostSpec(P=block.param_words, A=batch_size * block.input_width, R=block_fanout(block))
        for block in network.blocks
    ]
    return RunCostSpec(tuple(layers), network.num_classes, epochs, batches)


def cost_spec_from_config(config: dict) -> RunCostSpec:
    """
    Cost spec for a run config. An explicit `cost.layers` list wins; otherwise
    the spec is derived from the network description and the dataset shape.
    """
    cost = config.get('cost') or {}
    epochs = cost.get('epochs') or max(config['epochs'], 1)
    if cost.get('layers'):
        layers = tuple(LayerCostSpec(entry['P'], entry['A'], Fraction(entry['R'])) for entry in cost['layers'])
        num_classes = cost.get('num_classes', config['network']['num_classes'])
        return RunCostSpec(layers, num_classes, epochs, cost.get('batches') or 1)
    network = build_network(config)
    batches = cost.get('batches')
    if not batches:
        train_size = cost.get('train_size')
        if not train_size:
            raise ArgumentError('Cost analysis needs cost.batches, cost.train_size or explicit cost.layers')
        batch_size = config['batch_size']
        batches = -(-train_size // batch_size)
        if network.has_batch_norm and batches > 1 and train_size % batch_size == 1:
            # a trailing one-example batch is folded into the one before it
            batches -= 1
    return cost_spec_from_network(network, config['batch_size'], epochs, batches)


def instrument_run(
    network: Network,
    rule: TrainRule,
    x: np.ndarray,
    t: np.ndarray,
    epochs: int = 1,
    batches: int = 1,
    optimizer=None,
) -> CostReport:
    """
    Run one real training step with the counting hooks attached and scale the
    counts to the whole run. Global rules also compute the input-layer error.
    """
    if not network.counting_enabled:
        raise StateError('instrument_run needs a network built with counting hooks enabled')
    counter = CostCounter()
    network.attach_counter(counter, stash_activations=not rule.is_local)
    try:
        rule_step(network, rule, x, t, optimizer or Adam(), input_error=True)
    finally:
        network.detach_counter()
    method = 'local_error' if rule.kind == RuleKind.LOCAL_ERROR else 'backprop'
    report = counter.report(f'instrumented_{method}', scale=epochs * batches)
    logger.debug(
        f'Instrumented {rule.kind} step: reads {report.reads}, writes {report.writes}, '
        f'macs {report.macs}, error transfers {report.error_transfers}'
    )
    return report
