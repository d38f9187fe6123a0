import json
from fractions import Fraction
from pathlib import Path

from django.conf import settings
from rest_framework import serializers

from .exceptions import ConfigError, DimensionError
from .learning_rules import RuleKind
from .network import LayerType, layer_output_shape
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, ADAM_LR, LOSSES
from .randgen import MASK64, FeedbackMode
from .services.gradcheck import CHECKS
from .tensor import DTYPES


class SeedField(serializers.Field):
    """64-bit seed given as a JSON integer or a decimal / 0x-hex string."""

    default_error_messages = {
        'invalid': 'Seed must be an integer or a decimal/hex string.',
        'range': 'Seed must lie in [0, 2^64).',
    }

    def to_internal_value(self, data):
        if isinstance(data, bool):
            self.fail('invalid')
        if isinstance(data, str):
            text = data.strip().lower()
            try:
                data = int(text, 16) if text.startswith('0x') else int(text, 10)
            except ValueError:
                self.fail('invalid')
        if not isinstance(data, int):
            self.fail('invalid')
        if not 0 <= data <= MASK64:
            self.fail('range')
        return data

    def to_representation(self, value):
        return int(value)


class ClassifierSeedsField(serializers.Field):
    """One base seed (per-layer seeds derived from it) or an explicit per-layer list."""

    def to_internal_value(self, data):
        seed_field = SeedField()
        if isinstance(data, list):
            if not data:
                raise serializers.ValidationError('Classifier seed list cannot be empty.')
            return [seed_field.to_internal_value(item) for item in data]
        return seed_field.to_internal_value(data)

    def to_representation(self, value):
        return value


class PairField(serializers.Field):
    """Positive int or [h, w] pair."""

    def to_internal_value(self, data):
        values = data if isinstance(data, list) else [data, data]
        if len(values) != 2 or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 1 for v in values):
            raise serializers.ValidationError('Expected a positive integer or a pair of positive integers.')
        return values[0] if values[0] == values[1] else list(values)

    def to_representation(self, value):
        return value


class PaddingField(serializers.Field):
    """Non-negative int, "valid" (0) or "same" (resolved against the kernel)."""

    def to_internal_value(self, data):
        if data in ('valid', 'same'):
            return data
        if isinstance(data, int) and not isinstance(data, bool) and data >= 0:
            return data
        raise serializers.ValidationError('Padding must be a non-negative integer, "valid" or "same".')

    def to_representation(self, value):
        return value


class PoolSerializer(serializers.Serializer):
    window = PairField()
    stride = serializers.IntegerField(min_value=1)


class LayerSerializer(serializers.Serializer):
    type = serializers.ChoiceField(choices=LayerType.choices)
    units = serializers.IntegerField(min_value=1, required=False)
    filters = serializers.IntegerField(min_value=1, required=False)
    kernel = PairField(required=False)
    stride = serializers.IntegerField(min_value=1, default=1)
    padding = PaddingField(default=0)
    pool = PoolSerializer(required=False, allow_null=True, default=None)
    batch_norm = serializers.BooleanField(default=False)
    dropout = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.0)

    def validate_dropout(self, value):
        if value >= 1.0:
            raise serializers.ValidationError('Dropout probability must be below 1.')
        return value

    def validate(self, attrs):
        if attrs['type'] == LayerType.DENSE:
            if 'units' not in attrs:
                raise serializers.ValidationError({'units': 'Dense layers need a unit count.'})
            if attrs.get('pool'):
                raise serializers.ValidationError({'pool': 'Pooling applies to conv layers only.'})
            return attrs
        errors = {}
        for key in ('filters', 'kernel'):
            if key not in attrs:
                errors[key] = 'Conv layers need this field.'
        if errors:
            raise serializers.ValidationError(errors)
        padding = attrs['padding']
        if padding == 'valid':
            attrs['padding'] = 0
        elif padding == 'same':
            kernel = attrs['kernel']
            if isinstance(kernel, list) or kernel % 2 == 0 or attrs['stride'] != 1:
                raise serializers.ValidationError(
                    {'padding': '"same" padding needs an odd square kernel and stride 1.'}
                )
            attrs['padding'] = kernel // 2
        return attrs


class NetworkSerializer(serializers.Serializer):
    input_shape = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1, max_length=3)
    num_classes = serializers.IntegerField(min_value=2)
    input_dropout = serializers.FloatField(min_value=0.0, max_value=0.99, default=0.0)
    batch_norm_shift = serializers.BooleanField(default=True)
    layers = LayerSerializer(many=True, allow_empty=False)

    def validate(self, attrs):
        shape = tuple(attrs['input_shape'])
        errors = {}
        for index, layer in enumerate(attrs['layers']):
            if layer['type'] == LayerType.CONV and len(shape) != 3:
                errors[f'layers.{index}'] = f'Conv layer needs a C x H x W input, got {list(shape)}.'
                break
            try:
                shape = layer_output_shape(shape, layer)
            except DimensionError as e:
                errors[f'layers.{index}'] = str(e)
                break
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class RuleSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=RuleKind.choices)
    mode = serializers.ChoiceField(choices=FeedbackMode.choices, default=FeedbackMode.SYMMETRIC)
    loss = serializers.ChoiceField(choices=sorted(LOSSES), default='softmax_xent')


class SeedsSerializer(serializers.Serializer):
    init = SeedField()
    dropout = SeedField()
    shuffle = SeedField()
    classifier = ClassifierSeedsField(required=False)
    feedback = SeedField(required=False)
    fa = SeedField(required=False)


class AdamSerializer(serializers.Serializer):
    lr = serializers.FloatField(min_value=0.0, default=ADAM_LR)
    beta1 = serializers.FloatField(min_value=0.0, max_value=0.999999, default=ADAM_BETA1)
    beta2 = serializers.FloatField(min_value=0.0, max_value=0.999999999, default=ADAM_BETA2)
    eps = serializers.FloatField(min_value=0.0, default=ADAM_EPS)


class DataSerializer(serializers.Serializer):
    format = serializers.ChoiceField(choices=['idx', 'cifar10', 'llt1'], default='idx')
    num_classes = serializers.IntegerField(min_value=2, default=10)
    train_images = serializers.CharField(required=False)
    train_labels = serializers.CharField(required=False)
    test_images = serializers.CharField(required=False)
    test_labels = serializers.CharField(required=False)
    train_files = serializers.ListField(child=serializers.CharField(), required=False)
    test_files = serializers.ListField(child=serializers.CharField(), required=False)
    validation_size = serializers.IntegerField(min_value=0, default=0)
    train_limit = serializers.IntegerField(min_value=1, required=False)
    test_limit = serializers.IntegerField(min_value=1, required=False)

    def validate(self, attrs):
        if attrs['format'] == 'cifar10':
            if not attrs.get('train_files'):
                raise serializers.ValidationError({'train_files': 'CIFAR-10 runs need training batch files.'})
            return attrs
        errors = {}
        for split in ('train', 'test'):
            images, labels = attrs.get(f'{split}_images'), attrs.get(f'{split}_labels')
            if split == 'train' and not images:
                errors['train_images'] = 'This field is required.'
            if images and not labels:
                errors[f'{split}_labels'] = f'Needed alongside {split}_images.'
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


class OutputSerializer(serializers.Serializer):
    dir = serializers.CharField(required=False)
    metrics = serializers.CharField(default='metrics.csv')
    checkpoint = serializers.CharField(default='checkpoint.llt')


class CostLayerSerializer(serializers.Serializer):
    P = serializers.IntegerField(min_value=0)
    A = serializers.IntegerField(min_value=1)
    R = serializers.CharField()

    def validate_R(self, value):
        try:
            fanout = Fraction(value)
        except (ValueError, ZeroDivisionError):
            raise serializers.ValidationError('Fan-out must be a number or a fraction like "75/4".')
        if fanout < 0:
            raise serializers.ValidationError('Fan-out must be non-negative.')
        return str(fanout)

    def to_internal_value(self, data):
        if isinstance(data, dict) and isinstance(data.get('R'), (int, float)) and not isinstance(data.get('R'), bool):
            data = {**data, 'R': str(data['R'])}
        return super().to_internal_value(data)


class CostSerializer(serializers.Serializer):
    epochs = serializers.IntegerField(min_value=1, required=False)
    batches = serializers.IntegerField(min_value=1, required=False)
    train_size = serializers.IntegerField(min_value=1, required=False)
    num_classes = serializers.IntegerField(min_value=0, required=False)
    layers = CostLayerSerializer(many=True, required=False)


class RunConfigSerializer(serializers.Serializer):
    name = serializers.CharField(default='run')
    dtype = serializers.ChoiceField(choices=sorted(DTYPES), required=False)
    network = NetworkSerializer()
    rule = RuleSerializer()
    seeds = SeedsSerializer()
    adam = AdamSerializer(required=False)
    epochs = serializers.IntegerField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    deterministic = serializers.BooleanField(required=False)
    data = DataSerializer(required=False)
    output = OutputSerializer(required=False)
    cost = CostSerializer(required=False)

    def validate(self, attrs):
        errors = {}
        rule, seeds = attrs['rule'], attrs['seeds']
        layers = attrs['network']['layers']
        if rule['kind'] == RuleKind.LOCAL_ERROR:
            classifier = seeds.get('classifier')
            if classifier is None:
                errors['seeds.classifier'] = 'Local-error runs need classifier seeds.'
            elif isinstance(classifier, list) and len(classifier) != len(layers):
                errors['seeds.classifier'] = f'Expected {len(layers)} seeds (one per layer), got {len(classifier)}.'
            if rule['mode'] in (FeedbackMode.SIGN_CONCORDANT, FeedbackMode.FULLY_RANDOM_K) and 'feedback' not in seeds:
                errors['seeds.feedback'] = f'Mode {rule["mode"]} needs a feedback seed for K.'
        elif rule['mode'] != FeedbackMode.SYMMETRIC:
            errors['rule.mode'] = 'Feedback modes apply to local-error runs only.'
        if rule['kind'] == RuleKind.FEEDBACK_ALIGNMENT and 'fa' not in seeds:
            errors['seeds.fa'] = 'Feedback-alignment runs need an fa seed.'
        if attrs['batch_size'] < 2 and any(layer['batch_norm'] for layer in layers):
            errors['batch_size'] = 'Batch normalization needs a batch size of at least 2.'
        if errors:
            raise serializers.ValidationError(errors)
        attrs.setdefault('adam', dict(AdamSerializer().to_internal_value({})))
        attrs.setdefault('output', dict(OutputSerializer().to_internal_value({})))
        attrs.setdefault('deterministic', getattr(settings, 'DETERMINISTIC', True))
        return attrs


class GradcheckConfigSerializer(serializers.Serializer):
    seed = SeedField(default=0)
    batch_size = serializers.IntegerField(min_value=2, max_value=16, default=3)
    epsilon = serializers.FloatField(min_value=1e-9, max_value=1e-2, default=1e-6)
    tolerance = serializers.FloatField(min_value=0.0, required=False)
    checks = serializers.ListField(
        child=serializers.ChoiceField(choices=CHECKS), required=False, allow_empty=False,
    )

    def validate(self, attrs):
        attrs.setdefault('tolerance', getattr(settings, 'GRADCHECK_TOLERANCE', 1e-4))
        attrs.setdefault('checks', list(CHECKS))
        return attrs


def flatten_errors(detail, prefix=''):
    """DRF error detail -> ["dotted.key.path: message", ...]."""
    if isinstance(detail, dict):
        messages = []
        for key, value in detail.items():
            path = prefix if key == 'non_field_errors' else (f'{prefix}.{key}' if prefix else str(key))
            messages.extend(flatten_errors(value, path))
        return messages
    if isinstance(detail, list):
        if all(not isinstance(item, (dict, list)) for item in detail):
            return [f'{prefix or "config"}: {item}' for item in detail]
        messages = []
        for index, item in enumerate(detail):
            if item:
                messages.extend(flatten_errors(item, f'{prefix}.{index}' if prefix else str(index)))
        return messages
    return [f'{prefix or "config"}: {detail}']


def _plain(value):
    return json.loads(json.dumps(value))


def parse_run_config(data: dict) -> dict:
    serializer = RunConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError(flatten_errors(serializer.errors))
    return _plain(serializer.validated_data)


def parse_gradcheck_config(data: dict) -> dict:
    serializer = GradcheckConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError(flatten_errors(serializer.errors))
    return _plain(serializer.validated_data)


def read_json(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f'config: file not found: {path}') from None
    except json.JSONDecodeError as e:
        raise ConfigError(f'config: {path} is not valid JSON ({e.msg} at line {e.lineno})') from None
    if not isinstance(data, dict):
        raise ConfigError(f'config: {path} must hold a JSON object')
    return data


def load_run_config(path) -> dict:
    return parse_run_config(read_json(path))
