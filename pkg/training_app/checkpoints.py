"""
Checkpoint container.

Layout: one LLT1/LLD1 tensor record per trainable parameter and batch-norm
buffer, then a UTF-8 JSON manifest, its length as a little-endian u64 and the
footer magic LLTM. Fixed classifier and feedback matrices are never stored;
the manifest keeps their seeds and checksums and they are regenerated on load.
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .data_io import read_tensor_record, write_tensor_record
from .exceptions import ConsistencyError, FormatError
from .learning_rules import TrainRule, build_rule
from .network import Network, build_network
from .randgen import ClassifierSeed

logger = logging.getLogger(__name__)

FOOTER_MAGIC = b'LLTM'
MANIFEST_FORMAT = 'locallearn-checkpoint'
MANIFEST_VERSION = 1


def _named_tensors(network: Network, rule: TrainRule) -> dict:
    named = dict(network.named_params())
    named.update({f'{k}@buffer': v for k, v in network.named_buffers().items()})
    named.update(rule.classifier_params())
    return named


def save_checkpoint(path, network: Network, rule: TrainRule, config: dict, epoch: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    named = _named_tensors(network, rule)
    dtype = str(next(iter(named.values())).dtype)
    manifest = {
        'format': MANIFEST_FORMAT,
        'version': MANIFEST_VERSION,
        'epoch': epoch,
        'dtype': dtype,
        'config': config,
        'tensors': [{'name': name, 'shape': list(value.shape)} for name, value in named.items()],
        'classifiers': [spec.to_manifest() for spec in rule.classifier_seeds()],
        'fa_seed': rule.feedback_seed,
        'checksums': rule.fixed_checksums(),
    }
    body = json.dumps(manifest, sort_keys=True).encode('utf-8')
    with open(path, 'wb') as fh:
        for value in named.values():
            write_tensor_record(fh, value)
        fh.write(body)
        fh.write(struct.pack('<Q', len(body)))
        fh.write(FOOTER_MAGIC)
    logger.info(f'Checkpoint written to {path} ({len(named)} tensors, epoch {epoch})')
    return path


def read_manifest(raw: bytes) -> Tuple[dict, int]:
    """Parse the trailing manifest; returns it with the byte offset where it starts."""
    if len(raw) < 12 or raw[-4:] != FOOTER_MAGIC:
        raise FormatError('Not a checkpoint: missing LLTM footer')
    (length,) = struct.unpack('<Q', raw[-12:-4])
    start = len(raw) - 12 - length
    if start < 0:
        raise FormatError(f'Checkpoint manifest length {length} exceeds file size {len(raw)}')
    try:
        manifest = json.loads(raw[start:-12].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f'Checkpoint manifest is not valid JSON: {e}') from e
    if manifest.get('format') != MANIFEST_FORMAT:
        raise FormatError(f'Unknown checkpoint format: {manifest.get("format")!r}')
    return manifest, start


def load_checkpoint(path, counting: bool = False) -> Tuple[Network, TrainRule, dict]:
    raw = Path(path).read_bytes()
    manifest, manifest_start = read_manifest(raw)
    config = manifest['config']
    dtype = np.dtype(manifest['dtype'])
    network = build_network(config, counting=counting, dtype=dtype)
    specs = [ClassifierSeed.from_manifest(entry) for entry in manifest['classifiers']]
    rule = build_rule(config, network, dtype, classifier_specs=specs or None)

    named = _named_tensors(network, rule)
    stream = io.BytesIO(raw[:manifest_start])
    for entry in manifest['tensors']:
        name = entry['name']
        if name not in named:
            raise ConsistencyError(f'Checkpoint tensor {name} has no counterpart in the rebuilt network')
        value = read_tensor_record(stream)
        if value.shape != named[name].shape:
            raise ConsistencyError(f'Checkpoint tensor {name} has shape {value.shape}, expected {named[name].shape}')
        named[name][...] = value
    missing = set(named) - {entry['name'] for entry in manifest['tensors']}
    if missing:
        raise ConsistencyError(f'Checkpoint is missing tensors: {sorted(missing)}')
    for lc in rule.classifiers:
        if lc.trainable:
            lc.refresh_feedback()

    expected = manifest.get('checksums', {})
    actual = rule.fixed_checksums()
    mismatched = [name for name in expected if actual.get(name) != expected[name]]
    if mismatched:
        raise ConsistencyError(f'Regenerated fixed matrices do not match their checksums: {mismatched}')
    logger.info(f'Loaded checkpoint {path}: epoch {manifest.get("epoch")}, {len(named)} tensors')
    return network, rule, manifest


def fixed_state_words(manifest: dict) -> Optional[int]:
    """Words stored per fixed classifier: its seed(s), shape excluded."""
    classifiers = manifest.get('classifiers') or []
    if not classifiers:
        return None
    return max(1 + ('k_seed' in entry) for entry in classifiers)
