"""
Dataset loading and seeded mini-batch iteration.

Supported inputs: MNIST-style IDX files (optionally gzipped), CIFAR-10 binary
batches and pre-whitened images stored as an LLT1 tensor file. Loaders keep
the file order; shuffling only happens in `batches`.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ArgumentError, ConsistencyError, FormatError
from .randgen import splitmix64_stream
from .tensor import default_dtype

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
LLT1_MAGIC = b'LLT1'
LLD1_MAGIC = b'LLD1'
CIFAR10_IMAGE_SHAPE = (3, 32, 32)
CIFAR10_RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = 'train'

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConsistencyError(
                f'{self.split}: {len(self.images)} images but {len(self.labels)} labels'
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConsistencyError(
                f'{self.split}: labels must lie in [0, {self.num_classes}), '
                f'found [{self.labels.min()}, {self.labels.max()}]'
            )

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, start: int, stop: Optional[int] = None, split: Optional[str] = None) -> 'Dataset':
        return Dataset(self.images[start:stop], self.labels[start:stop], self.num_classes, split or self.split)

    def split_validation(self, size: int) -> Tuple['Dataset', 'Dataset']:
        """Hold out the last `size` examples."""
        if not 0 < size < len(self):
            raise ArgumentError(f'Validation size must lie in (0, {len(self)}), got {size}')
        cut = len(self) - size
        return self.take(0, cut, 'train'), self.take(cut, None, 'validation')


def _open(path) -> BinaryIO:
    path = Path(path)
    if not path.exists():
        raise FormatError(f'No such data file: {path}')
    if path.suffix == '.gz':
        return gzip.open(path, 'rb')
    return open(path, 'rb')


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise FormatError(f'Truncated {what}: expected {count} bytes, got {len(data)}')
    return data


def _read_idx(path, expected_magic: int, rank: int) -> np.ndarray:
    with _open(path) as fh:
        (magic,) = struct.unpack('>I', _read_exact(fh, 4, f'IDX header in {path}'))
        if magic != expected_magic:
            raise FormatError(f'Bad IDX magic in {path}: 0x{magic:08X} (expected 0x{expected_magic:08X})')
        dims = struct.unpack(f'>{rank}I', _read_exact(fh, 4 * rank, f'IDX dimensions in {path}'))
        payload = _read_exact(fh, int(np.prod(dims)), f'IDX payload in {path}')
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def idx_item_count(path) -> int:
    with _open(path) as fh:
        _, count = struct.unpack('>II', _read_exact(fh, 8, f'IDX header in {path}'))
    return count


def load_idx(image_path, label_path, num_classes: int = 10, split: str = 'train', dtype=None) -> Dataset:
    """Images come back as n x 1 x h x w, scaled to [0, 1] by /255."""
    image_count, label_count = idx_item_count(image_path), idx_item_count(label_path)
    if image_count != label_count:
        raise ConsistencyError(f'Image file has {image_count} items but label file has {label_count}')
    images = _read_idx(image_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC, 1)
    pixels = (images.astype(np.float64) / 255.0).astype(dtype or default_dtype())
    count, height, width = images.shape
    logger.info(f'Loaded {count} {split} examples ({height}x{width}) from {image_path}')
    return Dataset(pixels.reshape(count, 1, height, width), labels.astype(np.int64), num_classes, split)


def load_cifar10_binary(paths: Sequence, split: str = 'train', dtype=None) -> Dataset:
    """Standard binary batches: one label byte then 3072 channel-major pixel bytes per record."""
    images, labels = [], []
    for path in paths:
        with _open(path) as fh:
            raw = fh.read()
        if not raw or len(raw) % CIFAR10_RECORD_BYTES:
            raise FormatError(
                f'{path}: size {len(raw)} is not a positive multiple of {CIFAR10_RECORD_BYTES}'
            )
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
        labels.append(records[:, 0].astype(np.int64))
        images.append(records[:, 1:].reshape((-1,) + CIFAR10_IMAGE_SHAPE))
    pixels = (np.concatenate(images).astype(np.float64) / 255.0).astype(dtype or default_dtype())
    logger.info(f'Loaded {len(pixels)} {split} examples from {len(paths)} CIFAR-10 batch files')
    return Dataset(pixels, np.concatenate(labels), 10, split)


def write_tensor_record(fh: BinaryIO, array: np.ndarray) -> None:
    """
    LLT1 record: magic, u32 rank, u32 dims, little-endian float32 payload.
    float64 arrays are written under the LLD1 magic so checkpoints keep
    double precision.
    """
    array = np.asarray(array)
    magic, dtype = (LLD1_MAGIC, '<f8') if array.dtype == np.float64 else (LLT1_MAGIC, '<f4')
    fh.write(magic)
    fh.write(struct.pack('<I', array.ndim))
    fh.write(struct.pack(f'<{array.ndim}I', *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor_record(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, 'tensor magic')
    if magic == LLT1_MAGIC:
        dtype = np.dtype('<f4')
    elif magic == LLD1_MAGIC:
        dtype = np.dtype('<f8')
    else:
        raise FormatError(f'Bad tensor magic: {magic!r}')
    (rank,) = struct.unpack('<I', _read_exact(fh, 4, 'tensor rank'))
    shape = struct.unpack(f'<{rank}I', _read_exact(fh, 4 * rank, 'tensor dimensions'))
    payload = _read_exact(fh, int(np.prod(shape)) * dtype.itemsize, 'tensor payload')
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))


def load_llt1_dataset(image_path, label_path, num_classes: int = 10, split: str = 'train', dtype=None) -> Dataset:
    """Pre-processed images from an LLT1 file (n x c x h x w) with IDX labels; values used as stored."""
    with _open(image_path) as fh:
        images = read_tensor_record(fh)
    labels = _read_idx(label_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f'Tensor file has {images.shape[0]} items but label file has {labels.shape[0]}')
    return Dataset(images.astype(dtype or default_dtype()), labels.astype(np.int64), num_classes, split)


def load_splits(data_cfg: dict, dtype=None) -> Dict[str, Dataset]:
    """Train / validation / test datasets for a run config's `data` section."""
    fmt = data_cfg.get('format', 'idx')
    num_classes = data_cfg.get('num_classes', 10)
    loaded = {}
    for split in ('train', 'test'):
        if fmt == 'cifar10':
            files = data_cfg.get(f'{split}_files')
            if files:
                loaded[split] = load_cifar10_binary(files, split, dtype)
            continue
        images, labels = data_cfg.get(f'{split}_images'), data_cfg.get(f'{split}_labels')
        if not images:
            continue
        loader = load_llt1_dataset if fmt == 'llt1' else load_idx
        loaded[split] = loader(images, labels, num_classes, split, dtype)

    if 'train' in loaded and data_cfg.get('train_limit'):
        loaded['train'] = loaded['train'].take(0, data_cfg['train_limit'])
    if 'test' in loaded and data_cfg.get('test_limit'):
        loaded['test'] = loaded['test'].take(0, data_cfg['test_limit'])
    if 'train' in loaded and data_cfg.get('validation_size'):
        loaded['train'], loaded['validation'] = loaded['train'].split_validation(data_cfg['validation_size'])
    return loaded


def shuffle_indices(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates: for i = n-1 .. 1 swap i with u_i mod (i + 1)."""
    order = np.arange(n)
    if n < 2:
        return order
    draws, _ = splitmix64_stream(seed, n - 1)
    for step, u in enumerate(draws.tolist()):
        i = n - 1 - step
        j = u % (i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def batches(
    ds: Dataset, batch_size: int, epoch_seed: int, min_batch: int = 1
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Shuffled mini-batches covering every example once. A trailing batch
    smaller than `min_batch` is folded into the one before it.
    """
    if batch_size < 1:
        raise ArgumentError(f'Batch size must be >= 1, got {batch_size}')
    n = len(ds)
    order = shuffle_indices(n, epoch_seed)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < min_batch:
        starts.pop()
    for k, start in enumerate(starts):
        stop = starts[k + 1] if k + 1 < len(starts) else n
        index = order[start:stop]
        yield ds.images[index], ds.labels[index]
