import struct
from pathlib import Path

import numpy as np

from training_app.data_io import Dataset
from training_app.randgen import derive_seed, uniform_tensor

REPO_ROOT = Path(__file__).resolve().parents[2]
CONFIG_DIR = REPO_ROOT / 'configs'


def dense_config(widths, input_width, num_classes=3, kind='local_error', mode='symmetric',
                 input_dropout=0.0, dropout=0.0, batch_norm=False, batch_size=4, epochs=1):
    seeds = {'init': 11, 'dropout': 12, 'shuffle': 13, 'classifier': 14, 'feedback': 15, 'fa': 16}
    return {
        'name': 'toy',
        'network': {
            'input_shape': [input_width],
            'num_classes': num_classes,
            'input_dropout': input_dropout,
            'batch_norm_shift': True,
            'layers': [
                {'type': 'dense', 'units': w, 'dropout': dropout, 'batch_norm': batch_norm}
                for w in widths
            ],
        },
        'rule': {'kind': kind, 'mode': mode, 'loss': 'softmax_xent'},
        'seeds': seeds,
        'adam': {'lr': 0.01, 'beta1': 0.9, 'beta2': 0.999, 'eps': 1e-8},
        'epochs': epochs,
        'batch_size': batch_size,
    }


def blobs(n, width, num_classes=3, seed=7, split='train', dtype=np.float64):
    """Separable classes: uniform noise in [-1, 1) plus 3 on the coordinate of the label."""
    labels = np.arange(n) % num_classes
    images = uniform_tensor(derive_seed(seed, 0), (n, width), dtype=np.float64)
    images[np.arange(n), labels] += 3.0
    return Dataset(images.astype(dtype), labels.astype(np.int64), num_classes, split)


def write_idx_images(path, pixels: np.ndarray):
    count, rows, cols = pixels.shape
    with open(path, 'wb') as fh:
        fh.write(struct.pack('>IIII', 0x00000803, count, rows, cols))
        fh.write(pixels.astype(np.uint8).tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, 'wb') as fh:
        fh.write(struct.pack('>II', 0x00000801, len(labels)))
        fh.write(labels.tobytes())


def write_blob_idx(directory, n, num_classes=3, side=4, seed=5, prefix='train'):
    """IDX image/label files whose classes light up distinct pixel rows."""
    labels = np.arange(n) % num_classes
    noise = uniform_tensor(derive_seed(seed, n), (n, side, side), 0.0, 60.0, dtype=np.float64)
    pixels = noise.copy()
    pixels[np.arange(n), labels % side, :] += 180.0
    images_path = Path(directory) / f'{prefix}-images-idx3-ubyte'
    labels_path = Path(directory) / f'{prefix}-labels-idx1-ubyte'
    write_idx_images(images_path, np.floor(pixels))
    write_idx_labels(labels_path, labels)
    return str(images_path), str(labels_path)
