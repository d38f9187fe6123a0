"""
Django settings for the locallearn project.

The project hosts a single app, ``training_app``, which implements the
local-error training engine and its management commands (train, eval, cost,
gradcheck). There is no HTTP surface and no database.
"""

import os
from pathlib import Path

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env
load_dotenv(BASE_DIR / '.env')


SECRET_KEY = os.getenv('LOCALLEARN_SECRET_KEY', 'locallearn-insecure-engine-only')

DEBUG = os.getenv('LOCALLEARN_DEBUG', 'false').lower() in ('1', 'true', 'yes')

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rest_framework',
    'training_app.apps.TrainingAppConfig',
]

MIDDLEWARE = []

# The engine keeps no experiment database; metrics and checkpoints are files.
DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = True

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework is only used for config validation (serializers)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}


# Logging
LOG_LEVEL = os.getenv('LOCALLEARN_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '{asctime} {levelname} {name}: {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'training_app': {
            'handlers': ['console'],
            'level': LOG_LEVEL,
            'propagate': False,
        },
    },
}


# Training engine configuration

# Default floating point type for tensors ('float32' or 'float64').
# Gradient checks always run in float64 regardless of this switch.
TENSOR_DTYPE = os.getenv('LOCALLEARN_DTYPE', 'float32')

# Deterministic mode runs local-error layer updates strictly in sequence.
DETERMINISTIC = os.getenv('LOCALLEARN_DETERMINISTIC', 'true').lower() in ('1', 'true', 'yes')

# Pin BLAS thread count when requested; must happen before numpy is imported.
BLAS_THREADS = os.getenv('LOCALLEARN_BLAS_THREADS')
if BLAS_THREADS:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
        os.environ.setdefault(_var, BLAS_THREADS)

# Default directory for metrics CSVs and checkpoints when a config omits output.dir
TRAINING_OUTPUT_DIR = os.getenv('LOCALLEARN_OUTPUT_DIR', str(BASE_DIR / 'runs'))

# Mini-batch size used for evaluation passes
EVAL_BATCH_SIZE = int(os.getenv('LOCALLEARN_EVAL_BATCH_SIZE', '500'))

# Max relative error accepted by the finite-difference checks
GRADCHECK_TOLERANCE = float(os.getenv('LOCALLEARN_GRADCHECK_TOLERANCE', '1e-4'))

# Worker threads for pipelined local updates (non-deterministic mode only)
LOCAL_UPDATE_WORKERS = int(os.getenv('LOCALLEARN_LOCAL_UPDATE_WORKERS', '4'))
