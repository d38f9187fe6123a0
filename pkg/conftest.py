import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'locallearn.settings')
django.setup()
