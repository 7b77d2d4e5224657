"""
Management command to download the IDX files of MNIST or Fashion-MNIST
"""

import logging
from pathlib import Path

import requests
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

logger = logging.getLogger(__name__)

IDX_FILES = (
    'train-images-idx3-ubyte.gz',
    'train-labels-idx1-ubyte.gz',
    't10k-images-idx3-ubyte.gz',
    't10k-labels-idx1-ubyte.gz',
)


class Command(BaseCommand):
    help = 'Download the four IDX.gz files of a dataset into DATA_DIR/<dataset>/'

    def add_arguments(self, parser):
        parser.add_argument('--dataset', choices=['mnist', 'fashion-mnist'], default='mnist',
                            help='Which dataset to fetch')
        parser.add_argument('--force', action='store_true', help='Download even if the file exists')

    def handle(self, *args, **options):
        app_settings = getattr(settings, 'HOGWATCH_SETTINGS', {})
        dataset = options['dataset']
        mirrors = app_settings.get('MNIST_MIRRORS', {}).get(dataset, [])
        if not mirrors:
            raise CommandError(f'No mirrors configured for {dataset}')
        timeout = app_settings.get('FETCH_TIMEOUT', 30)
        target = Path(app_settings.get('DATA_DIR', 'data')) / dataset
        target.mkdir(parents=True, exist_ok=True)

        for filename in IDX_FILES:
            destination = target / filename
            if destination.exists() and not options['force']:
                self.stdout.write(f'{filename} already present, skipping')
                continue
            self._download(filename, destination, mirrors, timeout)

        self.stdout.write(self.style.SUCCESS(f'{dataset} is ready in {target}'))

    def _download(self, filename, destination, mirrors, timeout):
        for mirror in mirrors:
            url = mirror.rstrip('/') + '/' + filename
            try:
                response = requests.get(url, timeout=timeout)
                response.raise_for_status()
            except requests.RequestException as exc:
                logger.warning('Fetching %s failed: %s', url, exc)
                continue
            destination.write_bytes(response.content)
            self.stdout.write(f'Downloaded {filename} ({len(response.content)} bytes) from {mirror}')
            return
        raise CommandError(f'Could not download {filename} from any mirror')
