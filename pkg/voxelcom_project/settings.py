"""
Django settings for voxelcom_project project.

The project has no web surface: Django provides the management-command
runner, the settings layer, logging configuration, the ORM for experiment
records and the test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# Only used by Django internals; nothing here is signed or served.
SECRET_KEY = os.environ.get("DJANGO_SECRET_KEY", "voxelcom-local-only-not-a-secret")

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "django.contrib.contenttypes",
    "voxelcom",
]

MIDDLEWARE = []


# Database

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": os.environ.get("VOXELCOM_DB", BASE_DIR / "db.sqlite3"),
    }
}


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Experiment outputs and caches

VOXELCOM_OUTPUT_DIR = Path(os.environ.get("VOXELCOM_OUTPUT_DIR", BASE_DIR / "runs"))

# LDPC parity/generator matrices are cached here; empty disables the disk cache
VOXELCOM_CACHE_DIR = os.environ.get("VOXELCOM_CACHE_DIR", str(BASE_DIR / ".cache" / "ldpc"))

VOXELCOM_SLOW_TESTS = os.environ.get("VOXELCOM_SLOW_TESTS", "") == "1"


# Logging

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "loggers": {
        "voxelcom": {
            "handlers": ["console"],
            "level": os.environ.get("VOXELCOM_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}
