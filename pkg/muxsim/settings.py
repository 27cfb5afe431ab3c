"""
Django settings for the muxsim project.

muxsim has no web surface: Django provides configuration, logging, management
commands and the test runner. Calibration knobs for the analytical model live in
MUXSIM_DEFAULTS and can be overridden per experiment from the JSON config.
"""

import os

SECRET_KEY = os.environ.get('SECRET_KEY', 'muxsim-offline-simulation-key')

DEBUG = os.environ.get('DEBUG', 'False') == 'True'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    # Third-party apps
    'rest_framework',
    # Local apps
    'apps.cost_model',
    'apps.workload',
    'apps.placement',
    'apps.kv_manager',
    'apps.scheduler',
    'apps.sim_engine',
    'apps.metrics',
    'apps.experiments',
]

# Nothing is persisted, so no database is configured.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# REST Framework is used for config schema validation only
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}

# Log level for every muxsim logger
MUXSIM_LOG = os.environ.get('MUXSIM_LOG', 'INFO').upper()

# Calibration knobs and algorithm defaults. These are tunable model parameters,
# not measurements.
MUXSIM_DEFAULTS = {
    # LLM architecture
    'head_dim': 128,
    'bytes_per_element': 2,
    # Latency profile (A100-like, 7B reference model at tp=1 and full SMs)
    'prefill_ms_per_token': 0.1,
    'decode_ms_per_step': 12.0,
    'decode_ms_per_context_token': 0.005,
    'tp_efficiency': 0.9,
    'sm_saturation': 0.5,
    'batch_knee': 16,
    'reference_size': 32 * 4096,
    # Workload
    'mean_prompt_len': 161,
    'mean_output_len': 338,
    'length_sigma': 1.0,
    'max_rate': 20.0,
    'alpha': 0.9,
    'horizon_s': 600.0,
    # Placement
    'sm_list': [round(0.1 * i, 1) for i in range(1, 11)],
    'tp_degrees': [1, 2, 4, 8],
    'ilp_max_dims': 20,
    'activation_reserve': 0.1,
    'max_batch': 256,
    'gen_len': 338,
    # KV cache
    'block_tokens': 16,
    'quota_floor': 0.02,
    'low_mark': 0.5,
    'high_mark': 0.9,
    'quota_step': 0.1,
    'adapt_period_s': 10.0,
    'adapt_quota': True,
    # Scheduling
    'prefill_token_budget': 4096,
    'min_prefill_sm': 0.3,
    'fairness_epsilon': 0.15,
    # Simulation and metrics
    'interference': 0.1,
    'slo_scales': [1, 2, 4, 8, 16],
}

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': MUXSIM_LOG,
    },
    'loggers': {
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': False,
        },
        'apps': {
            'handlers': ['console'],
            'level': MUXSIM_LOG,
            'propagate': False,
        },
    },
}
