#!/usr/bin/env python3
"""
Compensated Inference - configuration
Environment defaults (.env), run-config files and logging setup
"""

import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from logging.handlers import RotatingFileHandler
from typing import Optional

from dotenv import load_dotenv

from errors import ConfigError
from quantizer import QuantConfig
from toymodel import ModelSpec, WindowKind

# Load environment variables
load_dotenv()

LOG_DIR = os.environ.get('COMPINFER_LOG_DIR', 'logs')
LOG_LEVEL = os.environ.get('COMPINFER_LOG_LEVEL', 'INFO')

DEFAULT_TAU = float(os.environ.get('COMPINFER_TAU', '0.01'))
DEFAULT_K0 = int(os.environ.get('COMPINFER_K0', '3'))
DEFAULT_WATCHDOG_S = float(os.environ.get('COMPINFER_WATCHDOG_S', '5.0'))
DEFAULT_QUANT_BITS = int(os.environ.get('COMPINFER_QUANT_BITS', '4'))

LOG_FORMAT = '%(asctime)s %(levelname)s: %(message)s [in %(pathname)s:%(lineno)d]'


def configure_logging(name='compinfer', log_dir=None, level=None):
    """
    Install a rotating file handler plus stdout handler on the root logger.
    Safe to call more than once; handlers are only added the first time.
    """
    root = logging.getLogger()
    level_name = (level or LOG_LEVEL).upper()
    root.setLevel(getattr(logging, level_name, logging.INFO))

    if getattr(root, '_compinfer_configured', False):
        return logging.getLogger(name)

    log_dir = log_dir or LOG_DIR
    try:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = RotatingFileHandler(
            os.path.join(log_dir, f'{name}.log'),
            maxBytes=10240000,
            backupCount=10
        )
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(file_handler)
    except OSError as e:
        # Read-only checkouts still get console logging
        print(f"⚠️  File logging disabled ({log_dir}): {e}", file=sys.stderr)

    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    root.addHandler(stream_handler)
    root._compinfer_configured = True
    return logging.getLogger(name)


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    quant: QuantConfig = field(default_factory=lambda: QuantConfig(bits=DEFAULT_QUANT_BITS))
    tau: float = DEFAULT_TAU
    top_layers: Optional[int] = None
    k0: int = DEFAULT_K0
    calib_samples: int = 4
    calib_tokens: int = 16
    calib_seed: int = 1234
    probe_ranks: tuple = (8, 16, 32, 64)
    probe_reps: int = 10
    probe_warmup: int = 3
    probe_backbone_ms: float = 0.0
    r_std_override: Optional[dict] = None
    sensitivity_scope: str = 'window'
    watchdog_s: float = DEFAULT_WATCHDOG_S
    out_dir: str = 'runs'

    @property
    def resolved_top_layers(self):
        """K, defaulting to ceil(L/4) (at least one layer when layers exist)"""
        if self.top_layers is not None:
            return self.top_layers
        return max(1, math.ceil(len(self.model.layers) / 4)) if self.model.layers else 0

    def validate(self):
        """Raise ConfigError naming the first out-of-range field"""
        self.model.validate()
        if not 2 <= self.quant.bits <= 8:
            raise ConfigError(f"quant.bits must be in [2, 8], got {self.quant.bits}")
        if self.quant.group_size is not None and self.quant.group_size <= 0:
            raise ConfigError(f"quant.group_size must be positive or null, got {self.quant.group_size}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        n_layers = len(self.model.layers)
        if self.top_layers is not None and n_layers and not 1 <= self.top_layers <= n_layers:
            raise ConfigError(f"top_layers must be in [1, {n_layers}], got {self.top_layers}")
        if not 0 <= self.k0 <= 10:
            raise ConfigError(f"k0 must be in [0, 10], got {self.k0}")
        for name in ('calib_samples', 'calib_tokens', 'probe_reps'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.probe_warmup < 3:
            raise ConfigError(f"probe_warmup must be >= 3, got {self.probe_warmup}")
        if self.probe_backbone_ms < 0:
            raise ConfigError(f"probe_backbone_ms must be >= 0, got {self.probe_backbone_ms}")
        if len(set(self.probe_ranks)) < 3 or any(r < 0 for r in self.probe_ranks):
            raise ConfigError(f"probe_ranks needs >= 3 distinct non-negative ranks, got {list(self.probe_ranks)}")
        if self.sensitivity_scope not in ('window', 'layer'):
            raise ConfigError(f"sensitivity_scope must be 'window' or 'layer', got {self.sensitivity_scope!r}")
        if not self.watchdog_s > 0:
            raise ConfigError(f"watchdog_s must be > 0, got {self.watchdog_s}")
        if self.r_std_override is not None:
            for kind, value in self.r_std_override.items():
                if kind not in WindowKind.__members__:
                    raise ConfigError(f"r_std_override has unknown window kind {kind!r}")
                if int(value) < 0:
                    raise ConfigError(f"r_std_override.{kind} must be >= 0, got {value}")
        return self

    def to_dict(self):
        data = asdict(self)
        data['model']['layers'] = list(self.model.layers)
        data['probe_ranks'] = list(self.probe_ranks)
        return data


def config_from_dict(data):
    """Build a RunConfig from a parsed JSON document, rejecting unknown fields"""
    data = dict(data or {})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown config field(s): {', '.join(unknown)}")

    model_data = dict(data.pop('model', {}) or {})
    model_known = {f.name for f in fields(ModelSpec)}
    bad = sorted(set(model_data) - model_known)
    if bad:
        raise ConfigError(f"Unknown model field(s): {', '.join(bad)}")
    if 'layers' in model_data:
        model_data['layers'] = tuple(model_data['layers'])

    quant_data = dict(data.pop('quant', {}) or {})
    quant_known = {f.name for f in fields(QuantConfig)}
    bad = sorted(set(quant_data) - quant_known)
    if bad:
        raise ConfigError(f"Unknown quant field(s): {', '.join(bad)}")
    quant_data.setdefault('bits', DEFAULT_QUANT_BITS)

    if 'probe_ranks' in data:
        data['probe_ranks'] = tuple(data['probe_ranks'])

    try:
        cfg = RunConfig(model=ModelSpec(**model_data), quant=QuantConfig(**quant_data), **data)
    except TypeError as e:
        raise ConfigError(f"Invalid config: {e}") from e
    return cfg.validate()


def load_run_config(path=None, overrides=None):
    """Load a JSON run config (or defaults when path is None) and apply CLI overrides"""
    data = {}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except FileNotFoundError as e:
            raise ConfigError(f"Config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == 'seed':
            data.setdefault('model', {})['seed'] = value
        else:
            data[key] = value
    return config_from_dict(data)


def _canonical_hash(payload):
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def config_hash(cfg):
    """SHA-256 of the canonical JSON form of the whole run config"""
    return _canonical_hash(cfg.to_dict())


def model_hash(spec):
    """SHA-256 of the model spec alone; fixtures and artifacts are keyed on it"""
    data = asdict(spec)
    data['layers'] = list(spec.layers)
    return _canonical_hash(data)
