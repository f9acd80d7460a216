#!/usr/bin/env python3
"""
Compensated Inference - artifact schema definition
Field layouts for every file the workflow writes (model fixture header,
calibration artifact, rank plan, profile and perturbation tables) plus the
readers and writers that enforce them.
"""

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict

import numpy as np
import pandas as pd

from config import model_hash
from errors import ConfigError, ProvenanceError
from pipeline import PROFILE_COLUMNS, ProfileRecord
from toymodel import MatrixId, ModelSpec, ToyModel

logger = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
FIXTURE_MAGIC = b"CIFX1\n"
HEADER_LEN = struct.Struct('<Q')
WEIGHT_DTYPE = np.dtype('<f4')

# Document layouts; '?' marks optional fields
ARTIFACT_SCHEMA = {

    # Model fixture JSON header (followed by little-endian float32 blobs)
    'fixture_header': {
        'version': 'int',
        'spec': 'dict',         # ModelSpec fields
        'model_hash': 'str',
        'tensors': 'list',      # [{name, shape, offset}] offsets relative to blob start
        'planted': 'dict',      # matrix id -> planted salient count
    },

    # Calibration artifact (cli calibrate)
    'calibration': {
        'version': 'int',
        'kind': 'str',          # 'calibration'
        'fixture_hash': 'str',
        'config_hash': 'str',
        'model_hash': 'str',
        'quant': 'dict',        # bits, group_size
        'tau': 'float',
        'spectra': 'dict',      # matrix id -> {sigma, salient_cut, phi, planted}
        'sensitivity': 'dict',  # SensitivityReport.to_dict()
        'expert_gates': 'dict', # MoE layer -> mean gate per expert
        'timing': 'dict',       # TimingModel fields + samples; deterministic: false
    },

    # Rank plan (cli allocate)
    'plan': {
        'version': 'int',
        'admissible': 'dict',   # zero, k0, min_power
        'r_std': 'dict',        # window kind -> rank
        'entries': 'list',      # [{layer, window, slot, expert?, rank, priority}]
        'provenance': 'dict',   # input hashes and allocation mode
    },

    # Plan entry
    'plan_entry': {
        'layer': 'int',
        'window': 'str',
        'slot': 'str',
        'expert': '?int',
        'rank': 'int',
        'priority': 'float',
    },
}

PERTURB_COLUMNS = ['trial', 'moved_from', 'moved_to', 'delta_rank', 'proxy_kl', 'delta_proxy',
                   'throughput_tps', 'delta_throughput']

# Reference latency breakdown (ms per decode iteration); the parser must round-trip it byte for byte
REFERENCE_LATENCY_CSV = (
    "scope,window,total_ms,cpu_ms,gpu_ms,comm_ms,overlap_ms\n"
    "iteration,ALL,128.33,67.99,87.04,3.10,57.54\n"
    "window,ATT_QKV,13.15,2.74,3.05,1.01,2.39\n"
    "window,ATT_O,4.69,1.22,1.36,0.33,1.06\n"
    "window,FFN_UPGATE,68.07,66.39,57.28,1.08,56.67\n"
    "window,FFN_DOWN,32.13,31.22,25.35,0.68,25.12\n"
)

_TYPES = {
    'int': int,
    'float': (int, float),
    'str': str,
    'dict': dict,
    'list': list,
    'bool': bool,
}


def validate_document(kind, doc):
    """Check required fields and their types; raise ConfigError naming the first problem"""
    if kind not in ARTIFACT_SCHEMA:
        raise ConfigError(f"Unknown artifact kind {kind!r}")
    if not isinstance(doc, dict):
        raise ConfigError(f"{kind} document must be an object")
    for name, type_name in ARTIFACT_SCHEMA[kind].items():
        optional = type_name.startswith('?')
        type_name = type_name.lstrip('?')
        if name not in doc or doc[name] is None:
            if optional:
                continue
            raise ConfigError(f"{kind} document is missing field {name!r}")
        value = doc[name]
        if isinstance(value, bool) and type_name != 'bool':
            raise ConfigError(f"{kind}.{name} must be {type_name}, got bool")
        if not isinstance(value, _TYPES[type_name]):
            raise ConfigError(f"{kind}.{name} must be {type_name}, got {type(value).__name__}")
    if 'version' in doc and doc['version'] != ARTIFACT_VERSION:
        raise ConfigError(f"{kind} version {doc['version']} is not supported (expected {ARTIFACT_VERSION})")
    if kind == 'plan':
        for entry in doc['entries']:
            validate_document('plan_entry', entry)
    return doc


def sha256_bytes(data):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    try:
        with open(path, 'rb') as f:
            for chunk in iter(lambda: f.read(1 << 20), b''):
                h.update(chunk)
    except FileNotFoundError as e:
        raise ConfigError(f"File not found: {path}") from e
    return h.hexdigest()


def dumps_json(doc):
    """Canonical text form: sorted keys, two-space indent, trailing newline"""
    return json.dumps(doc, sort_keys=True, indent=2) + '\n'


def write_json(path, doc):
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(dumps_json(doc))
    return sha256_file(path)


def read_json(path, kind):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            doc = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"File not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return validate_document(kind, doc)


def require_hash(label, expected, actual):
    if expected != actual:
        raise ProvenanceError(f"{label} hash mismatch: expected {expected[:12]}..., got {actual[:12]}...")


# ----------------------------------------------------------------------------
# Model fixture
# ----------------------------------------------------------------------------

def _fixture_tensors(model):
    tensors = [(str(mid), model.weights[mid]) for mid in model.matrix_ids()]
    tensors += [(f"router.L{layer}", model.routers[layer]) for layer in sorted(model.routers)]
    tensors += [('embed', model.embed), ('lm_head', model.lm_head)]
    return tensors


def encode_fixture(model):
    blobs, entries, offset = [], [], 0
    for name, array in _fixture_tensors(model):
        blob = np.ascontiguousarray(array, dtype=WEIGHT_DTYPE).tobytes()
        entries.append({'name': name, 'shape': list(array.shape), 'offset': offset})
        blobs.append(blob)
        offset += len(blob)
    spec = asdict(model.spec)
    spec['layers'] = list(model.spec.layers)
    header = {
        'version': ARTIFACT_VERSION,
        'spec': spec,
        'model_hash': model_hash(model.spec),
        'tensors': entries,
        'planted': {str(m): int(c) for m, c in sorted(model.planted.items())},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return FIXTURE_MAGIC + HEADER_LEN.pack(len(header_bytes)) + header_bytes + b''.join(blobs)


def write_fixture(model, path):
    data = encode_fixture(model)
    with open(path, 'wb') as f:
        f.write(data)
    return sha256_bytes(data)


def decode_fixture(data):
    if not data.startswith(FIXTURE_MAGIC):
        raise ConfigError("Not a model fixture (bad magic)")
    start = len(FIXTURE_MAGIC)
    (length,) = HEADER_LEN.unpack_from(data, start)
    start += HEADER_LEN.size
    try:
        header = json.loads(data[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Corrupt fixture header: {e}") from e
    validate_document('fixture_header', header)
    blob_start = start + length

    spec_data = dict(header['spec'])
    spec_data['layers'] = tuple(spec_data['layers'])
    spec = ModelSpec(**spec_data).validate()
    require_hash('Fixture model', header['model_hash'], model_hash(spec))

    arrays = {}
    for entry in header['tensors']:
        shape = tuple(entry['shape'])
        count = int(np.prod(shape))
        offset = blob_start + entry['offset']
        if offset + count * WEIGHT_DTYPE.itemsize > len(data):
            raise ConfigError(f"Fixture truncated in tensor {entry['name']}")
        arrays[entry['name']] = np.frombuffer(data, dtype=WEIGHT_DTYPE, count=count, offset=offset) \
            .reshape(shape).astype(np.float32)

    weights = {MatrixId.parse(n): a for n, a in arrays.items() if n.startswith('L')}
    routers = {int(n.split('.L')[1]): a for n, a in arrays.items() if n.startswith('router.')}
    planted = {MatrixId.parse(n): int(c) for n, c in header['planted'].items()}
    missing = [str(m) for m in spec.matrix_ids() if m not in weights]
    if missing:
        raise ConfigError(f"Fixture lacks tensor {missing[0]}")
    return ToyModel(spec=spec, weights=weights, routers=routers, embed=arrays['embed'],
                    lm_head=arrays['lm_head'], planted=planted)


def read_fixture(path):
    """Load a fixture; returns (model, sha256 of the file)"""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError as e:
        raise ConfigError(f"Fixture not found: {path}") from e
    return decode_fixture(data), sha256_bytes(data)


# ----------------------------------------------------------------------------
# Delimited tables
# ----------------------------------------------------------------------------

def render_profile(records, provenance=None, decimals=2):
    """Profile table text: optional '# key=value' lines, then CSV with fixed decimals"""
    lines = [f"# {k}={v}\n" for k, v in sorted((provenance or {}).items())]
    df = pd.DataFrame([r.as_row() for r in records], columns=PROFILE_COLUMNS)
    body = df.to_csv(index=False, float_format=f'%.{decimals}f', lineterminator='\n')
    return ''.join(lines) + body


def parse_profile(text):
    """Inverse of render_profile; returns (records, provenance)"""
    provenance, body = {}, []
    for line in text.splitlines(keepends=True):
        if line.startswith('#'):
            key, _, value = line[1:].strip().partition('=')
            provenance[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise ConfigError("Profile table has no header row")
    df = pd.read_csv(io.StringIO(''.join(body)), dtype={'scope': str, 'window': str})
    if list(df.columns) != PROFILE_COLUMNS:
        raise ConfigError(f"Profile columns {list(df.columns)} != {PROFILE_COLUMNS}")
    records = [
        ProfileRecord(row.scope, row.window, float(row.total_ms), float(row.cpu_ms), float(row.gpu_ms),
                      float(row.comm_ms), float(row.overlap_ms))
        for row in df.itertuples(index=False)
    ]
    return records, provenance


def read_profile(path):
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return parse_profile(f.read())
    except FileNotFoundError as e:
        raise ConfigError(f"Profile not found: {path}") from e


def render_table(rows, columns, provenance=None, decimals=6):
    lines = [f"# {k}={v}\n" for k, v in sorted((provenance or {}).items())]
    df = pd.DataFrame(rows, columns=columns)
    return ''.join(lines) + df.to_csv(index=False, float_format=f'%.{decimals}f', lineterminator='\n')
