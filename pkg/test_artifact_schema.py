#!/usr/bin/env python3
"""
Tests for artifact layouts, the model fixture format and the delimited tables
"""

import json

import numpy as np
import pytest

from artifact_schema import (
    ARTIFACT_VERSION,
    PERTURB_COLUMNS,
    REFERENCE_LATENCY_CSV,
    decode_fixture,
    dumps_json,
    encode_fixture,
    parse_profile,
    read_fixture,
    read_json,
    render_profile,
    render_table,
    require_hash,
    sha256_bytes,
    validate_document,
    write_fixture,
    write_json,
)
from errors import ConfigError, ProvenanceError
from pipeline import ProfileRecord


class TestReferenceLatencyTable:

    def test_round_trip_is_byte_identical(self):
        records, provenance = parse_profile(REFERENCE_LATENCY_CSV)
        assert provenance == {}
        assert render_profile(records) == REFERENCE_LATENCY_CSV

    def test_iteration_row(self):
        records, _ = parse_profile(REFERENCE_LATENCY_CSV)
        it = records[0]
        assert (it.scope, it.window) == ('iteration', 'ALL')
        assert (it.total_ms, it.cpu_ms, it.gpu_ms, it.comm_ms, it.overlap_ms) == (128.33, 67.99, 87.04, 3.10, 57.54)
        assert all(r.violations() == [] for r in records)
        assert [r.window for r in records[1:]] == ['ATT_QKV', 'ATT_O', 'FFN_UPGATE', 'FFN_DOWN']


def test_profile_provenance_lines():
    records = [ProfileRecord('window', 'ATT_O', 1.0, 0.5, 0.75, 0.1, 0.5)]
    text = render_profile(records, {'steps': 3, 'checksum': 'abc'})
    assert text.startswith('# checksum=abc\n# steps=3\n')
    parsed, provenance = parse_profile(text)
    assert provenance == {'checksum': 'abc', 'steps': '3'}
    assert parsed[0].gpu_ms == 0.75


def test_profile_parse_errors():
    with pytest.raises(ConfigError):
        parse_profile('# only=comments\n')
    with pytest.raises(ConfigError):
        parse_profile('a,b\n1,2\n')


def test_header_only_table():
    text = render_table([], PERTURB_COLUMNS, {'trials': 0})
    assert text == '# trials=0\n' + ','.join(PERTURB_COLUMNS) + '\n'


class TestDocuments:

    def plan_doc(self):
        return {
            'version': ARTIFACT_VERSION,
            'admissible': {'zero': True, 'k0': 3, 'min_power': 8},
            'r_std': {'ATT_O': 8},
            'entries': [{'layer': 0, 'window': 'ATT_O', 'slot': 'o', 'rank': 8, 'priority': 1.0}],
            'provenance': {},
        }

    def test_valid_plan(self):
        assert validate_document('plan', self.plan_doc())

    def test_missing_and_mistyped_fields(self):
        doc = self.plan_doc()
        del doc['r_std']
        with pytest.raises(ConfigError, match='r_std'):
            validate_document('plan', doc)
        doc = self.plan_doc()
        doc['entries'][0]['rank'] = 'eight'
        with pytest.raises(ConfigError, match='rank'):
            validate_document('plan', doc)
        doc = self.plan_doc()
        doc['entries'][0]['rank'] = True
        with pytest.raises(ConfigError):
            validate_document('plan', doc)

    def test_version_and_kind(self):
        doc = self.plan_doc()
        doc['version'] = ARTIFACT_VERSION + 1
        with pytest.raises(ConfigError, match='version'):
            validate_document('plan', doc)
        with pytest.raises(ConfigError):
            validate_document('nonsense', {})

    def test_canonical_json(self, tmp_path):
        assert dumps_json({'b': 1, 'a': [1, 2]}) == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}\n'
        path = tmp_path / 'plan.json'
        digest = write_json(path, self.plan_doc())
        assert digest == sha256_bytes(path.read_bytes())
        assert read_json(path, 'plan') == self.plan_doc()

    def test_read_json_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            read_json(tmp_path / 'missing.json', 'plan')
        bad = tmp_path / 'bad.json'
        bad.write_text('{not json')
        with pytest.raises(ConfigError):
            read_json(bad, 'plan')

    def test_require_hash(self):
        require_hash('x', 'a' * 64, 'a' * 64)
        with pytest.raises(ProvenanceError):
            require_hash('Plan/fixture', 'a' * 64, 'b' * 64)


class TestFixture:

    def test_decode_restores_model(self, tiny_model):
        model = decode_fixture(encode_fixture(tiny_model))
        assert model.spec == tiny_model.spec
        assert model.checksum() == tiny_model.checksum()
        assert model.planted == tiny_model.planted
        assert set(model.routers) == {1}

    def test_same_model_same_hash(self, tiny_model, tmp_path):
        a = write_fixture(tiny_model, tmp_path / 'a.bin')
        b = write_fixture(tiny_model, tmp_path / 'b.bin')
        assert a == b
        model, digest = read_fixture(tmp_path / 'a.bin')
        assert digest == a and model.checksum() == tiny_model.checksum()

    def test_header_is_little_endian_json(self, tiny_model):
        data = encode_fixture(tiny_model)
        length = int.from_bytes(data[6:14], 'little')
        header = json.loads(data[14:14 + length])
        assert header['spec']['hidden'] == tiny_model.spec.hidden
        first = header['tensors'][0]
        blob = np.frombuffer(data, dtype='<f4', count=int(np.prod(first['shape'])), offset=14 + length)
        assert np.array_equal(blob.reshape(first['shape']), tiny_model.weights[tiny_model.matrix_ids()[0]])

    def test_corrupt_fixtures(self, tiny_model, tmp_path):
        data = encode_fixture(tiny_model)
        with pytest.raises(ConfigError):
            decode_fixture(b'XXXXX\n' + data[6:])
        with pytest.raises(ConfigError):
            decode_fixture(data[:-16])
        with pytest.raises(ConfigError):
            read_fixture(tmp_path / 'missing.bin')
