import json

import numpy as np
import pytest

from augsearch import policy_io
from augsearch.policy import init_policy
from augsearch.policy_io import PolicyFormatError


def _policy(seed=0, scale=3.0):
    rng = np.random.default_rng(seed)
    p = init_policy(2, 2, rng=rng)
    for _, t in p.named_parameters():
        t.data[...] = rng.normal(0, scale, size=t.shape)
    return p


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_is_byte_identical(seed, tmp_path):
    text = policy_io.dumps(_policy(seed))
    path = tmp_path / "p.json"
    path.write_text(text)
    policy_io.save(policy_io.load(path), path)
    assert path.read_text() == text


def test_effective_values_are_stored():
    p = _policy(1)
    doc = json.loads(policy_io.dumps(p))
    op = doc["sub_policies"][0]["stages"][1]["ops"][4]
    assert op["name"] == "rotate"
    assert op["probability"] == pytest.approx(p.sub_policies[0].stages[1].ops[4].p, abs=1e-7)
    assert doc["L"] == 2 and doc["K"] == 2 and len(doc["op_table"]) == 17
    assert 0 < op["magnitude"] < 1


def test_loaded_policy_samples_like_the_original():
    p = _policy(2)
    q = policy_io.loads(policy_io.dumps(p))
    for (_, a), (_, b) in zip(p.named_parameters(), q.named_parameters()):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("mutate", [
    lambda d: d.update(version=2),
    lambda d: d.update(comment="hi"),
    lambda d: d["sub_policies"][0]["stages"][0]["ops"][0].update(probability=1.5),
    lambda d: d["sub_policies"][0]["stages"][0]["ops"][0].update(name="rotate"),
    lambda d: d["sub_policies"][0]["stages"][0].update(weights=[0.0]),
    lambda d: d["op_table"][0].update(scale=9.0),
    lambda d: d.update(L=3),
    lambda d: d.pop("eta"),
])
def test_schema_violations(mutate):
    doc = json.loads(policy_io.dumps(_policy(3)))
    mutate(doc)
    with pytest.raises(PolicyFormatError):
        policy_io.from_dict(doc)


def test_not_json():
    with pytest.raises(PolicyFormatError):
        policy_io.loads("{")


def test_probability_zero_is_accepted():
    doc = json.loads(policy_io.dumps(_policy(4)))
    for sub in doc["sub_policies"]:
        for st in sub["stages"]:
            for op in st["ops"]:
                op["probability"] = 0.0
    text = json.dumps(doc, indent=2) + "\n"
    assert policy_io.dumps(policy_io.loads(text)) == text
