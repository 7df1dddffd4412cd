import pytest

from tierserve.arch import ConfigError
from tierserve.config import DEFAULTS, build_config, parse_config, reference_page

MINIMAL = """
[arch]
preset = "mistral-7b"

[topology]
lp = 2
hp = 1

[slo]
preset = "sharegpt"
"""


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_minimal_config(tmp_path):
    c = parse_config(write(tmp_path, MINIMAL))
    assert c.arch_name == "mistral-7b"
    assert (c.topology.num_lp, c.topology.num_hp) == (2, 1)
    assert (c.slo.ttft, c.slo.tbt) == (1.0, 0.15)
    assert c.topology.lp_max_batch == 128
    assert c.scheduler.policy.kind.value == "edf"
    assert c.topology.kv_blocks > 0


def test_unknown_key_named(tmp_path):
    p = write(tmp_path, MINIMAL + "\n[scheduler]\nbatchsize = 4\n")
    with pytest.raises(ConfigError, match="scheduler.batchsize"):
        parse_config(p)
    with pytest.raises(ConfigError, match="unknown config section"):
        build_config({"gpu": {"count": 3}})


def test_override_supersedes_file(tmp_path):
    p = write(tmp_path, MINIMAL + "\n[workload]\nqps = 1.0\n")
    assert parse_config(p).workload.qps == 1.0
    assert parse_config(p, {"workload.qps": 3.0}).workload.qps == 3.0


@pytest.mark.parametrize("raw,msg", [
    ({"arch": {"preset": "gpt-5"}}, "gpt-5"),
    ({"topology": {"lp": -1}}, "topology.lp"),
    ({"scheduler": {"variant": "orca"}}, "scheduler.variant"),
    ({"scheduler": {"policy": "random"}}, "scheduler.policy"),
    ({"scheduler": {"drop": "yes"}}, "scheduler.drop"),
    ({"topology": {"hp": 0}}, "offloading needs an HP"),
    ({"latency": {"coeffs": [1, 2]}}, "latency.coeffs"),
    ({"slo": {"ttft": 1.0}}, "together"),
    ({"workload": {"dataset": "wiki"}}, "wiki"),
    ({"arch": {"hidden_size": 8}}, "missing"),
    ({"topology": {"block_size": 1.5}}, "integer"),
])
def test_schema_errors(raw, msg):
    with pytest.raises(ConfigError, match=msg):
        build_config(raw)


def test_lp_only_tiered_without_offload():
    c = build_config({"topology": {"hp": 0}, "scheduler": {"offload": False}})
    assert c.topology.num_hp == 0


def test_slo_model_and_scale():
    c = build_config({"arch": {"preset": "qwen-14b"}, "slo": {"preset": "longbench", "scale": 0.5}})
    assert (c.slo.ttft_slo, c.slo.tbt_slo) == (3.0, 0.15)
    assert c.slo.ttft == 1.5


def test_relative_trace_resolved_against_config_dir(tmp_path):
    (tmp_path / "t.csv").write_text("10,20\n")
    c = parse_config(write(tmp_path, MINIMAL + '\n[workload]\ntrace = "t.csv"\n'))
    assert c.workload.trace == str(tmp_path / "t.csv")


def test_config_hash_stable_and_sensitive():
    a = build_config({}, {"workload.qps": 2.0})
    b = build_config({"workload": {"qps": 2.0}})
    c = build_config({}, {"workload.qps": 2.5})
    assert a.config_hash == b.config_hash != c.config_hash


def test_reference_page_lists_every_key():
    page = reference_page()
    for section, keys in DEFAULTS.items():
        assert f"## [{section}]" in page
        for k in keys:
            assert f"`{k}`" in page


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        parse_config("/nonexistent/exp.toml")
