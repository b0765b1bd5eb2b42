import io
import json
import dataclasses
import subprocess
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paasim.cli.config import (
    DEFAULT_SERVICE_CONFIG,
    KNOWN_SETTINGS,
    Certificate,
    ParseError,
    RoleConfig,
    ServiceConfig,
    ValidationError,
    default_service_config,
    emit,
    load_pool_config,
    parse_config,
)
from paasim.cli.experiments import UnknownExperiment, Workload, fig21, fig22, fig24, run_experiment
from paasim.cli.main import main
from paasim.cluster import default_pool_config


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


# ─── service configuration ───────────────────────────────────────────────────

def test_default_config_parses():
    cfg = default_service_config()
    assert cfg.service_name == "AnekaOnWindowsAzure"
    assert cfg.worker_count == 5
    assert cfg.worker_role.name == "AnekaWorker" and cfg.master_role.name == "AnekaMaster"
    assert str(cfg.index_server_uri) == "tcp://localhost:3333/Aneka"
    assert cfg.shared_key.startswith("Qq6dth")
    assert cfg.ignored == ["AdoConnectionString"]
    assert cfg.role("AnekaMaster").certificates[0] == Certificate(
        "SelfManagement", "81841B188C32BE42B5256CAED1CE905099785CA9", "sha1")


def _without(setting):
    return "\n".join(l for l in DEFAULT_SERVICE_CONFIG.splitlines() if f'name="{setting}"' not in l)


def test_missing_shared_key():
    with pytest.raises(ValidationError) as e:
        parse_config(_without("SharedKey"))
    assert e.value.key == "SharedKey"


def test_bad_deployment_level():
    text = DEFAULT_SERVICE_CONFIG.replace('name="DeploymentLevel" value="Master"',
                                          'name="DeploymentLevel" value="Proxy"', 1)
    with pytest.raises(ValidationError) as e:
        parse_config(text)
    assert e.value.key == "DeploymentLevel"


@pytest.mark.parametrize("mutate,key", [
    (lambda t: t.replace('name="ResourcePool"', 'name="Mystery"', 1), "Mystery"),
    (lambda t: t.replace('<Instances count="5" />', '<Instances count="five" />'), "Instances"),
    (lambda t: t.replace('<Instances count="5" />', '<Instances count="-1" />'), "Instances"),
    (lambda t: t.replace('value="tcp://localhost:3333/Aneka"', 'value="http://x"', 1), "IndexServerUri"),
    (lambda t: t.replace('<Role name="AnekaWorker">', '<Role>'), "name"),
])
def test_validation_errors(mutate, key):
    with pytest.raises(ValidationError) as e:
        parse_config(mutate(DEFAULT_SERVICE_CONFIG))
    assert e.value.key == key


def test_parse_error_has_position():
    with pytest.raises(ParseError) as e:
        parse_config(DEFAULT_SERVICE_CONFIG.replace("</Role>", "</Rol>", 1))
    assert e.value.line > 1


def test_cloud_mode_needs_a_worker():
    cfg = parse_config(DEFAULT_SERVICE_CONFIG.replace('<Instances count="5" />', '<Instances count="0" />'))
    with pytest.raises(ValidationError):
        cfg.validate(cloud_mode=True)
    assert cfg.validate(cloud_mode=False) is cfg


_value = st.text(st.characters(blacklist_categories=("Cs", "Cc")), max_size=20)
_settings = st.fixed_dictionaries({"SharedKey": _value.filter(str.strip)},
                                  optional={k: _value for k in KNOWN_SETTINGS
                                            if k not in ("SharedKey", "IndexServerUri", "DeploymentLevel")})
_role = st.builds(RoleConfig, st.text("abcXYZ", min_size=1, max_size=8).map(lambda s: s + "Worker")
                  | st.text("abcXYZ", min_size=1, max_size=8), st.integers(0, 50), _settings,
                  st.lists(st.builds(Certificate, _value, st.text("0123456789ABCDEF", min_size=1)), max_size=2))


@settings(max_examples=80, deadline=None)
@given(st.builds(ServiceConfig, _value, st.lists(_role, min_size=1, max_size=3)))
def test_config_round_trip(cfg):
    assert parse_config(emit(cfg)) == cfg


def test_pool_config_file(tmp_path):
    p = tmp_path / "pool.json"
    p.write_text(json.dumps(dataclasses.asdict(default_pool_config(8))))
    assert load_pool_config(p).capacity == 8
    p.write_text("{bad")
    with pytest.raises(ParseError):
        load_pool_config(p)
    p.write_text(json.dumps({**dataclasses.asdict(default_pool_config()), "capacity": -1}))
    with pytest.raises(ValidationError) as e:
        load_pool_config(p)
    assert e.value.key == "capacity"


# ─── experiments ─────────────────────────────────────────────────────────────

SMALL_WL = Workload(tiles=8, width=80, height=40, max_iter=64)


def test_worker_mode_slower_than_cloud_mode():
    w = fig21(counts=[1, 4], workload=SMALL_WL)
    c = fig22(counts=[1, 4], workload=SMALL_WL)
    assert all(a > b for a, b in zip(w.column("elapsed_ms"), c.column("elapsed_ms")))
    assert w.column("elapsed_ms")[0] > w.column("elapsed_ms")[1]


def test_fig24_distribution():
    r = fig24(workers=4, units=40)
    assert r.column("executed_count") == [10, 10, 10, 10]
    assert r.csv().splitlines()[0] == "instance,node,executed_count"


def test_unknown_experiment():
    with pytest.raises(UnknownExperiment):
        run_experiment("fig99")


# ─── command line ────────────────────────────────────────────────────────────

def test_deploy_command(tmp_path):
    code, out, _ = run("--out", str(tmp_path), "deploy")
    assert code == 0 and out.count("Online") == 5
    assert "trace sha256" in out
    rows = (tmp_path / "membership.csv").read_text().splitlines()
    assert rows[0] == "node,status,size,executed" and len(rows) == 6
    assert (tmp_path / "trace.jsonl").exists() and (tmp_path / "status.txt").exists()


def test_deploy_worker_mode_uses_proxy_uris():
    code, out, _ = run("--mode", "worker", "--workers", "3", "deploy")
    assert code == 0 and out.count("tcp://anekacloud.cloudapp.net:9090/Aneka?ie=") == 3


def test_scale_command():
    code, out, _ = run("--workers", "2", "scale", "4")
    assert code == 0 and "workers=4" in out


def test_status_with_kills():
    code, out, _ = run("--workers", "4", "status", "--kill", "2")
    assert code == 0 and out.count("Dead") == 2 and out.count("Online") == 2


def test_accounting_command(tmp_path):
    code, out, _ = run("--workers", "2", "--out", str(tmp_path), "accounting", "--minutes", "61")
    assert code == 0
    table = (tmp_path / "accounting.csv").read_text().splitlines()
    assert len(table) == 4
    assert "total,8.0" in out  # 2 small + 1 medium, each billed two hours


def test_run_experiment_command(tmp_path):
    code, out, _ = run("--workers", "2", "--out", str(tmp_path), "run-experiment", "fig22",
                       "--tiles", "4", "--width", "40", "--height", "20", "--max-iter", "16")
    assert code == 0 and out.startswith("workers,elapsed_ms,elapsed_s\n2,")
    assert (tmp_path / "fig22.csv").exists() and (tmp_path / "trace.jsonl").stat().st_size > 0


def test_same_seed_same_digest():
    a = run("--seed", "7", "--workers", "3", "status", "--kill", "1")[1]
    b = run("--seed", "7", "--workers", "3", "status", "--kill", "1")[1]
    assert a == b


def test_script(tmp_path):
    script = tmp_path / "s.txt"
    script.write_text("""# a small session
deploy 2
provision fixedqueue 5 2
submit 30 1600
mandelbrot 40 20 4 16 m.ppm
wait
status
delete
accounting
""")
    code, out, err = run("--out", str(tmp_path), "script", str(script))
    assert code == 0, err
    assert out.count("elapsed_ms=") == 2
    assert (tmp_path / "m.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "accounting.csv").exists()


@pytest.mark.parametrize("argv", [
    ["run-experiment", "fig99"],
    ["--capacity", "2", "--workers", "5", "deploy"],
])
def test_errors_exit_2(argv):
    code, _, err = run(*argv)
    assert code == 2 and err.startswith("error:")


def test_bad_script_step(tmp_path):
    s = tmp_path / "s.txt"
    s.write_text("deploy 1\nfly away\n")
    code, _, err = run("script", str(s))
    assert code == 2 and "line 2" in err
    s.write_text("deploy\nsubmit x 1\n")
    code, _, err = run("script", str(s))
    assert code == 2 and "line 2" in err


def test_bad_config_file(tmp_path):
    p = tmp_path / "svc.cscfg"
    p.write_text(_without("SharedKey"))
    code, _, err = run("--config", str(p), "deploy")
    assert code == 2 and "SharedKey" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "paasim", "--workers", "1", "deploy"],
                          capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0 and "Online" in proc.stdout
