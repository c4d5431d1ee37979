import glob
import os
from dataclasses import replace

import pytest

from errors import ConfigError
from settings import (
    CONFIG_DIR,
    RetentionPolicy,
    apply_env_overrides,
    load_config,
    parse_config,
    serialize_config,
    with_overrides,
)

MINIMAL = """
potential:
  r0: 0.8
  d: 0.03
  v0: 20
  a: 2.0
  wells: 3
"""


def test_minimal_config_takes_defaults():
    cfg = parse_config(MINIMAL)
    assert cfg.potential.v0 == 20.0
    assert isinstance(cfg.potential.v0, float)
    assert cfg.potential.wells == 3
    assert cfg.solver.method == "arpack"
    assert cfg.analysis.tail.min_bins == 8
    assert cfg.analysis.thresholds.xi_fraction == pytest.approx(1 / 3)
    assert len(cfg.config_hash) == 12


def test_serialized_config_parses_to_the_same_hash():
    cfg = parse_config(MINIMAL + "solver:\n  points_by_size: {3: 160}\n")
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert again.config_hash == cfg.config_hash


def test_output_location_does_not_change_hash():
    a = parse_config(MINIMAL + "output:\n  root: /tmp/a\n")
    b = parse_config(MINIMAL + "output:\n  root: /tmp/b\n  workers: 2\n")
    assert a.config_hash == b.config_hash
    c = parse_config(MINIMAL + "solver:\n  n_states: 41\n")
    assert c.config_hash != a.config_hash


def test_missing_required_key_is_named():
    text = MINIMAL.replace("  v0: 20\n", "")
    with pytest.raises(ConfigError, match="potential.v0"):
        parse_config(text)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="unknown key solver.n_statez"):
        parse_config(MINIMAL + "solver:\n  n_statez: 10\n")


@pytest.mark.parametrize(
    "extra, key",
    [
        ("solver:\n  n_states: ten\n", "solver.n_states"),
        ("solver:\n  method: lanczos\n", "solver.method"),
        ("disorder:\n  seeds: 3\n", "disorder.seeds"),
        ("solver:\n  tol: -1.0\n", "solver.tol"),
        ("sweep:\n  sizes: []\n", "sweep.sizes"),
        ("analysis:\n  radial_bins: 4\n", "analysis.radial_bins"),
        ("analysis:\n  q_list: [1.5]\n", "analysis.q_list"),
    ],
)
def test_invalid_values_are_named(extra, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(MINIMAL + extra)


def test_yaml_error_reports_line_and_column():
    text = "potential:\n  r0: 0.8\n  d: [0.03\n"
    with pytest.raises(ConfigError, match=r"exp\.yaml:\d+:\d+"):
        parse_config(text, source="exp.yaml")


def test_stats_windows_need_one_kind():
    bad = MINIMAL + "analysis:\n  stats_windows:\n    - name: x\n      e_norm: [0.0, 1.0]\n      index: [0, 3]\n"
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config(bad)
    good = MINIMAL + "analysis:\n  stats_windows:\n    - name: low\n      index: [0, 30]\n"
    assert parse_config(good).analysis.stats_windows == [{"name": "low", "index": [0, 30]}]


def test_env_overrides(monkeypatch):
    cfg = parse_config(MINIMAL + "output:\n  workers: 8\n")
    monkeypatch.setenv("LOCLAB_OUTPUT_ROOT", "/data/loclab")
    monkeypatch.setenv("LOCLAB_THREADS", "3")
    out = apply_env_overrides(cfg)
    assert out.output.root == "/data/loclab"
    assert out.output.workers == 3
    assert out.config_hash == cfg.config_hash


def test_bad_thread_count_is_rejected(monkeypatch):
    monkeypatch.setenv("LOCLAB_THREADS", "many")
    with pytest.raises(ConfigError):
        apply_env_overrides(parse_config(MINIMAL))


def test_no_env_keeps_config(monkeypatch):
    monkeypatch.delenv("LOCLAB_OUTPUT_ROOT", raising=False)
    monkeypatch.delenv("LOCLAB_THREADS", raising=False)
    cfg = parse_config(MINIMAL)
    assert apply_env_overrides(cfg) is cfg


def test_command_line_overrides():
    cfg = with_overrides(parse_config(MINIMAL), seeds=[4, 5], root="elsewhere", workers=2)
    assert cfg.disorder.seeds == [4, 5]
    assert cfg.output.root == "elsewhere"
    assert cfg.output.workers == 2
    with pytest.raises(ConfigError):
        with_overrides(cfg, seeds=[])


@pytest.mark.parametrize(
    "policy, expected",
    [
        (RetentionPolicy("all"), [0, 1, 2, 3, 4]),
        (RetentionPolicy("none"), []),
        (RetentionPolicy("every", every=2), [0, 2, 4]),
        (RetentionPolicy("window", e_lo=1.5, e_hi=3.0), [2, 3]),
        (RetentionPolicy("window", e_hi=1.0), [0, 1]),
    ],
)
def test_retention_selection(policy, expected):
    assert policy.select([0.0, 1.0, 2.0, 3.0, 4.0]) == expected


def test_amplitude_mean_scales_with_depth():
    cfg = parse_config(MINIMAL + "disorder:\n  strength: 0.3\n")
    assert cfg.disorder.amp_mean(cfg.potential.v0) == pytest.approx(6.0)


def test_with_wells_keeps_the_rest():
    cfg = parse_config(MINIMAL)
    section = cfg.potential.with_wells(5)
    assert section.fermi.side_length == 10.0
    assert replace(section, wells=3) == cfg.potential


@pytest.mark.parametrize("path", sorted(glob.glob(os.path.join(CONFIG_DIR, "*.yaml"))))
def test_shipped_configs_load(path):
    if os.path.basename(path) == "defaults.yaml":
        pytest.skip("defaults are merged, not loaded")
    cfg = load_config(path)
    assert cfg.potential.wells >= 1


def test_unreadable_config_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.yaml"))
