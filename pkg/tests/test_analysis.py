# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import io
import json

import numpy as np
import pandas as pd
import pytest

from ssmpeft import analysis
from ssmpeft.adapters import AdapterSpec, table_specs
from ssmpeft.archs import ArchConfig, builtin_configs, get_arch
from ssmpeft.errors import ContractError, UnknownArchError

MAMBA = ["mamba-130m", "mamba-370m", "mamba-790m", "mamba-1.4b", "mamba-2.8b"]


def pct(arch, method, **kwargs):
    return analysis.count_params(arch, AdapterSpec.with_defaults(method, **kwargs))[2]


def test_builtin_configs():
    configs = builtin_configs()
    for name in MAMBA:
        assert name in configs
    a = get_arch("mamba-130m")
    assert (a.d_model, a.n_layer, a.d_state, a.expand) == (768, 24, 16, 2)
    assert a.d_inner == 1536
    assert a.dt_rank == 48
    a = get_arch("mamba-2.8b")
    assert (a.d_model, a.n_layer) == (2560, 64)

    with pytest.raises(UnknownArchError):
        get_arch("mamba-7b")


def test_totals():
    assert get_arch("mamba-130m").param_count() == 129135360
    assert get_arch("mamba-1.4b").param_count() == 1372178432
    assert analysis.count_params("mamba-130m", AdapterSpec("frozen")) == (0, 129135360, 0.0)


@pytest.mark.parametrize("name", MAMBA)
def test_nominal_size(name):
    a = get_arch(name)
    assert abs(a.param_count() - a.nominal_params) / a.nominal_params < 0.03


@pytest.mark.parametrize(
    "arch,method,expected",
    [
        ("mamba-1.4b", "state_offset_h", 0.22872629533389424),
        ("mamba-1.4b", "initial_state", 0.22872629533389424),
        ("mamba-1.4b", "state_offset_y", 0.014326113071832024),
        ("mamba-130m", "state_offset_h", 0.4547),
        ("mamba-130m", "state_offset_y", 0.028538643106431304),
        ("mamba-2.8b", "state_offset_h", 0.1890),
        ("mamba-2.8b", "state_offset_y", 0.011835271513148709),
        ("mamba-1.4b", "lora", 0.4644),
        ("mamba-130m", "lora", 0.9239),
    ],
)
def test_params_pct(arch, method, expected):
    assert pct(arch, method) == pytest.approx(expected, abs=1e-4)


def test_params_pct_exact():
    trainable, total, p = analysis.count_params("mamba-1.4b", AdapterSpec("state_offset_h"))
    assert trainable == 48 * 4096 * 16
    assert total == 1372178432 + trainable
    assert p == pytest.approx(0.22872629533389424, rel=1e-12)


def test_full_all():
    for name in MAMBA:
        assert pct(name, "full_all") == pytest.approx(100.0)


def test_sdt_keeps_total():
    trainable, total, _ = analysis.count_params("mamba-130m", AdapterSpec.with_defaults("sdt"))
    assert total == 129135360
    # 768 of 1536 channels, 4 of 16 states, on A_log, W_B and W_C
    assert trainable == 24 * 3 * 768 * 4


def test_estimate_flops_base():
    spec = AdapterSpec("frozen")
    r = analysis.estimate_flops("mamba-130m", spec, 128)
    assert r.base_macs_per_token == 129595392
    assert r.extra_macs == 0
    assert abs(r.base_macs / 1e9 - 16.45) / 16.45 < 0.15

    r = analysis.estimate_flops("mamba-130m", spec, 128, convention="hooked")
    assert r.base_macs_per_token == 128415744


def test_estimate_flops_extras():
    y = analysis.estimate_flops("mamba-130m", AdapterSpec("state_offset_y"), 16)
    assert y.adapter_extra_macs_per_token == 24 * 1536
    h = analysis.estimate_flops("mamba-130m", AdapterSpec("state_offset_h"), 16)
    assert h.adapter_extra_macs_per_token == 24 * 1536 * 16

    # linear in the sequence length
    h2 = analysis.estimate_flops("mamba-130m", AdapterSpec("state_offset_h"), 32)
    assert h2.base_macs == 2 * h.base_macs
    assert h2.extra_macs == 2 * h.extra_macs

    d = h.to_dict()
    assert d["relative_overhead"] == pytest.approx(h.extra_macs / h.base_macs)


@pytest.mark.parametrize("name", MAMBA)
def test_flops_ordering(name):
    lora = AdapterSpec.with_defaults("lora")
    h = AdapterSpec("state_offset_h")
    y = AdapterSpec("state_offset_y")

    hooked = {s.method: analysis.estimate_flops(name, s, 128, "hooked") for s in [lora, h]}
    assert hooked["lora"].extra_macs / hooked["state_offset_h"].extra_macs >= 10

    analytic = {s.method: analysis.estimate_flops(name, s, 128) for s in [h, y]}
    assert analytic["state_offset_y"].relative_overhead < analytic["state_offset_h"].relative_overhead


def test_hooked_state_offset_overhead():
    r = analysis.estimate_flops("mamba-130m", AdapterSpec("state_offset_h"), 128, "hooked")
    assert 100 * r.relative_overhead == pytest.approx(0.029, abs=0.001)


def test_estimate_flops_errors():
    spec = AdapterSpec("state_offset_h")
    with pytest.raises(ContractError):
        analysis.estimate_flops("mamba-130m", spec, 0)
    with pytest.raises(ContractError):
        analysis.estimate_flops("mamba-130m", spec, 128, convention="measured")


def test_compare_methods():
    df = analysis.compare_methods("mamba-1.4b")
    assert list(df.columns) == analysis.COLUMNS
    assert len(df) == len(table_specs())
    assert df["params_pct"].is_monotonic_increasing
    assert df.iloc[0]["method"] == "frozen"
    assert df.iloc[-1]["method"] == "full_all"

    row = df[df["method"] == "state_offset_h"].iloc[0]
    assert row["params_pct"] == pytest.approx(0.2287, abs=0.01)
    assert row["group"] == "State based"

    # equal shares keep the input order
    df = analysis.compare_methods("mamba-130m", [AdapterSpec("state_offset_h"), AdapterSpec("initial_state")])
    assert list(df["method"]) == ["state_offset_h", "initial_state"]

    df = analysis.compare_methods("mamba-130m", [{"method": "state_offset_y"}])
    assert len(df) == 1


def test_render_table():
    df = analysis.compare_methods("mamba-130m", [AdapterSpec("state_offset_y"), AdapterSpec("state_offset_h")])
    csv = pd.read_csv(io.StringIO(analysis.render_table(df, "csv")))
    js = json.loads(analysis.render_table(df, "json"))
    assert len(js) == 2
    for i, rec in enumerate(js):
        for c in ["trainable", "total", "params_pct", "overhead_pct"]:
            assert rec[c] == pytest.approx(csv.iloc[i][c], rel=1e-12)

    text = analysis.render_table(df, "text")
    assert "0.0285%" in text

    with pytest.raises(ContractError):
        analysis.render_table(df, "xml")


def test_flops_table():
    specs = [AdapterSpec("state_offset_h"), AdapterSpec("state_offset_y")]
    df = analysis.flops_table("mamba-130m", specs, seq_len=64, convention="hooked")
    assert list(df.columns) == analysis.FLOP_COLUMNS
    assert list(df["method"]) == ["state_offset_h", "state_offset_y"]
    assert np.all(df["base_macs"] == 128415744 * 64)
    assert np.all(df["convention"] == "hooked")


def test_custom_arch():
    arch = ArchConfig(name="small", d_model=8, n_layer=2, d_state=4, vocab=16, dt_rank=2)
    trainable, total, _ = analysis.count_params(arch, AdapterSpec("state_offset_h"))
    assert trainable == 2 * 16 * 4
    assert total == arch.param_count() + trainable


def _metrics(method, acc, seed, spec=None):
    return {
        "method": method,
        "spec": {"method": method} if spec is None else spec,
        "lr": 0.01,
        "seed": seed,
        "params_pct": 0.5,
        "best_val_accuracy": acc,
        "best_val_loss": 1.0 - acc,
    }


def test_aggregate_runs():
    metrics = [
        _metrics("state_offset_h", 0.8, 0),
        _metrics("prompt_tuning", 0.5, 0, {"method": "prompt_tuning", "virtual_tokens_V": 4}),
        _metrics("state_offset_h", 0.6, 1),
        _metrics("full_s6", 0.9, 0),
    ]
    df = analysis.aggregate_runs(metrics)
    assert list(df.columns) == analysis.REPORT_COLUMNS
    # registry order
    assert list(df["method"]) == ["full_s6", "prompt_tuning", "state_offset_h"]

    row = df[df["method"] == "state_offset_h"].iloc[0]
    assert row["runs"] == 2
    assert row["best_val_accuracy_mean"] == pytest.approx(0.7)
    assert row["best_val_accuracy_std"] == pytest.approx(np.std([0.8, 0.6], ddof=1))
    assert row["best_val_loss_mean"] == pytest.approx(0.3)
    assert row["label"] == "State-offset Tuning (h)"

    df = analysis.aggregate_runs([])
    assert len(df) == 0
    assert list(df.columns) == analysis.REPORT_COLUMNS
