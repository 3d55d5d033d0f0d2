# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

import logging
import math

import pandas as pd

from .adapters import AdapterSpec, adapter_layout, table_specs
from .archs import get_arch
from .errors import ContractError

LOG = logging.getLogger(__name__)

CONVENTIONS = ["analytic", "hooked"]


def count_params(arch, spec):
    """(trainable, total, percent) of ``spec`` applied to ``arch``.

    The total is the backbone (tied embedding counted once) plus every array
    the adapter adds to the model.
    """
    arch = get_arch(arch)
    shapes = arch.model_array_shapes()
    base = sum(math.prod(s) for s in shapes.values())
    backbone, added = adapter_layout(arch, spec)
    trainable = sum(math.prod(shapes[k]) for k in backbone)
    trainable += sum(a.trainable_entries for a in added)
    total = base + sum(a.size for a in added if a.extends_total)
    return trainable, total, 100.0 * trainable / total


class FlopReport:
    """Multiply-accumulate counts of one forward pass over ``seq_len`` tokens.

    ``extra_macs`` is the adapter's addition over the whole sequence;
    ``adapter_extra_macs_per_token`` spreads it evenly over the tokens.
    """

    def __init__(self, spec, seq_len, convention, base_macs_per_token, extra_per_token, extra_per_sequence):
        self.spec = spec
        self.seq_len = seq_len
        self.convention = convention
        self.base_macs_per_token = base_macs_per_token
        self.base_macs = base_macs_per_token * seq_len
        self.extra_macs = extra_per_token * seq_len + extra_per_sequence
        self.adapter_extra_macs_per_token = self.extra_macs / seq_len

    @property
    def relative_overhead(self):
        return self.extra_macs / self.base_macs

    def to_dict(self):
        return {
            "method": self.spec.method,
            "seq_len": self.seq_len,
            "convention": self.convention,
            "base_macs_per_token": self.base_macs_per_token,
            "adapter_extra_macs_per_token": self.adapter_extra_macs_per_token,
            "base_macs": self.base_macs,
            "extra_macs": self.extra_macs,
            "relative_overhead": self.relative_overhead,
        }


def _layer_macs(arch, convention):
    d, e, h, r, k = arch.d_model, arch.d_inner, arch.d_state, arch.dt_rank, arch.conv_width
    # in_proj, x_proj, dt_proj, out_proj
    linear = d * 2 * e + e * (r + 2 * h) + r * e + e * d
    conv = e * k
    if convention == "hooked":
        return linear + conv
    return linear + conv + 2 * e * h


def _adapter_macs(arch, spec, convention, base_per_token):
    """(per token, per sequence) extra MACs of the adapter"""
    e, h, r_dt, n = arch.d_inner, arch.d_state, arch.dt_rank, arch.n_layer
    m = spec.method
    analytic = convention == "analytic"
    if m == "state_offset_h":
        return n * (e * h if analytic else e), 0
    if m == "state_offset_h_lowrank":
        # h' = U Vt is formed once per forward
        return n * (e * h if analytic else e), n * e * spec.rank_r * h
    if m == "state_offset_y":
        return n * e, 0
    if m == "lora":
        r = spec.rank_r
        return n * (r * ((r_dt + 2 * h) + e) + r * (e + r_dt)), 0
    if m == "additional_scan":
        k = spec.extra_states
        per_layer = 2 * k * e + (2 * e * k if analytic else 0)
        return n * per_layer, 0
    if m == "prompt_tuning":
        return 0, spec.virtual_tokens_V * base_per_token
    if m == "prefix_tuning":
        per_pos = e * (r_dt + 2 * h) + r_dt * e + (2 * e * h if analytic else 0)
        return 0, n * spec.virtual_tokens_V * per_pos
    # full, bitfit, sdt merge into the backbone; initial_state only changes h0
    return 0, 0


def estimate_flops(arch, spec, seq_len, convention="analytic"):
    """MAC counts of ``spec`` on ``arch``.

    ``analytic`` counts every multiply of the linear layers, the depthwise
    convolution, the scan update and readout (D*H each per token) and the
    head. ``hooked`` counts only parametrised linear and convolution modules
    plus the head, as a per-module hook counter sees the model.
    """
    arch = get_arch(arch)
    if convention not in CONVENTIONS:
        raise ContractError(f"estimate_flops(): convention must be one of {CONVENTIONS} (got {convention})")
    if not isinstance(seq_len, int) or seq_len < 1:
        raise ContractError(f"estimate_flops(): seq_len must be a positive int (got {seq_len})")
    base = arch.n_layer * _layer_macs(arch, convention) + arch.d_model * arch.vocab
    per_token, per_seq = _adapter_macs(arch, spec, convention, base)
    return FlopReport(spec, seq_len, convention, base, per_token, per_seq)


COLUMNS = [
    "group",
    "method",
    "label",
    "spec",
    "trainable",
    "total",
    "params_pct",
    "base_macs_per_token",
    "extra_macs_per_token",
    "overhead_pct",
]


def compare_methods(arch, specs=None, seq_len=128, convention="analytic"):
    """Parameter and MAC table of ``specs`` on ``arch``, sorted by the
    trainable share (stable, so equal shares keep their input order)"""
    arch = get_arch(arch)
    specs = table_specs() if specs is None else specs
    rows = []
    for spec in specs:
        if not isinstance(spec, AdapterSpec):
            spec = AdapterSpec.from_dict(spec)
        trainable, total, pct = count_params(arch, spec)
        flops = estimate_flops(arch, spec, seq_len, convention)
        rows.append(
            {
                "group": spec.group,
                "method": spec.method,
                "label": spec.label,
                "spec": spec.key,
                "trainable": trainable,
                "total": total,
                "params_pct": pct,
                "base_macs_per_token": flops.base_macs_per_token,
                "extra_macs_per_token": flops.adapter_extra_macs_per_token,
                "overhead_pct": 100.0 * flops.relative_overhead,
            }
        )
    df = pd.DataFrame(rows, columns=COLUMNS)
    df = df.sort_values("params_pct", kind="mergesort").reset_index(drop=True)
    LOG.debug(f"compare_methods(): {len(df)} rows for {arch.name}")
    return df


FLOP_COLUMNS = [
    "method",
    "label",
    "spec",
    "convention",
    "seq_len",
    "base_macs",
    "extra_macs",
    "overhead_pct",
]


def flops_table(arch, specs=None, seq_len=128, convention="analytic"):
    arch = get_arch(arch)
    specs = table_specs() if specs is None else specs
    rows = []
    for spec in specs:
        r = estimate_flops(arch, spec, seq_len, convention)
        rows.append(
            {
                "method": spec.method,
                "label": spec.label,
                "spec": spec.key,
                "convention": convention,
                "seq_len": seq_len,
                "base_macs": r.base_macs,
                "extra_macs": r.extra_macs,
                "overhead_pct": 100.0 * r.relative_overhead,
            }
        )
    return pd.DataFrame(rows, columns=FLOP_COLUMNS)


def render_table(df, fmt="text"):
    """CSV, JSON (records) or plain text rendering of a report table"""
    if fmt == "csv":
        return df.to_csv(index=False)
    elif fmt == "json":
        return df.to_json(orient="records", double_precision=15)
    elif fmt == "text":
        out = df.copy()
        for c in out.columns:
            if c.endswith("_pct"):
                out[c] = out[c].map(lambda v: f"{v:.4f}%")
        return out.to_string(index=False)
    raise ContractError(f"render_table(): unknown format={fmt}")


REPORT_COLUMNS = [
    "group",
    "method",
    "label",
    "runs",
    "params_pct",
    "best_val_accuracy_mean",
    "best_val_accuracy_std",
    "best_val_loss_mean",
]


def aggregate_runs(metrics):
    """Per-method summary of RunMetrics dicts (one per run/seed), in the
    order methods are listed in the method registry"""
    from .adapters import MethodRegistry

    rows = []
    for m in metrics:
        spec = AdapterSpec.from_dict(m["spec"]) if m.get("spec") else AdapterSpec(m["method"])
        rows.append(
            {
                "group": spec.group,
                "method": spec.method,
                "label": spec.label,
                "params_pct": m["params_pct"],
                "best_val_accuracy": m.get("best_val_accuracy", None),
                "best_val_loss": m.get("best_val_loss", None),
            }
        )
    if not rows:
        return pd.DataFrame(columns=REPORT_COLUMNS)
    df = pd.DataFrame(rows)
    df["best_val_accuracy"] = pd.to_numeric(df["best_val_accuracy"])
    df["best_val_loss"] = pd.to_numeric(df["best_val_loss"])
    g = df.groupby(["group", "method", "label"], sort=False)
    r = g.agg(
        runs=("params_pct", "size"),
        params_pct=("params_pct", "mean"),
        best_val_accuracy_mean=("best_val_accuracy", "mean"),
        best_val_accuracy_std=("best_val_accuracy", "std"),
        best_val_loss_mean=("best_val_loss", "mean"),
    ).reset_index()
    order = {k: i for i, k in enumerate(MethodRegistry.names())}
    r["_order"] = r["method"].map(order)
    r = r.sort_values("_order", kind="mergesort").drop(columns="_order").reset_index(drop=True)
    return r[REPORT_COLUMNS]
