# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

"""Parameter-efficient fine-tuning methods for Mamba models.

Every method is described by an :class:`AdapterSpec`. :func:`apply_adapter`
turns a frozen :class:`MambaModel` into an :class:`AdaptedModel` whose
trainable parameters are the arrays the method adds plus the backbone
arrays it unfreezes.
"""

import copy
import logging
import math
import os
from collections import OrderedDict

import numpy as np
import yaml

from .archs import BIAS_ARRAYS, S6_ARRAYS
from .core import tensor as tn
from .core.tensor import Tape, Tensor
from .core.utils import derive_seed, make_rng
from .errors import ContractError, DimensionError
from .ssm import LayerHooks, MambaModel, ModelHooks, layer_scan

LOG = logging.getLogger(__name__)

ETC_PATH = os.path.join(os.path.dirname(__file__), "etc")

HYPERPARAMETERS = [
    "rank_r",
    "virtual_tokens_V",
    "extra_states",
    "sdt_keep_fraction",
    "lora_alpha",
]


class MethodRegistry:
    methods = OrderedDict()
    loaded = False

    @staticmethod
    def get(method):
        MethodRegistry._load()
        if method not in MethodRegistry.methods:
            raise ContractError(
                f"unknown method={method}, available: {', '.join(MethodRegistry.methods)}"
            )
        return MethodRegistry.methods[method]

    @staticmethod
    def names():
        MethodRegistry._load()
        return list(MethodRegistry.methods.keys())

    @staticmethod
    def _load():
        if MethodRegistry.loaded:
            return
        file_name = os.path.join(ETC_PATH, "methods.yaml")
        with open(file_name) as f:
            data = yaml.load(f, Loader=yaml.SafeLoader)
        for k, v in data.items():
            v.setdefault("requires", [])
            v.setdefault("optional", [])
            v.setdefault("defaults", {})
            MethodRegistry.methods[k] = v
        MethodRegistry.loaded = True


class AdapterSpec:
    """Immutable description of a PEFT method and its hyperparameters"""

    def __init__(self, method, **kwargs):
        conf = MethodRegistry.get(method)
        unknown = [k for k in kwargs if k not in HYPERPARAMETERS]
        if unknown:
            raise ContractError(f"AdapterSpec({method}): unknown hyperparameters {unknown}")
        allowed = set(conf["requires"]) | set(conf["optional"])
        given = {k: v for k, v in kwargs.items() if v is not None}
        extra = sorted(k for k in given if k not in allowed)
        if extra:
            raise ContractError(f"AdapterSpec({method}): {extra} not used by this method")
        missing = [k for k in conf["requires"] if k not in given]
        if missing:
            raise ContractError(f"AdapterSpec({method}): missing {missing}")

        for k in ["rank_r", "virtual_tokens_V", "extra_states"]:
            v = given.get(k, None)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                raise ContractError(f"AdapterSpec({method}): {k} must be a positive int (got {v!r})")
        if "lora_alpha" in given and not given["lora_alpha"] > 0:
            raise ContractError(f"AdapterSpec({method}): lora_alpha must be > 0")
        keep = given.get("sdt_keep_fraction", None)
        if keep is not None:
            keep = tuple(float(x) for x in keep)
            if len(keep) != 2 or not all(0.0 < x <= 1.0 for x in keep):
                raise ContractError(
                    f"AdapterSpec({method}): sdt_keep_fraction must be two fractions in (0, 1] (got {keep})"
                )
            given["sdt_keep_fraction"] = keep

        self.__dict__["method"] = method
        self.__dict__["params"] = given

    def __setattr__(self, name, value):
        raise AttributeError("AdapterSpec is immutable")

    def __getattr__(self, name):
        if name in HYPERPARAMETERS:
            return self.__dict__["params"].get(name, None)
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, AdapterSpec) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(self.key)

    def __repr__(self):
        return f"AdapterSpec({self.key})"

    @property
    def label(self):
        return MethodRegistry.get(self.method)["label"]

    @property
    def group(self):
        return MethodRegistry.get(self.method)["group"]

    @property
    def key(self):
        if not self.params:
            return self.method
        args = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.method}({args})"

    @property
    def lora_scale(self):
        alpha = self.rank_r if self.lora_alpha is None else self.lora_alpha
        return alpha / self.rank_r

    def to_dict(self):
        d = {"method": self.method}
        for k, v in self.params.items():
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "method" not in d:
            raise ContractError("AdapterSpec: 'method' is missing")
        method = d.pop("method")
        return AdapterSpec(method, **d)

    @staticmethod
    def with_defaults(method, **kwargs):
        """Spec using the table defaults for hyperparameters not given"""
        conf = MethodRegistry.get(method)
        params = copy.deepcopy(conf["defaults"])
        params.update({k: v for k, v in kwargs.items() if v is not None})
        return AdapterSpec(method, **params)


def table_specs():
    """One spec per method with the default hyperparameters of the tables"""
    return [AdapterSpec.with_defaults(m) for m in MethodRegistry.names()]


class ArraySpec:
    """Layout entry of an array added by an adapter.

    ``extends_total`` tells whether the array grows the model's parameter
    total; ``trainable_entries`` overrides the trainable count for sparse
    (masked) arrays.
    """

    def __init__(self, name, shape, init="zeros", extends_total=True, decay=False, trainable_entries=None):
        self.name = name
        self.shape = tuple(shape)
        self.init = init
        self.extends_total = extends_total
        self.decay = decay
        self.size = math.prod(self.shape)
        self.trainable_entries = self.size if trainable_entries is None else trainable_entries


def keep_count(fraction, n):
    """Entries kept out of ``n``: the frozen share is rounded down, so the
    kept share is rounded up, with at least one kept"""
    # round first so 0.3 * 10 keeps 3, not 4
    return min(n, max(1, math.ceil(round(fraction * n, 9))))


def sdt_keep_counts(arch, spec):
    kc, ks = spec.sdt_keep_fraction
    return keep_count(kc, arch.d_inner), keep_count(ks, arch.d_state)


def adapter_layout(arch, spec):
    """Return (trainable backbone names, added ArraySpecs) of ``spec`` on ``arch``"""
    e, h, r_dt = arch.d_inner, arch.d_state, arch.dt_rank
    block_names = list(arch.block_array_shapes().keys())
    backbone = []
    added = []
    m = spec.method

    if m == "full_all":
        backbone = list(arch.model_array_shapes().keys())
    elif m == "full_s6":
        backbone = [
            f"layers.{i}.{k}" for i in range(arch.n_layer) for k in block_names if k in S6_ARRAYS
        ]
    elif m == "bitfit":
        backbone = [
            f"layers.{i}.{k}" for i in range(arch.n_layer) for k in block_names if k in BIAS_ARRAYS
        ]
    elif m == "prompt_tuning":
        added.append(ArraySpec("prompt", (spec.virtual_tokens_V, arch.d_model), init="embedding_rows"))

    for i in range(arch.n_layer):
        p = f"layers.{i}."
        if m == "state_offset_h":
            added.append(ArraySpec(p + "h_prime", (e, h)))
        elif m == "state_offset_y":
            added.append(ArraySpec(p + "y_prime", (e,)))
        elif m == "state_offset_h_lowrank":
            r = spec.rank_r
            added.append(ArraySpec(p + "h_prime_U", (e, r), decay=True))
            added.append(ArraySpec(p + "h_prime_Vt", (r, h), init="uniform_fan_in", decay=True))
        elif m == "initial_state":
            added.append(ArraySpec(p + "h0_prime", (e, h)))
        elif m == "prefix_tuning":
            added.append(ArraySpec(p + "prefix", (spec.virtual_tokens_V, e), init="normal"))
        elif m == "lora":
            r = spec.rank_r
            added.append(ArraySpec(p + "lora_x_U", (r_dt + 2 * h, r), decay=True))
            added.append(ArraySpec(p + "lora_x_Vt", (r, e), init="uniform_fan_in", decay=True))
            added.append(ArraySpec(p + "lora_dt_U", (e, r), decay=True))
            added.append(ArraySpec(p + "lora_dt_Vt", (r, r_dt), init="uniform_fan_in", decay=True))
            added.append(ArraySpec(p + "lora_A_log", (e, h), init="copy:A_log"))
        elif m == "additional_scan":
            n = spec.extra_states
            added.append(ArraySpec(p + "scan_A_log", (e, n), init="extra_poles"))
            added.append(ArraySpec(p + "scan_W_B", (n, e), init="normal", decay=True))
            added.append(ArraySpec(p + "scan_W_C", (n, e), decay=True))
        elif m == "sdt":
            nc, ns = sdt_keep_counts(arch, spec)
            for k, shape in [("A_log", (e, h)), ("W_B", (h, e)), ("W_C", (h, e))]:
                added.append(
                    ArraySpec(
                        p + "sdt_" + k,
                        shape,
                        extends_total=False,
                        decay=k != "A_log",
                        trainable_entries=nc * ns,
                    )
                )
    return backbone, added


class AdaptedModel:
    """Backbone plus adapter arrays for one :class:`AdapterSpec`.

    ``masks`` maps adapter array names to boolean masks of their trainable
    entries (SDT); other arrays are trainable as a whole.
    """

    def __init__(self, model, spec, arrays, backbone_trainable, masks=None, layout=None):
        self.model = model
        self.spec = spec
        self.arrays = OrderedDict(arrays)
        self.backbone_trainable = list(backbone_trainable)
        self.masks = {} if masks is None else dict(masks)
        self.layout = OrderedDict((a.name, a) for a in ([] if layout is None else layout))

    def trainable_parameters(self):
        backbone = dict(self.model.named_arrays())
        r = OrderedDict((k, backbone[k]) for k in self.backbone_trainable)
        r.update(self.arrays)
        return r

    def frozen_parameters(self):
        trainable = set(self.backbone_trainable)
        return OrderedDict((k, v) for k, v in self.model.named_arrays() if k not in trainable)

    def decay_flags(self):
        """Whether decoupled weight decay applies to each trainable array"""
        r = OrderedDict()
        for k, v in self.trainable_parameters().items():
            if k in self.layout:
                r[k] = self.layout[k].decay
            else:
                r[k] = v.ndim >= 2 and not k.endswith("A_log")
        return r

    def hooks(self):
        """Insertion points of the adapter, built on the active tape"""
        m = self.spec.method
        a = self.arrays
        layers = {}
        prompt = a.get("prompt", None)
        for i, block in enumerate(self.model.blocks):
            p = f"layers.{i}."
            if m == "state_offset_h":
                layers[i] = LayerHooks(readout=_offset_h_readout(a[p + "h_prime"]))
            elif m == "state_offset_h_lowrank":
                h_prime = tn.matmul(a[p + "h_prime_U"], a[p + "h_prime_Vt"])
                layers[i] = LayerHooks(readout=_offset_h_readout(h_prime))
            elif m == "state_offset_y":
                layers[i] = LayerHooks(readout=_offset_y_readout(a[p + "y_prime"]))
            elif m == "initial_state":
                layers[i] = LayerHooks(h0=a[p + "h0_prime"])
            elif m == "prefix_tuning":
                layers[i] = LayerHooks(prefix=a[p + "prefix"])
            elif m == "lora":
                layers[i] = LayerHooks(ssm=_lora_ssm(block.ssm, a, p, self.spec.lora_scale))
            elif m == "additional_scan":
                s = block.ssm
                layers[i] = LayerHooks(
                    ssm=s.replace(
                        A_log=tn.concat([s.A_log, a[p + "scan_A_log"]], axis=1),
                        W_B=tn.concat([s.W_B, a[p + "scan_W_B"]], axis=0),
                        W_C=tn.concat([s.W_C, a[p + "scan_W_C"]], axis=0),
                    )
                )
            elif m == "sdt":
                s = block.ssm
                upd = {}
                for k in ["A_log", "W_B", "W_C"]:
                    name = p + "sdt_" + k
                    mask = Tensor(self.masks[name], copy=False)
                    upd[k] = getattr(s, k) + mask * a[name]
                layers[i] = LayerHooks(ssm=s.replace(**upd))
        return ModelHooks(prompt=prompt, layers=layers)

    def forward(self, tokens):
        return self.model.forward(tokens, hooks=self.hooks())

    def parameter_report(self):
        return trainable_parameter_report(self)

    def snapshot(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.trainable_parameters().items())

    def restore(self, snapshot):
        params = self.trainable_parameters()
        for k, v in snapshot.items():
            params[k].data[...] = v

    def to_arrays(self):
        """Backbone arrays plus adapter arrays prefixed with 'adapter.'"""
        r = OrderedDict(self.model.to_arrays())
        for k, v in self.arrays.items():
            r["adapter." + k] = v.data
        for k, v in self.masks.items():
            r["mask." + k] = v.astype(float)
        return r

    @staticmethod
    def from_arrays(arch, spec, arrays):
        backbone_names, layout = adapter_layout(arch, spec)
        model = MambaModel.from_arrays(arch, arrays, requires_grad=backbone_names)
        added = OrderedDict()
        masks = {}
        for a in layout:
            key = "adapter." + a.name
            if key not in arrays:
                raise DimensionError(f"AdaptedModel.from_arrays(): missing {key}")
            v = np.asarray(arrays[key], dtype=float)
            if v.shape != a.shape:
                raise DimensionError(f"AdaptedModel.from_arrays(): {key} has shape {v.shape}, expected {a.shape}")
            added[a.name] = Tensor(v, requires_grad=True, name=a.name)
            if "mask." + a.name in arrays:
                masks[a.name] = np.asarray(arrays["mask." + a.name]) > 0.5
        return AdaptedModel(model, spec, added, backbone_names, masks=masks, layout=layout)


def _offset_h_readout(h_prime):
    def _f(y, c):
        return apply_state_offset_h(y, c, h_prime)

    return _f


def _offset_y_readout(y_prime):
    def _f(y, c):
        return apply_state_offset_y(y, y_prime)

    return _f


def _lora_ssm(ssm, arrays, prefix, scale):
    r_dt = ssm.dt_rank
    h = ssm.d_state
    w_x = tn.concat([ssm.W_dt_in, ssm.W_B, ssm.W_C], axis=0)
    w_x = w_x + tn.matmul(arrays[prefix + "lora_x_U"], arrays[prefix + "lora_x_Vt"]) * scale
    w_dt = ssm.W_dt + tn.matmul(arrays[prefix + "lora_dt_U"], arrays[prefix + "lora_dt_Vt"]) * scale
    return ssm.replace(
        W_dt_in=w_x[:r_dt, :],
        W_B=w_x[r_dt : r_dt + h, :],
        W_C=w_x[r_dt + h :, :],
        W_dt=w_dt,
        A_log=arrays[prefix + "lora_A_log"],
    )


def _init_array(a, model, layer, rng):
    if a.init == "zeros":
        return np.zeros(a.shape)
    if a.init == "normal":
        return rng.normal(0.0, 0.02, size=a.shape)
    if a.init == "uniform_fan_in":
        bound = 1.0 / math.sqrt(a.shape[-1])
        return rng.uniform(-bound, bound, size=a.shape)
    if a.init == "embedding_rows":
        rows = rng.integers(0, model.arch.vocab, size=a.shape[0])
        return model.embedding.data[rows].copy()
    if a.init.startswith("copy:"):
        return getattr(model.blocks[layer].ssm, a.init[5:]).data.copy()
    if a.init == "extra_poles":
        return extra_poles(model.blocks[layer].ssm, a.shape[1])
    raise ContractError(f"unknown init={a.init} for {a.name}")


def apply_adapter(model, spec, seed=0, masks=None):
    """Attach ``spec`` to a frozen copy of ``model``.

    Trainable backbone arrays are copied so the source model is never
    modified. ``masks`` supplies SDT masks (see :func:`select_sdt_mask`);
    without them the lowest-index channels and states are kept.
    """
    backbone_names, layout = adapter_layout(model.arch, spec)
    arrays = dict(model.named_arrays())
    frozen = {k: (v.detach() if v.requires_grad else v) for k, v in arrays.items()}
    base = MambaModel.from_arrays(model.arch, frozen, requires_grad=backbone_names)

    added = OrderedDict()
    for a in layout:
        layer = int(a.name.split(".")[1]) if a.name.startswith("layers.") else None
        rng = make_rng(derive_seed(seed, spec.method, a.name))
        added[a.name] = Tensor(_init_array(a, base, layer, rng), requires_grad=True, name=a.name)

    sdt_masks = {}
    if spec.method == "sdt":
        nc, ns = sdt_keep_counts(model.arch, spec)
        if masks is None:
            LOG.info("apply_adapter(): no SDT masks given, keeping the lowest-index channels and states")
            masks = {
                i: sdt_masks_from_selection(model.arch.d_inner, model.arch.d_state, range(nc), range(ns))
                for i in range(model.arch.n_layer)
            }
        for i in range(model.arch.n_layer):
            for k in ["A_log", "W_B", "W_C"]:
                sdt_masks[f"layers.{i}.sdt_{k}"] = np.asarray(masks[i][k], dtype=bool)

    r = AdaptedModel(base, spec, added, backbone_names, masks=sdt_masks, layout=layout)
    trainable, total, pct = trainable_parameter_report(r)
    LOG.info(f"apply_adapter(): {spec.key} trainable={trainable} total={total} ({pct:.4f}%)")
    if trainable == 0 and spec.method != "frozen":
        LOG.warning(f"apply_adapter(): {spec.key} leaves no trainable parameters")
    return r


def apply_state_offset_h(y, C, h_prime):
    """y_t + C_t h' at every timestep"""
    y = tn.as_tensor(y)
    C = tn.as_tensor(C)
    h_prime = tn.as_tensor(h_prime)
    shape = y.shape + (C.shape[-1],)
    if C.shape != y.shape[:-1] + (C.shape[-1],) or h_prime.shape != shape[-2:]:
        raise DimensionError(
            f"apply_state_offset_h(): y {y.shape}, C {C.shape} and h' {h_prime.shape} do not match"
        )
    c = tn.broadcast(tn.reshape(C, C.shape[:-1] + (1, C.shape[-1])), shape)
    return y + tn.sum_(c * tn.broadcast(h_prime, shape), axis=-1)


def apply_state_offset_y(y, y_prime):
    """y_t + y' at every timestep"""
    y = tn.as_tensor(y)
    y_prime = tn.as_tensor(y_prime)
    if y_prime.shape != y.shape[-1:]:
        raise DimensionError(f"apply_state_offset_y(): y' {y_prime.shape} does not fit y {y.shape}")
    return y + tn.broadcast(y_prime, y.shape)


def apply_initial_state(params, x_seq, h0_prime):
    """Scan ``x_seq`` starting from the learned state h0' instead of zero"""
    h0_prime = tn.as_tensor(h0_prime)
    if h0_prime.shape != (params.d_inner, params.d_state):
        raise DimensionError(
            f"apply_initial_state(): h0' has shape {h0_prime.shape}, expected {(params.d_inner, params.d_state)}"
        )
    return layer_scan(params, x_seq, h0_prime)


def apply_prompt_tokens(embedded, prompt):
    """Prepend V learned embeddings to (..., T, d) token embeddings"""
    embedded = tn.as_tensor(embedded)
    prompt = tn.as_tensor(prompt)
    if prompt.ndim != 2 or prompt.shape[1] != embedded.shape[-1]:
        raise DimensionError(f"apply_prompt_tokens(): prompt {prompt.shape} does not fit {embedded.shape}")
    prompt = tn.broadcast(prompt, embedded.shape[:-2] + prompt.shape)
    return tn.concat([prompt, embedded], axis=-2)


def apply_prefix(x_seq, prefix):
    """Prepend V learned vectors to the SSM input of a layer"""
    return apply_prompt_tokens(x_seq, prefix)


def apply_bitfit(model):
    """Mask of the bias-bearing backbone arrays (conv and delta biases)"""
    r = OrderedDict()
    for k, _ in model.named_arrays():
        r[k] = k.split(".")[-1] in BIAS_ARRAYS
    if not any(r.values()):
        LOG.warning("apply_bitfit(): the model has no bias arrays, nothing to train")
    return r


class LoraWeight:
    """Frozen weight W with a trainable low-rank update scale * U @ Vt.

    U starts at zero so the effective weight initially equals W.
    """

    def __init__(self, W, U, Vt, scale=1.0):
        self.W = tn.as_tensor(W)
        self.U = tn.as_tensor(U)
        self.Vt = tn.as_tensor(Vt)
        self.scale = scale

    @property
    def rank(self):
        return self.U.shape[1]

    def effective(self):
        return self.W + tn.matmul(self.U, self.Vt) * self.scale

    def trainable_count(self):
        return self.U.size + self.Vt.size


def apply_lora(W, rank, seed=0, alpha=None):
    W = tn.as_tensor(W)
    if W.ndim != 2:
        raise DimensionError(f"apply_lora(): W must be a matrix, got {W.shape}")
    if not isinstance(rank, int) or rank < 1 or rank > min(W.shape):
        raise ContractError(f"apply_lora(): rank must be in [1, {min(W.shape)}] (got {rank})")
    rng = make_rng(seed)
    m, n = W.shape
    bound = 1.0 / math.sqrt(n)
    alpha = rank if alpha is None else alpha
    return LoraWeight(
        W.detach(),
        Tensor(np.zeros((m, rank)), requires_grad=True, name="U"),
        Tensor(rng.uniform(-bound, bound, size=(rank, n)), requires_grad=True, name="Vt"),
        scale=alpha / rank,
    )


def extra_poles(params, n_add):
    """A_log of ``n_add`` extra poles, more negative than the existing ones"""
    if not isinstance(n_add, int) or n_add < 1:
        raise ContractError(f"extra_poles(): n_add must be >= 1 (got {n_add})")
    a_max = float(np.max(np.exp(params.A_log.data)))
    poles = a_max + np.arange(1, n_add + 1, dtype=float)
    return np.log(np.tile(poles, (params.d_inner, 1)))


def apply_additional_scan(params, n_add, seed=0):
    """Extend an SSM layer with ``n_add`` extra states.

    The new W_B rows are small random and the new W_C rows zero, so the
    output is unchanged until the extra states are trained.
    """
    rng = make_rng(seed)
    return params.replace(
        A_log=np.concatenate([params.A_log.data, extra_poles(params, n_add)], axis=1),
        W_B=np.concatenate([params.W_B.data, rng.normal(0.0, 0.02, size=(n_add, params.d_inner))]),
        W_C=np.concatenate([params.W_C.data, np.zeros((n_add, params.d_inner))]),
    )


def sdt_masks_from_selection(d_inner, d_state, channels, states):
    ch = np.zeros(d_inner, dtype=bool)
    ch[list(channels)] = True
    st = np.zeros(d_state, dtype=bool)
    st[list(states)] = True
    a = np.outer(ch, st)
    return {"A_log": a, "W_B": a.T.copy(), "W_C": a.T.copy()}


def select_sdt_mask(model, warmup_batches, keep_fractions, loss_fn):
    """Pick per-layer channels and states with the largest gradient magnitude.

    The gradients of A_log, W_B and W_C are accumulated over
    ``warmup_batches`` (each passed to ``loss_fn(logits, batch)``); a
    channel or state scores the summed absolute gradient of its entries.
    Ties go to the lowest index. Returns {layer: {"A_log", "W_B", "W_C"}}.
    """
    spec = AdapterSpec("sdt", sdt_keep_fraction=keep_fractions)
    arch = model.arch
    nc, ns = sdt_keep_counts(arch, spec)
    names = [f"layers.{i}.{k}" for i in range(arch.n_layer) for k in ["A_log", "W_B", "W_C"]]
    probe = MambaModel.from_arrays(arch, dict(model.named_arrays()), requires_grad=names)
    params = dict(probe.named_arrays())

    acc = {k: np.zeros(params[k].shape) for k in names}
    n = 0
    for batch in warmup_batches:
        with Tape() as tape:
            loss = loss_fn(probe.forward(batch[0]), batch)
            tape.backward(loss)
        for k in names:
            g = tape.grad(params[k])
            if g is not None:
                acc[k] += np.abs(g)
        n += 1
    if n == 0:
        raise ContractError("select_sdt_mask(): no warmup batches")

    r = {}
    all_zero = True
    for i in range(arch.n_layer):
        ga = acc[f"layers.{i}.A_log"]
        gb = acc[f"layers.{i}.W_B"]
        gc = acc[f"layers.{i}.W_C"]
        channel_score = ga.sum(axis=1) + gb.sum(axis=0) + gc.sum(axis=0)
        state_score = ga.sum(axis=0) + gb.sum(axis=1) + gc.sum(axis=1)
        if np.any(channel_score > 0) or np.any(state_score > 0):
            all_zero = False
        channels = np.argsort(-channel_score, kind="stable")[:nc]
        states = np.argsort(-state_score, kind="stable")[:ns]
        r[i] = sdt_masks_from_selection(arch.d_inner, arch.d_state, channels, states)
    if all_zero:
        LOG.warning("select_sdt_mask(): all warmup gradients are zero, selection falls back to index order")
    return r


def trainable_parameter_report(adapted):
    """(trainable, total, percent) with total = backbone + arrays the
    adapter adds to the model"""
    trainable = 0
    for k, v in adapted.trainable_parameters().items():
        if k in adapted.masks:
            trainable += int(np.count_nonzero(adapted.masks[k]))
        else:
            trainable += v.size
    total = adapted.model.param_count()
    for k, v in adapted.arrays.items():
        a = adapted.layout.get(k, None)
        if a is None or a.extends_total:
            total += v.size
    return trainable, total, 100.0 * trainable / total
