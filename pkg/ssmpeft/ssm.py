# (C) Copyright 2024- ssmpeft developers.
#
# This software is licensed under the terms of the Apache Licence Version 2.0
# which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
#

"""Time-invariant (S4) and selective (S6) SSM layers and the Mamba model.

Sequences have shape (..., T, D): an optional leading batch axis, time,
channels. Hidden states have shape (..., D, H).
"""

import logging

import numpy as np

from .archs import get_arch
from .core import maths
from .core import tensor as tn
from .core.tensor import Tensor
from .core.utils import derive_seed, make_rng
from .errors import ContractError, DimensionError, NumericError

LOG = logging.getLogger(__name__)


def _check_shape(owner, name, t, shape):
    if t.shape != tuple(shape):
        raise DimensionError(f"{owner}: {name} has shape {t.shape}, expected {tuple(shape)}")


class SsmLayerParams:
    """Parameters of one selective SSM layer.

    A = -exp(A_log) keeps every pole strictly negative. The input-dependent
    quantities are B_t = W_B x_t, C_t = W_C x_t and
    delta_t = softplus(W_dt (W_dt_in x_t) + b_dt).
    """

    NAMES = ["A_log", "W_dt_in", "W_B", "W_C", "W_dt", "b_dt", "skip_D"]

    def __init__(self, A_log, W_B, W_C, W_dt, W_dt_in, b_dt, skip_D):
        self.A_log = tn.as_tensor(A_log)
        self.W_B = tn.as_tensor(W_B)
        self.W_C = tn.as_tensor(W_C)
        self.W_dt = tn.as_tensor(W_dt)
        self.W_dt_in = tn.as_tensor(W_dt_in)
        self.b_dt = tn.as_tensor(b_dt)
        self.skip_D = tn.as_tensor(skip_D)
        if self.A_log.ndim != 2 or self.W_dt_in.ndim != 2:
            raise DimensionError(
                f"SsmLayerParams: A_log and W_dt_in must be matrices, got {self.A_log.shape} {self.W_dt_in.shape}"
            )
        d, h, r = self.d_inner, self.d_state, self.dt_rank
        owner = "SsmLayerParams"
        _check_shape(owner, "W_B", self.W_B, (h, d))
        _check_shape(owner, "W_C", self.W_C, (h, d))
        _check_shape(owner, "W_dt_in", self.W_dt_in, (r, d))
        _check_shape(owner, "W_dt", self.W_dt, (d, r))
        _check_shape(owner, "b_dt", self.b_dt, (d,))
        _check_shape(owner, "skip_D", self.skip_D, (d,))

    @property
    def d_inner(self):
        return self.A_log.shape[0]

    @property
    def d_state(self):
        return self.A_log.shape[1]

    @property
    def dt_rank(self):
        return self.W_dt_in.shape[0]

    def A(self):
        return -tn.exp(self.A_log)

    def arrays(self):
        return {k: getattr(self, k) for k in self.NAMES}

    def replace(self, **kwargs):
        d = self.arrays()
        d.update(kwargs)
        return SsmLayerParams(**d)

    @staticmethod
    def random(
        seed, d_inner, d_state, dt_rank=None, weight_scale=0.02, dt_min=1e-3, dt_max=1e-1
    ):
        """Initialise as the reference Mamba layer does: S4D-real poles
        A[:, n] = -(n + 1), delta bias drawn log-uniformly in [dt_min, dt_max]
        through the inverse softplus, unit skip.
        """
        rng = make_rng(seed)
        dt_rank = d_inner if dt_rank is None else dt_rank
        A_log = np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (d_inner, 1)))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        return SsmLayerParams(
            A_log=A_log,
            W_B=rng.normal(0.0, weight_scale, size=(d_state, d_inner)),
            W_C=rng.normal(0.0, weight_scale, size=(d_state, d_inner)),
            W_dt=rng.uniform(-(dt_rank**-0.5), dt_rank**-0.5, size=(d_inner, dt_rank)),
            W_dt_in=rng.normal(0.0, weight_scale, size=(dt_rank, d_inner)),
            b_dt=maths.inverse_softplus_array(dt),
            skip_D=np.ones(d_inner),
        )


class S4LayerParams:
    """Time-invariant layer: delta = softplus(b_dt) and B, C shared by all
    channels and constant over time.
    """

    NAMES = ["A_log", "B", "C", "b_dt", "skip_D"]

    def __init__(self, A_log, B, C, b_dt, skip_D):
        self.A_log = tn.as_tensor(A_log)
        self.B = tn.as_tensor(B)
        self.C = tn.as_tensor(C)
        self.b_dt = tn.as_tensor(b_dt)
        self.skip_D = tn.as_tensor(skip_D)
        if self.A_log.ndim != 2:
            raise DimensionError(f"S4LayerParams: A_log must be a matrix, got {self.A_log.shape}")
        d, h = self.A_log.shape
        _check_shape("S4LayerParams", "B", self.B, (h,))
        _check_shape("S4LayerParams", "C", self.C, (h,))
        _check_shape("S4LayerParams", "b_dt", self.b_dt, (d,))
        _check_shape("S4LayerParams", "skip_D", self.skip_D, (d,))

    @property
    def d_inner(self):
        return self.A_log.shape[0]

    @property
    def d_state(self):
        return self.A_log.shape[1]

    def A(self):
        return -tn.exp(self.A_log)

    def arrays(self):
        return {k: getattr(self, k) for k in self.NAMES}

    def replace(self, **kwargs):
        d = self.arrays()
        d.update(kwargs)
        return S4LayerParams(**d)


class ScanTrace:
    """Per-timestep record of one scan.

    The shapes are h_seq, abar_seq, u_seq (..., T, D, H); y_seq, delta_seq
    (..., T, D); b_seq, c_seq (..., T, H); h0 (..., D, H). ``u_seq`` is the
    input term delta_t * B_t * x_t, so h_t = abar_t * h_{t-1} + u_t.
    """

    def __init__(self, h_seq, y_seq, abar_seq, u_seq, delta_seq, b_seq, c_seq, h0):
        self.h_seq = h_seq
        self.y_seq = y_seq
        self.abar_seq = abar_seq
        self.u_seq = u_seq
        self.delta_seq = delta_seq
        self.b_seq = b_seq
        self.c_seq = c_seq
        self.h0 = h0

    def __len__(self):
        return self.y_seq.shape[-2]

    def final_state(self):
        if len(self) == 0:
            return self.h0
        return self.h_seq[..., -1, :, :]

    def recurrence_error(self):
        """Largest |h_t - (abar_t * h_{t-1} + u_t)| over the trace"""
        if len(self) == 0:
            return 0.0
        h = self.h_seq.data
        prev = np.concatenate([self.h0.data[..., None, :, :], h[..., :-1, :, :]], axis=-3)
        return float(np.max(np.abs(h - (self.abar_seq.data * prev + self.u_seq.data))))


def _per_state(v, shape):
    # (..., T, H) -> (..., T, D, H)
    v = tn.reshape(v, v.shape[:-1] + (1, v.shape[-1]))
    return tn.broadcast(v, shape)


def _per_channel(v, shape):
    # (..., T, D) -> (..., T, D, H)
    return tn.broadcast(tn.expand_last(v), shape)


def discretize(delta, A):
    """Zero-order hold: abar = exp(delta * A), shape (..., T, D, H)"""
    delta = tn.as_tensor(delta)
    A = tn.as_tensor(A)
    shape = delta.shape + (A.shape[-1],)
    return tn.exp(_per_channel(delta, shape) * tn.broadcast(A, shape))


def selective_scan(x, delta, A, B, C, skip_D, h0=None):
    """Run h_t = abar_t * h_{t-1} + delta_t B_t x_t, y_t = C_t h_t + skip_D x_t.

    x, delta: (..., T, D); A: (D, H); B, C: (..., T, H); skip_D: (D,).
    """
    x = tn.as_tensor(x)
    delta = tn.as_tensor(delta)
    A = tn.as_tensor(A)
    B = tn.as_tensor(B)
    C = tn.as_tensor(C)
    if x.ndim < 2 or delta.shape != x.shape:
        raise DimensionError(f"selective_scan(): x {x.shape} and delta {delta.shape} differ")
    D = x.shape[-1]
    H = A.shape[-1]
    if A.shape != (D, H):
        raise DimensionError(f"selective_scan(): A has shape {A.shape}, expected ({D}, {H})")
    if B.shape != x.shape[:-1] + (H,) or C.shape != B.shape:
        raise DimensionError(
            f"selective_scan(): B {B.shape} / C {C.shape} incompatible with x {x.shape} and H={H}"
        )
    if np.any(delta.data < 0):
        raise ContractError("selective_scan(): delta must be strictly positive")
    # softplus of a diverged dt projection
    if not np.all(np.isfinite(delta.data) & (delta.data > 0)):
        raise NumericError("selective_scan(): delta is not finite or underflowed to 0", name="delta")

    shape = x.shape + (H,)
    state_shape = x.shape[:-2] + (D, H)
    if h0 is None:
        h0 = Tensor(np.zeros(state_shape), copy=False)
    else:
        h0 = tn.broadcast(h0, state_shape)

    abar = discretize(delta, A)
    u = _per_channel(delta * x, shape) * _per_state(B, shape)
    h_seq = tn.scan(abar, u, h0)
    y = tn.sum_(h_seq * _per_state(C, shape), axis=-1) + tn.broadcast(skip_D, x.shape) * x
    return ScanTrace(h_seq, y, abar, u, delta, B, C, h0)


def s6_projections(params, x_seq):
    """Input-dependent (delta, B, C) of a selective layer"""
    x_seq = tn.as_tensor(x_seq)
    dt = tn.linear(tn.linear(x_seq, params.W_dt_in), params.W_dt)
    delta = tn.softplus(dt + tn.broadcast(params.b_dt, dt.shape))
    return delta, tn.linear(x_seq, params.W_B), tn.linear(x_seq, params.W_C)


def s6_scan(params, x_seq, h0=None):
    x_seq = tn.as_tensor(x_seq)
    if x_seq.ndim < 2 or x_seq.shape[-1] != params.d_inner:
        raise DimensionError(
            f"s6_scan(): input has shape {x_seq.shape}, expected (..., T, {params.d_inner})"
        )
    delta, B, C = s6_projections(params, x_seq)
    return selective_scan(x_seq, delta, params.A(), B, C, params.skip_D, h0)


def s4_scan(params, x_seq, h0=None):
    x_seq = tn.as_tensor(x_seq)
    if x_seq.ndim < 2 or x_seq.shape[-1] != params.d_inner:
        raise DimensionError(
            f"s4_scan(): input has shape {x_seq.shape}, expected (..., T, {params.d_inner})"
        )
    delta = tn.broadcast(tn.softplus(params.b_dt), x_seq.shape)
    state_shape = x_seq.shape[:-1] + (params.d_state,)
    B = tn.broadcast(params.B, state_shape)
    C = tn.broadcast(params.C, state_shape)
    return selective_scan(x_seq, delta, params.A(), B, C, params.skip_D, h0)


def layer_scan(params, x_seq, h0=None):
    if isinstance(params, S4LayerParams):
        return s4_scan(params, x_seq, h0)
    return s6_scan(params, x_seq, h0)


def causal_conv(x, kernel, bias=None):
    """Depthwise causal convolution: out_t = sum_j kernel[:, j] * x_{t-k+1+j}"""
    x = tn.as_tensor(x)
    kernel = tn.as_tensor(kernel)
    if kernel.ndim != 2 or kernel.shape[0] != x.shape[-1]:
        raise DimensionError(f"causal_conv(): kernel {kernel.shape} does not fit input {x.shape}")
    k = kernel.shape[1]
    T = x.shape[-2]
    if k > 1:
        pad = Tensor(np.zeros(x.shape[:-2] + (k - 1, x.shape[-1])), copy=False)
        xp = tn.concat([pad, x], axis=-2)
    else:
        xp = x
    out = None
    for j in range(k):
        term = xp[..., j : j + T, :] * tn.broadcast(kernel[:, j], x.shape)
        out = term if out is None else out + term
    if bias is not None:
        out = out + tn.broadcast(bias, x.shape)
    return out


def rms_norm(x, weight, eps=1e-5):
    x = tn.as_tensor(x)
    ms = tn.sum_(x * x, axis=-1, keepdims=True) * (1.0 / x.shape[-1]) + eps
    scale = tn.broadcast(tn.power(ms, -0.5), x.shape)
    return x * scale * tn.broadcast(weight, x.shape)


class LayerHooks:
    """Per-layer adapter insertion points used by :func:`mamba_block_forward`.

    ssm: replacement SSM parameters; prefix: (V, D) vectors scanned ahead of
    the sequence; h0: initial hidden state; readout: callable
    (y_seq, c_seq) -> y_seq applied to the SSM output before gating.
    """

    def __init__(self, ssm=None, prefix=None, h0=None, readout=None):
        self.ssm = ssm
        self.prefix = prefix
        self.h0 = h0
        self.readout = readout


class ModelHooks:
    def __init__(self, prompt=None, layers=None):
        self.prompt = prompt
        self.layers = {} if layers is None else layers

    def layer(self, i):
        return self.layers.get(i, None)


class MambaBlockParams:
    def __init__(self, norm_weight, W_in, conv_kernel, conv_bias, ssm, W_out):
        self.norm_weight = tn.as_tensor(norm_weight)
        self.W_in = tn.as_tensor(W_in)
        self.conv_kernel = tn.as_tensor(conv_kernel)
        self.conv_bias = None if conv_bias is None else tn.as_tensor(conv_bias)
        self.ssm = ssm
        self.W_out = tn.as_tensor(W_out)
        e = ssm.d_inner
        d = self.norm_weight.shape[0]
        _check_shape("MambaBlockParams", "W_in", self.W_in, (2 * e, d))
        _check_shape("MambaBlockParams", "W_out", self.W_out, (d, e))
        if self.conv_kernel.ndim != 2 or self.conv_kernel.shape[0] != e:
            raise DimensionError(f"MambaBlockParams: conv_kernel has shape {self.conv_kernel.shape}")
        if self.conv_bias is not None:
            _check_shape("MambaBlockParams", "conv_bias", self.conv_bias, (e,))

    @property
    def d_inner(self):
        return self.ssm.d_inner

    def named_arrays(self):
        r = [
            ("norm_weight", self.norm_weight),
            ("W_in", self.W_in),
            ("conv_kernel", self.conv_kernel),
        ]
        if self.conv_bias is not None:
            r.append(("conv_bias", self.conv_bias))
        s = self.ssm
        r += [
            ("W_dt_in", s.W_dt_in),
            ("W_B", s.W_B),
            ("W_C", s.W_C),
            ("W_dt", s.W_dt),
            ("b_dt", s.b_dt),
            ("A_log", s.A_log),
            ("skip_D", s.skip_D),
            ("W_out", self.W_out),
        ]
        return r

    @staticmethod
    def from_arrays(arrays):
        ssm = SsmLayerParams(**{k: arrays[k] for k in SsmLayerParams.NAMES})
        return MambaBlockParams(
            norm_weight=arrays["norm_weight"],
            W_in=arrays["W_in"],
            conv_kernel=arrays["conv_kernel"],
            conv_bias=arrays.get("conv_bias", None),
            ssm=ssm,
            W_out=arrays["W_out"],
        )


def mamba_block_forward(block, u_seq, hooks=None):
    """Residual Mamba block: u + W_out(scan(silu(conv(x))) * silu(z))
    with [x, z] = W_in rms_norm(u).
    """
    u_seq = tn.as_tensor(u_seq)
    hooks = LayerHooks() if hooks is None else hooks
    ssm = block.ssm if hooks.ssm is None else hooks.ssm
    e = block.d_inner

    xz = tn.linear(rms_norm(u_seq, block.norm_weight), block.W_in)
    x = xz[..., :e]
    gate = xz[..., e:]
    x = tn.silu(causal_conv(x, block.conv_kernel, block.conv_bias))

    n_prefix = 0
    if hooks.prefix is not None:
        n_prefix = hooks.prefix.shape[0]
        prefix = tn.broadcast(hooks.prefix, x.shape[:-2] + hooks.prefix.shape)
        x = tn.concat([prefix, x], axis=-2)

    trace = s6_scan(ssm, x, hooks.h0)
    y = trace.y_seq
    c = trace.c_seq
    if n_prefix:
        y = y[..., n_prefix:, :]
        c = c[..., n_prefix:, :]
    if hooks.readout is not None:
        y = hooks.readout(y, c)

    y = y * tn.silu(gate)
    return u_seq + tn.linear(y, block.W_out)


def model_forward(layers, embedding, head, tokens, norm_f=None, hooks=None):
    """Logits (..., T, V) for integer tokens (..., T).

    ``head`` is a (d_model, V) matrix, or None to reuse the embedding.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim < 1:
        raise DimensionError("model_forward(): tokens must have a time axis")
    vocab = embedding.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        raise IndexError(f"model_forward(): token ids must lie in [0, {vocab}) (got {tokens.min()}..{tokens.max()})")
    x = tn.gather(embedding, tokens)
    n_prompt = 0
    if hooks is not None and hooks.prompt is not None:
        n_prompt = hooks.prompt.shape[0]
        prompt = tn.broadcast(hooks.prompt, x.shape[:-2] + hooks.prompt.shape)
        x = tn.concat([prompt, x], axis=-2)
    for i, block in enumerate(layers):
        x = mamba_block_forward(block, x, None if hooks is None else hooks.layer(i))
    if norm_f is not None:
        x = rms_norm(x, norm_f)
    if n_prompt:
        x = x[..., n_prompt:, :]
    if head is None:
        return tn.linear(x, embedding)
    return tn.matmul(x, head)


class MambaModel:
    def __init__(self, arch, embedding, blocks, norm_f, head=None):
        self.arch = get_arch(arch)
        self.embedding = tn.as_tensor(embedding)
        self.blocks = list(blocks)
        self.norm_f = tn.as_tensor(norm_f)
        self.head = None if head is None else tn.as_tensor(head)
        if len(self.blocks) != self.arch.n_layer:
            raise DimensionError(
                f"MambaModel: {len(self.blocks)} blocks for n_layer={self.arch.n_layer}"
            )

    @staticmethod
    def build(arch, seed=0, weight_scale=0.02):
        arch = get_arch(arch)
        d, e, k = arch.d_model, arch.d_inner, arch.conv_width
        rng = make_rng(derive_seed(seed, "embedding"))
        embedding = rng.normal(0.0, weight_scale, size=(arch.vocab, d))
        head = None
        if not arch.tie_embeddings:
            head = rng.normal(0.0, weight_scale, size=(d, arch.vocab))
        blocks = []
        for i in range(arch.n_layer):
            rng = make_rng(derive_seed(seed, "layer", i))
            ssm = SsmLayerParams.random(
                rng, e, arch.d_state, arch.dt_rank, weight_scale=weight_scale
            )
            blocks.append(
                MambaBlockParams(
                    norm_weight=np.ones(d),
                    W_in=rng.normal(0.0, weight_scale, size=(2 * e, d)),
                    conv_kernel=rng.uniform(-(k**-0.5), k**-0.5, size=(e, k)),
                    conv_bias=np.zeros(e) if arch.conv_bias else None,
                    ssm=ssm,
                    W_out=rng.normal(0.0, weight_scale, size=(d, e)),
                )
            )
        LOG.debug(f"built {arch} seed={seed}")
        return MambaModel(arch, embedding, blocks, np.ones(d), head)

    def named_arrays(self):
        r = [("embedding", self.embedding)]
        for i, b in enumerate(self.blocks):
            r += [(f"layers.{i}.{k}", v) for k, v in b.named_arrays()]
        r.append(("norm_f", self.norm_f))
        if self.head is not None:
            r.append(("head", self.head))
        return r

    def param_count(self):
        return sum(v.size for _, v in self.named_arrays())

    def to_arrays(self):
        return {k: v.data for k, v in self.named_arrays()}

    @staticmethod
    def from_arrays(arch, arrays, requires_grad=None):
        """Assemble a model from enumeration-named arrays.

        ``requires_grad`` is an optional set of names to mark trainable;
        listed arrays are copied, the others shared.
        """
        arch = get_arch(arch)
        requires_grad = set() if requires_grad is None else set(requires_grad)
        expected = arch.model_array_shapes()
        missing = [k for k in expected if k not in arrays]
        if missing:
            raise DimensionError(f"MambaModel.from_arrays(): missing arrays {missing[:5]}")

        def _t(name):
            v = arrays[name]
            data = v.data if isinstance(v, Tensor) else v
            if tuple(np.shape(data)) != tuple(expected[name]):
                raise DimensionError(
                    f"MambaModel.from_arrays(): {name} has shape {np.shape(data)}, expected {expected[name]}"
                )
            if name in requires_grad:
                return Tensor(data, requires_grad=True, name=name)
            if isinstance(v, Tensor) and not v.requires_grad:
                return v
            return Tensor(data, copy=False, name=name)

        blocks = []
        for i in range(arch.n_layer):
            names = [k for k in arch.block_array_shapes()]
            blocks.append(
                MambaBlockParams.from_arrays({k: _t(f"layers.{i}.{k}") for k in names})
            )
        head = _t("head") if "head" in expected else None
        return MambaModel(arch, _t("embedding"), blocks, _t("norm_f"), head)

    def forward(self, tokens, hooks=None):
        return model_forward(
            self.blocks, self.embedding, self.head, tokens, norm_f=self.norm_f, hooks=hooks
        )
