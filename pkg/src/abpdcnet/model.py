"""Two-branch ABPDC encoder, linear classifier, joint loss and the model
wrapper that turns one batch into a loss and a filled ParamStore."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tape
from .abpdc import MODES, abpdc
from .errors import ConfigError, ShapeError
from .footprint import footprint
from .fpran import FpranConfig, SamTrace, cascade, init_sam_params
from .losses import cross_entropy_var, ncc_loss_var, smoothness_loss_var, softmax
from .ops import global_avg_pool, instance_norm, linear
from .tape import Var, const, relu
from .volume import ParamStore, Rng, spatial_grid
from .warp import affine_displacement_var, upsample_var, warp_var

MODALITIES = ("ct", "mri")


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    sim: float = 1.0
    reg: float = 1.0

    def __post_init__(self):
        if min(self.cls, self.sim, self.reg) < 0:
            raise ConfigError(f"loss weights must be non-negative: {self}")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (16, 64, 64)
    in_channels: int = 1
    stage_channels: tuple[int, int, int, int] = (8, 16, 32, 64)
    # (z, y, x) stride of each stage
    stage_strides: tuple[tuple[int, int, int], ...] = ((2, 2, 2), (2, 2, 2), (1, 2, 2), (1, 2, 2))
    kernel: int = 3
    abpdc_mode: str | tuple[str, ...] = "adaptive"
    fixed_theta: float = 0.7
    pool_window: int = 3
    detach_theta: bool = False
    fpran: bool = True
    attn_dim: int = 16
    hidden: int = 16
    window: int = 3
    refine_channels: int = 16
    use_rotation: bool = True
    additive: bool = False
    zero_init_output: bool = True
    ncc_window: int = 9
    ncc_eps: float = 1e-5
    # stop the similarity/smoothness gradient at the encoder outputs
    detach_registration_features: bool = False
    # smooth only the part of psi_1 not explained by the global affine
    reg_on_residual: bool = True

    def __post_init__(self):
        if len(self.stage_channels) != 4 or len(self.stage_strides) != 4:
            raise ConfigError("the backbone has exactly 4 stages")
        for m in self.modes:
            if m not in MODES:
                raise ConfigError(f"unknown ABPDC mode {m!r}")
        for s in self.stage_strides:
            if len(s) != 3 or any(v not in (1, 2) for v in s):
                raise ConfigError(f"stage strides must be triples of 1 or 2, got {s}")

    @property
    def modes(self) -> tuple[str, ...]:
        if isinstance(self.abpdc_mode, str):
            return (self.abpdc_mode,) * 4
        if len(self.abpdc_mode) != 4:
            raise ConfigError("abpdc_mode needs one entry per stage")
        return tuple(self.abpdc_mode)

    def cumulative_strides(self) -> list[tuple[int, int, int]]:
        out, acc = [], (1, 1, 1)
        for s in self.stage_strides:
            acc = tuple(a * b for a, b in zip(acc, s))
            out.append(acc)
        return out

    def level_shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        for cs in self.cumulative_strides():
            if any(n % s for n, s in zip(self.input_shape, cs)):
                raise ShapeError(f"input {self.input_shape} not divisible by cumulative stride {cs}")
            shapes.append(tuple(n // s for n, s in zip(self.input_shape, cs)))
        return shapes

    def fpran_config(self) -> FpranConfig:
        self.level_shapes()
        return FpranConfig(tuple(self.stage_channels), tuple(self.input_shape),
                           tuple(self.cumulative_strides()), self.attn_dim, self.hidden,
                           self.window, self.refine_channels, self.use_rotation, self.additive)


def backbone_param_shapes(cfg: ModelConfig, modality: str) -> dict[str, tuple]:
    shapes = {}
    cin = cfg.in_channels
    for i, c in enumerate(cfg.stage_channels, start=1):
        p = f"{modality}.stage{i}."
        shapes[p + "w"] = (c, cin, cfg.kernel, cfg.kernel, cfg.kernel)
        shapes[p + "gate_scale"] = (1,)
        shapes[p + "gate_bias"] = (1,)
        shapes[p + "gamma"] = (c,)
        shapes[p + "beta"] = (c,)
        cin = c
    return shapes


def init_params(cfg: ModelConfig, rng: Rng) -> ParamStore:
    ps = ParamStore()
    for m in MODALITIES:
        for name, shape in backbone_param_shapes(cfg, m).items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                ps.add(name, rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
            elif name.endswith((".gate_scale", ".gamma")):
                ps.add(name, np.ones(shape))
            else:
                ps.add(name, np.zeros(shape))
    c4 = cfg.stage_channels[3]
    ps.add("cls.W", rng.normal(0.0, 0.01, (2, 2 * c4)))
    ps.add("cls.b", np.zeros(2))
    if cfg.fpran:
        for name, value in init_sam_params(cfg.fpran_config(), rng.child(7),
                                           cfg.zero_init_output).items():
            ps.add(name, value)
    return ps


# ------------------------------------------------------------------ pieces


def backbone_forward(X, cfg: ModelConfig, P: Mapping, modality: str) -> list[Var]:
    """Four feature maps, fine to coarse, each ABPDC -> instance norm -> ReLU."""
    X = const(X)
    shape = X.value.shape
    if len(shape) != 5 or shape[1] != cfg.in_channels:
        raise ShapeError(f"backbone input must be (n, {cfg.in_channels}, z, y, x), got {shape}")
    for n, cs in zip(shape[2:], cfg.cumulative_strides()[-1]):
        if n % cs:
            raise ShapeError(f"input spatial shape {shape[2:]} not divisible by strides")
    fp = footprint(cfg.kernel)
    feats = []
    h = X
    for i, (mode, stride) in enumerate(zip(cfg.modes, cfg.stage_strides), start=1):
        p = f"{modality}.stage{i}."
        h = abpdc(h, P[p + "w"], P[p + "gate_scale"], P[p + "gate_bias"], fp, mode=mode,
                  theta=cfg.fixed_theta, stride=stride, pool_window=cfg.pool_window,
                  detach_theta=cfg.detach_theta)
        h = relu(instance_norm(h, P[p + "gamma"], P[p + "beta"]))
        feats.append(h)
    return feats


def classify(f4_ct, f4_mri, P: Mapping) -> Var:
    """Globally pooled level-4 features of both branches -> W [ct; mri] + b."""
    pooled = tape.concat([global_avg_pool(f4_ct), global_avg_pool(f4_mri)])
    W = const(P["cls.W"])
    if W.value.shape[1] != pooled.value.shape[1]:
        raise ShapeError(f"classifier expects {W.value.shape[1]} features, got {pooled.value.shape[1]}")
    return linear(pooled, W, P["cls.b"])


def total_loss(logits, y, x_mri, x_ct_warped, psi1, weights: LossWeights,
               ncc_window: int = 9, ncc_eps: float = 1e-5) -> tuple[Var, dict[str, Var]]:
    """Weighted sum of cross-entropy, -NCC and smoothness; zero-weight terms are skipped.

    ``x_ct_warped`` / ``psi1`` may be None when registration is disabled.
    """
    parts: dict[str, Var] = {}
    terms, ws = [], []
    if logits is not None:
        if const(logits).value.shape[0] != np.atleast_1d(y).shape[0]:
            raise ShapeError("logits and labels have different batch sizes")
        parts["class"] = cross_entropy_var(logits, y)
        terms.append(parts["class"])
        ws.append(weights.cls)
    if x_ct_warped is not None:
        if const(x_mri).value.shape != const(x_ct_warped).value.shape:
            raise ShapeError("MRI and warped CT shapes differ")
        parts["sim"] = ncc_loss_var(x_mri, x_ct_warped, ncc_window, ncc_eps)
        terms.append(parts["sim"])
        ws.append(weights.sim)
    if psi1 is not None:
        parts["reg"] = smoothness_loss_var(psi1)
        terms.append(parts["reg"])
        ws.append(weights.reg)
    keep = [(t, w) for t, w in zip(terms, ws) if w != 0]
    if not keep:
        return const(np.asarray(0.0)), parts
    return tape.weighted_sum([t for t, _ in keep], [w for _, w in keep]), parts


# ------------------------------------------------------------------- model


@dataclass
class ForwardResult:
    loss: Var
    parts: dict[str, Var]
    logits: Var | None
    features_ct: list[Var]
    features_mri: list[Var]
    psi1: Var | None = None
    fields: list[Var] = field(default_factory=list)
    psi_full: Var | None = None
    x_ct_warped: Var | None = None
    trace: SamTrace | None = None

    def loss_values(self) -> dict[str, float]:
        return {k: float(v.value) for k, v in self.parts.items()}

    @property
    def probabilities(self) -> np.ndarray:
        return softmax(self.logits.value)


class Model:
    """Config + parameters; forward builds a tape, ``loss_and_grad`` fills grads."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.cfg = cfg
        cfg.level_shapes()
        if cfg.fpran:
            cfg.fpran_config()
        self.params = init_params(cfg, Rng(seed)) if params is None else params

    def forward(self, x_ct: np.ndarray, x_mri: np.ndarray, y=None,
                weights: LossWeights = LossWeights(), params: ParamStore | None = None,
                track: bool = True, trainable: Sequence[str] | None = None,
                register: bool | None = None) -> tuple[ForwardResult, dict]:
        """``register=False`` skips the registration cascade (default: on when
        the config enables it)."""
        cfg = self.cfg
        register = cfg.fpran if register is None else (register and cfg.fpran)
        ps = self.params if params is None else params
        names = ps.names() if trainable is None else list(trainable)
        P: dict = {name: ps[name] for name in ps}
        if track:
            for name in names:
                P[name] = tape.leaf(ps[name])
        if x_ct.shape != x_mri.shape:
            raise ShapeError(f"CT {x_ct.shape} and MRI {x_mri.shape} inputs differ")
        if tuple(x_ct.shape[2:]) != tuple(cfg.input_shape):
            raise ShapeError(f"input grid {x_ct.shape[2:]} != configured {cfg.input_shape}")
        F_ct = backbone_forward(x_ct, cfg, P, "ct")
        F_mri = backbone_forward(x_mri, cfg, P, "mri")
        logits = classify(F_ct[3], F_mri[3], P)
        res = ForwardResult(None, {}, logits, F_ct, F_mri)
        reg_field = None
        if register:
            fcfg = cfg.fpran_config()
            src_ct, src_mri = F_ct, F_mri
            if cfg.detach_registration_features:
                src_ct = [const(f.value) for f in F_ct]
                src_mri = [const(f.value) for f in F_mri]
            trace = SamTrace()
            psi1, fields = cascade(src_ct, src_mri, P, fcfg, trace)
            psi_full = upsample_var(psi1, cfg.input_shape)
            res.psi1, res.fields, res.trace = psi1, fields, trace
            res.psi_full = psi_full
            res.x_ct_warped = warp_var(x_ct, psi_full)
            reg_field = psi1
            if cfg.reg_on_residual:
                grid = spatial_grid(fcfg.level_shape(1), x_ct.shape[0])
                rigid = affine_displacement_var(trace.affine, grid, fcfg.input_shape,
                                                fcfg.level_strides[0])
                reg_field = tape.weighted_sum([psi1, rigid], [1.0, -1.0])
        use_cls = y is not None
        loss, parts = total_loss(logits if use_cls else None, y, x_mri,
                                 res.x_ct_warped, reg_field, weights, cfg.ncc_window, cfg.ncc_eps)
        res.loss, res.parts = loss, parts
        return res, P

    def loss_and_grad(self, x_ct, x_mri, y=None, weights: LossWeights = LossWeights(),
                      trainable: Sequence[str] | None = None) -> ForwardResult:
        """Forward + backward; gradients are accumulated into ``self.params``."""
        res, P = self.forward(x_ct, x_mri, y, weights, trainable=trainable)
        if res.loss.requires_grad:
            tape.backward(res.loss)
        for name, v in P.items():
            if isinstance(v, Var) and v.grad is not None:
                self.params.accumulate(name, v.grad)
        return res

    def loss_value(self, x_ct, x_mri, y=None, weights: LossWeights = LossWeights(),
                   params: ParamStore | None = None) -> float:
        res, _ = self.forward(x_ct, x_mri, y, weights, params=params, track=False)
        return float(res.loss.value)

    def predict(self, x_ct, x_mri) -> np.ndarray:
        """Class-1 probabilities."""
        res, _ = self.forward(x_ct, x_mri, None, LossWeights(0, 0, 0), track=False, register=False)
        return res.probabilities[:, 1]
