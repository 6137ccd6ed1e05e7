"""End-to-end image-to-mesh model.

Feature extraction -> tokenization with template positional encoding ->
dimension-reducing encoder stack -> coarse-to-fine upsampling and a
weak-perspective camera head. Parameter creation, counting, and the
multiply-add estimate all walk a single shape specification, so the three can
never disagree.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from .autodiff import Tensor
from .config import ConfigError, GraphormerConfig
from .mesh import TemplateMesh, build_coarsening, build_token_graph, generate_synthetic_template


@dataclass
class TokenizerParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    conv: list | None  # [(w, b)] x 4 for the trainable provider
    tokenizer: TokenizerParams | None  # absent when grid features are off
    stack: enc.StackParams
    upsampler: Tensor  # (V_fine, V_coarse), geometric init
    camera_w: Tensor  # (d3, 3)
    camera_b: Tensor  # (3,) -> (s, tx, ty)
    named: list = field(repr=False, default_factory=list)  # declaration-ordered (name, Tensor)


@dataclass
class ModelOutput:
    fine_vertices: Tensor  # (V_fine, 3)
    coarse_vertices: Tensor  # (V_coarse, 3)
    intermediate_coarse: list  # per-encoder (V_coarse, 3)
    joints3d: Tensor  # (J, 3)
    joints2d: Tensor  # (J, 2)
    camera: Tensor  # (1, 3) = (s, tx, ty)
    attn: np.ndarray  # last block of last encoder, (h, n, n)
    attn_all: list | None


# ---------------------------------------------------------------------------
# Parameter specification (single source for init, counting, checkpoints)
# ---------------------------------------------------------------------------


def _graph_unit_specs(prefix: str, d: int, kind: str):
    half = d // 2
    if kind == "residual_block":
        yield f"{prefix}.ln_a_gamma", (d,), "ones"
        yield f"{prefix}.ln_a_beta", (d,), "zeros"
        yield f"{prefix}.w_down", (d, half), "xavier"
        yield f"{prefix}.b_down", (half,), "zeros"
        yield f"{prefix}.ln_b_gamma", (half,), "ones"
        yield f"{prefix}.ln_b_beta", (half,), "zeros"
        yield f"{prefix}.w_g", (half, half), "xavier"
        yield f"{prefix}.ln_c_gamma", (half,), "ones"
        yield f"{prefix}.ln_c_beta", (half,), "zeros"
        yield f"{prefix}.w_up", (half, d), "xavier"
        yield f"{prefix}.b_up", (d,), "zeros"
    elif kind == "basic_conv":
        yield f"{prefix}.w_g", (d, d), "xavier"
    elif kind == "mlp_equivalent":
        k = enc.mlp_equivalent_hidden(d)
        yield f"{prefix}.w1", (d, k), "xavier"
        yield f"{prefix}.b1", (k,), "zeros"
        yield f"{prefix}.w2", (k, d), "xavier"
        yield f"{prefix}.b2", (d,), "zeros"


def iter_param_specs(config: GraphormerConfig):
    """Yield (name, shape, init_kind) for every parameter, in declaration order."""
    m = config.model
    token_dim = config.token_dim
    if m.provider == "tiny_conv":
        cin = 1
        for i, cout in enumerate(m.conv_channels):
            yield f"conv.{i}.w", (9 * cin, cout), "xavier"
            yield f"conv.{i}.b", (cout,), "zeros"
            cin = cout
    if m.grid_features:
        c = m.grid_channels
        yield "tokenizer.w1", (c, token_dim), "xavier"
        yield "tokenizer.b1", (token_dim,), "zeros"
        yield "tokenizer.w2", (token_dim, token_dim), "xavier"
        yield "tokenizer.b2", (token_dim,), "zeros"
    d_in = token_dim
    r = m.mlp_ratio
    for k, d in enumerate(m.hidden_dims, start=1):
        p = f"stack.enc{k}"
        yield f"{p}.proj_w", (d_in, d), "xavier"
        yield f"{p}.proj_b", (d,), "zeros"
        for b in range(m.blocks):
            bp = f"{p}.block{b}"
            yield f"{bp}.ln1_gamma", (d,), "ones"
            yield f"{bp}.ln1_beta", (d,), "zeros"
            yield f"{bp}.w_q", (d, d), "xavier"
            yield f"{bp}.w_k", (d, d), "xavier"
            yield f"{bp}.w_v", (d, d), "xavier"
            yield f"{bp}.w_o", (d, d), "xavier"
            if k in m.grb_encoders and m.grb_kind != "none":
                yield from _graph_unit_specs(f"{bp}.graph_unit", d, m.grb_kind)
            yield f"{bp}.ln2_gamma", (d,), "ones"
            yield f"{bp}.ln2_beta", (d,), "zeros"
            yield f"{bp}.w_mlp1", (d, r * d), "xavier"
            yield f"{bp}.b_mlp1", (r * d,), "zeros"
            yield f"{bp}.w_mlp2", (r * d, d), "xavier"
            yield f"{bp}.b_mlp2", (d,), "zeros"
        yield f"{p}.head_w", (d, 3), "xavier"
        yield f"{p}.head_b", (3,), "zeros"
        d_in = d
    n_fine = config.data.coarse_target * config.data.ring_resolution
    yield "upsampler.u", (n_fine, config.n_coarse), "upsampler"
    d3 = m.hidden_dims[-1]
    yield "camera.w", (d3, 3), "xavier"
    yield "camera.b", (3,), "camera_bias"


def _materialize(name, shape, kind, rng, dtype, up0):
    if kind == "zeros":
        data = np.zeros(shape)
    elif kind == "ones":
        data = np.ones(shape)
    elif kind == "xavier":
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        fan_out = shape[1] if len(shape) > 1 else shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape)
    elif kind == "upsampler":
        if up0.shape != shape:
            raise ConfigError(
                f"template upsampler shape {up0.shape} != configured {shape}"
            )
        data = up0.copy()
    elif kind == "camera_bias":
        data = np.array([1.0, 0.0, 0.0])  # identity-ish weak-perspective start
    else:
        raise ConfigError(f"unknown init kind {kind!r} for {name}")
    return Tensor(data, requires_grad=True, dtype=dtype)


def init_model_params(
    config: GraphormerConfig, template: TemplateMesh, seed: int
) -> ModelParams:
    """Seeded parameter creation, in the order iter_param_specs declares."""
    rng = np.random.default_rng(seed)
    _, up0 = build_coarsening(template)
    dtype = config.dtype
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in iter_param_specs(config):
        tensors[name] = _materialize(name, shape, kind, rng, dtype, up0)
    return assemble_params(config, tensors)


def assemble_params(config: GraphormerConfig, tensors: dict[str, Tensor]) -> ModelParams:
    """Wire a name->Tensor mapping (freshly initialized or loaded) into ModelParams."""
    named = []
    for name, shape, _ in iter_param_specs(config):
        if name not in tensors:
            raise ConfigError(f"missing parameter {name}")
        if tensors[name].shape != shape:
            raise ConfigError(
                f"parameter {name} has shape {tensors[name].shape}, expected {shape}"
            )
        named.append((name, tensors[name]))
    if len(tensors) != len(named):
        extra = set(tensors) - {n for n, _ in named}
        raise ConfigError(f"unexpected parameters: {sorted(extra)}")

    m = config.model
    conv = None
    if m.provider == "tiny_conv":
        conv = [(tensors[f"conv.{i}.w"], tensors[f"conv.{i}.b"]) for i in range(4)]
    tokenizer = None
    if m.grid_features:
        tokenizer = TokenizerParams(
            w1=tensors["tokenizer.w1"],
            b1=tensors["tokenizer.b1"],
            w2=tensors["tokenizer.w2"],
            b2=tensors["tokenizer.b2"],
        )
    encoders = []
    for k, d in enumerate(m.hidden_dims, start=1):
        p = f"stack.enc{k}"
        blocks = []
        for b in range(m.blocks):
            bp = f"{p}.block{b}"
            unit = None
            if k in m.grb_encoders and m.grb_kind != "none":
                if m.grb_kind == "residual_block":
                    unit = enc.GrbParams(
                        ln_a_gamma=tensors[f"{bp}.graph_unit.ln_a_gamma"],
                        ln_a_beta=tensors[f"{bp}.graph_unit.ln_a_beta"],
                        w_down=tensors[f"{bp}.graph_unit.w_down"],
                        b_down=tensors[f"{bp}.graph_unit.b_down"],
                        ln_b_gamma=tensors[f"{bp}.graph_unit.ln_b_gamma"],
                        ln_b_beta=tensors[f"{bp}.graph_unit.ln_b_beta"],
                        w_g=tensors[f"{bp}.graph_unit.w_g"],
                        ln_c_gamma=tensors[f"{bp}.graph_unit.ln_c_gamma"],
                        ln_c_beta=tensors[f"{bp}.graph_unit.ln_c_beta"],
                        w_up=tensors[f"{bp}.graph_unit.w_up"],
                        b_up=tensors[f"{bp}.graph_unit.b_up"],
                    )
                elif m.grb_kind == "basic_conv":
                    unit = enc.BasicConvParams(w_g=tensors[f"{bp}.graph_unit.w_g"])
                else:
                    unit = enc.MlpEquivalentParams(
                        w1=tensors[f"{bp}.graph_unit.w1"],
                        b1=tensors[f"{bp}.graph_unit.b1"],
                        w2=tensors[f"{bp}.graph_unit.w2"],
                        b2=tensors[f"{bp}.graph_unit.b2"],
                    )
            blocks.append(
                enc.EncoderBlockParams(
                    ln1_gamma=tensors[f"{bp}.ln1_gamma"],
                    ln1_beta=tensors[f"{bp}.ln1_beta"],
                    w_q=tensors[f"{bp}.w_q"],
                    w_k=tensors[f"{bp}.w_k"],
                    w_v=tensors[f"{bp}.w_v"],
                    w_o=tensors[f"{bp}.w_o"],
                    graph_unit=unit,
                    ln2_gamma=tensors[f"{bp}.ln2_gamma"],
                    ln2_beta=tensors[f"{bp}.ln2_beta"],
                    w_mlp1=tensors[f"{bp}.w_mlp1"],
                    b_mlp1=tensors[f"{bp}.b_mlp1"],
                    w_mlp2=tensors[f"{bp}.w_mlp2"],
                    b_mlp2=tensors[f"{bp}.b_mlp2"],
                )
            )
        encoders.append(
            enc.EncoderParams(
                proj_w=tensors[f"{p}.proj_w"],
                proj_b=tensors[f"{p}.proj_b"],
                blocks=blocks,
                head_w=tensors[f"{p}.head_w"],
                head_b=tensors[f"{p}.head_b"],
            )
        )
    return ModelParams(
        conv=conv,
        tokenizer=tokenizer,
        stack=enc.StackParams(encoders=encoders),
        upsampler=tensors["upsampler.u"],
        camera_w=tensors["camera.w"],
        camera_b=tensors["camera.b"],
        named=named,
    )


def named_parameters(params: ModelParams) -> list[tuple[str, Tensor]]:
    return list(params.named)


# ---------------------------------------------------------------------------
# Feature providers
# ---------------------------------------------------------------------------


class TinyConvStack:
    """Trainable provider: four stride-2 3x3 convs with GELU.

    Grid features are tapped after the third conv (7x7 for a 56-pixel input);
    the global vector is the average pool of the fourth.
    """

    def __init__(self, params: ModelParams, dtype):
        self.conv = params.conv
        self.dtype = dtype

    def extract(self, image: np.ndarray, sample_key=None):
        x = Tensor(np.asarray(image)[:, :, None], dtype=self.dtype)
        grid = None
        for i, (w, b) in enumerate(self.conv):
            h, wd, _ = x.shape
            patches = ad.conv_patches(x, kernel=3, stride=2, pad=1)
            z = ad.gelu(ad.add_rowvec(ad.matmul(patches, w), b))
            oh = ad.conv_output_size(h, 3, 2, 1)
            ow = ad.conv_output_size(wd, 3, 2, 1)
            cout = w.shape[1]
            x = ad.reshape(z, (oh, ow, cout))
            if i == 2:
                grid = ad.reshape(x, (oh * ow, cout))
        h, wd, c = x.shape
        global_row = ad.mean_rows(ad.reshape(x, (h * wd, c)))
        return grid, global_row


class PrecomputedFeatures:
    """Provider that loads per-sample feature files instead of running a CNN."""

    def __init__(self, directory, grid_size: int, grid_channels: int, global_dim: int, dtype):
        from . import storage

        self._read = storage.read_tensor
        self.directory = directory
        self.grid_size = grid_size
        self.grid_channels = grid_channels
        self.global_dim = global_dim
        self.dtype = dtype

    def extract(self, image, sample_key=None):
        if sample_key is None:
            raise ConfigError("precomputed provider requires a sample key")
        import os

        grid = self._read(os.path.join(self.directory, f"{sample_key:06d}_grid.bin"))
        gvec = self._read(os.path.join(self.directory, f"{sample_key:06d}_global.bin"))
        return self._wrap(grid, gvec)

    def _wrap(self, grid, gvec):
        g2 = self.grid_size**2
        if grid.shape != (g2, self.grid_channels):
            raise ConfigError(
                f"grid feature shape {grid.shape} != ({g2}, {self.grid_channels})"
            )
        if gvec.reshape(-1).shape != (self.global_dim,):
            raise ConfigError(
                f"global feature size {gvec.size} != {self.global_dim}"
            )
        return Tensor(grid, dtype=self.dtype), Tensor(
            gvec.reshape(1, -1), dtype=self.dtype
        )


class StaticFeatures(PrecomputedFeatures):
    """In-memory variant of the precomputed provider (tests, exports)."""

    def __init__(self, grid: np.ndarray, gvec: np.ndarray, grid_size, grid_channels, global_dim, dtype):
        self.grid = grid
        self.gvec = gvec
        self.grid_size = grid_size
        self.grid_channels = grid_channels
        self.global_dim = global_dim
        self.dtype = dtype

    def extract(self, image, sample_key=None):
        return self._wrap(self.grid, self.gvec)


# ---------------------------------------------------------------------------
# Tokenization and projection
# ---------------------------------------------------------------------------


def tokenize(
    grid: Tensor | None,
    global_row: Tensor,
    positions: Tensor,
    tokenizer: TokenizerParams | None,
    ones_queries: Tensor,
) -> Tensor:
    """Assemble the token sequence: grid tokens, then joint and vertex queries.

    Grid cells go through the tokenizer MLP; each query token is the global
    feature vector concatenated with the template rest coordinates of its
    joint or coarse vertex.
    """
    gv_mat = ad.matmul(ones_queries, global_row)
    queries = ad.concat([gv_mat, positions], axis=1)
    if grid is None:
        return queries
    h = ad.gelu(ad.add_rowvec(ad.matmul(grid, tokenizer.w1), tokenizer.b1))
    grid_tokens = ad.add_rowvec(ad.matmul(h, tokenizer.w2), tokenizer.b2)
    return ad.concat([grid_tokens, queries], axis=0)


def upsample_mesh(coarse: Tensor, u: Tensor) -> Tensor:
    """fine = U @ coarse; U is learnable, initialized to the geometric operator."""
    return ad.matmul(u, coarse)


def project_weak_perspective(points3d, s, tx=None, ty=None) -> Tensor:
    """Weak perspective projection (x, y) -> s*(x, y) + (tx, ty), z discarded.

    Accepts plain arrays/floats or taped tensors; gradients flow through
    tensor arguments.
    """
    pts = ad.as_tensor(points3d)
    xy = ad.narrow(pts, 1, 0, 2)
    if isinstance(s, Tensor) and s.size == 3 and tx is None:
        cam = s if s.data.ndim == 2 else ad.reshape(s, (1, 3))
        s0 = ad.narrow(cam, 1, 0, 1)
        t = ad.reshape(ad.narrow(cam, 1, 1, 2), (2,))
    else:
        s0 = ad.as_tensor(s)
        t = (
            ad.concat([ad.reshape(ad.as_tensor(tx), (1,)), ad.reshape(ad.as_tensor(ty), (1,))])
            if isinstance(tx, Tensor) or isinstance(ty, Tensor)
            else ad.as_tensor(np.array([float(tx), float(ty)]))
        )
    return ad.add_rowvec(ad.mul_scalar(xy, s0), t)


def mask_token_rows(tokens: Tensor, rows: np.ndarray) -> Tensor:
    """Zero whole token rows (masked vertex modeling); empty row set is a no-op."""
    if rows.size == 0:
        return tokens
    mask = np.ones(tokens.shape, dtype=tokens.data.dtype)
    mask[rows] = 0.0
    return ad.multiply(tokens, Tensor(mask))


# ---------------------------------------------------------------------------
# The assembled model
# ---------------------------------------------------------------------------


class GraphormerModel:
    """Configured template + adjacency + parameters, ready to run."""

    def __init__(
        self,
        config: GraphormerConfig,
        template: TemplateMesh | None = None,
        params: ModelParams | None = None,
        init_seed: int | None = None,
        feature_dir: str | None = None,
        provider=None,
    ):
        config.validate()
        self.config = config
        d = config.data
        self.template = template or generate_synthetic_template(
            d.limbs, d.segments_per_limb, d.ring_resolution, d.seed, d.coarse_target
        )
        if self.template.n_coarse != config.n_coarse or self.template.n_joints != config.n_joints:
            raise ConfigError(
                f"template counts (J={self.template.n_joints}, Vc={self.template.n_coarse}) "
                f"do not match config (J={config.n_joints}, Vc={config.n_coarse})"
            )
        if config.token_dim != config.model.global_dim + 3:
            raise ConfigError("token_dim must equal global_dim + 3")
        self.params = params or init_model_params(
            config, self.template, config.train.seed if init_seed is None else init_seed
        )
        dtype = config.dtype
        adjacency = build_token_graph(self.template, config.n_grid_tokens)
        self.adjacency = Tensor(adjacency.matrix, dtype=dtype)
        down, _ = build_coarsening(self.template)
        self.down = down
        positions = np.concatenate(
            [self.template.joint_rest, self.template.coarse_rest_vertices()], axis=0
        )
        self._positions = Tensor(positions, dtype=dtype)
        self._ones_queries = Tensor(
            np.ones((config.n_joints + config.n_coarse, 1)), dtype=dtype
        )
        if provider is not None:
            self.provider = provider
        elif config.model.provider == "tiny_conv":
            self.provider = TinyConvStack(self.params, dtype)
        else:
            m = config.model
            self.provider = PrecomputedFeatures(
                feature_dir or m.feature_dir, config.grid_size, m.grid_channels, m.global_dim, dtype
            )

    def forward(
        self,
        image: np.ndarray,
        training: bool = False,
        mask_indices: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
        sample_key=None,
        collect_attn: bool = False,
    ) -> ModelOutput:
        cfg = self.config
        grid, global_row = self.provider.extract(image, sample_key)
        if not cfg.model.grid_features:
            grid = None
        tokens = tokenize(
            grid, global_row, self._positions, self.params.tokenizer, self._ones_queries
        )
        if training and mask_indices is not None and mask_indices.size:
            tokens = mask_token_rows(tokens, cfg.n_grid_tokens + mask_indices)
        out = enc.stack_forward(
            self.adjacency,
            tokens,
            self.params.stack,
            n_grid=cfg.n_grid_tokens,
            n_joints=cfg.n_joints,
            heads=cfg.model.heads,
            design=cfg.model.grb_design,
            eps=cfg.model.layer_norm_eps,
            dropout_p=cfg.model.dropout if training else 0.0,
            rng=rng,
            collect_attn=collect_attn,
        )
        camera = ad.add_rowvec(
            ad.matmul(ad.mean_rows(out.token_out), self.params.camera_w),
            self.params.camera_b,
        )
        joints2d = project_weak_perspective(out.joints3d, camera)
        fine = upsample_mesh(out.coarse_vertices, self.params.upsampler)
        return ModelOutput(
            fine_vertices=fine,
            coarse_vertices=out.coarse_vertices,
            intermediate_coarse=out.intermediate_coarse,
            joints3d=out.joints3d,
            joints2d=joints2d,
            camera=camera,
            attn=out.attn,
            attn_all=out.attn_all,
        )

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return named_parameters(self.params)


def model_forward(model: GraphormerModel, image, **kwargs) -> ModelOutput:
    return model.forward(image, **kwargs)


# ---------------------------------------------------------------------------
# Parameter and multiply-add accounting
# ---------------------------------------------------------------------------


def _module_of(name: str) -> str:
    if name.startswith("conv."):
        return "feature_provider"
    if name.startswith("tokenizer."):
        return "tokenizer"
    if ".graph_unit." in name:
        return "graph_units"
    if ".head_" in name:
        return "heads"
    if name.startswith("stack.enc"):
        return name.split(".")[1].replace("enc", "encoder")
    if name.startswith("upsampler"):
        return "upsampler"
    if name.startswith("camera"):
        return "camera_head"
    return "other"


def _count(shapes) -> dict:
    per_module: dict[str, int] = {}
    total = 0
    for name, shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        per_module[_module_of(name)] = per_module.get(_module_of(name), 0) + n
        total += n
    return {"total": total, "per_module": per_module}


def count_params(params: ModelParams) -> dict:
    """Exact parameter count by traversal, grouped per module."""
    return _count((name, t.shape) for name, t in params.named)


def count_params_from_config(config: GraphormerConfig) -> dict:
    """Same accounting as count_params, from shapes alone (nothing allocated)."""
    return _count((name, shape) for name, shape, _ in iter_param_specs(config))


def grb_param_delta(config: GraphormerConfig) -> int:
    """Parameters attributable to the graph units: count(config) - count(grb off)."""
    baseline = replace(config, model=replace(config.model, grb_encoders=[]))
    return (
        count_params_from_config(config)["total"]
        - count_params_from_config(baseline)["total"]
    )


def adjacency_nnz(config: GraphormerConfig) -> int:
    d = config.data
    template = generate_synthetic_template(
        d.limbs, d.segments_per_limb, d.ring_resolution, d.seed, d.coarse_target
    )
    adjacency = build_token_graph(template, config.n_grid_tokens)
    return int(np.count_nonzero(adjacency.matrix))


def flops_estimate(config: GraphormerConfig, nnz: int | None = None) -> dict:
    """Closed-form forward multiply-add count for the matmuls.

    Adjacency products are charged at nnz("A_hat") * width multiply-adds: the
    token graph is a fixed sparse operator even though the desk implementation
    multiplies densely.
    """
    m = config.model
    n = config.n_tokens
    token_dim = config.token_dim
    if nnz is None:
        nnz = adjacency_nnz(config)
    per_module: dict[str, int] = {}

    if m.provider == "tiny_conv":
        s = config.data.image_size
        cin = 1
        macs = 0
        for cout in m.conv_channels:
            s = ad.conv_output_size(s, 3, 2, 1)
            macs += s * s * 9 * cin * cout
            cin = cout
        per_module["feature_provider"] = macs
    if m.grid_features:
        g2 = config.grid_size**2
        per_module["tokenizer"] = g2 * (m.grid_channels * token_dim + token_dim * token_dim)

    d_in = token_dim
    unit_macs_total = 0
    for k, d in enumerate(m.hidden_dims, start=1):
        macs = n * d_in * d  # input projection
        block = 4 * n * d * d + 2 * n * n * d + 2 * n * d * (m.mlp_ratio * d)
        unit = 0
        if k in m.grb_encoders and m.grb_kind != "none":
            half = d // 2
            if m.grb_kind == "residual_block":
                unit = n * d * half + nnz * half + n * half * half + n * half * d
            elif m.grb_kind == "basic_conv":
                unit = nnz * d + n * d * d
            else:
                kk = enc.mlp_equivalent_hidden(d)
                unit = 2 * n * d * kk
        macs += m.blocks * (block + unit)
        unit_macs_total += m.blocks * unit
        macs += n * d * 3  # regression head tap
        per_module[f"encoder{k}"] = macs
        d_in = d
    n_fine = config.data.coarse_target * config.data.ring_resolution
    per_module["upsampler"] = n_fine * config.n_coarse * 3
    per_module["camera_head"] = m.hidden_dims[-1] * 3
    total = sum(per_module.values())
    return {"total": total, "per_module": per_module, "graph_unit_macs": unit_macs_total}
