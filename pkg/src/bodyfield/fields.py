"""Learnable field components with exact reverse-mode gradients.

Four small MLPs make up the field: a bounded deformation net that nudges
surface coordinates, a density net, a view-conditioned color net, and a pose
feature extractor shared by all three. The computation graph is fixed, so
each component implements its own forward cache and backward pass; no
general-purpose autodiff is involved. All math is plain numpy in a
configurable dtype (float64 for gradient checks, float32 for training
throughput).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

ABLATION_MODES = ("full", "naked_surface", "no_pose", "no_projection", "no_deform")


# ---------------------------------------------------------------------------
# Positional encoding
# ---------------------------------------------------------------------------


class PositionalEncoder:
    """Sinusoidal feature map: per component, sin/cos at frequencies 2^k pi."""

    def __init__(self, num_frequencies: int, include_input: bool = True,
                 input_dim: int = 3):
        self.num_frequencies = num_frequencies
        self.include_input = include_input
        self.input_dim = input_dim
        self.freqs = (2.0 ** np.arange(num_frequencies)) * np.pi

    @property
    def out_dim(self) -> int:
        base = self.input_dim * 2 * self.num_frequencies
        return base + (self.input_dim if self.include_input else 0)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """x: (N, D) -> (N, out_dim); layout [x?, sin f0 x, cos f0 x, sin f1 x, ...]."""
        parts = [x] if self.include_input else []
        for f in self.freqs:
            fx = np.asarray(f, dtype=x.dtype) * x
            parts.append(np.sin(fx))
            parts.append(np.cos(fx))
        return np.concatenate(parts, axis=1)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        """Chain grad_out (N, out_dim) back to the raw coordinates (N, D)."""
        d = self.input_dim
        col = 0
        grad_x = np.zeros_like(x)
        if self.include_input:
            grad_x += grad_out[:, :d]
            col = d
        for f in self.freqs:
            f = np.asarray(f, dtype=x.dtype)
            fx = f * x
            grad_x += grad_out[:, col:col + d] * f * np.cos(fx)
            grad_x -= grad_out[:, col + d:col + 2 * d] * f * np.sin(fx)
            col += 2 * d
        return grad_x


def encode(encoder: PositionalEncoder, x: np.ndarray) -> np.ndarray:
    return encoder.encode(np.atleast_2d(x))


# ---------------------------------------------------------------------------
# MLP with explicit forward cache / backward
# ---------------------------------------------------------------------------

def _act_inplace(tag: str, z: np.ndarray) -> np.ndarray:
    """Apply the activation, reusing z's buffer where possible."""
    if tag == "relu":
        return np.maximum(z, 0.0, out=z)
    if tag == "linear":
        return z
    if tag == "sigmoid":
        np.negative(z, out=z)
        np.exp(z, out=z)
        z += 1.0
        return np.reciprocal(z, out=z)
    if tag == "softplus":
        return np.logaddexp(0.0, z, out=z)
    if tag == "softsign":
        t = np.abs(z)
        t += 1.0
        z /= t
        return z
    raise ValueError(f"unknown activation {tag!r}")


def _act_grad_from_output(tag: str, y: np.ndarray) -> np.ndarray:
    """Activation derivative expressed through the activation's own output."""
    if tag == "relu":
        return (y > 0.0).astype(y.dtype)
    if tag == "linear":
        return np.ones_like(y)
    if tag == "sigmoid":
        return y * (1.0 - y)
    if tag == "softplus":
        # y = log(1 + e^z)  =>  sigmoid(z) = 1 - e^-y
        return -np.expm1(-y)
    if tag == "softsign":
        # y = z / (1 + |z|)  =>  1 / (1 + |z|) = 1 - |y|
        return (1.0 - np.abs(y)) ** 2
    raise ValueError(f"unknown activation {tag!r}")


class Mlp:
    """Fully connected stack; optionally re-concatenates the input before one layer."""

    def __init__(self, name: str, sizes: list[int], rng: np.random.Generator,
                 hidden_activation: str = "relu", out_activation: str = "linear",
                 skip_at: int | None = None, zero_init_output: bool = False,
                 dtype=np.float64):
        self.name = name
        self.sizes = list(sizes)
        self.hidden_activation = hidden_activation
        self.out_activation = out_activation
        self.skip_at = skip_at
        self.dtype = dtype
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        in_dim = sizes[0]
        for i, out_dim in enumerate(sizes[1:]):
            fan_in = in_dim + (sizes[0] if skip_at == i and i > 0 else 0)
            last = i == len(sizes) - 2
            if last and zero_init_output:
                w = np.zeros((out_dim, fan_in), dtype=dtype)
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                               size=(out_dim, fan_in)).astype(dtype)
            self.weights.append(w)
            self.biases.append(np.zeros(out_dim, dtype=dtype))
            in_dim = out_dim

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def activation_of(self, layer: int) -> str:
        return self.out_activation if layer == self.num_layers - 1 else self.hidden_activation

    def forward(self, x: np.ndarray, want_cache: bool = True):
        """Returns (output, cache); cache is None when want_cache is False.

        The cache keeps each layer's input and post-activation output; the
        backward pass recovers activation derivatives from the outputs, so
        pre-activations are never stored.
        """
        x = np.ascontiguousarray(x, dtype=self.dtype)
        inputs, outputs = [], []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if self.skip_at == i and i > 0:
                h = np.concatenate([h, x], axis=1)
            if want_cache:
                inputs.append(h)
            z = h @ w.T
            z += b
            h = _act_inplace(self.activation_of(i), z)
            if want_cache:
                outputs.append(h)
        return h, ((x, inputs, outputs) if want_cache else None)

    def backward(self, cache, grad_out: np.ndarray):
        """Returns (grad_input, {param_name: grad}) for one cached forward."""
        if cache is None:
            raise ValueError("backward without a cached forward pass")
        x, inputs, outputs = cache
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        grad_x = np.zeros_like(x)
        for i in range(self.num_layers - 1, -1, -1):
            gz = g * _act_grad_from_output(self.activation_of(i), outputs[i])
            grads[f"{self.name}.w{i}"] = gz.T @ inputs[i]
            grads[f"{self.name}.b{i}"] = gz.sum(axis=0)
            g = gz @ self.weights[i]
            if self.skip_at == i and i > 0:
                grad_x += g[:, -x.shape[1]:]
                g = g[:, :-x.shape[1]]
        grad_x += g
        return grad_x, grads

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


# ---------------------------------------------------------------------------
# Field bundle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FieldConfig:
    """Architecture hyper-parameters; the defaults are the trained configuration."""

    uv_frequencies: int = 10
    dir_frequencies: int = 4
    deform_width: int = 128
    deform_layers: int = 4
    density_width: int = 256
    density_layers: int = 8
    density_skip: int = 4
    color_width: int = 128
    color_layers: int = 2
    pose_width: int = 128
    pose_layers: int = 2
    pose_feature_dim: int = 64
    deform_scale: tuple[float, float, float] = (0.05, 0.05, 0.02)
    dtype: str = "float64"

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


class GradientStore:
    """Parameter-shaped gradient accumulator; merged by summation."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.grads = {k: np.zeros_like(v) for k, v in params.items()}
        self.count = 0

    def accumulate(self, partial: dict[str, np.ndarray]) -> None:
        for k, g in partial.items():
            self.grads[k] += g
        self.count += 1

    def merge(self, other: "GradientStore") -> None:
        for k in self.grads:
            self.grads[k] += other.grads[k]
        self.count += other.count

    def zero(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0
        self.count = 0


class FieldNets:
    """The deformation, density, color, and pose-feature networks plus encoders."""

    def __init__(self, num_joints: int, config: FieldConfig = FieldConfig(),
                 seed: int = 0):
        self.config = config
        self.num_joints = num_joints
        dt = config.np_dtype()
        rng = np.random.default_rng(seed)
        self.gamma_u = PositionalEncoder(config.uv_frequencies, True, 3)
        self.gamma_d = PositionalEncoder(config.dir_frequencies, True, 3)
        pf = config.pose_feature_dim
        self.pose_extractor = Mlp(
            "pose", [max(3 * (num_joints - 1), 1)] +
            [config.pose_width] * config.pose_layers + [pf],
            rng, dtype=dt)
        self.deform_net = Mlp(
            "deform", [self.gamma_u.out_dim + pf] +
            [config.deform_width] * config.deform_layers + [3],
            rng, out_activation="softsign", zero_init_output=True, dtype=dt)
        self.density_net = Mlp(
            "density", [self.gamma_u.out_dim + pf] +
            [config.density_width] * config.density_layers,
            rng, out_activation="relu", skip_at=config.density_skip, dtype=dt)
        self.sigma_head = Mlp(
            "sigma", [config.density_width, 1], rng,
            out_activation="linear", zero_init_output=True, dtype=dt)
        self.color_net = Mlp(
            "color", [config.density_width + self.gamma_d.out_dim + pf] +
            [config.color_width] * config.color_layers + [3],
            rng, out_activation="sigmoid", zero_init_output=True, dtype=dt)
        self.deform_scale = np.array(config.deform_scale, dtype=dt)

    def nets(self) -> list[Mlp]:
        return [self.pose_extractor, self.deform_net, self.density_net,
                self.sigma_head, self.color_net]

    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for net in self.nets():
            out.update(net.params())
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        params = self.params()
        missing = set(params) ^ set(values)
        if missing:
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for k, arr in params.items():
            if arr.shape != values[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            arr[...] = values[k].astype(arr.dtype)

    # -- component forward/backward -------------------------------------

    def pose_features(self, pose_vecs: np.ndarray, want_cache: bool = True):
        """pose_vecs: (B, 3*(J-1)) flattened non-root axis-angles -> (B, F)."""
        pose_vecs = np.atleast_2d(pose_vecs)
        expected = self.pose_extractor.sizes[0]
        if pose_vecs.shape[1] != expected:
            raise ValueError(f"pose vector dim {pose_vecs.shape[1]}, expected {expected}")
        return self.pose_extractor.forward(pose_vecs, want_cache)

    def pose_feature_vector(self, pose) -> np.ndarray:
        """Feature vector for one PoseParams (root placement excluded)."""
        feats, _ = self.pose_features(pose.flat_nonroot()[None, :])
        return feats[0]

    def deform(self, coords: np.ndarray, pose_feat: np.ndarray,
               l_mask: bool = False, want_cache: bool = True):
        """Bounded coordinate adjustment: coords + scale * softsign(net)."""
        dt = self.config.np_dtype()
        coords = np.ascontiguousarray(coords, dtype=dt)
        enc = self.gamma_u.encode(coords)
        net_in = np.concatenate([enc, pose_feat.astype(dt, copy=False)], axis=1)
        bounded, net_cache = self.deform_net.forward(net_in, want_cache)
        scale = self.deform_scale.copy()
        if l_mask:
            scale[2] = 0.0
        deformed = coords + bounded * scale
        cache = (coords, net_cache, scale) if want_cache else None
        return deformed, cache

    def deform_backward(self, cache, grad_deformed: np.ndarray):
        if cache is None:
            raise ValueError("backward without a cached forward pass")
        coords, net_cache, scale = cache
        grad_net_out = grad_deformed * scale
        grad_in, grads = self.deform_net.backward(net_cache, grad_net_out)
        enc_dim = self.gamma_u.out_dim
        grad_enc = grad_in[:, :enc_dim]
        grad_pose = grad_in[:, enc_dim:]
        grad_coords = self.gamma_u.backward(coords, grad_enc) + grad_deformed
        return grad_coords, grad_pose, grads

    def density(self, u_tilde: np.ndarray, pose_feat: np.ndarray,
                want_cache: bool = True):
        """Non-negative density plus the geometry feature fed to the color net."""
        dt = self.config.np_dtype()
        u_tilde = np.ascontiguousarray(u_tilde, dtype=dt)
        enc = self.gamma_u.encode(u_tilde)
        net_in = np.concatenate([enc, pose_feat.astype(dt, copy=False)], axis=1)
        geo, trunk_cache = self.density_net.forward(net_in, want_cache)
        raw, head_cache = self.sigma_head.forward(geo, want_cache)
        sigma = np.logaddexp(0.0, raw[:, 0])
        cache = (u_tilde, trunk_cache, head_cache, sigma) if want_cache else None
        return sigma, geo, cache

    def density_backward(self, cache, grad_sigma: np.ndarray, grad_geo=None):
        if cache is None:
            raise ValueError("backward without a cached forward pass")
        u_tilde, trunk_cache, head_cache, sigma = cache
        grad_raw = (grad_sigma * _act_grad_from_output("softplus", sigma))[:, None]
        grad_h, grads = self.sigma_head.backward(head_cache, grad_raw)
        if grad_geo is not None:
            grad_h = grad_h + grad_geo
        grad_in, trunk_grads = self.density_net.backward(trunk_cache, grad_h)
        grads.update(trunk_grads)
        enc_dim = self.gamma_u.out_dim
        grad_utilde = self.gamma_u.backward(u_tilde, grad_in[:, :enc_dim])
        grad_pose = grad_in[:, enc_dim:]
        return grad_utilde, grad_pose, grads

    def color(self, geo: np.ndarray, view_dirs: np.ndarray, pose_feat: np.ndarray,
              want_cache: bool = True):
        """RGB in [0,1]^3 from geometry features, view direction, pose features."""
        dt = self.config.np_dtype()
        view_dirs = np.ascontiguousarray(view_dirs, dtype=dt)
        norms = np.linalg.norm(view_dirs.astype(np.float64), axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("view directions must be unit length")
        enc_d = self.gamma_d.encode(view_dirs)
        net_in = np.concatenate([geo, enc_d, pose_feat.astype(dt, copy=False)], axis=1)
        rgb, net_cache = self.color_net.forward(net_in, want_cache)
        cache = (net_cache, geo.shape[1], enc_d.shape[1]) if want_cache else None
        return rgb, cache

    def color_backward(self, cache, grad_rgb: np.ndarray):
        net_cache, geo_dim, enc_dim = cache
        grad_in, grads = self.color_net.backward(net_cache, grad_rgb)
        grad_geo = grad_in[:, :geo_dim]
        grad_pose = grad_in[:, geo_dim + enc_dim:]
        return grad_geo, grad_pose, grads

    # -- whole-sample-batch field evaluation ------------------------------

    def evaluate(self, coords: np.ndarray, view_dirs: np.ndarray,
                 pose_vecs: np.ndarray, sample_frame: np.ndarray,
                 mode: str = "full", want_grads: bool = True):
        """Density and color for a batch of samples under an ablation wiring.

        coords: (N, 3) surface coordinates (u*, v*, l*), or raw observation
            coordinates when mode == "no_projection".
        pose_vecs: (B, P) one flattened pose per frame; sample_frame maps
            each sample to its row.
        With want_grads False no activations are retained (inference path);
        evaluate_backward then refuses the returned cache.
        """
        if mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {mode!r}")
        dt = self.config.np_dtype()
        coords = np.ascontiguousarray(coords, dtype=dt)
        naked = mode == "naked_surface"
        if naked:
            coords = coords.copy()
            coords[:, 2] = 0.0

        if mode == "no_pose":
            feats = np.zeros((pose_vecs.shape[0], self.config.pose_feature_dim), dtype=dt)
            pose_cache = None
        else:
            feats, pose_cache = self.pose_features(
                pose_vecs.astype(dt, copy=False), want_cache=want_grads)
        pose_feat = feats[sample_frame]

        if mode == "no_deform":
            u_tilde, deform_cache = coords, None
        else:
            u_tilde, deform_cache = self.deform(coords, pose_feat, l_mask=naked,
                                                want_cache=want_grads)

        sigma, geo, density_cache = self.density(u_tilde, pose_feat,
                                                 want_cache=want_grads)
        rgb, color_cache = self.color(geo, view_dirs, pose_feat,
                                      want_cache=want_grads)
        cache = {
            "mode": mode, "u_tilde": u_tilde, "want_grads": want_grads,
            "pose": pose_cache, "deform": deform_cache,
            "density": density_cache, "color": color_cache,
            "sample_frame": sample_frame, "num_frames": pose_vecs.shape[0],
        }
        return sigma, rgb, cache

    def evaluate_backward(self, cache, grad_sigma: np.ndarray,
                          grad_rgb: np.ndarray) -> dict[str, np.ndarray]:
        """Exact parameter gradients for one cached evaluate() call."""
        if not cache.get("want_grads"):
            raise ValueError("backward without a cached forward pass")
        mode = cache["mode"]
        grad_geo, grad_pose_c, grads = self.color_backward(cache["color"], grad_rgb)
        grad_utilde, grad_pose_d, dgrads = self.density_backward(
            cache["density"], grad_sigma, grad_geo)
        grads.update(dgrads)
        grad_pose = grad_pose_c + grad_pose_d

        if mode != "no_deform" and cache["deform"] is not None:
            _, grad_pose_def, defgrads = self.deform_backward(
                cache["deform"], grad_utilde)
            grads.update(defgrads)
            grad_pose = grad_pose + grad_pose_def
        else:
            for k, v in self.deform_net.params().items():
                grads[k] = np.zeros_like(v)

        if mode == "no_pose" or cache["pose"] is None:
            for k, v in self.pose_extractor.params().items():
                grads[k] = np.zeros_like(v)
        else:
            # scatter per-sample pose-feature grads back to per-frame rows
            per_frame = np.zeros((cache["num_frames"], grad_pose.shape[1]),
                                 dtype=grad_pose.dtype)
            np.add.at(per_frame, cache["sample_frame"], grad_pose)
            _, pgrads = self.pose_extractor.backward(cache["pose"], per_frame)
            grads.update(pgrads)
        return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamHyper:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class AdamState:
    """First/second moments and step counter for a named parameter set."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, hyper: AdamHyper) -> None:
    """One bias-corrected moment update, in place."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
