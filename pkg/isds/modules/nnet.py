"""
Small float64 multilayer perceptrons used for transition means m(·, k), the decoder f
and the per-timestep encoder.

Every network ends with an affine layer; the activation sits between layers.
Cosine/Softplus/GELU networks are real-analytic, Leaky ReLU networks are piecewise linear.
"""
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call, grad, jacrev, vmap

from isds.utils.exceptions import ShapeError
from isds.utils.seed import torch_generator
from isds.utils.vars import ACTIVATIONS, ANALYTIC_ACTIVATIONS

DTYPE = torch.float64


def get_activation(activation: str, negative_slope: float = 0.01):
    activation = activation.lower()
    if activation == "cosine":
        return torch.cos
    elif activation == "softplus":
        return F.softplus
    elif activation == "gelu":
        # exact erf form, the tanh approximation is not analytic-equivalent
        return lambda h: F.gelu(h, approximate="none")
    elif activation == "leaky_relu":
        return lambda h: F.leaky_relu(h, negative_slope=negative_slope)
    else:
        raise ValueError(f'Expected "activation" in {ACTIVATIONS}, got {activation}.')


class Mlp(nn.Module):
    def __init__(
        self,
        layer_dims: Sequence[int],
        activation: str = "cosine",
        negative_slope: float = 0.01,
        seed: Optional[int] = None,
    ):
        super(Mlp, self).__init__()
        layer_dims = [int(d) for d in layer_dims]
        if len(layer_dims) < 2 or any(d <= 0 for d in layer_dims):
            raise ShapeError(f"layer_dims must hold >= 2 positive sizes, got {layer_dims}")
        if activation == "leaky_relu" and not 0.0 < negative_slope < 1.0:
            raise ValueError(f"negative_slope must lie in (0, 1), got {negative_slope}")
        self.layer_dims = layer_dims
        self.activation = activation
        self.negative_slope = negative_slope
        self.act_fn = get_activation(activation, negative_slope)
        self.layers = nn.ModuleList(
            nn.Linear(d_in, d_out, dtype=DTYPE)
            for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:])
        )
        self.reset_parameters(seed)

    @property
    def in_features(self) -> int:
        return self.layer_dims[0]

    @property
    def out_features(self) -> int:
        return self.layer_dims[-1]

    @property
    def is_analytic(self) -> bool:
        return self.activation in ANALYTIC_ACTIVATIONS

    @property
    def is_piecewise_linear(self) -> bool:
        return self.activation == "leaky_relu"

    @property
    def weights(self) -> list[torch.Tensor]:
        return [layer.weight for layer in self.layers]

    @property
    def biases(self) -> list[torch.Tensor]:
        return [layer.bias for layer in self.layers]

    @torch.no_grad()
    def reset_parameters(self, seed: Optional[int] = None):
        """Glorot-uniform weights and biases, a = sqrt(6 / (fan_in + fan_out))."""
        generator = torch_generator(seed) if seed is not None else None
        for layer in self.layers:
            fan_out, fan_in = layer.weight.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            for param in (layer.weight, layer.bias):
                noise = torch.rand(param.shape, generator=generator, dtype=DTYPE)
                param.copy_((2.0 * noise - 1.0) * bound)

    def effective_weight(self, index: int) -> torch.Tensor:
        return self.layers[index].weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(
                f"expected input of size {self.in_features}, got shape {tuple(x.shape)}"
            )
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = F.linear(h, self.effective_weight(i), layer.bias)
            if i < last:
                h = self.act_fn(h)
        return h

    def extra_repr(self):
        return f"layer_dims={self.layer_dims}, activation={self.activation}"


class MaskedMlp(Mlp):
    """
    Mlp whose weights are multiplied by fixed binary masks, so that output j only
    depends on the inputs allowed by `dependency[j]`.

    Hidden units are split round-robin into `out_features` groups, unit u serving
    output u % out_features (a locally connected network).
    """

    def __init__(
        self,
        dependency: torch.Tensor,
        hidden_dims: Sequence[int] = (16,),
        activation: str = "cosine",
        negative_slope: float = 0.01,
        seed: Optional[int] = None,
    ):
        dependency = torch.as_tensor(dependency, dtype=torch.bool)
        out_dim, in_dim = dependency.shape
        layer_dims = [in_dim, *hidden_dims, out_dim]
        super(MaskedMlp, self).__init__(layer_dims, activation, negative_slope, seed=None)
        for i, mask in enumerate(self.build_masks(dependency, layer_dims)):
            self.register_buffer(f"mask_{i}", mask)
        self.register_buffer("dependency", dependency.clone())
        self.reset_parameters(seed)

    @staticmethod
    def build_masks(dependency: torch.Tensor, layer_dims: Sequence[int]) -> list[torch.Tensor]:
        out_dim = dependency.shape[0]
        masks = []
        for i, (d_in, d_out) in enumerate(zip(layer_dims[:-1], layer_dims[1:])):
            groups_out = torch.arange(d_out) % out_dim
            if i == 0:
                # (d_out, d_in): hidden unit of group g sees the parents of output g
                mask = dependency[groups_out]
            else:
                groups_in = torch.arange(d_in) % out_dim
                mask = groups_out[:, None] == groups_in[None, :]
            masks.append(mask.to(DTYPE))
        return masks

    @property
    def masks(self) -> list[torch.Tensor]:
        return [getattr(self, f"mask_{i}") for i in range(len(self.layers))]

    def effective_weight(self, index: int) -> torch.Tensor:
        return self.layers[index].weight * getattr(self, f"mask_{index}")

    @torch.no_grad()
    def apply_masks_(self):
        """Zero the masked-out weight entries in place; called after optimizer steps."""
        for i, layer in enumerate(self.layers):
            layer.weight.mul_(getattr(self, f"mask_{i}"))

    @torch.no_grad()
    def reset_parameters(self, seed: Optional[int] = None):
        super().reset_parameters(seed)
        if hasattr(self, "mask_0"):
            self.apply_masks_()

    def extra_repr(self):
        return f"{super().extra_repr()}, edges={int(self.dependency.sum())}"


class BandOverlapMlp(nn.Module):
    """
    Piecewise-analytic mean: a shared network inside the norm band low <= |x|_2 <= high
    and a regime-specific network outside it.
    """

    def __init__(self, regime_net: Mlp, shared_net: Mlp, low: float = 3.0, high: float = 5.0):
        super(BandOverlapMlp, self).__init__()
        if regime_net.layer_dims != shared_net.layer_dims:
            raise ShapeError("regime and shared networks must have identical layer_dims")
        self.regime_net = regime_net
        self.shared_net = shared_net
        self.low = low
        self.high = high

    @property
    def layer_dims(self) -> list[int]:
        return self.regime_net.layer_dims

    @property
    def in_features(self) -> int:
        return self.regime_net.in_features

    @property
    def out_features(self) -> int:
        return self.regime_net.out_features

    @property
    def activation(self) -> str:
        return self.regime_net.activation

    @property
    def is_analytic(self) -> bool:
        # analytic on each piece only
        return False

    def in_band(self, x: torch.Tensor) -> torch.Tensor:
        norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
        return (norm >= self.low) & (norm <= self.high)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.where(self.in_band(x), self.shared_net(x), self.regime_net(x))


@dataclass
class MlpGradients:
    d_weights: list[torch.Tensor]
    d_biases: list[torch.Tensor]
    d_input: torch.Tensor


def _check_input(net: Mlp, x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.ndim != 1 or x.shape[0] != net.in_features:
        raise ShapeError(f"expected a vector of length {net.in_features}, got {tuple(x.shape)}")
    return x


def mlp_init(dims: Sequence[int], activation: str = "cosine", seed: int = 0, **kwargs) -> Mlp:
    return Mlp(dims, activation=activation, seed=seed, **kwargs)


def mlp_forward(net: Mlp, x: torch.Tensor) -> torch.Tensor:
    x = _check_input(net, x)
    with torch.no_grad():
        return net(x)


def mlp_backward(net: Mlp, x: torch.Tensor, upstream: torch.Tensor) -> MlpGradients:
    """Exact gradients of `upstream · net(x)` w.r.t. every weight, bias and the input."""
    x = _check_input(net, x)
    upstream = torch.as_tensor(upstream, dtype=DTYPE)
    if upstream.shape != (net.out_features,):
        raise ShapeError(
            f"expected upstream of length {net.out_features}, got {tuple(upstream.shape)}"
        )
    params = {name: p.detach() for name, p in net.named_parameters()}

    def contracted(params, x):
        return (functional_call(net, params, (x,)) * upstream).sum()

    d_params, d_input = grad(contracted, argnums=(0, 1))(params, x)
    n_layers = len(net.layers)
    return MlpGradients(
        d_weights=[d_params[f"layers.{i}.weight"] for i in range(n_layers)],
        d_biases=[d_params[f"layers.{i}.bias"] for i in range(n_layers)],
        d_input=d_input,
    )


def mlp_jacobian(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """
    Exact input Jacobian. A vector input gives (out_dim, in_dim); a batch (B, in_dim)
    gives (B, out_dim, in_dim). Differentiable w.r.t. the network parameters.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    if x.shape[-1] != net.in_features:
        raise ShapeError(f"expected input of size {net.in_features}, got {tuple(x.shape)}")
    if x.ndim == 1:
        return jacrev(net)(x)
    flat = x.reshape(-1, x.shape[-1])
    jac = vmap(jacrev(net))(flat)
    return jac.reshape(*x.shape[:-1], net.out_features, net.in_features)


@torch.no_grad()
def init_affine_passthrough(net: Mlp, weight: torch.Tensor, bias: torch.Tensor):
    """
    Set a Leaky ReLU Mlp so that net(x) == weight @ x + bias exactly, using
    leaky(a) - leaky(-a) == (1 + slope) * a. The narrower of input and output is carried
    through the hidden layers on 2 * width units; the remaining hidden units keep their
    incoming weights but do not reach the output.
    """
    if not net.is_piecewise_linear:
        raise ValueError("affine pass-through needs a leaky_relu network")
    weight = torch.as_tensor(weight, dtype=DTYPE)
    bias = torch.as_tensor(bias, dtype=DTYPE)
    if weight.shape != (net.out_features, net.in_features) or bias.shape != (net.out_features,):
        raise ShapeError(
            f"expected weight {(net.out_features, net.in_features)} and bias ({net.out_features},)"
        )
    if len(net.layers) == 1:
        net.layers[0].weight.copy_(weight)
        net.layers[0].bias.copy_(bias)
        return
    width = min(net.in_features, net.out_features)
    if any(d < 2 * width for d in net.layer_dims[1:-1]):
        raise ShapeError(f"hidden layers need >= {2 * width} units for an exact pass-through")
    carry_input = net.in_features <= net.out_features
    eye = torch.eye(width, dtype=DTYPE)
    scale = 1.0 + net.negative_slope
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        w, b = layer.weight, layer.bias
        if i == 0:
            head = eye if carry_input else weight
            head_bias = torch.zeros(width, dtype=DTYPE) if carry_input else bias
            w[: 2 * width] = torch.cat([head, -head])
            b[: 2 * width] = torch.cat([head_bias, -head_bias])
        else:
            w[:, : 2 * width] = 0.0
            block = torch.cat([eye, -eye], dim=1) / scale
            if i < last:
                w[: 2 * width, : 2 * width] = torch.cat([block, -block])
                w[: 2 * width, 2 * width :] = 0.0
                b[: 2 * width] = 0.0
            else:
                tail = weight if carry_input else eye
                w.zero_()
                w[:, : 2 * width] = tail @ block
                b.copy_(bias if carry_input else torch.zeros_like(b))
