"""Fully connected detector with frozen NC heads and an auxiliary (deep-supervision) head.

Samples are rows.  A layer computes ``act(x @ W.T + b)`` with ``W`` stored
``out x in``.  A head has ``2I`` rows: rows ``0..I-1`` score bit value 0 and rows
``I..2I-1`` score bit value 1, so bit ``i`` is a two-way softmax over the pair
``(z_i, z_{I+i})``.  The main head reads the last hidden layer and the auxiliary head
reads the one before it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import SizeError
from .nc_core import generate_nc_weights

RELU = "relu"
LINEAR = "none"


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray | None
    activation: str = RELU
    frozen: bool = False

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]

    def params(self):
        return [self.weights] if self.bias is None else [self.weights, self.bias]

    def copy(self):
        return DenseLayer(
            self.weights.copy(), None if self.bias is None else self.bias.copy(), self.activation, self.frozen
        )


@dataclass
class DeepSupervisedNet:
    backbone: list
    output_head: DenseLayer
    aux_head: DenseLayer
    mu: float
    num_bits: int
    weight_decay: float = 0.0
    seeds: dict = field(default_factory=dict)

    @property
    def layer_dims(self):
        return [self.backbone[0].in_dim] + [layer.out_dim for layer in self.backbone]

    def trainable_layers(self):
        layers = [layer for layer in self.backbone if not layer.frozen]
        if not self.output_head.frozen:
            layers.append(self.output_head)
        return layers

    def trainable_params(self):
        """Trainable arrays in a fixed order (backbone weights/biases, then a trainable head)."""
        return [p for layer in self.trainable_layers() for p in layer.params()]

    def frozen_params(self):
        out = [p for layer in self.backbone if layer.frozen for p in layer.params()]
        if self.output_head.frozen:
            out += self.output_head.params()
        return out + self.aux_head.params()

    def copy(self):
        return DeepSupervisedNet(
            [layer.copy() for layer in self.backbone],
            self.output_head.copy(),
            self.aux_head.copy(),
            self.mu,
            self.num_bits,
            self.weight_decay,
            dict(self.seeds),
        )

    def set_trainable_params(self, values):
        params = self.trainable_params()
        if len(values) != len(params):
            raise SizeError("parameter count mismatch")
        for p, v in zip(params, values):
            if p.shape != v.shape:
                raise SizeError(f"parameter shape {v.shape} != {p.shape}")
            p[...] = v


def _he_layer(rng, in_dim, out_dim, activation=RELU, bias=True):
    W = rng.standard_normal((out_dim, in_dim)) * np.sqrt(2.0 / in_dim)
    return DenseLayer(W, np.zeros(out_dim) if bias else None, activation, False)


def init_net(layer_dims, num_bits, mu=0.5, nc_norm=1.0, seed=0, trainable_head=False, weight_decay=0.0,
             nc_seed=None):
    """Build a network ``layer_dims = [in, h_1, ..., h_{O-1}]`` (at least two hidden layers).

    Backbone layers are He-initialized from ``seed``.  Both heads come from
    :func:`generate_nc_weights` and are frozen.  With ``trainable_head`` the output head
    is instead He-initialized and trainable (the plain FedAvg detector); the auxiliary
    head is still built so every network has the same shape.  ``nc_seed``, when given,
    fixes both heads independently of ``seed`` so several networks can share them.
    """
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 3:
        raise SizeError("need an input size and at least two hidden layers")
    ss = np.random.SeedSequence(seed)
    backbone_seq, out_seq, aux_seq = ss.spawn(3)
    if nc_seed is not None:
        _, out_seq, aux_seq = np.random.SeedSequence(nc_seed).spawn(3)
    out_seed = int(out_seq.generate_state(1)[0])
    aux_seed = int(aux_seq.generate_state(1)[0])
    rng = np.random.default_rng(backbone_seq)
    backbone = [_he_layer(rng, a, b) for a, b in zip(layer_dims[:-1], layer_dims[1:])]
    aux = generate_nc_weights(num_bits, layer_dims[-2], nc_norm, aux_seed)
    aux_head = DenseLayer(np.array(aux.rows), None, LINEAR, True)
    if trainable_head:
        output_head = _he_layer(np.random.default_rng(out_seed), layer_dims[-1], 2 * num_bits, LINEAR, bias=False)
    else:
        out = generate_nc_weights(num_bits, layer_dims[-1], nc_norm, out_seed)
        output_head = DenseLayer(np.array(out.rows), None, LINEAR, True)
    seeds = {"init": seed if isinstance(seed, int) else [int(v) for v in np.atleast_1d(seed)], "output_head": out_seed, "aux_head": aux_seed}
    return DeepSupervisedNet(backbone, output_head, aux_head, float(mu), int(num_bits), float(weight_decay), seeds)


def _check_inputs(net, inputs):
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != net.backbone[0].in_dim:
        raise SizeError(f"inputs must be n x {net.backbone[0].in_dim}, got {inputs.shape}")
    return inputs


def forward(net, inputs):
    """Return ``(hidden, main_logits, aux_logits)``; ``hidden[o]`` is layer ``o``'s output, ``hidden[0]`` the input."""
    h = _check_inputs(net, inputs)
    hidden = [h]
    for layer in net.backbone:
        z = h @ layer.weights.T
        if layer.bias is not None:
            z += layer.bias
        h = np.maximum(z, 0.0) if layer.activation == RELU else z
        hidden.append(h)
    main = hidden[-1] @ net.output_head.weights.T
    aux = hidden[-2] @ net.aux_head.weights.T
    return hidden, main, aux


def pair_margins(logits, num_bits):
    """``z_{bit=1} - z_{bit=0}`` per bit."""
    return logits[:, num_bits:] - logits[:, :num_bits]


def _pair_ce(logits, bits, num_bits):
    # CE of a two-way softmax with target y is softplus(z_other - z_target).
    phi = (1.0 - 2.0 * bits) * pair_margins(logits, num_bits)
    return phi, np.logaddexp(0.0, phi)


def _check_bits(net, inputs, bits):
    bits = np.asarray(bits, dtype=float)
    if bits.shape != (inputs.shape[0], net.num_bits):
        raise SizeError(f"target bits must be {inputs.shape[0]} x {net.num_bits}, got {bits.shape}")
    return bits


def ds_loss(net, inputs, bits):
    """Mean pair cross entropy of the main head plus ``mu`` times that of the auxiliary head."""
    inputs = _check_inputs(net, inputs)
    bits = _check_bits(net, inputs, bits)
    _, main, aux = forward(net, inputs)
    loss = _pair_ce(main, bits, net.num_bits)[1].mean()
    if net.mu:
        loss += net.mu * _pair_ce(aux, bits, net.num_bits)[1].mean()
    if net.weight_decay:
        loss += net.weight_decay * sum(np.sum(layer.weights**2) for layer in net.trainable_layers())
    return float(loss)


def _head_grad(logits, bits, num_bits, scale):
    phi = (1.0 - 2.0 * bits) * pair_margins(logits, num_bits)
    g = scale * (1.0 - 2.0 * bits) * expit(phi)  # d loss / d margin
    return np.hstack([-g, g])


def ds_grads(net, inputs, bits):
    """Loss and gradients with respect to :meth:`DeepSupervisedNet.trainable_params`."""
    inputs = _check_inputs(net, inputs)
    bits = _check_bits(net, inputs, bits)
    hidden, main, aux = forward(net, inputs)
    scale = 1.0 / bits.size
    _, ce_main = _pair_ce(main, bits, net.num_bits)
    loss = ce_main.mean()
    d_main = _head_grad(main, bits, net.num_bits, scale)
    head_grads = []
    if not net.output_head.frozen:
        head_grads = [d_main.T @ hidden[-1]]
    delta = d_main @ net.output_head.weights
    n_layers = len(net.backbone)
    grads = [None] * n_layers
    for o in range(n_layers - 1, -1, -1):
        layer = net.backbone[o]
        if o == n_layers - 2 and net.mu:
            _, ce_aux = _pair_ce(aux, bits, net.num_bits)
            loss += net.mu * ce_aux.mean()
            delta = delta + (net.mu * _head_grad(aux, bits, net.num_bits, scale)) @ net.aux_head.weights
        if layer.activation == RELU:
            delta = delta * (hidden[o + 1] > 0)
        gW = delta.T @ hidden[o]
        grads[o] = (gW, delta.sum(axis=0) if layer.bias is not None else None)
        if o:
            delta = delta @ layer.weights
    out = []
    for layer, (gW, gb) in zip(net.backbone, grads):
        if layer.frozen:
            continue
        out.append(gW)
        if gb is not None:
            out.append(gb)
    out += head_grads
    if net.weight_decay:
        wd = net.weight_decay
        loss += wd * sum(np.sum(layer.weights**2) for layer in net.trainable_layers())
        i = 0
        for layer in net.trainable_layers():
            out[i] = out[i] + 2.0 * wd * layer.weights
            i += len(layer.params())
    return float(loss), out


def predict_bits(net, inputs):
    """Bit ``i`` is 1 iff the bit-1 score beats the bit-0 score; ties go to 0."""
    _, main, _ = forward(net, inputs)
    return (pair_margins(main, net.num_bits) > 0).astype(np.int8)


@dataclass
class OptimizerState:
    """RMSprop second-moment accumulators, one per trainable array."""

    accumulators: list
    step_size: float = 1e-3
    decay: float = 0.99
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params, step_size=1e-3, decay=0.99, epsilon=1e-8):
        return cls([np.zeros_like(p) for p in params], step_size, decay, epsilon)

    def copy(self):
        return OptimizerState([a.copy() for a in self.accumulators], self.step_size, self.decay, self.epsilon)


def rmsprop_step(params, grads, state):
    """In-place RMSprop update of ``params``; returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.accumulators):
        raise SizeError("params, grads and accumulators must align")
    lr, rho, eps = state.step_size, state.decay, state.epsilon
    for p, g, v in zip(params, grads, state.accumulators):
        v *= rho
        v += (1.0 - rho) * g * g
        p -= lr * g / (np.sqrt(v) + eps)
    return params, state


# -- checkpoints ----------------------------------------------------------------


def _layer_to_dict(layer):
    return {
        "shape": list(layer.weights.shape),
        "weights": layer.weights.ravel().tolist(),
        "bias": None if layer.bias is None else layer.bias.tolist(),
        "activation": layer.activation,
        "frozen": layer.frozen,
    }


def _layer_from_dict(d):
    W = np.asarray(d["weights"], dtype=float).reshape(d["shape"])
    b = None if d["bias"] is None else np.asarray(d["bias"], dtype=float)
    return DenseLayer(W, b, d["activation"], bool(d["frozen"]))


def net_to_dict(net):
    return {
        "format": "ncdsfl-net/1",
        "layer_dims": net.layer_dims,
        "num_bits": net.num_bits,
        "mu": net.mu,
        "weight_decay": net.weight_decay,
        "seeds": net.seeds,
        "backbone": [_layer_to_dict(layer) for layer in net.backbone],
        "output_head": _layer_to_dict(net.output_head),
        "aux_head": _layer_to_dict(net.aux_head),
    }


def net_from_dict(d):
    net = DeepSupervisedNet(
        [_layer_from_dict(x) for x in d["backbone"]],
        _layer_from_dict(d["output_head"]),
        _layer_from_dict(d["aux_head"]),
        float(d["mu"]),
        int(d["num_bits"]),
        float(d["weight_decay"]),
        dict(d["seeds"]),
    )
    if net.layer_dims != list(d["layer_dims"]):
        raise SizeError("checkpoint layer_dims disagree with stored layers")
    return net


def save_checkpoint(nets, path):
    """Write one or more networks as JSON.  Python float repr makes the round trip exact."""
    if isinstance(nets, DeepSupervisedNet):
        nets = [nets]
    with open(path, "w") as fh:
        json.dump({"format": "ncdsfl-checkpoint/1", "nets": [net_to_dict(n) for n in nets]}, fh)


def load_checkpoint(path):
    with open(path) as fh:
        obj = json.load(fh)
    return [net_from_dict(d) for d in obj["nets"]]
