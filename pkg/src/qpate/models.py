"""Classical and hybrid quantum classifiers sharing one train/predict contract.

classical: [conv3x3 -> BN -> ReLU -> pool] x 2, [conv1x1 -> BN -> ReLU] x 2,
           dense 2048->512, ReLU, dense 512->2
quantum:   [conv3x3 -> BN -> LeakyReLU -> pool] x 2,
           dense 2048->512, LeakyReLU, dense 512->10, VQC (10 qubits, 2 layers)

Checkpoints are ``.npz`` archives; see :func:`save_checkpoint`.
"""

import json

import numpy as np

from . import tensor_core as tc
from .errors import ConfigurationError, DivergenceError, FormatError
from .quantum_sim import VqcBlock, parameter_shift_grad, vqc_backward_input

BACKENDS = ("classical", "quantum")
CHECKPOINT_FORMAT = "qpate-checkpoint"
CHECKPOINT_VERSION = 1
LATENT_DIM = 512
NUM_CLASSES = 2


class VqcLayer(tc.Layer):
    """Wraps a :class:`VqcBlock` so it trains like any other layer.

    ``grad_method='adjoint'`` back-propagates a costate through the circuit;
    ``'shift'`` runs the literal parameter-shift rule per sample. Both give
    the same gradient up to rounding.
    """

    def __init__(self, block, grad_method="adjoint"):
        super().__init__()
        if grad_method not in ("adjoint", "shift"):
            raise ConfigurationError(f"unknown gradient method {grad_method!r}")
        self.block = block
        self.grad_method = grad_method
        self.params["angles"] = block.params

    def forward(self, x, train=True):
        self._cache = x if train else None
        return self.block.forward(x)

    def backward(self, grad):
        x = self._take_cache()
        if self.grad_method == "adjoint":
            g_params, g_x = self.block.backward(x, grad)
        else:
            g_params = sum(parameter_shift_grad(self.block, xi, gi) for xi, gi in zip(x, grad))
            g_x = np.stack([vqc_backward_input(self.block, xi, gi) for xi, gi in zip(x, grad)])
        self.grads["angles"] = g_params
        return g_x


def _conv_block(cin, cout, k, rng, act, pool):
    layers = [tc.Conv2d(cin, cout, k, rng), tc.BatchNorm2d(cout), act()]
    if pool:
        layers.append(tc.MaxPool2d())
    return layers


def build_network(backend, rng, grad_method="adjoint", image_size=32):
    if backend not in BACKENDS:
        raise ConfigurationError(f"backend must be one of {BACKENDS}, got {backend!r}")
    flat = 32 * (image_size // 4) ** 2
    if backend == "classical":
        layers = (_conv_block(1, 16, 3, rng, tc.ReLU, True)
                  + _conv_block(16, 32, 3, rng, tc.ReLU, True)
                  + _conv_block(32, 32, 1, rng, tc.ReLU, False)
                  + _conv_block(32, 32, 1, rng, tc.ReLU, False)
                  + [tc.Flatten(), tc.Dense(flat, LATENT_DIM, rng), tc.ReLU(),
                     tc.Dense(LATENT_DIM, NUM_CLASSES, rng)])
    else:
        layers = (_conv_block(1, 16, 3, rng, tc.LeakyReLU, True)
                  + _conv_block(16, 32, 3, rng, tc.LeakyReLU, True)
                  + [tc.Flatten(), tc.Dense(flat, LATENT_DIM, rng), tc.LeakyReLU(),
                     tc.Dense(LATENT_DIM, 10, rng),
                     VqcLayer(VqcBlock.random(rng), grad_method)])
    return tc.Sequential(layers)


def _batches(n, batch_size, rng):
    """Shuffled index batches; a trailing batch of one is folded into its predecessor."""
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate(chunks[-2:])
        chunks.pop()
    return chunks


class Classifier:
    """A backend network plus its optimizer. Not thread-safe; use one per thread."""

    def __init__(self, backend, seed=0, optimizer=None, grad_method="adjoint"):
        self.backend = backend
        self.seed = seed
        self.grad_method = grad_method
        self.net = build_network(backend, np.random.default_rng(seed), grad_method)
        self.optimizer_config = optimizer or tc.AdamWConfig()
        self.optimizer = tc.AdamW(self.net.param_list(), self.optimizer_config)

    def logits(self, images, train=False):
        return self.net.forward(images, train)

    def predict(self, images, batch_size=256):
        out = [self.logits(images[i:i + batch_size]).argmax(axis=1)
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def train_step(self, images, labels):
        logits = self.net.forward(images, train=True)
        loss, grad = tc.cross_entropy(logits, labels)
        self.net.backward(grad)
        self.optimizer.step(self.net.grad_list())
        return loss

    def fit(self, images, labels, epochs, batch_size=64, rng=None):
        """Plain minibatch training; returns the mean loss of each epoch."""
        rng = rng if rng is not None else np.random.default_rng(self.seed + 1)
        labels = np.asarray(labels, dtype=np.int64)
        history = []
        for epoch in range(epochs):
            losses = []
            for idx in _batches(len(labels), batch_size, rng):
                losses.append(self.train_step(images[idx], labels[idx]))
            mean = float(np.mean(losses))
            if not np.isfinite(mean):
                raise DivergenceError(f"non-finite loss in epoch {epoch}", epoch)
            history.append(mean)
        return history

    # -- checkpoints --------------------------------------------------------

    def layer_specs(self):
        specs = []
        for layer in self.net.layers:
            spec = {"type": type(layer).__name__,
                    "params": {k: list(v.shape) for k, v in layer.params.items()}}
            if isinstance(layer, tc.LeakyReLU):
                spec["slope"] = layer.slope
            if isinstance(layer, VqcLayer):
                b = layer.block
                spec["vqc"] = {"num_qubits": b.num_qubits, "num_layers": b.num_layers,
                               "entanglement": [list(map(list, e)) for e in b.entanglement],
                               "readout": list(b.readout)}
            specs.append(spec)
        return specs


def save_checkpoint(model, path):
    """Write ``model`` to an ``.npz`` archive.

    Keys: ``meta`` (JSON string with format, version, backend, seed and one
    spec per layer), ``param/<layer>.<name>`` and ``buffer/<layer>.<name>``
    float64 arrays. VQC angles are stored as ``param/<layer>.angles`` with
    shape ``(num_layers, num_qubits, 3)`` holding (phi, theta, omega).
    """
    meta = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "backend": model.backend, "seed": model.seed, "layers": model.layer_specs()}
    arrays = {"meta": np.array(json.dumps(meta))}
    arrays.update({f"param/{k}": v for k, v in model.net.named_arrays("params").items()})
    arrays.update({f"buffer/{k}": v for k, v in model.net.named_arrays("buffers").items()})
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path, grad_method="adjoint"):
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data:
            raise FormatError(f"{path} has no checkpoint metadata")
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path} is not a qpate checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        model = Classifier(meta["backend"], meta["seed"], grad_method=grad_method)
        if [s["type"] for s in meta["layers"]] != [type(l).__name__ for l in model.net.layers]:
            raise FormatError("checkpoint layer stack does not match the backend")
        for kind in ("params", "buffers"):
            prefix = "param/" if kind == "params" else "buffer/"
            for key, arr in model.net.named_arrays(kind).items():
                stored = data[prefix + key]
                if stored.shape != arr.shape:
                    raise FormatError(f"{key}: stored shape {stored.shape}, expected {arr.shape}")
                arr[...] = stored
    return model
