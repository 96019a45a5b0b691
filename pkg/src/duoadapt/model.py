"""Domain-wise classifier architecture and checkpoint persistence.

Each domain owns one model: a frozen contrastively-pretrained extractor,
a residual adaptation block (identity for own-domain features, learned
residual correction for cross-domain features), and a classification
head over the full source label space. Final predictions fuse the two
models by summing their logits.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, Iterator, Sequence, Tuple

import numpy as np

from .autodiff import (ParameterSet, Tensor, batch_norm, conv2d, dropout,
                       maxpool2x2)

_CKPT_MAGIC = b"DACK"
_CKPT_VERSION = 1


class ExtractorNotPretrained(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# -- module plumbing ----------------------------------------------------------

class Module:
    """Tiny container base: children discovered from instance attributes."""

    def __init__(self):
        self.training = True
        self.frozen = False

    def _children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}{i}", item

    def walk(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self._children():
            path = f"{prefix}.{name}" if prefix else name
            yield from child.walk(path)

    def set_training(self, flag: bool) -> None:
        for _, m in self.walk():
            m.training = False if m.frozen else flag

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for path, m in self.walk(prefix):
            for name, val in vars(m).items():
                if isinstance(val, Tensor):
                    out[f"{path}.{name}" if path else name] = val
        return out

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for path, m in self.walk(prefix):
            if isinstance(m, BatchNorm):
                out[f"{path}.running_mean"] = m.running_mean
                out[f"{path}.running_var"] = m.running_var
        return out

    def freeze(self) -> None:
        for _, m in self.walk():
            m.frozen = True
            m.training = False
        for t in self.named_parameters().values():
            t.requires_grad = False
            t.grad = None


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 zero_init: bool = False):
        super().__init__()
        if zero_init:
            w = np.zeros((in_dim, out_dim))
        else:
            w = rng.standard_normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm(Module):
    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean,
                          self.running_var, training=self.training,
                          momentum=self.momentum, eps=self.eps,
                          update_stats=self.update_stats and self.training)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator):
        super().__init__()
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.p, self.rng, self.training)


class Conv(Module):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 padding: int = 1):
        super().__init__()
        scale = np.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.standard_normal((out_ch, in_ch, k, k)) * scale,
                             requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=1, padding=self.padding)


# -- feature extractors -------------------------------------------------------

class MlpExtractor(Module):
    """Fully connected extractor for vector-valued inputs.

    Carries a two-layer projection head used only during contrastive
    pretraining; downstream consumers call ``features`` which bypasses it.
    """

    kind = "mlp"

    def __init__(self, in_dim: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (64,), feature_dim: int = 32,
                 proj_dim: int = 16):
        super().__init__()
        dims = [in_dim, *hidden, feature_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.proj1 = Linear(feature_dim, feature_dim, rng)
        self.proj2 = Linear(feature_dim, proj_dim, rng)
        self.feature_dim = feature_dim
        self.pretrained = False

    def features(self, x: Tensor) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = h.relu()
        return h

    def project(self, x: Tensor) -> Tensor:
        return self.proj2(self.proj1(self.features(x)).relu())


class ConvExtractor(Module):
    """Three conv/BN/ReLU/maxpool blocks over 1x32x32 images, then FC."""

    kind = "conv_stack"

    def __init__(self, rng: np.random.Generator, channels: Sequence[int] = (32, 64, 128),
                 feature_dim: int = 512, proj_dim: int = 64,
                 dropout_p: float = 0.1):
        super().__init__()
        chain = [1, *channels]
        self.convs = [Conv(a, b, 3, rng) for a, b in zip(chain[:-1], chain[1:])]
        self.bns = [BatchNorm(c) for c in channels]
        flat = channels[-1] * (32 // 2 ** len(channels)) ** 2
        self.fc = Linear(flat, feature_dim, rng)
        self.proj1 = Linear(feature_dim, feature_dim, rng)
        self.proj2 = Linear(feature_dim, proj_dim, rng)
        self.feature_dim = feature_dim
        self.pretrained = False

    def features(self, x: Tensor) -> Tensor:
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = maxpool2x2(bn(conv(h)).relu())
        n = h.shape[0]
        return self.fc(h.reshape(n, -1))

    def project(self, x: Tensor) -> Tensor:
        return self.proj2(self.proj1(self.features(x)).relu())


# -- adaptation block and classifier -----------------------------------------

class RdaBlock(Module):
    """Residual adaptation block with an exact identity channel.

    Own-domain features pass through untouched (no graph nodes recorded);
    cross-domain features gain a learned residual correction whose final
    linear layer starts at zero, so the block is the identity at init.
    """

    def __init__(self, dim: int, own_domain: str, rng: np.random.Generator,
                 hidden: Sequence[int] = (256, 128, 256), dropout_p: float = 0.1):
        super().__init__()
        if own_domain not in ("source", "target"):
            raise ValueError(f"bad domain {own_domain!r}")
        dims = [dim, *hidden]
        self.fcs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.bns = [BatchNorm(b) for b in hidden]
        self.drops = [Dropout(dropout_p, rng) for _ in hidden]
        self.out = Linear(dims[-1], dim, rng, zero_init=True)
        self.own_domain = own_domain
        self.dim = dim

    def residual(self, z: Tensor) -> Tensor:
        h = z
        for fc, bn, drop in zip(self.fcs, self.bns, self.drops):
            h = drop(bn(fc(h)).relu())
        return self.out(h)


def rda_forward(block: RdaBlock, z: Tensor, domain_of_z: str) -> Tensor:
    """Identity for own-domain features, z + residual(z) otherwise."""
    if z.shape[-1] != block.dim:
        raise ValueError(f"rda_forward: feature dim {z.shape[-1]} != block dim {block.dim}")
    if domain_of_z == block.own_domain:
        return z
    return z + block.residual(z)


class DomainClassifier(Module):
    """Three-layer FC head emitting raw logits over the source label space."""

    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (128, 64), dropout_p: float = 0.1):
        super().__init__()
        dims = [dim, *hidden]
        self.fcs = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.bns = [BatchNorm(b) for b in hidden]
        self.drops = [Dropout(dropout_p, rng) for _ in hidden]
        self.out = Linear(dims[-1], n_classes, rng)
        self.n_classes = n_classes

    def __call__(self, h: Tensor) -> Tensor:
        for fc, bn, drop in zip(self.fcs, self.bns, self.drops):
            h = drop(bn(fc(h)).relu())
        return self.out(h)


class DomainWiseModel(Module):
    """One domain's classifier: shared frozen extractors + own RDA + head."""

    def __init__(self, extractor_s: Module, extractor_t: Module,
                 rda: RdaBlock, classifier: DomainClassifier, domain: str):
        super().__init__()
        self.extractor_s = extractor_s
        self.extractor_t = extractor_t
        self.rda = rda
        self.classifier = classifier
        self.domain = domain


def extract(model: DomainWiseModel, x: Tensor, domain_of_x: str) -> Tensor:
    """Frozen per-domain feature extraction; constant w.r.t. the tape."""
    ext = model.extractor_s if domain_of_x == "source" else model.extractor_t
    if not getattr(ext, "pretrained", False):
        raise ExtractorNotPretrained(
            f"{domain_of_x} extractor used before contrastive pretraining")
    return ext.features(x)


def classifier_logits(model: DomainWiseModel, x: Tensor, domain_of_x: str) -> Tensor:
    """extractor -> adaptation block -> classifier; raw logits out."""
    z = extract(model, x, domain_of_x)
    return model.classifier(rda_forward(model.rda, z, domain_of_x))


def ensemble_predict(ms: DomainWiseModel, mt: DomainWiseModel,
                     x_t: Tensor) -> Tuple[np.ndarray, np.ndarray]:
    """Fuse the two models on target samples by summing their logits."""
    c_s = classifier_logits(ms, x_t, "target").data
    c_t = classifier_logits(mt, x_t, "target").data
    fused = c_s + c_t
    fused = fused - fused.max(axis=1, keepdims=True)
    e = np.exp(fused)
    dist = e / e.sum(axis=1, keepdims=True)
    return fused.argmax(axis=1), dist


def build_models(n_classes: int, extractor_s: Module, extractor_t: Module,
                 seed: int, rda_hidden: Sequence[int] = (256, 128, 256),
                 clf_hidden: Sequence[int] = (128, 64),
                 dropout_p: float = 0.1) -> Tuple[DomainWiseModel, DomainWiseModel]:
    """Construct the source and target models around shared extractors."""
    dim = extractor_s.feature_dim
    if extractor_t.feature_dim != dim:
        raise ValueError("extractor feature dims differ")
    rng = np.random.default_rng(seed)
    ms = DomainWiseModel(extractor_s, extractor_t,
                         RdaBlock(dim, "source", rng, rda_hidden, dropout_p),
                         DomainClassifier(dim, n_classes, rng, clf_hidden, dropout_p),
                         domain="source")
    mt = DomainWiseModel(extractor_s, extractor_t,
                         RdaBlock(dim, "target", rng, rda_hidden, dropout_p),
                         DomainClassifier(dim, n_classes, rng, clf_hidden, dropout_p),
                         domain="target")
    return ms, mt


def parameter_groups(ms: DomainWiseModel, mt: DomainWiseModel) -> ParameterSet:
    """Six-group partition of every trainable tensor in both models."""
    pset = ParameterSet()
    for group, prefix, module in (
            ("eps_s", "Gs", ms.extractor_s),
            ("eps_t", "Gt", ms.extractor_t),
            ("phi_s", "Ms.Fs", ms.rda),
            ("theta_s", "Ms.Cs", ms.classifier),
            ("phi_t", "Mt.Ft", mt.rda),
            ("theta_t", "Mt.Ct", mt.classifier)):
        for name, t in module.named_parameters(prefix).items():
            pset.add(group, name, t)
    pset.validate_partition()
    return pset


def named_buffers(ms: DomainWiseModel, mt: DomainWiseModel) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for prefix, module in (("Gs", ms.extractor_s), ("Gt", ms.extractor_t),
                           ("Ms.Fs", ms.rda), ("Ms.Cs", ms.classifier),
                           ("Mt.Ft", mt.rda), ("Mt.Ct", mt.classifier)):
        out.update(module.named_buffers(prefix))
    return out


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    """Immutable snapshot of all parameters and BN buffers."""

    epoch: int
    reward: float
    config_hash: str
    arrays: Dict[str, np.ndarray]

    @classmethod
    def capture(cls, ms: DomainWiseModel, mt: DomainWiseModel, epoch: int,
                reward: float, config_hash: str = "") -> "Checkpoint":
        arrays = {name: t.data.copy()
                  for name, t in parameter_groups(ms, mt).entries.items()}
        for name, buf in named_buffers(ms, mt).items():
            arrays["buffer:" + name] = buf.copy()
        return cls(epoch=epoch, reward=reward, config_hash=config_hash,
                   arrays=arrays)

    def restore(self, ms: DomainWiseModel, mt: DomainWiseModel) -> None:
        params = parameter_groups(ms, mt).entries
        buffers = named_buffers(ms, mt)
        for name, arr in self.arrays.items():
            if name.startswith("buffer:"):
                buffers[name[len("buffer:"):]][...] = arr
            else:
                params[name].data = arr.copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", _CKPT_VERSION))
        h = ckpt.config_hash.encode("utf-8")
        f.write(struct.pack("<H", len(h)))
        f.write(h)
        f.write(struct.pack("<Id", ckpt.epoch, ckpt.reward))
        f.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            arr = ckpt.arrays[name]
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    off = 6
    try:
        return _parse_checkpoint(raw, off, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(raw: bytes, off: int, path) -> "Checkpoint":
    (hlen,) = struct.unpack_from("<H", raw, off)
    off += 2
    config_hash = raw[off:off + hlen].decode("utf-8")
    off += hlen
    epoch, reward = struct.unpack_from("<Id", raw, off)
    off += 12
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n,
                                     offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(raw):
        raise CheckpointFormatError(f"{path}: trailing or truncated payload")
    return Checkpoint(epoch=epoch, reward=reward, config_hash=config_hash,
                      arrays=arrays)
