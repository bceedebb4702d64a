"""Network components for both branches.

The domain-wise branch is a shared feature generator ``g_cm`` with two
classifier heads ``c1``/``c2``.  The label-wise branch is a separate feature
generator ``g_t``, a two-layer FC head and a graph-convolution stack over a
label-correlation adjacency; its scores are dot products between the FC
feature and one GCN output row per label.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2
PARAM_GROUPS = ("g_cm", "c1", "c2", "g_t", "fc_head", "gcn")
DWC_GROUPS = ("g_cm", "c1", "c2")
LWC_GROUPS = ("g_t", "fc_head", "gcn")


class ConvBackbone(nn.Module):
    """Desk-scale feature generator: conv-norm-act-pool blocks, flatten, project."""

    def __init__(self, side: int, feature_dim: int, widths: Sequence[int] = (16, 32, 32, 32), in_channels: int = 3):
        super().__init__()
        if side % (2 ** len(widths)):
            raise ValueError(f"side {side} not divisible by 2**{len(widths)}")
        self.side = side
        self.in_channels = in_channels
        layers: list[nn.Module] = []
        c_in = in_channels
        for c in widths:
            layers += [
                nn.Conv2d(c_in, c, kernel_size=3, padding=1),
                nn.GroupNorm(min(4, c), c),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            c_in = c
        self.blocks = nn.Sequential(*layers)
        reduced = side // 2 ** len(widths)
        self.project = nn.Linear(c_in * reduced * reduced, feature_dim)
        self.feature_dim = feature_dim

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        expected = (self.in_channels, self.side, self.side)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected images (B, {expected[0]}, {expected[1]}, {expected[2]}), got {tuple(images.shape)}")
        # linear projection: a trailing ReLU lets the min-discrepancy step
        # zero every feature, after which the heads can no longer be aligned
        return self.project(self.blocks(images).flatten(1))


class Classifier(nn.Module):
    """Two-layer head emitting K logits; biases start at zero."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_classes)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)
        self.in_dim = in_dim

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.in_dim:
            raise ValueError(f"classifier expects {self.in_dim} features, got {features.shape[-1]}")
        return self.fc2(F.relu(self.fc1(features)))


class FCHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


def gcn_forward(
    embedding: torch.Tensor,
    adjacency: torch.Tensor,
    weights: Sequence[torch.Tensor],
    negative_slope: float = LEAKY_SLOPE,
    activate_last: bool = False,
) -> torch.Tensor:
    """Propagate label embeddings: ``H <- LeakyReLU(A @ H @ W)`` per layer.

    The last layer skips the nonlinearity unless ``activate_last``.
    """
    k = embedding.shape[0]
    if adjacency.shape != (k, k):
        raise ValueError(f"adjacency {tuple(adjacency.shape)} does not match {k} label embeddings")
    h = embedding
    for n, w in enumerate(weights):
        if w.shape[0] != h.shape[1]:
            raise ValueError(f"GCN layer {n}: weight rows {w.shape[0]} != input width {h.shape[1]}")
        h = adjacency @ h @ w
        if n < len(weights) - 1 or activate_last:
            h = F.leaky_relu(h, negative_slope)
    return h


def fuse(f_fc: torch.Tensor, gcn_out: torch.Tensor) -> torch.Tensor:
    """Label logits as dot products of the image feature with each GCN row."""
    if f_fc.shape[-1] != gcn_out.shape[-1]:
        raise ValueError(f"feature width {f_fc.shape[-1]} != GCN width {gcn_out.shape[-1]}")
    return f_fc @ gcn_out.T


class GCN(nn.Module):
    def __init__(self, dims: Sequence[int], negative_slope: float = LEAKY_SLOPE):
        super().__init__()
        self.weights = nn.ParameterList()
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = torch.empty(d_in, d_out)
            nn.init.xavier_uniform_(w)
            self.weights.append(nn.Parameter(w))
        self.negative_slope = negative_slope

    def forward(self, embedding: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        return gcn_forward(embedding, adjacency, list(self.weights), self.negative_slope)


def make_label_embedding(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Seeded Gaussian rows scaled to unit L2 norm."""
    if num_classes < 1 or dim < 1:
        raise ValueError(f"num_classes and dim must be >= 1, got {num_classes}, {dim}")
    rng = np.random.default_rng([seed, 3])
    rows = rng.standard_normal((num_classes, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def load_label_embedding(path: str | Path, categories: Sequence[str]) -> np.ndarray:
    """Word vectors from a ``.npy`` matrix (rows in category order) or a
    GloVe-style text file (``word v1 v2 ...`` per line, multi-word names joined
    by spaces are averaged per token)."""
    path = Path(path)
    if path.suffix == ".npy":
        mat = np.load(path)
        if mat.shape[0] != len(categories):
            raise ValueError(f"{path}: {mat.shape[0]} rows for {len(categories)} categories")
        return mat.astype(np.float64)
    vectors: dict[str, np.ndarray] = {}
    wanted = {tok for name in categories for tok in name.lower().replace("_", " ").split()}
    with open(path, encoding="utf8") as fh:
        for line in fh:
            word, *vals = line.rstrip().split(" ")
            if word in wanted:
                vectors[word] = np.asarray(vals, dtype=np.float64)
    rows = []
    for name in categories:
        toks = name.lower().replace("_", " ").split()
        missing = [t for t in toks if t not in vectors]
        if missing:
            raise ValueError(f"no word vector for {missing} (category {name!r})")
        rows.append(np.mean([vectors[t] for t in toks], axis=0))
    return np.stack(rows)


class SCIDANet(nn.Module):
    def __init__(
        self,
        num_classes: int,
        side: int = 64,
        feature_dim: int = 128,
        embed_dim: int = 64,
        widths: Sequence[int] = (16, 32, 32, 32),
        classifier_hidden: int = 128,
        embedding: np.ndarray | None = None,
        seed: int = 0,
    ):
        super().__init__()
        gen = torch.random.fork_rng()
        with gen:
            torch.manual_seed(seed)
            self.g_cm = ConvBackbone(side, feature_dim, widths)
            self.c1 = Classifier(feature_dim, num_classes, classifier_hidden)
            self.c2 = Classifier(feature_dim, num_classes, classifier_hidden)
            self.g_t = ConvBackbone(side, feature_dim, widths)
            self.fc_head = FCHead(feature_dim, feature_dim)
            if embedding is None:
                embedding = make_label_embedding(num_classes, embed_dim, seed)
            embed_dim = embedding.shape[1]
            self.gcn = GCN((embed_dim, 4 * embed_dim, feature_dim))
        self.register_buffer("label_embedding", torch.as_tensor(embedding, dtype=torch.float32))
        self.num_classes = num_classes

    def group(self, name: str) -> nn.Module:
        if name not in PARAM_GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def dwc_logits(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.g_cm(images)
        return self.c1(f), self.c2(f)

    def lwc_logits(self, images: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        if adjacency.shape != (self.num_classes, self.num_classes):
            raise ValueError(
                f"adjacency {tuple(adjacency.shape)} does not match {self.num_classes} classes"
            )
        f_fc = self.fc_head(self.g_t(images))
        g = self.gcn(self.label_embedding, adjacency.to(self.label_embedding.dtype))
        return fuse(f_fc, g)


def feature_forward(generator: ConvBackbone, images) -> torch.Tensor:
    """Features for a batch; accepts ``(B, H, W, C)`` arrays in [0, 1] or NCHW tensors."""
    return generator(to_nchw(images))


def classify(classifier: Classifier, features: torch.Tensor) -> torch.Tensor:
    return classifier(features)


def to_nchw(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got shape {arr.shape}")
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def group_hash(model: SCIDANet, name: str) -> str:
    h = hashlib.sha256()
    for pname, p in model.group(name).named_parameters():
        h.update(pname.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def parameter_hashes(model: SCIDANet) -> dict[str, str]:
    return {name: group_hash(model, name) for name in PARAM_GROUPS}
