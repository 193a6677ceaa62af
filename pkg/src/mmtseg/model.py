"""Segmentation graphs: three modality-specific branches fused into a main
branch through spatial-channel attention, plus the comparison topologies.

Variants:
  MMTSN          three sub-branches + attention-fused main branch
  UNET_PRE       one U-shape on the concatenated modalities (input-level fusion)
  UNET_POST      one U-shape per modality, class logits added (decision-level)
  MMTSN_NO_SCFB  MMTSN topology with plain concat+conv fusion

Sub-branches own fixed modality subsets: the whole-tumor branch reads
T2/Flair, the tumor-core branch T1/T1c, the enhancing-tumor branch T1c.
Each branch is a U-shape; the main branch fuses same-scale sub-branch
encoder features with its own at every encoder scale. Upsampling is
nearest-neighbor followed by convolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv3d,
    global_avg_pool,
    max_pool3d,
    mul_broadcast,
    nearest_upsample,
    relu,
    sigmoid,
    softmax_channels,
)

VARIANTS = ("MMTSN", "UNET_PRE", "UNET_POST", "MMTSN_NO_SCFB")

MODALITY_INDEX = {"t1": 0, "t1c": 1, "t2": 2, "flair": 3}
BRANCH_MODALITIES = {
    "wt": ("t2", "flair"),
    "tc": ("t1", "t1c"),
    "et": ("t1c",),
}
NUM_CLASSES = 4


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 2:
            raise ValueError(f"base_channels must be >= 2, got {self.base_channels}")


@dataclass
class ForwardOutputs:
    main_probs: Tensor
    wt_prob: Tensor | None = None
    tc_prob: Tensor | None = None
    et_prob: Tensor | None = None

    def branch_probs(self):
        return {"wt": self.wt_prob, "tc": self.tc_prob, "et": self.et_prob}


class ParamStore:
    """Registers uniquely named trainable tensors with He-style init."""

    def __init__(self, rng):
        self.rng = rng
        self.params = {}

    def register(self, name, array):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(array, requires_grad=True)
        self.params[name] = t
        return t

    def conv(self, name, in_ch, out_ch, k):
        fan_in = in_ch * k * k * k
        kernel = self.rng.standard_normal((out_ch, in_ch, k, k, k)) * np.sqrt(
            2.0 / fan_in
        )
        return (
            self.register(f"{name}.kernel", kernel.astype(np.float32)),
            self.register(f"{name}.bias", np.zeros(out_ch, dtype=np.float32)),
        )


class Conv3d:
    """Same-padding convolution layer; odd kernels only."""

    def __init__(self, store, name, in_ch, out_ch, k=3):
        if k % 2 == 0:
            raise ValueError("same padding needs an odd kernel")
        self.pad = k // 2
        self.kernel, self.bias = store.conv(name, in_ch, out_ch, k)

    def __call__(self, x):
        return conv3d(x, self.kernel, self.bias, padding=self.pad)


class ConvBlock:
    def __init__(self, store, name, in_ch, out_ch):
        self.conv = Conv3d(store, name, in_ch, out_ch, k=3)

    def __call__(self, x):
        return relu(self.conv(x))


class SCFB:
    """Spatial-channel attention fusion of same-scale feature maps.

    The concatenated input is reweighted twice: per channel, by a weight
    vector squeezed through average pooling and two 1×1×1 convolutions,
    and per voxel, by a single-channel 1×1×1 convolution. Both reweighted
    maps are added and mixed by a 3×3×3 convolution with ReLU.
    """

    def __init__(self, store, name, in_ch, out_ch):
        self.squeeze = Conv3d(store, f"{name}.squeeze", in_ch, in_ch, k=1)
        self.excite = Conv3d(store, f"{name}.excite", in_ch, in_ch, k=1)
        self.spatial = Conv3d(store, f"{name}.spatial", in_ch, 1, k=1)
        self.fuse = Conv3d(store, f"{name}.fuse", in_ch, out_ch, k=3)

    def __call__(self, parts):
        f_concat = concat_channels(parts)
        w_c = sigmoid(self.excite(relu(self.squeeze(global_avg_pool(f_concat)))))
        w_s = sigmoid(self.spatial(f_concat))
        f_c = mul_broadcast(f_concat, w_c)
        f_s = mul_broadcast(f_concat, w_s)
        return relu(self.fuse(add(f_c, f_s)))

    def attention_weights(self, parts):
        """(channel weights, spatial weights) for inspection and tests."""
        f_concat = concat_channels(parts)
        w_c = sigmoid(self.excite(relu(self.squeeze(global_avg_pool(f_concat)))))
        w_s = sigmoid(self.spatial(f_concat))
        return w_c, w_s


class ConcatFuse:
    """Fusion fallback: channel concat followed by a 3×3×3 convolution."""

    def __init__(self, store, name, in_ch, out_ch):
        self.fuse = Conv3d(store, f"{name}.fuse", in_ch, out_ch, k=3)

    def __call__(self, parts):
        return relu(self.fuse(concat_channels(parts)))


class UNet:
    """Single-stream U-shape returning head logits and encoder features."""

    def __init__(self, store, name, in_ch, out_ch, depth, base):
        self.depth = depth
        self.enc = []
        for i in range(depth):
            c_in = in_ch if i == 0 else base * 2 ** (i - 1)
            self.enc.append(ConvBlock(store, f"{name}.enc{i}", c_in, base * 2**i))
        self.dec = []
        for i in range(depth - 2, -1, -1):
            c_in = base * 2 ** (i + 1) + base * 2**i  # upsampled + skip
            self.dec.append(ConvBlock(store, f"{name}.dec{i}", c_in, base * 2**i))
        self.head = Conv3d(store, f"{name}.head", base, out_ch, k=1)

    def __call__(self, x):
        feats = []
        h = x
        for i, block in enumerate(self.enc):
            if i > 0:
                h = max_pool3d(h)
            h = block(h)
            feats.append(h)
        h = feats[-1]
        for block, skip in zip(self.dec, reversed(feats[:-1])):
            h = block(concat_channels([nearest_upsample(h), skip]))
        return self.head(h), feats


class FusedNet:
    """Main branch whose encoder fuses sub-branch features at every scale."""

    def __init__(self, store, cfg, fusion_cls):
        depth, base = cfg.depth, cfg.base_channels
        self.depth = depth
        self.branches = {
            region: UNet(
                store, f"branch_{region}", len(mods), 1, depth, base
            )
            for region, mods in BRANCH_MODALITIES.items()
        }
        self.enc = []
        self.fusions = []
        for i in range(depth):
            c_in = len(MODALITY_INDEX) if i == 0 else base * 2 ** (i - 1)
            c_scale = base * 2**i
            self.enc.append(ConvBlock(store, f"main.enc{i}", c_in, c_scale))
            self.fusions.append(
                fusion_cls(store, f"main.fusion{i}", 4 * c_scale, c_scale)
            )
        self.dec = []
        for i in range(depth - 2, -1, -1):
            c_in = base * 2 ** (i + 1) + base * 2**i
            self.dec.append(ConvBlock(store, f"main.dec{i}", c_in, base * 2**i))
        self.head = Conv3d(store, "main.head", base, NUM_CLASSES, k=1)

    def __call__(self, patch_np):
        branch_logits = {}
        branch_feats = {}
        for region, mods in BRANCH_MODALITIES.items():
            x = Tensor(patch_np[[MODALITY_INDEX[m] for m in mods]])
            branch_logits[region], branch_feats[region] = self.branches[region](x)

        fused = []
        h = Tensor(patch_np)
        for i in range(self.depth):
            if i > 0:
                h = max_pool3d(h)
            own = self.enc[i](h)
            h = self.fusions[i](
                [branch_feats["wt"][i], branch_feats["tc"][i], branch_feats["et"][i], own]
            )
            fused.append(h)
        h = fused[-1]
        for block, skip in zip(self.dec, reversed(fused[:-1])):
            h = block(concat_channels([nearest_upsample(h), skip]))
        return self.head(h), branch_logits


class ModelGraph:
    """Named parameter set plus the forward topology for one variant."""

    def __init__(self, variant, config, params, forward_fn):
        self.variant = variant
        self.config = config
        self.params = params
        self._forward = forward_fn

    def forward(self, patch) -> ForwardOutputs:
        patch_np = patch.data if isinstance(patch, Tensor) else np.asarray(patch)
        if patch_np.ndim != 4 or patch_np.shape[0] != len(MODALITY_INDEX):
            raise ShapeError(f"patch must be 4×D×H×W, got {patch_np.shape}")
        divisor = 2 ** (self.config.depth - 1)
        for e in patch_np.shape[1:]:
            if e % divisor:
                raise ShapeError(
                    f"extents {patch_np.shape[1:]} not divisible by {divisor} "
                    f"(depth {self.config.depth})"
                )
        return self._forward(patch_np.astype(np.float32, copy=False))

    def parameters(self):
        return self.params

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def param_count(self):
        return sum(t.size for t in self.params.values())


def build_model(variant, config: ModelConfig, seed: int) -> ModelGraph:
    """Construct a variant with seeded He initialization (zero biases)."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    store = ParamStore(np.random.default_rng(seed))
    depth, base = config.depth, config.base_channels

    if variant == "UNET_PRE":
        net = UNet(store, "unet", len(MODALITY_INDEX), NUM_CLASSES, depth, base)

        def forward(patch_np):
            logits, _ = net(Tensor(patch_np))
            return ForwardOutputs(main_probs=softmax_channels(logits))

    elif variant == "UNET_POST":
        nets = {
            m: UNet(store, f"unet_{m}", 1, NUM_CLASSES, depth, base)
            for m in MODALITY_INDEX
        }

        def forward(patch_np):
            total = None
            for m, idx in MODALITY_INDEX.items():
                logits, _ = nets[m](Tensor(patch_np[idx : idx + 1]))
                total = logits if total is None else add(total, logits)
            return ForwardOutputs(main_probs=softmax_channels(total))

    else:
        fusion_cls = SCFB if variant == "MMTSN" else ConcatFuse
        net = FusedNet(store, config, fusion_cls)

        def forward(patch_np):
            logits, branch_logits = net(patch_np)
            return ForwardOutputs(
                main_probs=softmax_channels(logits),
                wt_prob=sigmoid(branch_logits["wt"]),
                tc_prob=sigmoid(branch_logits["tc"]),
                et_prob=sigmoid(branch_logits["et"]),
            )

    return ModelGraph(variant, config, store.params, forward)


# -- checkpoint blobs ---------------------------------------------------------
#
# <path>.json  manifest: meta plus name/shape/offset per entry
# <path>.bin   little-endian float32 payload, entries concatenated


def save_blob(path, named_arrays, meta):
    path = str(path)
    entries = []
    offset = 0
    with open(path + ".bin", "wb") as fh:
        for name in sorted(named_arrays):
            arr = np.ascontiguousarray(named_arrays[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(arr.tobytes(order="C"))
            offset += arr.nbytes
    manifest = {"meta": meta, "entries": entries}
    with open(path + ".json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_blob(path):
    path = str(path)
    with open(path + ".json", "r", encoding="ascii") as fh:
        manifest = json.load(fh)
    blob = np.fromfile(path + ".bin", dtype="<f4")
    named = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        start = entry["offset"] // 4
        count = int(np.prod(shape)) if shape else 1
        if start + count > blob.size:
            raise ValueError(f"checkpoint blob truncated at entry {entry['name']!r}")
        named[entry["name"]] = blob[start : start + count].reshape(shape).copy()
    return named, manifest["meta"]


def load_parameters(graph: ModelGraph, named_arrays):
    """Copy arrays into the graph, validating names and shapes."""
    missing = sorted(set(graph.params) - set(named_arrays))
    extra = sorted(set(named_arrays) - set(graph.params))
    if missing or extra:
        raise ValueError(
            f"checkpoint does not match {graph.variant} graph: "
            f"missing {missing[:3]}, unexpected {extra[:3]}"
        )
    for name, tensor in graph.params.items():
        arr = named_arrays[name]
        if tuple(arr.shape) != tensor.data.shape:
            raise ValueError(
                f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} "
                f"!= graph shape {tensor.data.shape}"
            )
    for name, tensor in graph.params.items():
        tensor.data[...] = named_arrays[name]
