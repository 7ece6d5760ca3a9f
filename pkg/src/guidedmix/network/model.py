"""Segmentation network: residual encoder + pyramid pooling context module,
optional non-local transfer block, skip-connected decoder with pixel-shuffle
upsampling, and a small image-level classifier head.

Parameters live in a flat name -> Tensor dict so the optimizer, checkpoints
and the backbone-weight loader can treat them uniformly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .layers import (
    adaptive_avg_pool,
    he_normal,
    non_local_attention,
    resize_bilinear,
)

# blocks per residual stage and channel multiplier, per encoder preset
ENCODER_PRESETS = {
    "tiny": {"stages": 1, "blocks": 1, "width": 1},
    "resnet18": {"stages": 2, "blocks": 2, "width": 2},
    "resnet50": {"stages": 2, "blocks": 3, "width": 4},
}


@dataclass
class ModelConfig:
    num_classes: int = 4
    encoder: str = "tiny"
    base_channels: int = 16
    use_mitrans: bool = True
    attention_blocks: int = 1
    decoder_channels: int = 32
    psp_bins: tuple = (1, 2, 3, 6)

    def __post_init__(self):
        if self.encoder not in ENCODER_PRESETS:
            raise ValueError(f"unknown encoder preset: {self.encoder!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2 (background included)")


class SegModel:
    """Holds parameters and provides the forward passes.

    The encoder stem downsamples to stride 4; each residual stage halves the
    resolution again.  The pyramid-pooling module runs on the deepest stage,
    and the feature map it produces (``context``) is what the attention
    block, the classifier head and the decoder consume.  The decoder's skip
    connection taps the stage at half the stride of ``context``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, ad.Tensor] = {}
        self._build(np.random.default_rng(seed))

    # -- construction -------------------------------------------------------

    def _conv(self, rng, name, cin, cout, k, bias=True):
        fan_in = cin * k * k
        self.params[f"{name}.weight"] = ad.Tensor(
            he_normal(rng, (cout, cin, k, k), fan_in), requires_grad=True)
        if bias:
            self.params[f"{name}.bias"] = ad.Tensor(np.zeros(cout), requires_grad=True)

    def _build(self, rng):
        cfg = self.config
        c = cfg.base_channels
        preset = ENCODER_PRESETS[cfg.encoder]
        self._conv(rng, "encoder.stem.conv1", 3, c, 3)
        self._conv(rng, "encoder.stem.conv2", c, c, 3)
        self.stage_channels = [c]
        cin = c
        for s in range(preset["stages"]):
            cout = c * preset["width"] * (2 ** s) * 2
            for b in range(preset["blocks"]):
                stride_block = b == 0
                pre = f"encoder.stage{s + 1}.block{b + 1}"
                self._conv(rng, f"{pre}.conv1", cin, cout, 3)
                self._conv(rng, f"{pre}.conv2", cout, cout, 3)
                if stride_block and cin != cout:
                    self._conv(rng, f"{pre}.proj", cin, cout, 1)
                cin = cout
            self.stage_channels.append(cout)
        self.encoder_channels = cin

        # pyramid pooling: one 1x1 conv per bin, then a 3x3 fusion back to cin
        branch = max(1, cin // len(cfg.psp_bins))
        for bin_size in cfg.psp_bins:
            self._conv(rng, f"psp.bin{bin_size}", cin, branch, 1)
        self._conv(rng, "psp.fuse", cin + branch * len(cfg.psp_bins), cin, 3)
        self.context_channels = cin

        if cin % 2 != 0:
            raise ValueError("context channel count must be even for the attention block")
        for i in range(cfg.attention_blocks):
            pre = f"attn{i + 1}"
            self._conv(rng, f"{pre}.query", cin, cin // 2, 1, bias=False)
            self._conv(rng, f"{pre}.key", cin, cin // 2, 1, bias=False)
            self._conv(rng, f"{pre}.value", cin, cin, 1, bias=False)

        d = cfg.decoder_channels
        skip_c = self.stage_channels[-2]
        self._conv(rng, "decoder.expand", cin, d * 4, 3)
        self._conv(rng, "decoder.fuse1", d + skip_c, d, 3)
        self._conv(rng, "decoder.fuse2", d, d, 3)
        # one extra shuffle stage per stride level above 4
        self.up_stages = preset["stages"] - 1
        for i in range(self.up_stages):
            self._conv(rng, f"decoder.up{i + 1}", d, d * 4, 3)
        self._conv(rng, "decoder.head", d, cfg.num_classes, 1)

        self.params["classifier.weight"] = ad.Tensor(
            he_normal(rng, (cin, cfg.num_classes - 1), cin), requires_grad=True)
        self.params["classifier.bias"] = ad.Tensor(
            np.zeros(cfg.num_classes - 1), requires_grad=True)

        self.total_stride = 4 * (2 ** preset["stages"])

    # -- helpers -------------------------------------------------------------

    def _apply_conv(self, name, x, stride=1, pad=None, relu=True, taps=None):
        w = self.params[f"{name}.weight"]
        b = self.params.get(f"{name}.bias")
        k = w.data.shape[-1]
        out = ad.conv2d(x, w, b, stride=stride, pad=k // 2 if pad is None else pad)
        if relu:
            out = ad.relu(out)
        if taps is not None:
            taps.append((name, float(out.data.mean())))
        return out

    def _res_block(self, pre, x, stride, taps=None):
        out = self._apply_conv(f"{pre}.conv1", x, stride=stride, taps=taps)
        out = self._apply_conv(f"{pre}.conv2", out, relu=False)
        if f"{pre}.proj.weight" in self.params:
            x = self._apply_conv(f"{pre}.proj", x, stride=stride, relu=False, pad=0,
                                 taps=taps)
        elif stride != 1:
            raise ValueError("strided residual block requires a projection")
        out = ad.relu(ad.add(out, x))
        if taps is not None:
            taps.append((f"{pre}.conv2", float(out.data.mean())))
        return out

    # -- forward passes ------------------------------------------------------

    def encoder_forward(self, image, taps=None):
        """image: (N, 3, H, W) with H, W divisible by the total stride.

        Returns a dict with the stage-4 feature (``skip``), the deepest
        pre-pyramid feature (``pre_context``) and the post-pyramid feature
        (``context``).
        """
        x = ad.as_tensor(image)
        n, c, h, w = x.data.shape
        if h % self.total_stride or w % self.total_stride:
            raise ValueError(
                f"input size {h}x{w} not divisible by total stride {self.total_stride}")
        out = self._apply_conv("encoder.stem.conv1", x, stride=2, taps=taps)
        out = self._apply_conv("encoder.stem.conv2", out, stride=2, taps=taps)
        stages = [out]
        preset = ENCODER_PRESETS[self.config.encoder]
        for s in range(preset["stages"]):
            for b in range(preset["blocks"]):
                out = self._res_block(f"encoder.stage{s + 1}.block{b + 1}", out,
                                      stride=2 if b == 0 else 1, taps=taps)
            stages.append(out)
        pre_context = out
        context = self._psp_forward(pre_context, taps=taps)
        return {"stages": stages, "skip": stages[-2], "pre_context": pre_context,
                "context": context}

    def _psp_forward(self, feat, taps=None):
        n, c, h, w = feat.data.shape
        branches = [feat]
        for bin_size in self.config.psp_bins:
            pooled = adaptive_avg_pool(feat, min(bin_size, h), min(bin_size, w))
            pooled = self._apply_conv(f"psp.bin{bin_size}", pooled, pad=0, taps=taps)
            branches.append(resize_bilinear(pooled, h, w))
        out = ad.concat(branches, axis=1)
        return self._apply_conv("psp.fuse", out, taps=taps)

    def attention_forward(self, context, taps=None):
        """Run the non-local transfer block(s) on the context feature."""
        out = context
        for i in range(self.config.attention_blocks):
            pre = f"attn{i + 1}"
            out, _ = non_local_attention(out,
                                         self.params[f"{pre}.query.weight"],
                                         self.params[f"{pre}.key.weight"],
                                         self.params[f"{pre}.value.weight"])
            if taps is not None:
                taps.append((f"{pre}.value", float(out.data.mean())))
        return out

    def decoder_forward(self, context, skip, out_h, out_w, taps=None):
        """context at stride S, skip at stride S/2 -> (N, C, out_h, out_w) logits."""
        ch, cw = context.data.shape[2:]
        sh, sw = skip.data.shape[2:]
        if (sh, sw) != (2 * ch, 2 * cw):
            raise ValueError(
                f"skip feature {sh}x{sw} must be twice the context size {ch}x{cw}")
        out = self._apply_conv("decoder.expand", context, taps=taps)
        out = ad.pixel_shuffle(out, 2)
        out = ad.concat([out, skip], axis=1)
        out = self._apply_conv("decoder.fuse1", out, taps=taps)
        out = self._apply_conv("decoder.fuse2", out, taps=taps)
        for i in range(self.up_stages):
            out = self._apply_conv(f"decoder.up{i + 1}", out, taps=taps)
            out = ad.pixel_shuffle(out, 2)
        logits = self._apply_conv("decoder.head", out, pad=0, relu=False, taps=taps)
        return resize_bilinear(logits, out_h, out_w)

    def classifier_forward(self, pooled):
        """pooled: (N, D) -> (N, num_classes - 1) foreground presence logits."""
        w = self.params["classifier.weight"]
        if pooled.data.shape[-1] != w.data.shape[0]:
            raise ValueError(
                f"pooled dim {pooled.data.shape[-1]} != classifier dim {w.data.shape[0]}")
        return ad.add(ad.matmul(pooled, w), self.params["classifier.bias"])

    def full_forward(self, image, use_mitrans=None, taps=None):
        """Returns (logits (N, C, H, W), pooled features (N, D))."""
        if use_mitrans is None:
            use_mitrans = self.config.use_mitrans
        x = ad.as_tensor(image)
        h, w = x.data.shape[2:]
        enc = self.encoder_forward(x, taps=taps)
        context = enc["context"]
        if use_mitrans:
            context = self.attention_forward(context, taps=taps)
        pooled = ad.global_avg_pool(context)
        logits = self.decoder_forward(context, enc["skip"], h, w, taps=taps)
        return logits, pooled

    # -- parameter plumbing ---------------------------------------------------

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in checkpoint: {name}")
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: "
                                 f"{arrays[name].shape} vs {p.data.shape}")
            p.data = np.asarray(arrays[name], dtype=np.float64).copy()

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None
