"""Single-pass inference on a centre crop, pasted back into the full grid."""

from __future__ import annotations

from typing import Tuple

import numpy as np
import torch

from .domain import LabelMap, MpMriVolume, labels_from_logits
from .network import SegGuidedNet
from .preprocess import center_crop, center_crop_start, extract, zscore_normalize


@torch.no_grad()
def predict(
    net: SegGuidedNet,
    volume: MpMriVolume,
    patch=(128, 128, 128),
    device="cpu",
) -> Tuple[LabelMap, np.ndarray]:
    """Label map and sigmoid attention maps (NCR, ED, ET) over the full volume.

    Voxels outside the centre crop are predicted as background with zero
    attention.
    """
    net.eval()
    channels = zscore_normalize(volume).channels
    img, _ = center_crop(channels, None, patch)
    x = torch.from_numpy(np.ascontiguousarray(img))[None].to(device)
    out = net(x)
    seg = out.seg_logits[0].float().cpu().numpy()
    attn = torch.sigmoid(out.attn_logits[0].float()).cpu().numpy()

    shape = volume.shape
    patch = seg.shape[1:]
    start = center_crop_start(shape, patch)
    # the inverse crop: place the patch back at ``start``
    inv = tuple(-s for s in start)
    labels = extract(labels_from_logits(seg).labels, inv, shape)
    attn_full = extract(attn, inv, shape)
    return LabelMap(labels), attn_full
