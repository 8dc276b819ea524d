#!/usr/bin/env python3
"""Convert torchvision VGG16 weights into a dsmr feature extractor file.

    python tools/export_vgg16.py --out vgg16.feat [--weights vgg16.pth]

Without --weights the torchvision ImageNet weights are downloaded.
Point `extractor.path` at the output and set `loss.feat` > 0.
"""
import argparse
import struct

import torch
import torchvision

BLOCKS = [2, 2, 3, 3, 3]
WIDTHS = [64, 128, 256, 512, 512]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--weights", help="state_dict saved from torchvision.models.vgg16")
    args = ap.parse_args()

    if args.weights:
        net = torchvision.models.vgg16()
        net.load_state_dict(torch.load(args.weights, map_location="cpu"))
    else:
        net = torchvision.models.vgg16(weights=torchvision.models.VGG16_Weights.IMAGENET1K_V1)
    convs = [m for m in net.features if isinstance(m, torch.nn.Conv2d)]
    assert len(convs) == sum(BLOCKS)

    tensors = []
    k = 0
    for b, n in enumerate(BLOCKS):
        for j in range(n):
            conv = convs[k]
            k += 1
            tensors.append((f"block{b}.conv{j}.weight", conv.weight.detach().float()))
            tensors.append((f"block{b}.conv{j}.bias", conv.bias.detach().float()))

    taps, relu = [], -1
    for n in BLOCKS:
        relu += n
        taps.append(relu)

    lines = [
        "kind=extractor",
        "extractor.blocks=" + ",".join(map(str, BLOCKS)),
        "extractor.widths=" + ",".join(map(str, WIDTHS)),
        "extractor.taps=" + ",".join(map(str, taps)),
        "extractor.in_channels=3",
        "extractor.seed=0",
        f"tensor.count={len(tensors)}",
    ]
    for i, (name, t) in enumerate(tensors):
        lines.append(f"tensor.{i}.name={name}")
        lines.append(f"tensor.{i}.shape=" + ",".join(map(str, t.shape)))
    manifest = ("\n".join(lines) + "\n").encode()

    with open(args.out, "wb") as f:
        f.write(b"DSMRFEAT")
        f.write(struct.pack("<HI", 1, len(manifest)))
        f.write(manifest)
        for _, t in tensors:
            f.write(t.contiguous().numpy().astype("<f4").tobytes())


if __name__ == "__main__":
    main()
