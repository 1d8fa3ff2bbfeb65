"""Convert torchvision's ImageNet VGG19 weights into a dmfn tensor manifest.

Run once on a machine that can download torchvision model weights:

    python scripts/fetch_vgg19.py --out weights/vgg19_relu5_1.dmfn

and point the ``paths.vgg_weights`` config key (or ``DMFN_VGG_WEIGHTS``) at
the result. The SHA-256 printed at the end can go in ``paths.vgg_sha256``.
"""

import argparse

from torchvision.models import VGG19_Weights, vgg19

from dmfn.serialization import file_sha256, save_manifest
from dmfn.vgg import TAP_INDICES


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", required=True)
    args = p.parse_args()
    sd = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).state_dict()
    keep = {k: v for k, v in sd.items() if k.startswith("features.") and int(k.split(".")[1]) < TAP_INDICES[-1]}
    save_manifest(args.out, keep, {"source": "torchvision VGG19_Weights.IMAGENET1K_V1", "synthetic": False})
    print(file_sha256(args.out))


if __name__ == "__main__":
    main()
