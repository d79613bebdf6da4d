"""Export torchvision's ImageNet ResNet-101 to the safetensors file unifeat loads.

Usage: python scripts/export_resnet101.py [OUT]

OUT defaults to $UNIFEAT_CACHE_DIR/resnet101.safetensors (or the XDG cache).
Batch-norm tensors are kept under their torchvision names; unifeat folds them
into the convolutions on load.
"""

import os
import sys
from pathlib import Path

import torch
from safetensors.torch import save_file
from torchvision.models import ResNet101_Weights, resnet101


def default_path() -> Path:
    if os.environ.get("UNIFEAT_CACHE_DIR"):
        root = Path(os.environ["UNIFEAT_CACHE_DIR"])
    elif os.environ.get("XDG_CACHE_HOME"):
        root = Path(os.environ["XDG_CACHE_HOME"]) / "unifeat"
    else:
        root = Path.home() / ".cache" / "unifeat"
    return root / "resnet101.safetensors"


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else default_path()
    model = resnet101(weights=ResNet101_Weights.IMAGENET1K_V1).eval()
    tensors = {
        name: t.detach().to(torch.float32).contiguous()
        for name, t in model.state_dict().items()
        if not name.startswith("fc.") and not name.endswith("num_batches_tracked")
    }
    out.parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(out))
    print(f"wrote {len(tensors)} tensors to {out}")


if __name__ == "__main__":
    main()
