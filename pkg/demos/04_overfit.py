"""Fit one page for a couple of hundred steps and watch the loss fall."""

import torch

from _pages import page
from deshadow.image import to_tensor
from deshadow.metrics import psnr
from deshadow.model import DocDeshadower
from deshadow.train import TrainConfig, train

pair = page(64)
steps = 200
result = train(TrainConfig(max_steps=steps), ([pair], []))
for row in result.log[:: steps // 10]:
    print(f"step {row['step']:4d}  loss {row['l_total']:.4f}")

model = result.params.load_into(DocDeshadower(result.model_cfg)).eval()
with torch.no_grad():
    out = model(to_tensor(pair.shadow, torch.float32))
print(f"PSNR: input {psnr(pair.shadow, pair.target):.2f} dB, fitted {psnr(out, to_tensor(pair.target, torch.float32)).item():.2f} dB")
