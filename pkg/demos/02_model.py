"""Build the model, confirm it starts as the identity, and look at its parts."""

import torch

from _pages import page
from deshadow.gradcheck import randomize
from deshadow.image import to_tensor
from deshadow.model import DocDeshadower, ModelConfig, ParamStore

cfg = ModelConfig()
model = DocDeshadower(cfg).eval()
store = ParamStore.from_module(model)
aan = sum(v.numel() for k, v in store.entries.items() if k.startswith("aan."))
print(f"{store.num_params()} parameters ({aan} in the low-band network, {store.num_params() - aan} in the band transformers)")

x = to_tensor(page(256).shadow, torch.float32)
with torch.no_grad():
    y = model(x, clamp=False)
print("fresh model deviation from input:", float((y - x).abs().max()))

# with random weights every band moves
randomize(model, torch.Generator().manual_seed(0), head_scale=0.3)
with torch.no_grad():
    from deshadow.pyramid import decompose

    pyr = decompose(x, cfg.levels)
    out = model.process_bands(pyr)
for name, a, b in zip(["high0", "high1", "high2", "low"], out.bands(), pyr.bands()):
    print(f"{name}: mean change {float((a - b).abs().mean()):.4f}")
