"""The scores used for evaluation, on a page before and after a perfect fix."""

import numpy as np

from _pages import page
from deshadow.metrics import psnr, rmse, ssim, total_loss

s = page(128)
print(f"shadowed input: PSNR {psnr(s.shadow, s.target):.2f} dB, "
      f"SSIM {ssim(s.shadow, s.target, mode='global'):.3f}, RMSE {rmse(s.shadow, s.target):.2f}")
print("perfect output: PSNR", psnr(s.target, s.target), "SSIM", ssim(s.target, s.target, mode="global"))

off_by_one = np.clip(s.target + 1 / 255, 0, 1)
print(f"every pixel off by one grey level: RMSE {rmse(off_by_one, s.target):.3f}")
print(f"training loss on the input: {float(total_loss(s.shadow, s.target)):.4f}")
