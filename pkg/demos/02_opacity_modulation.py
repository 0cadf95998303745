"""The opacity-modulation parameter w.

A surfel's footprint opacity is min(1, w * G(u, v)) with a unit Gaussian G,
cut to zero when min(alpha, G) < 1/255.  Small w gives a translucent Gaussian
blob (differentiable everywhere); w = 255 gives a hard disc of local radius
sqrt(2 ln 255) ~ 3.33.  This renders one surfel at several w values and plots
the radial opacity profile.
"""

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ges import Camera, GaussianSet, Scene, Stage, SurfelSet, TrainSettings, opaque_radius
from ges.datasets import save_image
from ges.training import render_training

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

cam = Camera(200.0, 200.0, 48, 48, 96, 96, np.eye(4))
fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))

r = np.linspace(0, 4.0, 400)
G = np.exp(-0.5 * r * r)
for w in (0.1, 1.0, 8.0, 60.0, 255.0):
    alpha = np.minimum(1.0, w * G)
    alpha[np.minimum(alpha, G) < 1 / 255] = 0.0
    axes[0].plot(r, alpha, label=f"w = {w:g}")
axes[0].axvline(opaque_radius(), color="k", ls=":", lw=1)
axes[0].set_xlabel("local radius")
axes[0].set_ylabel("opacity")
axes[0].legend(fontsize=7)
axes[0].set_title("min(1, w G) with the 1/255 cutoff")

strip = []
for w in (0.1, 1.0, 8.0, 60.0, 255.0):
    surf = SurfelSet(pos=np.array([[0.0, 0.0, 3.0]]),
                     quat=np.array([[1.0, 0, 0, 0]]),
                     log_scale=np.log([[0.35, 0.35]]),
                     sh=np.zeros((1, 1, 3)), w=np.array([w]))
    surf.sh[0, 0] = (np.array([0.95, 0.8, 0.3]) - 0.5) / 0.28209479177387814
    scene = Scene(surf, GaussianSet.empty(0), 0, Stage.SURFEL_ONLY)
    frame = render_training(scene, cam, TrainSettings(supersample=1))
    strip.append(frame.image)
strip = np.concatenate(strip, axis=1)
axes[1].imshow(strip)
axes[1].set_xticks([])
axes[1].set_yticks([])
axes[1].set_title("rendered footprint as w grows")
fig.tight_layout()
fig.savefig(out_dir / "opacity_modulation.png", dpi=130)
save_image(out_dir / "opacity_strip.png", strip)
print(f"wrote {out_dir / 'opacity_modulation.png'}")
print(f"opaque radius = sqrt(2 ln 255) = {opaque_radius():.4f}")
