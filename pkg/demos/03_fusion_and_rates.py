"""The context sketch, latent fusion, and what each choice costs.

No training here: rate arithmetic is exact, and the fusion identities hold
for any codec, so a randomly initialized one is enough to demonstrate both.
"""

import numpy as np
import torch

from taco.codec import CodecConfig, CodecModel, decode, encode
from taco.imagecore import Image
from taco.semcom import (
    RateGeometry,
    build_mask,
    context_rate_bits,
    context_plus_task_rate_bits,
    extract_patch,
    full_latent_rate_bits,
    fuse,
    make_context,
    reproject_context,
)

# rate table at the reference operating point: 224x224, f_model=f_ctx=4, K=8192
geom = RateGeometry.from_image(224, 224, 4, 4)
k = 8192
print(f"latent grid {geom.grid_h}x{geom.grid_w}, context grid {geom.ctx_h}x{geom.ctx_w}")
print(f"{'mode':>24}  {'bits':>8}  {'KB':>7}")
r_c = context_rate_bits(geom, k)
print(f"{'context only':>24}  {r_c:>8}  {r_c / 8192.0:>7.3f}")
for p in (10, 30, 70):
    cells = int(np.ceil(p / 100 * geom.grid_h * geom.grid_w))
    r = context_plus_task_rate_bits(geom, k, cells)
    print(f"{f'context + top {p}%':>24}  {r:>8}  {r / 8192.0:>7.3f}")
r_i = full_latent_rate_bits(geom, k)
print(f"{'full latent':>24}  {r_i:>8}  {r_i / 8192.0:>7.3f}")

# fusion on a real latent grid, desk scale
torch.manual_seed(0)
model = CodecModel(CodecConfig(codebook_size=64, embed_dim=16, hidden=16))
rng = np.random.default_rng(0)
x = Image(rng.uniform(-1, 1, size=(3, 64, 64)).astype(np.float32))

z = encode(model, x)                      # what the transmitter would send in full
ctx = make_context(model, x, 4)           # the cheap sketch
z_u = reproject_context(model, ctx.z_c, 4)  # receiver-side upsampled estimate
print(f"\nfull grid {z.indices.shape}, context grid {ctx.z_c.indices.shape}, "
      f"reprojected {z_u.indices.shape}")

# all-ones mask: fusion returns exactly the transmitter's grid
all_cells = [(a, b) for a in range(z.h) for b in range(z.w)]
z_all = fuse(z_u, extract_patch(z, all_cells), build_mask(all_cells, z.h, z.w))
assert np.array_equal(z_all.indices, z.indices)
assert np.array_equal(decode(model, z_all).pixels, decode(model, z).pixels)
print("all-ones mask: fused grid identical to the directly encoded one (bit-exact)")

# all-zeros mask: fusion returns the context estimate untouched
z_none = fuse(z_u, {}, build_mask([], z.h, z.w))
assert np.array_equal(z_none.indices, z_u.indices)
print("all-zeros mask: fused grid identical to the context reprojection")

# a partial mask keeps context cells outside the patch
some = all_cells[: len(all_cells) // 3]
z_mix = fuse(z_u, extract_patch(z, some), build_mask(some, z.h, z.w))
replaced = int((z_mix.indices != z_u.indices).sum())
print(f"partial mask ({len(some)} cells): {replaced} cells replaced, rest untouched")
