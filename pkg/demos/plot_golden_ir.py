"""
Golden IR drop and feature maps for one synthetic design
========================================================

Generate a small design, solve the resistive grid at every time step and
write the worst-case drop as a tile heatmap next to two of the input maps.
Outputs land in ``demo_out/`` as CSV plus PPM images.
"""

from pathlib import Path

import numpy as np

from vectorir.design_io import write_heatmap
from vectorir.features import grid_shape, location_matrix, raw_volume
from vectorir.metrics import tileize_ir
from vectorir.pdn import golden_dynamic_ir
from vectorir.synth import GeneratorSpec, generate_design

out = Path("demo_out")
out.mkdir(exist_ok=True)

# a 40 x 40 um block with 1000 cells and clustered switching
design = generate_design(1, GeneratorSpec(width=40.0, length=40.0, num_instances=1000,
                                          num_vias=25, num_slices=1))
print(f"{design.num_instances} instances, {len(design.vias)} via stacks, "
      f"{design.num_steps} time steps, {design.slices[0].inst.size} toggles")

# the oracle keeps every step so we can see when the worst case happens
golden = golden_dynamic_ir(design, 0, keep_steps=True)
worst_step = int(golden.steps.max(axis=0).argmax())
print(f"worst drop {golden.ir.max() * 1e3:.2f} mV at step {worst_step}")

loc = location_matrix(design.xy, design.width, design.length)
shape = grid_shape(design.width, design.length)
ir_map, occupied = tileize_ir(golden.ir, loc, shape)
write_heatmap(ir_map * 1e3, out / "golden_ir_mV")

# the total power map and the temporal map at the worst step, both unnormalized
_, vol = raw_volume(design, 0)
write_heatmap(vol.channel("p_tot"), out / "p_tot")
write_heatmap(vol.temporal[worst_step], out / f"p_t_step{worst_step}")

# tiles above the 8 mV hotspot threshold
hot = (ir_map > 8e-3) & occupied
print(f"{hot.sum()} of {occupied.sum()} occupied tiles are hotspots")
ix, iy = np.unravel_index(ir_map.argmax(), shape)
print(f"hottest tile ({ix}, {iy}) at {ir_map.max() * 1e3:.2f} mV "
      "(tile values are means, so they sit below the worst single cell)")
