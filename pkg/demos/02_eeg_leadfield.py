"""Assemble the complete-electrode-model system and compute an EEG lead
field.

The system couples the P1 conductivity stiffness (with electrode contact
terms and one grounded node) to the electrode voltages; the lead field
maps unit dipole components at the source locations to zero-mean electrode
voltages through the shared transfer matrix T = A^-1 B.
"""

import numpy as np

from headfem import (
    Compartment,
    ElectrodeSet,
    PcgConfig,
    Segmentation,
    assemble_cem_system,
    eeg_leadfield,
    fibonacci_sphere_points,
    generate_mesh,
    icosphere,
    place_sources,
)

seg = Segmentation([
    Compartment(icosphere(0.079, 3, name="brain"), 0.33, active=True),
    Compartment(icosphere(0.092, 3, name="scalp"), 0.43),
])
mesh = generate_mesh(seg, h=0.01)
electrodes = ElectrodeSet.from_centers(
    mesh, fibonacci_sphere_points(32, 0.092), radius=0.014, impedances=1e3)
sources = place_sources(mesh, seg, 500, mode="unconstrained", seed=1)
system = assemble_cem_system(mesh, electrodes, sources)
print(f"system: A {system.A.shape}, B {system.B.shape}, G {system.G.shape}, "
      f"ground node {system.ground}")

lf = eeg_leadfield(system, PcgConfig(tolerance=1e-8))
print(f"lead field: {lf.matrix.shape[0]} electrodes x "
      f"{lf.matrix.shape[1]} source components")

# Every column is zero-mean across electrodes by construction.
rel_means = np.abs(lf.matrix.sum(axis=0)) / np.linalg.norm(lf.matrix, axis=0)
print(f"worst relative column mean: {rel_means.max():.2e}")

# A tangential dipole near the top produces the expected dipolar pattern:
# the strongest positive and negative electrodes straddle the source.
s = int(np.argmin(np.linalg.norm(lf.positions - [0, 0, 0.07], axis=1)))
col = lf.matrix[:, 3 * s]   # x-oriented unit dipole at that source
top = np.argsort(col)
centers = fibonacci_sphere_points(32, 0.092)
print(f"dipole at {np.round(lf.positions[s], 3)}, x-oriented:")
print(f"  most positive electrode at {np.round(centers[top[-1]], 3)}")
print(f"  most negative electrode at {np.round(centers[top[0]], 3)}")
