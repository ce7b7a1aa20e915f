# coding: utf-8

# # Reconstructing a stroke from noisy data
#
# Synthetic measurements are generated on the chamber mesh, 10 percent
# multiplicative noise is added and the permittivity map is recovered with the
# adjoint-gradient L-BFGS loop.

# In[1]:

import numpy as np

from maxtomo.fem import MaterialField, PhysicsParams
from maxtomo.forward import ForwardModel
from maxtomo.inverse import InverseConfig, InverseProblem, reconstruct
from maxtomo.mesh import ChamberSpec, generate_chamber_mesh
from maxtomo.phantom import (EPS_GEL, Ellipsoid, PhantomSpec, add_noise, anomaly_center,
                             build_phantom, write_vtk, eps_fields)

mesh = generate_chamber_mesh(ChamberSpec(h=0.008))
model = ForwardModel(mesh, PhysicsParams())

stroke = Ellipsoid((0.025, 0.0, 0.04), (0.015, 0.012, 0.012))
truth = build_phantom(PhantomSpec(stroke=stroke), mesh)


# The empty-chamber matrix is used to weight the misfit so that weak far-side
# transmissions count as much as strong near-side ones.

# In[2]:

measured = add_noise(model.forward(truth).smatrix, 0.1, seed=42)
empty = model.forward(MaterialField.uniform(mesh, EPS_GEL)).smatrix


# ## Inversion
#
# alpha weights the smoothness penalty.  With noisy data a little smoothing
# keeps the reconstruction from fitting the noise.

# In[3]:

background = MaterialField.uniform(mesh, EPS_GEL)
problem = InverseProblem(model, measured, empty, background,
                         InverseConfig(alpha=1e-7, max_iter=30))


def show(h):
    print(f"iter {h['iter']:3d}  cost {h['cost']:.4e}  |g| {h['grad_norm']:.3e}")


field, result = reconstruct(problem, callback=show)
print(result.status, result.nit, "iterations")


# ## Where is it?

# In[4]:

center, peak = anomaly_center(mesh, field.eps, EPS_GEL)
print("estimated centre (mm):", np.round(1e3 * center, 1))
print("true centre (mm):     ", 1e3 * stroke.center)
print("peak |delta eps|:", round(peak, 2))

write_vtk(mesh, "reconstruction.vtk", eps_fields(field.eps))  # open in ParaView
