# coding: utf-8

# # Forward scattering in the imaging chamber
#
# A single ring of 8 ceramic-loaded waveguide ports surrounds a cylinder filled
# with matching gel.  Each port is driven in turn with its TE10 mode and the
# transmitted signal is read on all 8 ports, giving an 8x8 scattering matrix.

# In[1]:

import numpy as np

from maxtomo.fem import MaterialField, PhysicsParams
from maxtomo.forward import ForwardModel
from maxtomo.mesh import ChamberSpec, generate_chamber_mesh
from maxtomo.phantom import EPS_GEL, Ellipsoid, PhantomSpec, build_phantom
from maxtomo.scattering import magnitude_db, normalize_row


# A coarse chamber keeps this under a minute.  h is the target edge length in metres.

# In[2]:

mesh = generate_chamber_mesh(ChamberSpec(h=0.01))
model = ForwardModel(mesh, PhysicsParams())  # 1 GHz, ceramic eps_r = 59
print(mesh.n_nodes, "nodes", mesh.n_tets, "tets", model.dof_map.n_dofs, "edge unknowns")


# ## Empty chamber
#
# With only gel inside, the matrix is symmetric under the ring's rotations, so
# every row looks like a shifted copy of the first one.

# In[3]:

empty = model.forward(MaterialField.uniform(mesh, EPS_GEL)).smatrix
print(np.round(magnitude_db(empty.values[:, 0]), 1))


# ## A stroke-like inclusion
#
# A small ellipsoid of blood-gel mixture sits off-centre.  Normalising each
# transmitter's row by the port directly opposite it removes the unknown
# absolute gain of a real measurement system.

# In[4]:

stroke = Ellipsoid((0.025, 0.0, 0.04), (0.015, 0.012, 0.012))
phantom = build_phantom(PhantomSpec(stroke=stroke), mesh)
S = model.forward(phantom).smatrix

for j in range(8):
    a = normalize_row(S, j, (j + 4) % 8).values[:, j]
    b = normalize_row(empty, j, (j + 4) % 8).values[:, j]
    print(j, np.round(magnitude_db(a) - magnitude_db(b), 2))

# The largest deviations show up on the ports facing the inclusion (port 0 sits on +x).
