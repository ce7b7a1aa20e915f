# coding: utf-8

# # Overlapping Schwarz preconditioning
#
# The chamber system is solved with GMRES preconditioned by optimized
# restricted additive Schwarz (ORAS).  More subdomains mean smaller local
# factorizations and a few more Krylov iterations.

# In[1]:

import time

import numpy as np

from maxtomo.fem import MaterialField, PhysicsParams
from maxtomo.forward import ForwardModel, SolverConfig, merge_stats
from maxtomo.mesh import ChamberSpec, generate_chamber_mesh
from maxtomo.phantom import EPS_GEL

mesh = generate_chamber_mesh(ChamberSpec(h=0.008))
gel = MaterialField.uniform(mesh, EPS_GEL)


# In[2]:

reference = None
for ns in (1, 2, 4, 8):
    model = ForwardModel(mesh, PhysicsParams(), SolverConfig(n_subdomains=ns))
    t0 = time.perf_counter()
    res = model.forward(gel)
    dt = time.perf_counter() - t0
    if reference is None:
        reference = res.fields
    err = np.linalg.norm(res.fields - reference) / np.linalg.norm(reference)
    print(f"N_S={ns}  iterations {merge_stats(res.stats).iterations.max():3d}  "
          f"time {dt:5.1f} s  difference {err:.1e}")


# ## RAS versus ORAS
#
# Plain RAS cuts the subdomains with Dirichlet conditions; the Robin
# (impedance) transmission condition of ORAS lets waves leave a subdomain and
# cuts the iteration count.

# In[3]:

for variant in ("RAS", "ORAS"):
    model = ForwardModel(mesh, PhysicsParams(), SolverConfig(n_subdomains=4, variant=variant))
    res = model.forward(gel)
    print(variant, merge_stats(res.stats).iterations.max())
