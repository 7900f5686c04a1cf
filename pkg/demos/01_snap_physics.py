# %% [markdown]
# # SNAP gates on a cavity-ancilla system
#
# A five-level cavity qudit is dispersively coupled to a three-level ancilla.
# A SNAP gate puts a phase on one photon-number level and leaves the others
# alone. This script builds the model, propagates a pulse and checks the
# gradient used by the optimizer.

# %%
import numpy as np

from snapml.dynamics import infidelity, infidelity_gradient, propagate
from snapml.operators import SnapSpec, SystemSpec, snap_unitary, static_hamiltonian, trace_fidelity
from snapml.pulses import PulseParams, eval_envelope, make_basis

sys_ = SystemSpec()
print("dimension", sys_.dim, "chi [rad/ns]", sys_.omega_chi, "xi [rad/ns]", sys_.omega_xi)

# %% [markdown]
# The static Hamiltonian is diagonal in the number basis (index ``k*3 + q``).

# %%
H0 = static_hamiltonian(sys_)
print(np.round(np.diag(H0).real, 4))

# %% [markdown]
# Target: phase pi on level 2. The identity only reaches fidelity 0.36
# against it, since one of five diagonal entries flips sign.

# %%
spec = SnapSpec(np.pi, 2)
print(np.diag(snap_unitary(spec, sys_.d)))
print("fidelity(identity) =", trace_fidelity(np.eye(sys_.dim), spec, sys_))

# %% [markdown]
# Pulses are two quadratic B-spline envelopes with 16 coefficients each.

# %%
basis = make_basis()
rng = np.random.default_rng(0)
pulse = PulseParams.from_vector(rng.uniform(-0.1, 0.1, 32))
t = np.linspace(0, pulse.duration, 7)
print("I(t) samples:", np.round(eval_envelope(pulse.theta_i, basis, t), 4))

# %%
U = propagate(sys_, pulse)
print("unitarity error", np.max(np.abs(U.conj().T @ U - np.eye(sys_.dim))))
print("infidelity", infidelity(sys_, pulse, SnapSpec(0.7, 2)))

# %% [markdown]
# The analytic gradient against central differences.

# %%
spec = SnapSpec(0.7, 2)
g = infidelity_gradient(sys_, pulse, spec)
h = 1e-6
x = pulse.vector
fd = np.array([(infidelity(sys_, PulseParams.from_vector(x + h * e), spec)
                - infidelity(sys_, PulseParams.from_vector(x - h * e), spec)) / (2 * h) for e in np.eye(32)])
print("max relative gradient error", np.max(np.abs(g - fd)) / np.max(np.abs(g)))
