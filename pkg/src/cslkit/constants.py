"""Physical constants in CGS units.

Energies are kept in erg internally; conversion to eV / keV happens only
where a function reports a result.
"""

HBAR = 1.0546e-27  # erg s
C_LIGHT = 2.9979e10  # cm / s
ALPHA = 1.0 / 137.036  # e^2 / (hbar c)
EV = 1.6022e-12  # erg
KEV = 1.0e3 * EV

PROTON_MASS = 1.6726e-24  # g
NEUTRON_MASS = 1.67493e-24  # g
ELECTRON_PROTON_MASS_RATIO = 5.446e-4
ELECTRON_MASS = ELECTRON_PROTON_MASS_RATIO * PROTON_MASS

SECONDS_PER_DAY = 86400.0
GE_ATOMS_PER_KG = 8.3e24

# Reference collapse parameters (Ghirardi-Rimini-Weber choice)
GRW_LAMBDA = 1.0e-16  # s^-1
GRW_A = 1.0e-5  # cm

NUCLEAR_RADIUS_UNIT = 1.4e-13  # cm, R0 = r0 * A^(1/3)
