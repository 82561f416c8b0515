"""Field-unit constants.

Internal unit system: psi, ft, md, cp, days, lbm/ft^3.  Rates at surface
conditions are STB/day for liquids and Mscf/day for gas.
"""

# Darcy velocity conversion: Q [ft^3/day] = DARCY * k[md] * A[ft^2] * dp[psi] / (mu[cp] * L[ft])
DARCY = 6.3283e-3

# Hydrostatic gradient: dp/dz [psi/ft] = GRAVITY * rho [lbm/ft^3]
GRAVITY = 1.0 / 144.0

FT3_PER_BBL = 5.614583
FT3_PER_MSCF = 1000.0
