"""
Finite-difference gradient check
================================

Compare every analytic gradient of a few random small networks with
central differences in float64.
"""

from kanizsa.gradcheck import fixed_three_layer_check, run_suite

res = fixed_three_layer_check()
print(f"conv-relu-pool-conv-relu-dense: max relative error {res.max_rel_error:.2e}")

for r in run_suite(10, seed=3):
    kinds = "-".join(layer["type"] for layer in r.config["layers"])
    print(f"{r.max_rel_error:.2e}  {r.worst_param:10s}  {kinds}")
