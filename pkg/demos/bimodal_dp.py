"""Dynamic programming on the lumped double-well chain versus constant inputs."""
from infostate.scenarios import compare_configs, resolve_config

base = dict(scenario="bench-bimodal", seed=7)
dp_cfg, _ = resolve_config(base)
for value in (0.0, 1.0):
    const_cfg, _ = resolve_config(dict(base, controller=dict(type="constant", params=dict(value=value))))
    ra, rb, diff = compare_configs(dp_cfg, const_cfg)
    print(f"DP {ra.metrics['cost'].mean:.4f}  constant u={value:g} {rb.metrics['cost'].mean:.4f}  "
          f"paired difference {diff.mean:+.4f} +- {diff.stderr:.4f}")
