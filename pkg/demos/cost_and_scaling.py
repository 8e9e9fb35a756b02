"""
Operation counts and measured scaling
=====================================

The attention stages cost a fixed amount per query, so their time should
grow linearly with the number of tokens. Dense attention grows with the
square. Both are measured here on random inputs.
"""

from matchattn.bench import bench_attention, loglog_slope, sampling_ratio
from matchattn.decoder import preset
from matchattn.flops import attention_flops, decoder_flops

b = attention_flops(64, 64, 4, 32, 32, 3)
print(f"one layer at 64x64, 4 heads, w=3: qk {b.qk_flops:,}  bsm {b.bsm_flops:,}  agg {b.agg_flops:,}")

for name in ("desk", "T", "S", "B"):
    d = decoder_flops(preset(name), 1536, 1536)
    print(f"{name:>4} at 1536^2: tensor {d.tensor_flops / 1e12:.3f}T  attention {d.attention_flops / 1e12:.4f}T")

match = bench_attention([64, 128, 256], "match", runs=3)
dense = bench_attention([32, 64, 128], "global", runs=3)
for r in match + dense:
    print(f"{r.variant:>6} {r.tokens:7d} tokens  {r.median_ms:8.2f} ms")
print(f"slopes: windowed {loglog_slope(match):.2f}, dense {loglog_slope(dense):.2f}")
print(f"direct sampling / fused gather time: {sampling_ratio(128, runs=3):.1f}x")
