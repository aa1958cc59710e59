# How many parameters does each tuning strategy actually train, and what
# does that cost in optimizer memory?  Pure arithmetic over architecture
# presets -- no weights are materialized.

from normadapt import budget as bg
from normadapt.strategies import STRATEGY_KINDS, TuningStrategy

for preset_name in ("llama7b", "llama13b"):
    preset = bg.PRESETS[preset_name]
    print(f"\n{preset_name}: total {bg.count(preset, TuningStrategy('finetune')).total:,}"
          f" params (incl. frozen vision tower)")
    for kind in STRATEGY_KINDS:
        report = bg.count(preset, TuningStrategy(kind))
        gb = report.memory_bytes / 2**30
        print(f"  {kind:17s} {report.trainable:>13,}  "
              f"{report.percentage:8.4f}%   optimizer state {gb:7.2f} GiB")

# the published reference column, with per-row tolerance gates; the
# low-rank row is reported but flagged -- its reference target set is not
# recoverable from the rank rule alone
print("\npreset    strategy           computed  reference  within")
for row in bg.reference_table():
    mark = "yes" if row.within else ("FLAGGED" if not row.gated else "NO")
    print(f"{row.preset:9s} {row.strategy:17s} {row.computed:9.4f}  "
          f"{row.reference:9.3f}  {mark}")
