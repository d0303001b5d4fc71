"""Short joint run: distill the default 4-class teacher while forgetting class 0.

    python demos/forget_one_class.py [steps]

A few thousand steps are enough to watch UA climb; the full acceptance run
uses 20k.  Writes demo_forget/metrics.jsonl and prints one line per record.
"""
import json
import sys
from pathlib import Path

from sfdlab.eval import Evaluator
from sfdlab.trainer import SfdConfig, Trainer

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
out = Path("demo_forget")
out.mkdir(exist_ok=True)

cfg = SfdConfig(steps=steps, eval_interval=500, forget_class=0, override_class=1)
trainer = Trainer(cfg)
evaluator = Evaluator(cfg.spec, trainer.schedule, trainer.net, cfg.roles, n_samples=4000,
                      pr_samples=1000)

fh = open(out / "metrics.jsonl", "w")


def show(rec):
    fh.write(json.dumps(rec) + "\n")
    print(f"step {rec['step']:6d}  UA {rec['ua']:.3f}  override {rec['override_rate']:.3f}  "
          f"Frechet(remaining) {rec['frechet_remaining']:.2e}", flush=True)


state = trainer.run(evaluator=evaluator, on_record=show)
fh.close()
gen = evaluator.generate(state.eval_params(), cfg.forget_class, 5)
print("class-0 requests now land at:\n", gen.round(2))
