"""Swap the closed-form teacher for a DSM-pretrained MLP and distill from it.

    python demos/pretrained_teacher.py

Pretraining is the one place that touches mixture samples; the distillation
run afterwards only queries the network.
"""
import numpy as np

from sfdlab.cli import pretrain_accuracy
from sfdlab.eval import Evaluator
from sfdlab.gmm import default_spec
from sfdlab.models import CondMlp, MlpConfig, PretrainedTeacher
from sfdlab.pretrain import dsm_pretrain
from sfdlab.schedule import build_schedule
from sfdlab.trainer import SfdConfig, Trainer

sch = build_schedule()
spec = default_spec()
net = CondMlp(MlpConfig(spec.num_classes))
params, losses = dsm_pretrain(net, spec, sch, np.random.default_rng(0), steps=3000)
print(f"DSM loss {losses[:100].mean():.4f} -> {losses[-100:].mean():.4f}")
acc = pretrain_accuracy(net, params, spec, sch, np.random.default_rng(1))
print(f"posterior-mean error on 100 probes: max {acc['mean_max']:.3f}, rms {acc['mean_rms']:.3f}")

cfg = SfdConfig(steps=2000, eval_interval=500)
trainer = Trainer(cfg, teacher=PretrainedTeacher(net, params, sch))
ev = Evaluator(spec, trainer.schedule, trainer.net, cfg.roles, n_samples=4000, pr_samples=1000)
trainer.run(evaluator=ev, on_record=lambda r: print(
    f"step {r['step']:5d}  UA {r['ua']:.3f}  Frechet {r['frechet_remaining']:.2e}", flush=True))
