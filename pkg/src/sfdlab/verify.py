"""Check suite behind ``sfd verify``.

Each check returns :class:`CheckResult` rows; ``run_all`` is what the
``verify`` command prints.
"""
from __future__ import annotations

import ast
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .eval import verify_fisher_identity, verify_tweedie
from .gmm import ClassRoles, GmmTeacher, default_spec, random_spec
from .losses import (Batch, LossWeights, dsm_loss, psi_update_loss, sfd_hybrid, sfd_inner_product,
                     sfd_naive, theta_update_loss)
from .models import AnalyticTeacher, CondMlp, MlpConfig, generator_forward
from .schedule import build_schedule

GRAD_TOL = 1e-5
TWEEDIE_TOL = 1e-10
IDENTITY_SIGMAS = 3.0
# modules that draw from the teacher mixture or consume its samples
DATA_MODULES = ("sampling", "eval", "pretrain")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def as_dict(self):
        return asdict(self)


def fisher_checks(rng, n=1_000_000, pairs=10, schedule=None):
    """Fisher-divergence vs inner-product form on random mixture pairs at three timesteps."""
    sch = schedule or build_schedule()
    ts = (sch.t_min, (sch.t_min + sch.t_max) // 2, sch.t_max)
    out = []
    for i in range(pairs):
        teacher_spec = random_spec(rng, num_classes=2)
        gen_spec = random_spec(rng, num_classes=2)
        c1, c2 = (int(v) for v in rng.integers(0, 2, size=2))
        for t in ts:
            lhs, rhs, se = verify_fisher_identity(teacher_spec, gen_spec, c1, c2, t, n, rng, sch)
            gap = abs(lhs - rhs)
            out.append(CheckResult(f"fisher_identity[pair={i},t={t}]", gap <= IDENTITY_SIGMAS * se,
                                   gap / se if se > 0 else 0.0, IDENTITY_SIGMAS,
                                   f"lhs={lhs:.6g} rhs={rhs:.6g} se={se:.3g}"))
    return out


def tweedie_check(rng, probes=1000, schedule=None, spec=None, radius=10.0):
    sch = schedule or build_schedule()
    teacher = GmmTeacher(spec or default_spec(), sch)
    z = rng.uniform(-radius, radius, size=(probes, 2))
    c = rng.integers(0, teacher.num_classes, size=probes)
    t = rng.integers(0, sch.T, size=probes)
    worst = 0.0
    for k in range(teacher.num_classes):
        sel = c == k
        worst = max(worst, verify_tweedie(teacher, z[sel], k, t[sel]))
    return CheckResult("tweedie_identity", worst < TWEEDIE_TOL, worst, TWEEDIE_TOL,
                       f"{probes} probes, |z| <= {radius}")


# -- gradient suite --------------------------------------------------------------------

def _layer_check(net, flat, fn):
    """grad_check over the named parameter blocks of ``net``."""
    names = [name for name, *_ in net.layout]
    blocks = net.leaves(flat, requires_grad=False)
    return ad.grad_check(lambda ts: fn(dict(zip(names, ts))), [blocks[k].data for k in names])


def _small_setup(rng):
    sch = build_schedule()
    spec = random_spec(rng, num_classes=3, max_components=2)
    net = CondMlp(MlpConfig(3, hidden=(8, 8), class_dim=3, time_dim=4))
    teacher = AnalyticTeacher(GmmTeacher(spec, sch))
    roles = ClassRoles(0, 1, 3)
    return sch, net, teacher, roles


def _batch(rng, sch, cls, n):
    return Batch(np.full(n, cls), sch.sigma_init * rng.standard_normal((n, 2)),
                 sch.sample_timestep(rng, n), rng.standard_normal((n, 2)))


def gradient_checks(rng):
    sch, net, teacher, roles = _small_setup(rng)
    n = 5
    t = sch.sample_timestep(rng, n)
    arr = lambda: rng.normal(size=(n, 2))
    w = rng.uniform(0.5, 2.0, size=n)
    x, x_phi, x_psi, s_phi, s_psi = arr(), arr(), arr(), arr(), arr()
    checks = {
        "dsm_loss": lambda: ad.grad_check(lambda v: dsm_loss(v[0], x, t, sch), [x_psi]),
        "sfd_naive": lambda: ad.grad_check(lambda v: sfd_naive(v[0], v[1], w), [s_phi, s_psi]),
        "sfd_inner_product": lambda: ad.grad_check(
            lambda v: sfd_inner_product(v[0], v[1], v[2], t, sch, w), [x_phi, x_psi, x]),
    }
    for alpha in (0.0, 1.0, 1.2):
        checks[f"sfd_hybrid[alpha={alpha}]"] = lambda alpha=alpha: ad.grad_check(
            lambda v: sfd_hybrid(v[0], v[1], v[2], t, alpha, sch, w=w), [x_phi, x_psi, x])

    theta = net.init_params(rng)
    psi = theta + 0.1 * rng.standard_normal(theta.shape)
    weights = LossWeights(mu_psi=0.5, mu_theta=0.5)

    def filled(rem, fgt):
        leaves = net.leaves(theta, requires_grad=False)
        for b in (rem, fgt):
            b.x = generator_forward(net, sch, b.noise, b.classes, leaves).data
            b.z = sch.perturb(b.x, b.t, b.eps)
        return rem, fgt

    rem_psi, fgt_psi = filled(_batch(rng, sch, 2, n), _batch(rng, sch, 0, n))
    checks["psi_update_loss"] = lambda: _layer_check(
        net, psi, lambda lv: psi_update_loss(net, lv, rem_psi, fgt_psi, weights, sch))

    rem, fgt = _batch(rng, sch, 1, n), _batch(rng, sch, 0, n)
    gen = lambda noise, c, lv: generator_forward(net, sch, noise, c, lv)
    psi_leaves = net.leaves(psi, requires_grad=False)
    for mode in ("sfd", "kl"):
        frozen = {}

        def fn(lv, mode=mode, frozen=frozen):
            return theta_update_loss(net, gen, lv, psi_leaves, teacher, rem, fgt, roles, weights,
                                     sch, mode=mode, frozen=frozen)
        checks[f"theta_update_loss[{mode}]"] = lambda fn=fn: _layer_check(net, theta, fn)
    return [CheckResult(f"grad:{name}", (err := float(run())) < GRAD_TOL, err, GRAD_TOL)
            for name, run in checks.items()]


def _local_imports(tree, package):
    """Sibling module names imported anywhere in a module, including inside functions."""
    found = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            if node.level == 1:
                if node.module:
                    found.add(node.module.split(".")[0])
                else:
                    found.update(a.name.split(".")[0] for a in node.names)
            elif node.level == 0 and node.module and node.module.split(".")[0] == package:
                parts = node.module.split(".")
                if len(parts) > 1:
                    found.add(parts[1])
                else:
                    found.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            for a in node.names:
                parts = a.name.split(".")
                if parts[0] == package and len(parts) > 1:
                    found.add(parts[1])
        elif isinstance(node, ast.Call) and getattr(node.func, "attr", getattr(node.func, "id", "")) \
                in ("import_module", "__import__"):
            found.add("<dynamic>")
    return found


def import_graph(package_dir=None):
    """{module: set of sibling modules it imports} for every .py file in the package."""
    root = Path(package_dir) if package_dir else Path(__file__).parent
    package = root.name
    graph = {}
    for path in sorted(root.glob("*.py")):
        tree = ast.parse(path.read_text(), filename=str(path))
        graph[path.stem] = _local_imports(tree, package)
    return graph


def reachable(graph, start):
    """Modules reachable from ``start``.  Importing any submodule runs ``__init__`` too."""
    seen, todo = set(), [start, "__init__"]
    while todo:
        mod = todo.pop()
        if mod in seen:
            continue
        seen.add(mod)
        todo.extend(graph.get(mod, ()))
    return seen


def data_free_audit(package_dir=None, start="trainer"):
    graph = import_graph(package_dir)
    hits = sorted(reachable(graph, start) & (set(DATA_MODULES) | {"<dynamic>"}))
    return CheckResult("data_free:trainer", not hits, float(len(hits)), 0.0,
                       "reaches " + ", ".join(hits) if hits else "no path to sampling")


def run_all(seed=0, identity_n=1_000_000):
    rng = np.random.default_rng(seed)
    return [data_free_audit(), tweedie_check(rng), *gradient_checks(rng),
            *fisher_checks(rng, n=identity_n)]
