"""The training loop must have no route to anything that draws teacher samples."""
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

import sfdlab
from sfdlab.gmm import GmmTeacher
from sfdlab.models import AnalyticTeacher
from sfdlab.verify import DATA_MODULES, data_free_audit, import_graph, reachable

PKG = Path(sfdlab.__file__).parent


def test_trainer_import_closure_is_data_free():
    res = data_free_audit()
    assert res.passed, res.detail
    closure = reachable(import_graph(), "trainer")
    assert "losses" in closure and "models" in closure  # the audit sees real edges


def test_runtime_modules_after_import():
    code = ("import sys, sfdlab.trainer, sfdlab.config;"
            "print(','.join(sorted(m for m in sys.modules if m.startswith('sfdlab'))))")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True)
    loaded = {m.split(".")[-1] for m in out.stdout.strip().split(",")}
    assert not loaded & set(DATA_MODULES), loaded


def test_teacher_backends_expose_no_sampler(spec, schedule):
    for obj in (GmmTeacher(spec, schedule), AnalyticTeacher(GmmTeacher(spec, schedule))):
        assert not [n for n in dir(obj) if "sample" in n.lower()]


@pytest.fixture
def pkg_copy(tmp_path):
    dst = tmp_path / "sfdlab"
    shutil.copytree(PKG, dst, ignore=shutil.ignore_patterns("__pycache__"))
    return dst


@pytest.mark.parametrize("module,line", [
    ("trainer", "from .sampling import sample\n"),
    ("losses", "def _peek():\n    from . import eval\n"),          # indirect, function-level
    ("models", "import sfdlab.pretrain\n"),
    ("gmm", "from sfdlab import sampling\n"),
    ("schedule", "import importlib\nimportlib.import_module('sfdlab.sampling')\n"),
])
def test_injected_violation_is_caught(pkg_copy, module, line):
    assert data_free_audit(pkg_copy).passed
    path = pkg_copy / f"{module}.py"
    path.write_text(path.read_text() + "\n" + line)
    res = data_free_audit(pkg_copy)
    assert not res.passed
    assert res.detail.startswith("reaches")


def test_unrelated_edge_is_not_flagged(pkg_copy):
    # the CLI may use sampling freely; it is not reachable from the trainer
    path = pkg_copy / "cli.py"
    path.write_text(path.read_text() + "\nfrom .sampling import read_csv\n")
    assert data_free_audit(pkg_copy).passed
