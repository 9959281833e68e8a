"""Build the extension module with cargo, import it and exercise every entry point.

    python python/smoke_test.py
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

SCENARIO = """
name = "py_smoke"
[problem]
family = "linear_mf"
[simulation]
paths = 1000
flow_paths = 800
steps = 16
[tasks]
run = ["value_surface", "growth"]
[surface]
nodes = 5
time_stride = 8
[tolerances]
closed_form_abs = 0.5
"""


def build(tmp):
    subprocess.run(
        ["cargo", "build", "-p", "mf-fbsde-py", "--release", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = ROOT / "target" / "release" / ("mf_fbsde.dll" if sys.platform == "win32" else "libmf_fbsde.so")
    if sys.platform == "darwin":
        lib = lib.with_suffix(".dylib")
    target = Path(tmp) / ("mf_fbsde.pyd" if sys.platform == "win32" else "mf_fbsde.so")
    shutil.copy(lib, target)
    sys.path.insert(0, tmp)


def main():
    with tempfile.TemporaryDirectory() as tmp:
        build(tmp)
        import mf_fbsde

        print("mf_fbsde", mf_fbsde.__version__)

        families = {f["name"]: f for f in json.loads(mf_fbsde.list_families())}
        assert {"example_3_1", "example_3_2", "heat", "nonlinear_mf"} <= families.keys()

        resolved = json.loads(mf_fbsde.resolve_scenario(SCENARIO, "py_smoke"))
        assert resolved["simulation"]["paths"] == 1000
        h = mf_fbsde.scenario_hash(SCENARIO, "py_smoke")
        assert len(h) == 64
        assert h != mf_fbsde.scenario_hash(SCENARIO.replace("steps = 16", "steps = 32"), "py_smoke")

        try:
            mf_fbsde.resolve_scenario("[problem]\nfamily = 'nope'\n")
        except ValueError as e:
            print("config error surfaces as ValueError:", e)
        else:
            raise AssertionError("unknown family accepted")

        report = json.loads(mf_fbsde.run_scenario(SCENARIO, str(Path(tmp) / "runs"), "py_smoke"))
        assert report["scenario_hash"] == h
        for name in report["artifacts"]:
            assert (Path(tmp) / "runs" / "out" / "py_smoke" / name).is_file(), name
        print("run:", "pass" if report["pass"] else "fail", [c["name"] for c in report["checks"]])

        growth = json.loads(mf_fbsde.critical_time(2.0, 1.0, 1.0, [0.2, 0.3]))
        assert math.isclose(growth["t_star"], 0.25)

        ode = "[problem]\nfamily = 'ode_linear'\n[simulation]\npaths = 100\n"
        st = json.loads(mf_fbsde.study(ode, "dt=1/8,1/16,1/32,1/64", "ode"))
        print("dt slope on ode_linear: %.3f" % st["slope"]["slope"])
        assert 0.7 <= st["slope"]["slope"] <= 1.3
    print("smoke test passed")


if __name__ == "__main__":
    main()
