"""Smoke test for the noisyrollout Python extension.

Build first:

    cargo build --release -p noisyrollout-py --features extension-module
    python3 python/smoke_test.py

or install with `maturin develop -m crates/py/Cargo.toml` and run the script.
"""

import importlib
import math
import os
import shutil
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_module():
    try:
        return importlib.import_module("noisyrollout")
    except ImportError:
        pass
    candidates = [Path(os.environ["NR_EXTENSION"])] if "NR_EXTENSION" in os.environ else []
    for profile in ("release", "debug"):
        candidates.append(ROOT / "target" / profile / "libnoisyrollout_py.so")
        candidates.append(ROOT / "target" / profile / "libnoisyrollout_py.dylib")
    lib = next((c for c in candidates if c.exists()), None)
    if lib is None:
        sys.exit("extension not built; run: cargo build --release -p noisyrollout-py --features extension-module")
    staging = Path(tempfile.mkdtemp(prefix="nr-py-"))
    suffix = sysconfig.get_config_var("EXT_SUFFIX") or ".so"
    shutil.copy(lib, staging / f"noisyrollout{suffix}")
    sys.path.insert(0, str(staging))
    return importlib.import_module("noisyrollout")


def main():
    nr = import_module()

    s = nr.Schedule.sigmoid(500.0, 40.0, 30.0)
    assert s(40, 60) == 250.0
    assert abs(nr.Schedule.exponential(500.0, 0.98)(60, 60) - 490.0) < 1e-9
    assert nr.Schedule.power()(60, 60) == 0.0

    adv = nr.advantages([1.0, 0.0, 0.0, 1.0])
    assert all(abs(a - b) < 1e-12 for a, b in zip(adv, [1.0, -1.0, -1.0, 1.0]))
    assert nr.advantages([0.5] * 6) == [0.0] * 6

    inst = nr.sample_instance(3)
    img = inst.image
    assert (img.width, img.height) == (32, 32)
    assert inst.reward(nr.encode_answer(inst.truth)) == 1.0
    assert nr.parse_answer(nr.encode_answer(42)) == 42

    assert img.distort("gaussian", 0.0).pixels == img.pixels
    psnrs = [img.psnr(img.distort("gaussian", k, seed=1)) for k in (100, 300, 500, 900)]
    assert all(a > b for a, b in zip(psnrs, psnrs[1:])), psnrs
    rot = img.distort("rotate", 500.0)
    assert abs(rot.total_intensity() - img.total_intensity()) / img.total_intensity() < 0.01
    try:
        img.distort("sepia", 1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown kind accepted")

    back = nr.Raster.from_pgm(img.to_pgm())
    assert max(abs(a - b) for a, b in zip(back.pixels, img.pixels)) <= 0.5 / 255 + 1e-12

    policy = nr.Policy(seed=1)
    tokens, logprobs = policy.sample(img, inst.query_shape, 1.0, 7)
    again = policy.logprobs(img, inst.query_shape, tokens)
    assert all(abs(a - b) < 1e-12 for a, b in zip(logprobs, again))
    assert len(policy.greedy(img, inst.query_shape)) >= 1

    assert nr.diversity([[1, 2, 3], [1, 2, 3]]) == 0.0
    e = nr.embed([1, 2, 3])
    assert abs(math.sqrt(sum(x * x for x in e)) - 1.0) < 1e-12
    assert nr.projection_ratio([1.0, 0.0], [2.0, 0.0]) == 0.5

    fit = dict(nr.bt_fit([("a", "b", "first")] * 7 + [("a", "b", "second")] * 3))
    p = 1.0 / (1.0 + math.exp(fit["b"] - fit["a"]))
    assert abs(p - 0.7) < 1e-9

    with tempfile.TemporaryDirectory() as d:
        summary = nr.train(d, overrides=["train.t_max=3", "eval.n_eval=20"])
        assert "final_eval" in summary
        trained = nr.Policy.load(str(Path(d) / "step-3.ckpt"))
        assert trained.num_parameters == policy.num_parameters
        acc = trained.evaluate(n_eval=20)
        assert 0.0 <= acc <= 1.0

    print("python smoke test ok")


if __name__ == "__main__":
    main()
