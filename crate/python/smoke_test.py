"""Smoke test for the maltml Python extension.

Build it first:

    cargo build --release -p maltml-py --features extension-module

then run `python3 python/smoke_test.py`. The script imports an installed
`maltml` if there is one, otherwise the freshly built library from target/.
"""

import importlib.util
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import maltml

        return maltml
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libmaltml.so"
        if lib.exists():
            spec = importlib.util.spec_from_file_location("maltml", lib)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
            return module
    sys.exit("maltml extension not found; build it with cargo first")


def main():
    m = load()

    # d^3/dx^3 of x^4 at x = 2 is 24 x = 48.
    assert m.poly_derivative([0, 0, 0, 0, 1], 2.0, 3) == 48.0
    assert m.poly_derivative([1, 2, 3], 0.5, 1) == 5.0

    checks = m.gradcheck(seed=1)
    assert all(passed for *_, passed in checks), checks

    cfg = m.TrainConfig("maltml", seed=3, outer_steps=4, family_batch=2, hidden="16,16", eval_every=0)
    back = m.TrainConfig.from_text(cfg.to_text())
    assert back.hash() == cfg.hash()
    try:
        m.TrainConfig("maltml", beta=-1)
    except ValueError:
        pass
    else:
        raise AssertionError("negative beta accepted")

    trainer = m.Trainer(cfg)
    losses = trainer.run(4)
    assert trainer.steps_done == 4 and all(l is not None and math.isfinite(l) for l in losses)
    params = trainer.params()
    assert len(params) == len(params.entries()) == 16 + 16 + 16 * 16 + 16 + 16 + 1
    assert m.Params.from_text(params.to_text()).entries() == params.entries()
    assert len(trainer.predict([-1.0, 0.0, 1.0])) == 3

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = pathlib.Path(tmp) / "checkpoint.txt"
        trainer.save(str(ckpt))
        reports = m.evaluate(str(ckpt), episodes=3, seed=0, r_eval=2)
        assert [r.label for r in reports] == ["maltml"]
        curve = reports[0].curve_means()
        assert len(curve) == 3 and all(math.isfinite(v) for v in curve)
        plot = m.plotdata(reports)
        assert plot.splitlines()[0] == "algorithm,step,mean_mse,ci_low,ci_high"
        assert len(plot.splitlines()) == 1 + 4

    print("python smoke test ok")


if __name__ == "__main__":
    main()
