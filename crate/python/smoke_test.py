"""Smoke test for the `rlm` extension module.

Run after `maturin develop -m crates/py/Cargo.toml` (or `pip install --no-build-isolation ./crates/py`).
When the module is not installed, builds it with cargo and imports the
shared library from a temporary directory.
"""

import math
import os
import pathlib
import shutil
import subprocess
import sys
import tempfile


def import_rlm():
    try:
        import rlm  # noqa: F401

        return rlm
    except ImportError:
        pass
    root = pathlib.Path(__file__).resolve().parents[1]
    subprocess.run(
        ["cargo", "build", "--release", "-p", "rlm-py", "--features", "extension-module"],
        cwd=root,
        check=True,
    )
    tmp = tempfile.mkdtemp()
    shutil.copy(root / "target" / "release" / "librlm.so", os.path.join(tmp, "rlm.so"))
    sys.path.insert(0, tmp)
    import rlm

    return rlm


def main():
    rlm = import_rlm()

    assert rlm.vocab_size() == 312
    toks = rlm.encode_y(72.5, mantissa_digits=3)
    assert toks == ["<+>", "<7>", "<2>", "<5>", "<E-1>"], toks
    assert rlm.decode_y(toks, mantissa_digits=3) == 72.5

    rows = rlm.generate_dataset(1, "JUN", "low_noise", 50, seed=3)
    assert len(rows) == 50
    assert {"x", "y", "split", "mean", "variance", "task_id"} <= rows[0].keys()
    xs = [r["x"] for r in rows]
    ys = [r["y"] for r in rows]
    assert rlm.project_text(xs[0], "null") == ""
    tv_null = rlm.total_variance(xs, ys, "null")
    assert tv_null > 0
    assert rlm.total_variance(xs, ys, "full") <= tv_null
    assert rlm.mse([1.0, 2.0], [1.0, 4.0]) == 2.0
    assert abs(rlm.spearman([1, 2, 3], [10, 20, 30]) - 1.0) < 1e-12
    assert rlm.r2_ev(1.0, 4.0) == 0.75

    model = rlm.Model(embed_dim=16, head_dim=4, mlp_dim=32, max_encoder_len=48, seed=1)
    assert model.parameter_count > 0 and model.step == 0
    out = model.sample(xs[0], num_samples=8, seed=2)
    assert len(out["samples"]) + out["filtered_count"] == 8
    assert math.isfinite(model.nll(xs[0], ys[0]))
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck")
        model.save(path)
        again = rlm.Model.load(path)
        assert again.nll(xs[0], ys[0]) == model.nll(xs[0], ys[0])
        assert again.greedy(xs[0]) == model.greedy(xs[0])

    try:
        rlm.run_cli(["no-such-command"])
    except ValueError:
        pass
    else:
        raise AssertionError("bad CLI command accepted")

    print("rlm smoke test OK")


if __name__ == "__main__":
    main()
