#!/usr/bin/env python3
"""Smoke test for the ctxedit_py extension module.

Builds nothing itself: expects `cargo build -p ctxedit-py` (or `--release`)
to have produced the cdylib, links it into a temp directory under the name
Python expects, and exercises the main surface.
"""

import math
import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parents[1]


def locate_library() -> pathlib.Path:
    names = ["libctxedit_py.so", "ctxedit_py.dll", "libctxedit_py.dylib"]
    for profile in ("release", "debug"):
        for name in names:
            cand = ROOT / "target" / profile / name
            if cand.exists():
                return cand
    sys.exit("build the extension first: cargo build -p ctxedit-py")


def main() -> None:
    lib = locate_library()
    stage = pathlib.Path(tempfile.mkdtemp(prefix="ctxedit_py_"))
    shutil.copy2(lib, stage / "ctxedit_py.so")
    sys.path.insert(0, str(stage))

    import ctxedit_py as m

    # Vocabulary and tokenizer.
    words = m.vocabulary()
    assert "<sep>" in words and "recolor" in words
    ids = m.tokenize("remove the red box")
    assert len(ids) == 4
    try:
        m.tokenize("remove the dragon")
    except RuntimeError as e:
        assert "dragon" in str(e)
    else:
        raise AssertionError("out-of-vocabulary word must raise")

    # Softmax sanity.
    probs = m.softmax([1.0, 2.0, 3.0])
    assert abs(sum(probs) - 1.0) < 1e-12
    assert all(p > 0 for p in probs)

    # One generated episode, edited by an untrained pipeline.
    with tempfile.TemporaryDirectory() as td:
        ep_path = pathlib.Path(td) / "ep.episode"
        texts, applicable = m.generate_episode(str(ep_path), seed=5)
        assert len(texts) == len(applicable) == 3

        pipe = m.Pipeline.seeded(0)
        r1 = pipe.edit_episode(str(ep_path), seed=1)
        r2 = pipe.edit_episode(str(ep_path), seed=1)
        assert r1.labels == r2.labels
        assert r1.edited_ppm() == r2.edited_ppm(), "editing must be deterministic"
        assert len(r1.labels) == len(texts)
        assert len(r1.masks_pgm()) == len(texts)
        assert r1.edited_ppm().startswith(b"P6\n")

        # Round-trip through a checkpoint.
        ck = pathlib.Path(td) / "pipe.ckpt"
        pipe.save(str(ck), "main")
        again = m.Pipeline.load(str(ck))
        r3 = again.edit_episode(str(ep_path), seed=1)
        assert r3.edited_ppm() == r1.edited_ppm()

    print("smoke test passed")


if __name__ == "__main__":
    main()
