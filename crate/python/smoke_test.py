"""Smoke test for the invjoint Python extension.

Build and install first, for example:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/invjoint-*.whl
"""

import json
import os
import sys
import tempfile

import invjoint


def main() -> int:
    config = invjoint.default_config().replace("epochs = 50", "epochs = 4")
    assert "epochs = 4" in config

    data = invjoint.generate(config, seed=3)
    assert data.seed == 3 and data.classes == 10
    assert data.n_train == data.n_test == 160
    assert len(data.test_x3()) == data.n_test

    with tempfile.TemporaryDirectory() as tmp:
        for fmt, name in (("binary", "data.bin"), ("text", "data.txt")):
            path = os.path.join(tmp, name)
            data.save(path, fmt)
            again = invjoint.Dataset.load(path)
            assert again.test_labels() == data.test_labels()

        ck = invjoint.train(data, config, seed=3)
        records = [json.loads(line) for line in ck.metrics_jsonl.splitlines()[1:]]
        assert len(records) == 4 == ck.epoch

        result = ck.evaluate(data)
        assert result["acc_joint"] == records[-1]["acc_joint"]
        far = ck.evaluate(data, phi=1e12, fusion="mul")
        assert far["pred_joint"] == far["pred3"]

        path = os.path.join(tmp, "run.ckpt")
        ck.save(path)
        loaded = invjoint.Checkpoint.load(path)
        assert loaded.evaluate(data) == result
        assert loaded.gate_weights() == ck.gate_weights()

    csv = invjoint.ablate(
        'seeds = [1]\n[[cell]]\nname = "full"\n[[cell]]\nname = "add"\nfusion = "add"\n', config
    )
    lines = csv.strip().splitlines()
    assert len(lines) == 3 and lines[2].endswith(",true")

    checks = invjoint.gradcheck(configs=3)
    assert checks and all(passed for *_, passed in checks)

    try:
        invjoint.generate("[optim]\nepochs = 0\n")
    except ValueError as e:
        assert "epochs" in str(e)
    else:
        raise AssertionError("invalid config accepted")
    try:
        invjoint.Dataset.load("/nonexistent/data.bin")
    except OSError:
        pass
    else:
        raise AssertionError("missing file accepted")

    print(f"ok: {data!r}, acc_joint {result['acc_joint']:.4f}, {len(checks)} gradient checks")
    return 0


if __name__ == "__main__":
    sys.exit(main())
