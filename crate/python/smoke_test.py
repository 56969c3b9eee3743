"""Smoke test for the indirec extension module.

Build and run from the repository root:

    cargo build --release -p indirec-py --features extension-module
    cp target/release/libindirec.so python/indirec.so
    python3 python/smoke_test.py
"""

import math
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import indirec  # noqa: E402


def main() -> None:
    assert indirec.segment([1, 2, 3, 4, 5], 2, 3) == [[1, 2], [1, 2, 3], [2, 3, 4], [3, 4, 5]]

    protos, assign, objective = indirec.kmeans([[0.0], [1.0], [10.0], [11.0]], 2, seed=1)
    assert sorted(p[0] for p in protos) == [0.5, 10.5]
    assert assign[0] == assign[1] != assign[2] == assign[3]
    assert math.isclose(objective, 1.0)

    data = indirec.Dataset.synthetic("two-intent", seed=3, users=40)
    assert data.num_items == 30 and data.num_users == 40
    assert set(data.intents) == {0, 1}

    cfg = indirec.TrainConfig(dim=8, max_len=10, num_layers=1, num_clusters=2, diffusion_steps=4, epochs=2, batch_size=64)
    cfg.set("omega", "2")
    assert "num_clusters = 2" in cfg.to_text()

    trainer = indirec.Trainer(cfg, data)
    history = trainer.fit()
    assert [h["epoch"] for h in history] == [1.0, 2.0]
    assert all(math.isfinite(h["loss"]) and "cl" in h and "diff" in h for h in history)

    with tempfile.TemporaryDirectory() as tmp:
        trainer.save_best(tmp)
        model = indirec.Model.load(tmp)
        report = model.evaluate(data, "test")
        assert report == trainer.best_model().evaluate(data, "test")
        assert 0.0 <= report["ND@20"] <= report["HR@20"] <= 1.0

        seqs = [s[:-1] for s in data.train[:3]]
        reps = model.represent(seqs)
        assert len(reps) == 3 and len(reps[0]) == model.dim
        assert len(model.score(seqs)[0]) == data.num_items
        views = model.sample_views(seqs, reps, -1.0, seed=5)
        assert [len(v) for v in views] == [min(len(s), 10) for s in seqs]

    try:
        indirec.TrainConfig(dim=10, num_heads=3)
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    print("python smoke test: OK")


if __name__ == "__main__":
    main()
