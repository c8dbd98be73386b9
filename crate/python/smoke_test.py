"""Smoke test for the sentemb_py extension.

Build with `maturin develop -m crates/py/Cargo.toml`, or copy
target/release/libsentemb_py.so to sentemb_py.so on PYTHONPATH.
"""

import math
import sys
import tempfile

import sentemb_py as se


def main():
    table, pairs, scored = se.synthetic_corpus(seed=2016, pairs=200)
    assert table.dim == 10 and len(pairs) == 200

    enc = se.Encoder("average", table.dim)
    before = se.evaluate(enc, table, scored)["pearson"]
    losses = se.train(enc, table, pairs, {"epochs": "5", "batch_size": "25", "delta": "0.4"})
    after = se.evaluate(enc, table, scored)["pearson"]
    print(f"losses {[round(x, 4) for x in losses]}")
    print(f"pearson {before:.3f} -> {after:.3f}")
    assert len(losses) == 5 and all(math.isfinite(x) for x in losses)
    assert after > before

    lstm = se.Encoder("lstm", table.dim, seed=3)
    v = lstm.encode(table, pairs[0][0])
    assert len(v) == table.dim

    model = se.Model(enc, table)
    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        back = se.Model.load(d)
        text = " ".join(pairs[0][0])
        assert back.encode(text) == model.encode(text)

    p = se.target_distribution(3.4, 5)
    assert all(abs(a - b) < 1e-12 for a, b in zip(p, [0, 0, 0.6, 0.4, 0]))
    assert abs(se.cosine([1.0, 0.0], [1.0, 1.0]) - 1 / math.sqrt(2)) < 1e-12
    print(se.nearest_neighbors(table, table.tokens()[0], k=3))

    try:
        se.Encoder("transformer", 4)
    except ValueError:
        pass
    else:
        raise AssertionError("expected ValueError")
    print("ok")


if __name__ == "__main__":
    sys.exit(main())
