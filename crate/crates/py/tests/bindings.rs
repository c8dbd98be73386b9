use pyo3::prelude::*;
use pyo3::ffi::c_str;

use sentemb_py::sentemb_py;

#[test]
fn module_trains_and_round_trips() {
    pyo3::append_to_inittab!(sentemb_py);
    Python::initialize();
    Python::attach(|py| {
        let code = c_str!(
            r#"
import tempfile
import sentemb_py as se

table, pairs, scored = se.synthetic_corpus(seed=2016, pairs=100)
enc = se.Encoder("average", table.dim)
before = se.evaluate(enc, table, scored)["pearson"]
losses = se.train(enc, table, pairs, {"epochs": "3"})
after = se.evaluate(enc, table, scored)["pearson"]
assert len(losses) == 3
assert after > before, (before, after)

model = se.Model(enc, table)
with tempfile.TemporaryDirectory() as d:
    model.save(d)
    assert se.Model.load(d).encode("t0_0 t1_1") == model.encode("t0_0 t1_1")

try:
    se.target_distribution(6.0, 5)
    raise AssertionError("expected ValueError")
except ValueError:
    pass
"#
        );
        py.run(code, None, None).unwrap();
    });
}
