//! Drives the module from an embedded interpreter.

use pyo3::ffi::c_str;
use pyo3::prelude::*;

use modngd_py::modngd_py;

#[test]
fn module_round_trip() {
    pyo3::append_to_inittab!(modngd_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import modngd_py as m
s = m.make_splits(1.0, 0, n_train=12, n_val=6, n_test=6)
net = m.Mlp([256], seed=1)
assert net.param_count == 3 * 256 + 1
spec = m.decompose(net, s.train.inputs)
assert spec.rank + spec.dropped == 12
crit = m.mode_criterion(spec, net, s.train, s.val)
assert abs(crit["risk"] - crit["r1"] - crit["r2"]) < 1e-12
recs = m.train(s, "ngd", hidden_widths=[128], epochs=3)
assert [r["n_preserved"] == r["n_modes"] for r in recs] == [True] * 3
try:
    m.train(s, "adam")
    raise AssertionError("expected ValueError")
except ValueError as e:
    assert "adam" in str(e)
"#
            ),
            None,
            None,
        )
        .unwrap();
    });
}
