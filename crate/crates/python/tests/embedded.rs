use pyo3::ffi::c_str;
use pyo3::prelude::*;

use ar1mcmc_py::ar1mcmc_py;

#[test]
fn module_runs_inside_embedded_interpreter() {
    pyo3::append_to_inittab!(ar1mcmc_py);
    Python::initialize();
    Python::attach(|py| {
        py.run(
            c_str!(
                r#"
import ar1mcmc_py as m
t = m.Target([1.0, 2.0, 4.0])
p = m.Proposal.pcn(t, 0.3)
assert m.predict_acceptance(t, p)["acceptance"] == 1.0
assert m.sample(t, p, 200, ["axis:1"], seed=2)["accepts"] == 200
q = m.Proposal.langevin(t, 0.25, 0.2, [1.0, 0.5, 0.25])
assert q.family == "langevin"
assert abs(q.stationary_precision[0] - 1.0 * (1 - 0.25 * 0.1 * 1.0)) < 1e-12
assert m.Proposal.pcn(t, 0.3).family == "pcn"
try:
    m.Proposal.hmc(t, 1.5, 3)
    raise SystemExit("unstable step accepted")
except ValueError:
    pass
"#
            ),
            None,
            None,
        )
        .unwrap();
    });
}
