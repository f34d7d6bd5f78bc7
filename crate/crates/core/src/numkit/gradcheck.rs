//! Central finite-difference gradient checking.

/// Outcome of a gradient check over a set of named tensors.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures == 0
    }
}

/// Compares analytic gradients against central differences.
///
/// `analytic` holds (tensor name, gradient values). For every element the
/// checker calls `loss_at(tensor_index, elem_index, delta)`, which must
/// evaluate the scalar loss with that single parameter temporarily shifted by
/// `delta` (the checker probes `+h` and `-h`). An element passes when the
/// relative error `|a - fd| / max(|a|, |fd|)` is at most `tol`, or when both
/// magnitudes fall below 1e-6 (flat directions measure as numeric noise).
pub fn check_gradients(
    analytic: &[(String, Vec<f64>)],
    mut loss_at: impl FnMut(usize, usize, f64) -> f64,
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        for (ei, &a) in grad.iter().enumerate() {
            let plus = loss_at(ti, ei, h);
            let minus = loss_at(ti, ei, -h);
            let fd = (plus - minus) / (2.0 * h);
            report.checked += 1;
            let scale = a.abs().max(fd.abs());
            if scale < 1e-6 {
                continue;
            }
            let rel = (a - fd).abs() / scale;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), ei));
            }
            if rel > tol {
                report.failures += 1;
            }
        }
    }
    report
}
