use crate::nn::Parameterized;
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Entries probed per parameter tensor; evenly strided when the tensor is larger.
    pub max_entries: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Extra probes at `h/10`, `h/100`, ...; the closest estimate is kept.
    pub refinements: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_entries: 64,
            floor: 1e-6,
            refinements: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckEntry {
    pub parameter: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.relative_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the gradients written by `backward` against central differences
/// of `loss`. `backward` must leave dL/dθ in every parameter's `grad`
/// (it is called once on zeroed gradients). A ReLU or max kink inside the
/// stencil spoils a difference, so each entry is retried with smaller steps
/// and the estimate closest to the analytic value is reported.
pub fn gradcheck<T, M, B, L>(
    model: &mut M,
    mut backward: B,
    mut loss: L,
    opts: GradcheckOptions,
) -> GradcheckReport
where
    T: Real,
    M: Parameterized<T>,
    B: FnMut(&mut M) -> f64,
    L: FnMut(&M) -> f64,
{
    model.zero_grad();
    backward(model);
    let analytic: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| p.grad.data().iter().map(|g| g.f64()).collect())
        .collect();
    let mut report = GradcheckReport::default();
    let count = analytic.len();
    for k in 0..count {
        let len = analytic[k].len();
        if len == 0 {
            continue;
        }
        let step = len.div_ceil(opts.max_entries.max(1)).max(1);
        for idx in (0..len).step_by(step) {
            let original = model.parameters()[k].value.data()[idx];
            let mut central = |h: f64| {
                model.parameters_mut()[k].value.data_mut()[idx] = T::of(original.f64() + h);
                let plus = loss(model);
                model.parameters_mut()[k].value.data_mut()[idx] = T::of(original.f64() - h);
                let minus = loss(model);
                model.parameters_mut()[k].value.data_mut()[idx] = original;
                (plus - minus) / (2.0 * h)
            };
            let a = analytic[k][idx];
            let (mut numeric, mut err) = (0.0, f64::INFINITY);
            let mut h = opts.h;
            for _ in 0..=opts.refinements {
                let n = central(h);
                let e = relative_error(a, n, opts.floor);
                if e < err {
                    (numeric, err) = (n, e);
                }
                h *= 0.1;
            }
            report.entries.push(GradcheckEntry {
                parameter: model.parameters()[k].name.clone(),
                index: idx,
                analytic: a,
                numeric,
                relative_error: err,
            });
        }
    }
    report
}
