//! Finite-difference gradient oracle.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`
    Central,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, fourth-order accurate,
    /// which tolerates a larger `h` and so less cancellation on small gradients.
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub h: f64,
    pub tol: f64,
    pub stencil: Stencil,
    /// Check at most this many entries per parameter, sampled with `seed`.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            stencil: Stencil::Central,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdEntry {
    pub param: String,
    pub index: usize,
    pub autodiff: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Frozen or mask-0 entries, which autodiff deliberately leaves at zero.
    pub skipped: usize,
    /// Entries whose stencil kept crossing a kink after every step reduction.
    pub nonsmooth: usize,
    /// Entries where autodiff and the estimate both sit below the stencil's
    /// roundoff floor, so agree to within what the difference can resolve.
    pub below_noise: usize,
    /// Loss evaluations spent on finite differences.
    pub evaluations: usize,
    pub worst: Option<FdEntry>,
    pub failures: Vec<FdEntry>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn merge(&mut self, other: FdReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.nonsmooth += other.nonsmooth;
        self.below_noise += other.below_noise;
        self.evaluations += other.evaluations;
        self.failures.extend(other.failures);
    }
}

pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(1e-12)
}

/// Step halvings tried when a stencil point lands on another smooth piece.
pub const MAX_HALVINGS: u32 = 10;

/// Compare autodiff gradients of the scalar built by `f` against finite
/// differences, entry by entry over `params`. When a stencil point changes the
/// tape's [`Tape::branch_pattern`] the step is halved; entries that never
/// settle are counted in `nonsmooth` instead of compared.
pub fn finite_difference_check<T, F>(
    store: &mut ParamStore<T>,
    params: &[ParamId],
    mut f: F,
    opts: &FdOptions,
) -> Result<FdReport>
where
    T: Real,
    F: FnMut(&mut Tape<T>, &mut ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let (base, base_loss) = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        tape.backward(loss, store)?;
        (tape.branch_pattern(), tape.value(loss).item().f64())
    };
    let mut eval = |store: &mut ParamStore<T>| -> Result<(f64, bool)> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        Ok((tape.value(out).item().f64(), tape.branch_pattern() == base))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = FdReport::default();
    for &id in params {
        let p = store.get(id);
        let learnable: Vec<usize> = (0..p.value.numel()).filter(|&i| p.is_learnable(i)).collect();
        report.skipped += p.value.numel() - learnable.len();
        let picked: Vec<usize> = match opts.max_entries {
            Some(k) if k < learnable.len() => {
                let mut sel: Vec<usize> = index::sample(&mut rng, learnable.len(), k)
                    .into_iter()
                    .map(|j| learnable[j])
                    .collect();
                sel.sort_unstable();
                sel
            }
            _ => learnable,
        };
        let grads: Vec<f64> = match &p.grad {
            Some(g) => picked.iter().map(|&i| g.data()[i].f64()).collect(),
            None => vec![0.0; picked.len()],
        };
        let name = p.name.clone();
        for (&i, &autodiff) in picked.iter().zip(&grads) {
            let orig = store.get(id).value.data()[i];
            let mut numeric = None;
            let mut step = opts.h;
            let (ks, ws): (&[f64], &[f64]) = match opts.stencil {
                Stencil::Central => (&[1.0, -1.0], &[0.5, -0.5]),
                Stencil::FivePoint => (&[2.0, -2.0, 1.0, -1.0], &[-1.0 / 12.0, 1.0 / 12.0, 8.0 / 12.0, -8.0 / 12.0]),
            };
            'halve: for _ in 0..=MAX_HALVINGS {
                let mut acc = 0.0;
                for (&k, &w) in ks.iter().zip(ws) {
                    store.get_mut(id).value.data_mut()[i] = orig + T::c(step * k);
                    let (v, same) = eval(store)?;
                    report.evaluations += 1;
                    if !same {
                        step /= 2.0;
                        continue 'halve;
                    }
                    acc += w * v;
                }
                numeric = Some((acc / step, step));
                break;
            }
            store.get_mut(id).value.data_mut()[i] = orig;
            let Some((numeric, step)) = numeric else {
                report.nonsmooth += 1;
                continue;
            };
            let floor = 100.0 * T::epsilon().f64() * base_loss.abs().max(1.0) / step;
            if autodiff.abs() < floor && numeric.abs() < floor {
                report.below_noise += 1;
                report.checked += 1;
                continue;
            }
            let rel_error = relative_error(autodiff, numeric);
            let entry = FdEntry {
                param: name.clone(),
                index: i,
                autodiff,
                numeric,
                rel_error,
            };
            report.checked += 1;
            if rel_error > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel_error);
                report.worst = Some(entry.clone());
            }
            if !(rel_error < opts.tol) {
                report.failures.push(entry);
            }
        }
    }
    store.zero_grad();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::Parameter;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_matches_analytic_gradient() {
        // f(θ) = θᵀAθ with fixed symmetric A; ∇f = 2Aθ
        let mut store = ParamStore::<f64>::new();
        let theta = Tensor::from_vec([1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap();
        let id = store.add(Parameter::new("theta", theta));
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let report = finite_difference_check(
            &mut store,
            &[id],
            |tape, store| {
                let t = tape.param(store, id);
                // Σ_rc A_rc θ_r θ_c
                let mut terms = Vec::new();
                let mut weights = Vec::new();
                for r in 0..3 {
                    for c in 0..3 {
                        let er = Tensor::from_fn([1, 1, 1, 3], |[_, _, _, w]| if w == r { 1.0 } else { 0.0 });
                        let ec = Tensor::from_fn([1, 1, 1, 3], |[_, _, _, w]| if w == c { 1.0 } else { 0.0 });
                        let xr = tape.dot(t, &er)?;
                        let xc = tape.dot(t, &ec)?;
                        terms.push(tape.mul(xr, xc)?);
                        weights.push(a[r][c]);
                    }
                }
                tape.weighted_sum(&terms, &weights)
            },
            &FdOptions {
                h: 1e-5,
                tol: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn masked_entries_are_excluded() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(
            Parameter::new("k", Tensor::from_vec([1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap())
                .with_mask(vec![true, false, true]),
        );
        let report = finite_difference_check(
            &mut store,
            &[id],
            |tape, store| {
                let t = tape.param(store, id);
                let s = tape.square(t);
                Ok(tape.sum(s))
            },
            &FdOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert_eq!(report.skipped, 1);
        assert!(report.passed());
    }

    #[test]
    fn five_point_stencil_is_more_accurate() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add(Parameter::new("x", Tensor::from_vec([1, 1, 1, 3], vec![-1.3, 0.4, 2.2]).unwrap()));
        let mut run = |stencil| {
            finite_difference_check(
                &mut store,
                &[id],
                |tape, store| {
                    let t = tape.param(store, id);
                    let s = tape.sigmoid(t);
                    Ok(tape.sum(s))
                },
                &FdOptions {
                    h: 1e-2,
                    stencil,
                    ..Default::default()
                },
            )
            .unwrap()
            .max_rel_error
        };
        let central = run(Stencil::Central);
        let five = run(Stencil::FivePoint);
        assert!(five < 1e-7, "{five}");
        assert!(five < central / 100.0, "{five} vs {central}");
    }
}
