//! Central finite-difference oracle for analytic gradients.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ReduceKind, Tensor, TensorError, Var};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged by absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub worst: Option<WorstCoordinate>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {:<28} coords={:<6} max_rel_err={:.3e} (tol {:.0e})",
            self.name, self.coordinates, self.max_rel_error, self.tol
        )?;
        if let (false, Some(w)) = (self.passed(), &self.worst) {
            write!(
                f,
                " worst: input {} index {} analytic={:.6e} numeric={:.6e}",
                w.input, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}


pub(crate) fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values kept at least `gap` away from zero, for ops with a kink there.
pub(crate) fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an arbitrary output against a fixed random weighting so that
/// every output coordinate influences the checked scalar.
pub(crate) fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
    let w = rand_t(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

pub type OpBuilder = fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>;

/// (name, input shapes, kinked-at-zero, builder)
pub fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, bool, OpBuilder)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 2]], false, |g, v| g.transpose(v[0])),
        ("add_bcast", vec![vec![3, 4], vec![4]], false, |g, v| g.add(v[0], v[1])),
        ("sub_bcast", vec![vec![3, 4], vec![4]], false, |g, v| g.sub(v[0], v[1])),
        ("mul_bcast", vec![vec![3, 4], vec![4]], false, |g, v| g.mul(v[0], v[1])),
        ("mul_scalar", vec![vec![3, 4], vec![1]], false, |g, v| g.mul(v[0], v[1])),
        ("scale_shift", vec![vec![5]], false, |g, v| Ok(g.scale_shift(v[0], 1.7, -0.2))),
        ("relu", vec![vec![6]], true, |g, v| Ok(g.relu(v[0]))),
        ("gelu", vec![vec![6]], false, |g, v| Ok(g.gelu(v[0]))),
        ("abs", vec![vec![6]], true, |g, v| Ok(g.abs(v[0]))),
        ("softmax_last", vec![vec![3, 4]], false, |g, v| g.softmax(v[0], 1)),
        ("softmax_first", vec![vec![3, 4]], false, |g, v| g.softmax(v[0], 0)),
        ("weighted_softmax", vec![vec![3, 4]], false, |g, v| {
            let w = g.constant(Tensor::from_f64(vec![4], &[1.0, 0.0, 0.5, 2.0])?);
            g.weighted_softmax(v[0], w)
        }),
        ("weighted_softmax_w", vec![vec![3, 4], vec![4]], false, |g, v| {
            // keep weights positive by squaring an offset
            let off = g.scale_shift(v[1], 0.5, 1.0);
            let w = g.mul(off, off)?;
            g.weighted_softmax(v[0], w)
        }),
        ("layernorm", vec![vec![2, 8], vec![8], vec![8]], false, |g, v| {
            g.layernorm(v[0], Some(v[1]), Some(v[2]), 1e-6)
        }),
        ("layernorm_plain", vec![vec![3, 5]], false, |g, v| g.layernorm(v[0], None, None, 1e-6)),
        ("reduce_sum", vec![vec![3, 4]], false, |g, v| g.reduce(v[0], ReduceKind::Sum, 1)),
        ("reduce_mean", vec![vec![3, 4]], false, |g, v| g.reduce(v[0], ReduceKind::Mean, 0)),
        ("reduce_max", vec![vec![3, 4]], true, |g, v| g.reduce(v[0], ReduceKind::Max, 0)),
        ("row_l2", vec![vec![3, 4], vec![3, 4]], false, |g, v| g.row_l2_distance(v[0], v[1])),
        ("normalize_rows", vec![vec![3, 4]], false, |g, v| g.normalize_rows(v[0], 1e-12)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], false, |g, v| g.concat_rows(&[v[0], v[1]])),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], false, |g, v| g.concat_cols(&[v[0], v[1]])),
        ("select_rows", vec![vec![4, 3]], false, |g, v| g.select_rows(v[0], &[3, 0, 3])),
        ("slice_cols", vec![vec![3, 5]], false, |g, v| g.slice_cols(v[0], 1, 4)),
        ("stack", vec![vec![2, 3], vec![2, 3]], false, |g, v| g.stack(&[v[0], v[1]])),
        ("mul_rows", vec![vec![3, 4], vec![3]], false, |g, v| g.mul_rows(v[0], v[1])),
        ("reshape", vec![vec![3, 4]], false, |g, v| g.reshape(v[0], vec![2, 6])),
        ("cross_entropy", vec![vec![3, 5]], false, |g, v| g.cross_entropy(v[0], &[0, 4, 2])),
    ]
}

/// Checks every op in [`op_cases`] over `seeds`, returning the worst report
/// per op. Inputs of ops with a kink at zero stay away from it.
pub fn op_suite(seeds: std::ops::Range<u64>, h: f64, tol: f64) -> Vec<GradCheckReport> {
    op_cases()
        .into_iter()
        .map(|(name, shapes, kinked, build)| {
            let mut worst: Option<GradCheckReport> = None;
            for seed in seeds.clone() {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + name.len() as u64);
                let inputs: Vec<Tensor<f64>> = shapes
                    .iter()
                    .map(|s| if kinked { rand_away_from_zero(&mut rng, s, 1e-2) } else { rand_t(&mut rng, s) })
                    .collect();
                let r = grad_check(
                    name,
                    |g, v| {
                        let y = build(g, v)?;
                        contract(g, y, seed)
                    },
                    &inputs,
                    h,
                    tol,
                )
                .expect("op cases are well-formed");
                if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            let mut w = worst.expect("non-empty seed range");
            w.coordinates *= seeds.clone().count();
            w
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate, over every input.
/// `f` may fail with any error type that tensor errors convert into.
pub fn grad_check<F, E>(name: &str, f: F, inputs: &[Tensor<f64>], h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |xs: &[Tensor<f64>]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut report = GradCheckReport {
        name: name.to_string(),
        coordinates: 0,
        max_rel_error: 0.0,
        worst: None,
        tol,
    };
    let mut xs = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            xs[ii].data_mut()[j] = orig + h;
            let fp = eval(&xs)?;
            xs[ii].data_mut()[j] = orig - h;
            let fm = eval(&xs)?;
            xs[ii].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii].data()[j];
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstCoordinate {
                    input: ii,
                    index: j,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
