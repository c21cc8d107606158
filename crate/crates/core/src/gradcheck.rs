//! Central finite-difference gradient checks.
//!
//! Numeric gradients are computed from forward evaluations only, so they
//! stay independent of the backward rules they are compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Gradients, Graph, ParamId, ParamStore, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`: relative for ordinary magnitudes,
/// absolute for gradients that are essentially zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (what, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl Report {
    fn record(&mut self, what: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((what.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: Report) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err && other.worst.is_some() {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tolerance
    }
}

/// Checks d f / d inputs for a scalar-valued graph function at every input
/// entry.
pub fn check_function<F>(inputs: &[Tensor], f: F) -> Report
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out).expect("scalar output");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).map_or(vec![0.0; t.len()], |s| s.to_vec()))
        .collect();

    let eval = |inputs: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.scalar(out)
    };
    let mut report = Report::default();
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work[k].data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            report.record(&format!("input {k}"), i, analytic[k][i], numeric);
        }
    }
    report
}

/// Compares `analytic` parameter gradients against finite differences of
/// `loss`. At most `per_param` randomly chosen entries of each trainable
/// parameter are checked (all entries when `None`).
pub fn check_params<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    loss: F,
    per_param: Option<usize>,
    seed: u64,
) -> Report
where
    F: Fn(&ParamStore) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| !store.is_frozen(id)).collect();
    for id in ids {
        let len = store.get(id).len();
        let entries: Vec<usize> = match per_param {
            Some(k) if k < len => (0..k).map(|_| rng.gen_range(0..len)).collect(),
            _ => (0..len).collect(),
        };
        let name = store.name(id).to_string();
        for i in entries {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = loss(store);
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            report.record(&name, i, a, numeric);
        }
    }
    report
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::uniform(vec![rows, cols], 1.0, rng)
}

/// Weighted sum `sum(y * w)` for a fixed random `w`, turning any output into
/// a scalar with a non-trivial gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = g.constant(random(&mut rng, r, c));
    let p = g.mul(y, w);
    g.sum(p)
}

/// Gradient checks for every graph primitive on inputs drawn from `seed`.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, Report)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a34 = random(&mut rng, 3, 4);
    let b34 = random(&mut rng, 3, 4);
    let a45 = random(&mut rng, 4, 5);
    let b53 = random(&mut rng, 5, 3);
    let row4 = random(&mut rng, 1, 4);
    let col3 = random(&mut rng, 3, 1);
    let one = random(&mut rng, 1, 1);
    let v7 = random(&mut rng, 1, 7);
    let pos34 = Tensor::new(vec![3, 4], a34.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    let gain = random(&mut rng, 1, 4);
    let bias = random(&mut rng, 1, 4);
    let t26 = random(&mut rng, 2, 6);
    let g23 = random(&mut rng, 2, 3);
    let dropout_seed = rng.gen::<u64>();

    let mut out = Vec::new();
    let s = seed;
    out.push(("add", check_function(&[a34.clone(), b34.clone()], |g, v| {
        let y = g.add(v[0], v[1]);
        project(g, y, s)
    })));
    out.push(("sub", check_function(&[a34.clone(), b34.clone()], |g, v| {
        let y = g.sub(v[0], v[1]);
        project(g, y, s)
    })));
    out.push(("mul", check_function(&[a34.clone(), b34.clone()], |g, v| {
        let y = g.mul(v[0], v[1]);
        project(g, y, s)
    })));
    for (name, b) in [("add_broadcast_row", &row4), ("add_broadcast_col", &col3), ("add_broadcast_scalar", &one)] {
        out.push((name, check_function(&[a34.clone(), b.clone()], |g, v| {
            let y = g.add_broadcast(v[0], v[1]);
            project(g, y, s)
        })));
    }
    out.push(("scale", check_function(&[a34.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        project(g, y, s)
    })));
    out.push(("matmul", check_function(&[a45.clone(), b53.clone()], |g, v| {
        let y = g.matmul(v[0], v[1]);
        project(g, y, s)
    })));
    out.push(("transpose", check_function(&[a34.clone()], |g, v| {
        let y = g.transpose(v[0]);
        project(g, y, s)
    })));
    out.push(("relu", check_function(&[a34.clone()], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, s)
    })));
    out.push(("tanh", check_function(&[a34.clone()], |g, v| {
        let y = g.tanh(v[0]);
        project(g, y, s)
    })));
    out.push(("sigmoid", check_function(&[a34.clone()], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, s)
    })));
    out.push(("log", check_function(&[pos34.clone()], |g, v| {
        let y = g.log(v[0]);
        project(g, y, s)
    })));
    out.push(("exp", check_function(&[a34.clone()], |g, v| {
        let y = g.exp(v[0]);
        project(g, y, s)
    })));
    out.push(("softmax", check_function(&[v7.clone()], |g, v| {
        let y = g.softmax_rows(v[0]);
        project(g, y, s)
    })));
    out.push(("log_softmax", check_function(&[a34.clone()], |g, v| {
        let y = g.log_softmax_rows(v[0]);
        project(g, y, s)
    })));
    out.push(("layer_norm", check_function(&[a34.clone(), gain, bias], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        project(g, y, s)
    })));
    out.push(("concat_cols", check_function(&[a34.clone(), col3.clone()], |g, v| {
        let y = g.concat_cols(&[v[0], v[1]]);
        project(g, y, s)
    })));
    out.push(("concat_rows", check_function(&[a34.clone(), row4.clone()], |g, v| {
        let y = g.concat_rows(&[v[0], v[1]]);
        project(g, y, s)
    })));
    out.push(("slice_cols", check_function(&[a34.clone()], |g, v| {
        let y = g.slice_cols(v[0], 1, 2);
        project(g, y, s)
    })));
    out.push(("slice_rows", check_function(&[a34.clone()], |g, v| {
        let y = g.slice_rows(v[0], 1, 2);
        project(g, y, s)
    })));
    out.push(("gather_rows", check_function(&[a34.clone()], |g, v| {
        let y = g.gather_rows(v[0], &[Some(2), None, Some(0), Some(2)]);
        project(g, y, s)
    })));
    out.push(("dropout", check_function(&[a34.clone()], |g, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        g.set_train(true);
        let y = g.dropout(v[0], 0.3, &mut rng);
        project(g, y, s)
    })));
    out.push(("sum", check_function(&[a34.clone()], |g, v| {
        let y = g.sum(v[0]);
        let y2 = g.mul(y, y);
        g.sum(y2)
    })));
    out.push(("mean", check_function(&[a34.clone()], |g, v| {
        let y = g.mean(v[0]);
        let y2 = g.mul(y, y);
        g.sum(y2)
    })));
    out.push(("pick", check_function(&[a34.clone()], |g, v| {
        let y = g.pick(v[0], &[0, 5, 11, 5]);
        project(g, y, s)
    })));
    out.push(("segment_max", check_function(&[a34.clone()], |g, v| {
        let y = g.segment_max(v[0], &[(0, 2), (2, 1)]);
        project(g, y, s)
    })));
    out.push(("reshape", check_function(&[a34.clone()], |g, v| {
        let y = g.reshape(v[0], 2, 6);
        project(g, y, s)
    })));
    out.push(("bilinear_rows", check_function(&[t26, g23], |g, v| {
        let y = g.bilinear_rows(v[0], v[1]);
        project(g, y, s)
    })));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..20 {
            for (name, report) in primitive_suite(seed) {
                assert!(
                    report.passes(1e-6),
                    "{name} seed {seed}: {:?} max {}",
                    report.worst,
                    report.max_rel_err
                );
            }
        }
    }

    #[test]
    fn matmul_gradient_on_random_4x5_5x3() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let report = check_function(&[a, b], |g, v| {
            let y = g.matmul(v[0], v[1]);
            g.sum(y)
        });
        assert_eq!(report.checked, 35);
        assert!(report.passes(1e-6), "{report:?}");
    }
}
